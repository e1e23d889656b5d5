//! Paired evaluation of several configs over identical episodes.

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;

use super::config::RunConfig;
use super::train::{adapt_episode, initial_weights, EncodedPool};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::sim::dataset::{sample_episode, Episode};
use crate::sim::FloorStyle;

/// The support, query and (for episodic initialization) train pools.
pub struct Pools {
    pub train: Option<EncodedPool>,
    pub support: EncodedPool,
    pub query: EncodedPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub config: String,
    pub fingerprint: String,
    pub seed: u64,
    pub episode: usize,
    pub episode_seed: u64,
    pub k: usize,
    pub support_domain: FloorStyle,
    pub query_domain: FloorStyle,
    pub iou_free: f64,
    pub iou_obstacle: f64,
    pub miou: f64,
    pub leg_hits: usize,
    pub leg_pixels: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub wall_secs: f64,
}

impl EpisodeResult {
    pub fn leg_recall(&self) -> Option<f64> {
        (self.leg_pixels > 0).then(|| self.leg_hits as f64 / self.leg_pixels as f64)
    }
}

/// An episode that produced no metrics, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skip {
    pub config: String,
    pub fingerprint: String,
    pub seed: u64,
    pub episode: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub results: Vec<EpisodeResult>,
    pub skips: Vec<Skip>,
}

/// Report name of a config: its ablation label and shot count.
pub fn config_name(cfg: &RunConfig) -> String {
    format!("{}/k{}", cfg.label(), cfg.k)
}

/// Seed of episode `index` under run seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything that influences the episodic initialization of a config.
fn init_key(cfg: &RunConfig, seed: u64) -> String {
    let keep = [
        "use_h",
        "use_w",
        "use_n2p",
        "pooling",
        "aggregation",
        "decoder_input",
        "weight_decay",
        "init",
        "meta_steps",
        "meta_lr",
        "height",
        "width",
        "channels",
        "d_model",
        "angle_pairs",
        "scale_dim",
    ];
    let full = cfg.to_text();
    let text: Vec<&str> = full
        .lines()
        .filter(|l| keep.iter().any(|k| l.split('=').next() == Some(k)))
        .collect::<Vec<_>>();
    format!("{}|seed={seed}", text.join("|"))
}

/// Runs every config over the same episodes. Episodes are drawn once per run
/// seed with the largest shot count; a config with fewer shots uses the
/// leading supports, so shot-count comparisons stay paired.
pub fn run_configs(
    frozen: &ParamStore<f32>,
    pools: &Pools,
    configs: &[RunConfig],
) -> Result<RunOutput> {
    let Some(first) = configs.first() else {
        return Err(Error::Validation("no configs to run".into()));
    };
    for c in configs {
        c.validate()?;
        if c.seeds != first.seeds || c.episodes != first.episodes || c.queries != first.queries {
            return Err(Error::Config(
                "configs in one run must share seeds, episode count and query count".into(),
            ));
        }
    }
    let k_max = configs.iter().map(|c| c.k).max().unwrap_or(1);
    let grid = first.model_config().grid();
    let mut episodes: Vec<(u64, usize, Result<Episode>)> = Vec::new();
    for &seed in &first.seeds {
        for i in 0..first.episodes {
            let es = episode_seed(seed, i);
            let ep = sample_episode(
                &pools.support.samples,
                &pools.query.samples,
                k_max,
                first.queries,
                es,
                grid,
            );
            episodes.push((seed, i, ep));
        }
    }
    let models = configs
        .iter()
        .map(|c| Model::new(c.model_config()))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    for (ci, c) in configs.iter().enumerate() {
        for &seed in &c.seeds {
            jobs.entry(init_key(c, seed)).or_insert((ci, seed));
        }
    }
    let jobs: Vec<(String, (usize, u64))> = jobs.into_iter().collect();
    info!("preparing {} initializations", jobs.len());
    let inits: BTreeMap<String, ParamStore<f32>> = jobs
        .par_iter()
        .map(|(key, (ci, seed))| {
            let w = initial_weights(
                &models[*ci],
                frozen,
                pools.train.as_ref(),
                &configs[*ci],
                *seed,
            )?;
            Ok((key.clone(), w))
        })
        .collect::<Result<_>>()?;

    let mut out = RunOutput::default();
    for (ci, cfg) in configs.iter().enumerate() {
        let name = config_name(cfg);
        let fingerprint = cfg.fingerprint();
        info!(
            "running {name} ({fingerprint}) on {} episodes",
            episodes.len()
        );
        let rows: Vec<std::result::Result<EpisodeResult, Skip>> = episodes
            .par_iter()
            .map(|(seed, i, ep)| {
                let skip = |reason: String| Skip {
                    config: name.clone(),
                    fingerprint: fingerprint.clone(),
                    seed: *seed,
                    episode: *i,
                    reason,
                };
                let ep = match ep {
                    Ok(ep) => ep,
                    Err(e) => return Ok(Err(skip(e.to_string()))),
                };
                let init = &inits[&init_key(cfg, *seed)];
                let adapted = adapt_episode(
                    &models[ci],
                    frozen,
                    init,
                    (&pools.support, &ep.support[..cfg.k]),
                    (&pools.query, &ep.query),
                    cfg,
                );
                match adapted {
                    Ok(a) => Ok(Ok(EpisodeResult {
                        config: name.clone(),
                        fingerprint: fingerprint.clone(),
                        seed: *seed,
                        episode: *i,
                        episode_seed: ep.seed,
                        k: cfg.k,
                        support_domain: ep.support_domain,
                        query_domain: ep.query_domain,
                        iou_free: a.iou_free,
                        iou_obstacle: a.iou_obstacle,
                        miou: a.miou,
                        leg_hits: a.leg_hits,
                        leg_pixels: a.leg_pixels,
                        loss_first: a.loss_first,
                        loss_last: a.loss_last,
                        wall_secs: a.wall_secs,
                    })),
                    Err(e @ Error::EmptyRegion { .. }) => Ok(Err(skip(e.to_string()))),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        for row in rows {
            match row {
                Ok(r) => out.results.push(r),
                Err(s) => {
                    warn!(
                        "skipped {} seed {} episode {}: {}",
                        s.config, s.seed, s.episode, s.reason
                    );
                    out.skips.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// The named ablation matrices over a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matrix {
    /// `{±H} × {±W}`, full model first.
    Depth,
    /// `{±n2p}`, full model first.
    Ncl,
}

impl Matrix {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Matrix::Depth),
            "ncl" => Ok(Matrix::Ncl),
            _ => Err(Error::Validation(format!(
                "unknown matrix `{s}` (depth|ncl)"
            ))),
        }
    }

    pub fn configs(self, base: &RunConfig) -> Vec<RunConfig> {
        let with = |h: bool, w: bool, n: bool| RunConfig {
            use_h: h,
            use_w: w,
            use_n2p: n,
            ..base.clone()
        };
        match self {
            Matrix::Depth => vec![
                with(true, true, base.use_n2p),
                with(true, false, base.use_n2p),
                with(false, true, base.use_n2p),
                with(false, false, base.use_n2p),
            ],
            Matrix::Ncl => vec![
                with(base.use_h, base.use_w, true),
                with(base.use_h, base.use_w, false),
            ],
        }
    }
}

/// Runs one ablation matrix; the last cell is the paired baseline.
pub fn run_ablation(
    frozen: &ParamStore<f32>,
    pools: &Pools,
    matrix: Matrix,
    base: &RunConfig,
) -> Result<RunOutput> {
    run_configs(frozen, pools, &matrix.configs(base))
}
