//! Scene splits on disk and cross-domain episode sampling.
//!
//! Layout: `<root>/scenes/<split>/<seed>/{rgb.ppm, scan.txt, mask.pgm,
//! legs.pgm, meta.txt}`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{scene_for_seed, FloorStyle, Sample, SceneMeta};
use crate::depth::{load_scan, save_scan};
use crate::error::{Error, Result};
use crate::proto::{soft_region, Polarity, SupportMask, MIN_CELL_WEIGHT};
use crate::rgb::RgbImage;

/// Sampling attempts before an episode is declared unattainable.
pub const MAX_SAMPLING_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Support,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Support, Split::Query];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Support => "support",
            Split::Query => "query",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split `{s}` (train|support|query)")))
    }

    /// Default first seed; the ranges keep splits disjoint for counts below
    /// one million.
    pub fn base_seed(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Support => 1_000_000,
            Split::Query => 2_000_000,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scenes `base_seed .. base_seed + count`, rendered in parallel.
pub fn generate_split(count: usize, base_seed: u64, h: usize, w: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| scene_for_seed(base_seed + i, h, w))
        .collect()
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join("scenes").join(split.name())
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    s.rgb.save(&dir.join("rgb.ppm"))?;
    save_scan(&dir.join("scan.txt"), &s.scan)?;
    s.truth.save(&dir.join("mask.pgm"))?;
    s.legs.save(&dir.join("legs.pgm"))?;
    std::fs::write(dir.join("meta.txt"), s.meta.to_text())?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let rgb = RgbImage::load(&dir.join("rgb.ppm"))?;
    let truth = SupportMask::load(&dir.join("mask.pgm"))?;
    let legs = SupportMask::load(&dir.join("legs.pgm"))?;
    if (truth.height, truth.width) != (rgb.height(), rgb.width())
        || (legs.height, legs.width) != (truth.height, truth.width)
    {
        return Err(Error::Validation(format!(
            "{}: raster sizes disagree",
            dir.display()
        )));
    }
    Ok(Sample {
        rgb,
        scan: load_scan(&dir.join("scan.txt"))?,
        truth,
        legs,
        meta: SceneMeta::parse(&std::fs::read_to_string(dir.join("meta.txt"))?)?,
    })
}

pub fn write_split(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let base = split_dir(root, split);
    samples
        .par_iter()
        .try_for_each(|s| write_sample(&base.join(s.meta.seed.to_string()), s))
}

/// All samples of a split, ordered by seed.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let base = split_dir(root, split);
    let mut dirs: Vec<(u64, PathBuf)> = std::fs::read_dir(&base)
        .map_err(|e| Error::Validation(format!("{}: {e}", base.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.parse().ok().map(|s| (s, e.path())))
        .collect();
    dirs.sort();
    dirs.par_iter().map(|(_, d)| read_sample(d)).collect()
}

/// Errors when any scene seed appears in more than one pool.
pub fn check_disjoint(pools: &[(&str, &[Sample])]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, pool) in pools {
        for s in pool.iter() {
            if !seen.insert(s.meta.seed) {
                return Err(Error::Validation(format!(
                    "scene seed {} reused (in {name})",
                    s.meta.seed
                )));
            }
        }
    }
    Ok(())
}

/// Whether both mask polarities survive downsampling to the `grid`.
pub fn eligible(s: &Sample, grid: (usize, usize)) -> bool {
    [Polarity::Positive, Polarity::Negative]
        .iter()
        .all(|&p| soft_region(&s.truth, p, grid.0, grid.1).iter().sum::<f64>() >= MIN_CELL_WEIGHT)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub seed: u64,
    pub k: usize,
    /// Indices into the support pool.
    pub support: Vec<usize>,
    /// Indices into the query pool.
    pub query: Vec<usize>,
    pub support_domain: FloorStyle,
    pub query_domain: FloorStyle,
}

fn by_domain(pool: &[Sample]) -> Vec<(FloorStyle, Vec<usize>)> {
    FloorStyle::ALL
        .iter()
        .map(|&d| {
            (
                d,
                (0..pool.len())
                    .filter(|&i| pool[i].domain() == d)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

/// Draws `k` same-domain supports and `m` queries from a different domain.
/// Supports lacking either polarity at the feature grid are redrawn.
pub fn sample_episode(
    support_pool: &[Sample],
    query_pool: &[Sample],
    k: usize,
    m: usize,
    seed: u64,
    grid: (usize, usize),
) -> Result<Episode> {
    if k == 0 || m == 0 {
        return Err(Error::Validation("episodes need k ≥ 1 and m ≥ 1".into()));
    }
    let sd = by_domain(support_pool);
    let qd = by_domain(query_pool);
    let domains: BTreeSet<FloorStyle> = sd.iter().chain(&qd).map(|(d, _)| *d).collect();
    if domains.len() < 2 {
        return Err(Error::Sampling(format!(
            "pools span {} domain(s); need 2",
            domains.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let candidates: Vec<&(FloorStyle, Vec<usize>)> =
            sd.iter().filter(|(_, v)| v.len() >= k).collect();
        let Some(&&(ds, ref pool)) = candidates.choose(&mut rng) else {
            break;
        };
        let queries: Vec<&(FloorStyle, Vec<usize>)> = qd
            .iter()
            .filter(|(d, v)| *d != ds && v.len() >= m)
            .collect();
        let Some(&&(dq, ref qpool)) = queries.choose(&mut rng) else {
            rejected += 1;
            continue;
        };
        let support: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
        let query: Vec<usize> = qpool.choose_multiple(&mut rng, m).copied().collect();
        if support.iter().all(|&i| eligible(&support_pool[i], grid)) {
            return Ok(Episode {
                seed,
                k,
                support,
                query,
                support_domain: ds,
                query_domain: dq,
            });
        }
        rejected += 1;
    }
    Err(Error::Sampling(format!(
        "no valid episode for seed {seed} (k={k}, m={m}) after {rejected} rejected draws; \
         support pool {} scenes over {} domains, query pool {} scenes",
        support_pool.len(),
        sd.len(),
        query_pool.len()
    )))
}
