//! Backbone pretraining, episodic initialization of the adaptable weights,
//! and per-episode adaptation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{InitMode, RunConfig};
use super::metrics::{compute_iou, marked_recall};
use crate::depth::DepthBackbone;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SupportView, FROZEN_PREFIXES, TRAINABLE_PREFIXES};
use crate::nn::{AdamW, Conv2d, WarmUpPolyLR};
use crate::params::{Bound, ParamStore};
use crate::proto::{QueryMask, SupportMask};
use crate::sim::dataset::sample_episode;
use crate::sim::Sample;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Prefixes of the pretraining-only head and depth path.
const PRETRAIN_HEAD: &str = "head";
const PRETRAIN_DEPTH: &str = "pre_depth";

/// Samples paired with their frozen RGB features.
pub struct EncodedPool {
    pub samples: Vec<Sample>,
    pub feats: Vec<Tensor<f32>>,
}

impl EncodedPool {
    pub fn new(model: &Model, frozen: &ParamStore<f32>, samples: Vec<Sample>) -> Result<Self> {
        let feats = samples
            .par_iter()
            .map(|s| model.encode_rgb(frozen, &s.rgb))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedPool { samples, feats })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn view(&self, i: usize) -> SupportView<'_, f32> {
        let s = &self.samples[i];
        SupportView {
            rgb_feat: &self.feats[i],
            scan: &s.scan,
            mask: &s.truth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 20,
            seed: 0,
            lr: 1e-3,
            batch: 4,
        }
    }
}

/// Pretrained frozen weights, the discarded head weights and the per-epoch
/// mean training loss.
pub struct Pretrained {
    pub checkpoint: ParamStore<f32>,
    pub head: ParamStore<f32>,
    pub losses: Vec<f64>,
}

struct PretrainNet {
    model: Model,
    depth: DepthBackbone,
    head: Conv2d,
}

impl PretrainNet {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg.clone())?;
        let mut dc = cfg.depth_config();
        dc.use_h = false;
        dc.use_w = false;
        Ok(PretrainNet {
            depth: DepthBackbone::new(PRETRAIN_DEPTH, dc),
            head: Conv2d::new(PRETRAIN_HEAD, cfg.channels, 2, 1, 1),
            model,
        })
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &Bound, s: &Sample) -> Result<Var> {
        let img = tape.constant(s.rgb.pixels().clone());
        let r = self.model.rgb.forward(tape, p, img)?;
        let d = self.depth.forward(tape, p, &s.scan)?.map;
        let f = self.model.fusion.forward(tape, p, r, d)?;
        let x = self.head.forward(tape, p, f)?;
        tape.bilinear_resize(x, s.truth.height, s.truth.width)
    }
}

fn argmax_mask(tape: &Tape<f32>, logits: Var) -> Result<SupportMask> {
    Ok(QueryMask::from_logits(tape.value(logits))?.mask)
}

/// Fully supervised training of the RGB encoder and fusion through a
/// throwaway head and scan path; only `rgb.*` and `fuse.*` are returned.
pub fn pretrain_backbone(
    cfg: &ModelConfig,
    samples: &[Sample],
    opts: PretrainOptions,
) -> Result<Pretrained> {
    if samples.is_empty() {
        return Err(Error::Validation("pretraining split is empty".into()));
    }
    let net = PretrainNet::new(cfg)?;
    let mut store = ParamStore::new();
    net.model.init_backbone(&mut store, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);
    net.depth.init(&mut store, &mut rng);
    net.head.init(&mut store, &mut rng);
    let trainable = ["rgb.", "fuse.", "head.", "pre_depth."];
    let batch = opts.batch.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let mut opt = AdamW::new(opts.lr, 0.01);
    let sched = WarmUpPolyLR {
        base_lr: opts.lr,
        power: 0.9,
        warmup_epochs: (steps_per_epoch * opts.epochs / 20).max(1),
        total_epochs: (steps_per_epoch * opts.epochs).max(2),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &store, &trainable);
            let mut acc = None;
            for &i in chunk {
                let logits = net.logits(&mut tape, &p, &samples[i])?;
                let ce = tape.cross_entropy_2class(logits, samples[i].truth.data())?;
                acc = Some(match acc {
                    None => ce,
                    Some(a) => tape.add(a, ce)?,
                });
            }
            let loss = tape.scale(acc.expect("nonempty chunk"), 1.0 / chunk.len() as f32)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining diverged at epoch {epoch} (seed {})",
                    opts.seed
                )));
            }
            total += value * chunk.len() as f64;
            let grads = p.grads(&tape.backward(loss)?);
            opt.step(&mut store, &grads, sched.lr_at(step)?)?;
            step += 1;
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(Pretrained {
        checkpoint: store.subset(&FROZEN_PREFIXES),
        head: store.subset(&[&format!("{PRETRAIN_HEAD}."), &format!("{PRETRAIN_DEPTH}.")]),
        losses,
    })
}

impl Pretrained {
    /// Mean mIoU of the pretraining network (backbone plus head) on `samples`.
    pub fn miou(&self, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64> {
        let net = PretrainNet::new(cfg)?;
        let mut store = self.checkpoint.clone();
        store.merge(&self.head);
        let scores = samples
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let p = Bound::new(&mut tape, &store, &[]);
                let logits = net.logits(&mut tape, &p, s)?;
                Ok(compute_iou(&argmax_mask(&tape, logits)?, &s.truth)?.miou)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
    }
}

fn add_all(tape: &mut Tape<f32>, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Contract("empty loss sum".into()))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / n as f32)
}

/// Adaptable weights for `cfg` trained episodically on the train pool: each
/// step predicts one query from one support of another floor style.
pub fn meta_train(
    model: &Model,
    frozen: &ParamStore<f32>,
    pool: &EncodedPool,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ParamStore<f32>> {
    let mut store = frozen.clone();
    model.init_adaptable(&mut store, seed);
    if cfg.meta_steps == 0 {
        return Ok(store.subset(&TRAINABLE_PREFIXES));
    }
    let grid = model.cfg.grid();
    let sched = WarmUpPolyLR {
        base_lr: cfg.meta_lr,
        power: 0.9,
        warmup_epochs: (cfg.meta_steps / 20).max(1),
        total_epochs: cfg.meta_steps.max(2),
    };
    let mut opt = AdamW::new(cfg.meta_lr, cfg.weight_decay);
    for step in 0..cfg.meta_steps {
        let ep_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(step as u64);
        let ep = sample_episode(&pool.samples, &pool.samples, 1, 1, ep_seed, grid)?;
        let supports: Vec<SupportView<f32>> = ep.support.iter().map(|&i| pool.view(i)).collect();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store, &TRAINABLE_PREFIXES);
        let mut terms = Vec::new();
        for &q in &ep.query {
            let trace = model.predict(
                &mut tape,
                &p,
                &supports,
                &pool.feats[q],
                &pool.samples[q].scan,
            )?;
            terms.push(tape.cross_entropy_2class(trace.logits, pool.samples[q].truth.data())?);
        }
        let loss = add_all(&mut tape, terms)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::Numeric(format!(
                "episodic initialization diverged at step {step} (seed {seed})"
            )));
        }
        let grads = p.grads(&tape.backward(loss)?);
        opt.step(&mut store, &grads, sched.lr_at(step)?)?;
    }
    Ok(store.subset(&TRAINABLE_PREFIXES))
}

/// Query metrics and optimization trace of one adapted episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    pub iou_free: f64,
    pub iou_obstacle: f64,
    pub miou: f64,
    /// Leg pixels predicted as obstacle, and leg pixels, over all queries.
    pub leg_hits: usize,
    pub leg_pixels: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub wall_secs: f64,
}

fn support_loss_value(
    model: &Model,
    store: &ParamStore<f32>,
    supports: &[SupportView<f32>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, store, &[]);
    let l = model.support_loss(&mut tape, &p, supports)?;
    Ok(tape.value(l).data()[0] as f64)
}

/// Adapts the depth backbone and decoder on the episode supports, starting
/// from `init`, then scores the queries. The frozen weights are verified
/// unchanged afterwards.
pub fn adapt_episode(
    model: &Model,
    frozen: &ParamStore<f32>,
    init: &ParamStore<f32>,
    support: (&EncodedPool, &[usize]),
    query: (&EncodedPool, &[usize]),
    cfg: &RunConfig,
) -> Result<Adaptation> {
    let started = Instant::now();
    let before = frozen.checksum(&FROZEN_PREFIXES);
    let mut store = frozen.clone();
    store.merge(init);
    let supports: Vec<SupportView<f32>> = support.1.iter().map(|&i| support.0.view(i)).collect();
    let sched = cfg.schedule();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut loss_first = None;
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store, &TRAINABLE_PREFIXES);
        let loss = model.support_loss(&mut tape, &p, &supports)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "support loss is {value} at epoch {epoch}"
            )));
        }
        loss_first.get_or_insert(value);
        let grads = p.grads(&tape.backward(loss)?);
        opt.step(&mut store, &grads, sched.lr_at(epoch)?)?;
    }
    let loss_last = support_loss_value(model, &store, &supports)?;
    let (pool, ids) = query;
    let (mut free, mut obst) = (0.0, 0.0);
    let (mut leg_hits, mut leg_pixels) = (0, 0);
    for &q in ids {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store, &[]);
        let trace = model.predict(
            &mut tape,
            &p,
            &supports,
            &pool.feats[q],
            &pool.samples[q].scan,
        )?;
        let pred = argmax_mask(&tape, trace.logits)?;
        let iou = compute_iou(&pred, &pool.samples[q].truth)?;
        free += iou.free;
        obst += iou.obstacle;
        let (h, n) = marked_recall(&pred, &pool.samples[q].legs)?;
        leg_hits += h;
        leg_pixels += n;
    }
    if store.checksum(&FROZEN_PREFIXES) != before {
        return Err(Error::Contract(
            "frozen parameters changed during adaptation".into(),
        ));
    }
    let m = ids.len().max(1) as f64;
    let (iou_free, iou_obstacle) = (free / m, obst / m);
    Ok(Adaptation {
        iou_free,
        iou_obstacle,
        miou: 0.5 * (iou_free + iou_obstacle),
        leg_hits,
        leg_pixels,
        loss_first: loss_first.unwrap_or(loss_last),
        loss_last,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Starting weights of one config for one run seed.
pub fn initial_weights(
    model: &Model,
    frozen: &ParamStore<f32>,
    train: Option<&EncodedPool>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ParamStore<f32>> {
    match (cfg.init, train) {
        (InitMode::Meta, Some(pool)) => meta_train(model, frozen, pool, cfg, seed),
        (InitMode::Meta, None) => Err(Error::Config(
            "init=meta needs the train split to be present".into(),
        )),
        (InitMode::Fresh, _) => {
            let mut store = ParamStore::new();
            model.init_adaptable(&mut store, seed);
            Ok(store)
        }
    }
}
