//! Metrics, pretraining, paired runs and report accounting at small sizes.

mod common;

use std::collections::BTreeMap;

use common::oracle_iou;

use ncl_core::harness::report::{parse_results_csv, results_csv, CSV_HEADER};
use ncl_core::harness::{
    build_report, compute_iou, pretrain_backbone, run_configs, EncodedPool, Matrix, Pools,
    PretrainOptions, RunConfig,
};
use ncl_core::model::{Model, FROZEN_PREFIXES};
use ncl_core::params::ParamStore;
use ncl_core::proto::SupportMask;
use ncl_core::sim::dataset::{generate_split, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 32;
const W: usize = 40;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "height=32\nwidth=40\nchannels=8\nd_model=8\nangle_pairs=2\n\
         epochs=20\nwarmup_epochs=2\nepisodes=4\nqueries=2\nseeds=1,2\n\
         init=fresh\nmeta_steps=4",
    )
    .unwrap();
    c.validate().unwrap();
    c
}

#[test]
fn compute_iou_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        // Every fourth pair is degenerate in at least one class.
        let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            match i % 4 {
                0 => vec![rng.gen_range(0..2); h * w],
                _ => (0..h * w).map(|_| rng.gen_range(0..2)).collect(),
            }
        };
        let (p, t) = (gen(&mut rng), gen(&mut rng));
        let got = compute_iou(
            &SupportMask::new(h, w, p.clone()).unwrap(),
            &SupportMask::new(h, w, t.clone()).unwrap(),
        )
        .unwrap();
        assert_eq!((got.free, got.obstacle, got.miou), oracle_iou(&p, &t));
    }
}

#[test]
fn pretraining_zero_epochs_is_the_init_and_is_deterministic() {
    let cfg = small_config().model_config();
    let samples = generate_split(12, 0, H, W).unwrap();
    let opts = PretrainOptions {
        epochs: 0,
        seed: 5,
        ..PretrainOptions::default()
    };
    let p = pretrain_backbone(&cfg, &samples, opts).unwrap();
    let mut init = ParamStore::<f32>::new();
    Model::new(cfg.clone()).unwrap().init_backbone(&mut init, 5);
    assert_eq!(
        p.checkpoint.to_bytes(),
        init.subset(&FROZEN_PREFIXES).to_bytes()
    );
    assert!(p.losses.is_empty());

    let opts = PretrainOptions { epochs: 2, ..opts };
    let a = pretrain_backbone(&cfg, &samples, opts).unwrap();
    let b = pretrain_backbone(&cfg, &samples, opts).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_ne!(a.checkpoint.to_bytes(), p.checkpoint.to_bytes());
    assert!(pretrain_backbone(&cfg, &[], opts).is_err());
}

#[test]
fn pretraining_improves_training_miou() {
    let cfg = small_config().model_config();
    let samples = generate_split(200, 0, H, W).unwrap();
    let opts = |epochs| PretrainOptions {
        epochs,
        seed: 1,
        ..PretrainOptions::default()
    };
    let before = pretrain_backbone(&cfg, &samples, opts(0))
        .unwrap()
        .miou(&cfg, &samples)
        .unwrap();
    let trained = pretrain_backbone(&cfg, &samples, opts(20)).unwrap();
    let after = trained.miou(&cfg, &samples).unwrap();
    assert!(after > before, "train mIoU {before:.4} -> {after:.4}");
    assert!(trained.losses.last() < trained.losses.first());
}

struct Fixture {
    frozen: ParamStore<f32>,
    pools: Pools,
}

fn fixture() -> Fixture {
    let cfg = small_config();
    let mc = cfg.model_config();
    let train = generate_split(24, Split::Train.base_seed(), H, W).unwrap();
    let frozen = pretrain_backbone(
        &mc,
        &train,
        PretrainOptions {
            epochs: 1,
            ..PretrainOptions::default()
        },
    )
    .unwrap()
    .checkpoint;
    let model = Model::new(mc).unwrap();
    let pool = |split: Split, n| {
        EncodedPool::new(
            &model,
            &frozen,
            generate_split(n, split.base_seed(), H, W).unwrap(),
        )
        .unwrap()
    };
    Fixture {
        pools: Pools {
            train: Some(EncodedPool::new(&model, &frozen, train).unwrap()),
            support: pool(Split::Support, 24),
            query: pool(Split::Query, 24),
        },
        frozen,
    }
}

#[test]
fn paired_runs_are_deterministic_and_accounted() {
    let fx = fixture();
    let base = small_config();
    let configs = Matrix::Ncl.configs(&base);
    let before = fx.frozen.checksum(&FROZEN_PREFIXES);
    let a = run_configs(&fx.frozen, &fx.pools, &configs).unwrap();
    let b = run_configs(&fx.frozen, &fx.pools, &configs).unwrap();
    assert_eq!(fx.frozen.checksum(&FROZEN_PREFIXES), before);

    let ra = build_report(&a.results, &a.skips, None).unwrap();
    let rb = build_report(&b.results, &b.skips, None).unwrap();
    assert_eq!(ra, rb);

    // Row accounting and pairing.
    let expected = base.episodes * base.seeds.len() * configs.len();
    assert_eq!(a.results.len() + a.skips.len(), expected);
    assert_eq!(ra.csv.lines().count(), 1 + expected - a.skips.len());
    assert_eq!(ra.csv.lines().next(), Some(CSV_HEADER));
    let keys = |name: &str| -> Vec<(u64, usize, u64)> {
        a.results
            .iter()
            .filter(|r| r.config == name)
            .map(|r| (r.seed, r.episode, r.episode_seed))
            .collect()
    };
    assert_eq!(keys("+H+W+n2p/k1"), keys("+H+W-n2p/k1"));

    // Metric ranges and the adaptation sanity rate.
    for r in &a.results {
        for v in [r.iou_free, r.iou_obstacle, r.miou] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((r.miou - (r.iou_free + r.iou_obstacle) / 2.0).abs() < 1e-12);
        assert!(r.leg_hits <= r.leg_pixels);
    }
    let decreased = a
        .results
        .iter()
        .filter(|r| r.loss_last < r.loss_first)
        .count();
    assert!(decreased as f64 >= 0.95 * a.results.len() as f64);

    // The delta column recomputes from the parsed rows.
    let rows = parse_results_csv(&ra.csv).unwrap();
    let base_rows: BTreeMap<(u64, usize), f64> = rows
        .iter()
        .filter(|r| r.config == "+H+W-n2p/k1")
        .map(|r| ((r.seed, r.episode), r.miou))
        .collect();
    let mut deltas = Vec::new();
    for (line, r) in ra.csv.lines().skip(1).zip(&rows) {
        let col: f64 = line.split(',').nth(15).unwrap().parse().unwrap();
        let want = r.miou - base_rows[&(r.seed, r.episode)];
        assert!((col - want).abs() <= 1e-12);
        if r.config == "+H+W+n2p/k1" {
            deltas.push(want);
        }
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let reported: f64 = ra
        .summary
        .lines()
        .find_map(|l| l.strip_prefix("delta_miou_mean="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - reported).abs() <= 1e-6, "{mean} vs {reported}");
    assert_eq!(results_csv(&rows, "+H+W-n2p/k1"), ra.csv);
}

#[test]
fn meta_initialization_runs_and_shot_counts_pair() {
    let fx = fixture();
    let k1 = RunConfig {
        init: ncl_core::harness::InitMode::Meta,
        episodes: 2,
        seeds: vec![3],
        ..small_config()
    };
    let k5 = RunConfig { k: 5, ..k1.clone() };
    let out = run_configs(&fx.frozen, &fx.pools, &[k5, k1]).unwrap();
    assert!(out.skips.is_empty());
    let by = |k| -> Vec<u64> {
        out.results
            .iter()
            .filter(|r| r.k == k)
            .map(|r| r.episode_seed)
            .collect()
    };
    assert_eq!(by(1), by(5));
    assert_eq!(out.results.len(), 4);
}

#[test]
fn mismatched_configs_are_rejected() {
    let fx = fixture();
    let a = small_config();
    let b = RunConfig {
        episodes: 1,
        ..a.clone()
    };
    assert!(run_configs(&fx.frozen, &fx.pools, &[a, b]).is_err());
    assert!(run_configs(&fx.frozen, &fx.pools, &[]).is_err());
    let bad = RunConfig {
        trainable: vec!["rgb".into()],
        ..small_config()
    };
    assert!(run_configs(&fx.frozen, &fx.pools, &[bad]).is_err());
}
