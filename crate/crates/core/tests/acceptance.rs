//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the desk-scale benchmark end to end. Criteria listed in
//! `KNOWN_FAILURES` print FAIL without failing the target; any other failure
//! exits non-zero. Results are written under the cargo target tmpdir.

mod common;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use common::{cell_aligned, laser_oracle, masked_mean, oracle_iou};
use ncl_core::harness::gradsuite::{check_episode, check_ops, CheckOutcome};
use ncl_core::harness::report::{config_order, mean, median, paired, paired_leg_recall};
use ncl_core::harness::{
    build_report, compute_iou, pretrain_backbone, run_configs, EncodedPool, Matrix, Pools,
    PretrainOptions, RunConfig, RunOutput,
};
use ncl_core::model::{Model, ModelConfig, FROZEN_PREFIXES};
use ncl_core::nn::WarmUpPolyLR;
use ncl_core::params::{Bound, ParamStore};
use ncl_core::proto::{
    cosine_branch, mask_pool, Aggregation, DecoderInput, NclFlags, Polarity, SupportMask,
};
use ncl_core::sim::dataset::{generate_split, Split};
use ncl_core::sim::raycast::{FloorPlan, Point, Rect};
use ncl_core::tape::Tape;
use ncl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail on this benchmark; see the README.
const KNOWN_FAILURES: &[u32] = &[6, 8];

const H: usize = 60;
const W: usize = 80;
const TRAIN_SCENES: usize = 400;
const POOL_SCENES: usize = 200;
const PRETRAIN_EPOCHS: usize = 5;
const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

const POOL_TOLERANCE: f64 = 1e-6;
const RAYCAST_TOLERANCE: f64 = 1e-9;
const STOCHASTIC_TOLERANCE: f64 = 1e-12;
const LR_TOLERANCE: f64 = 1e-12;
const DEPTH_MIN_MEDIAN_DELTA: f64 = 0.03;
const NCL_MIN_MEDIAN_DELTA: f64 = 0.02;
const NCL_MIN_OBSTACLE_WIN_RATE: f64 = 0.60;
const SHOT_SLACK: f64 = 0.005;
const SHOT_EPISODES_PER_SEED: usize = 10;

/// Wall-clock budgets as stated for a 4-core desktop.
const BUDGET_GRADIENTS: Duration = Duration::from_secs(120);
const BUDGET_ORACLES: Duration = Duration::from_secs(60);
const BUDGET_INVARIANTS: Duration = Duration::from_secs(120);
const BUDGET_ABLATION: Duration = Duration::from_secs(600);
const BUDGET_CORES: usize = 4;

/// Budget scaled to the cores available here; the runs parallelize over
/// episodes and configs.
fn scaled(budget: Duration) -> Duration {
    let cores = rayon::current_num_threads().max(1);
    budget.mul_f64((BUDGET_CORES as f64 / cores as f64).max(1.0))
}

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, checks: &[(bool, String)]) -> Verdict {
    Verdict {
        id,
        name,
        passed: checks.iter().all(|c| c.0),
        detail: checks
            .iter()
            .map(|(ok, s)| format!("{s}{}", if *ok { "" } else { " [x]" }))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    let limit = scaled(budget);
    (
        elapsed <= limit,
        format!(
            "runtime {:.1}s <= {:.0}s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn gradient_fidelity() -> Verdict {
    let t = Instant::now();
    let worst = |v: &[CheckOutcome]| {
        v.iter()
            .map(|o| o.max_rel_error / o.tolerance)
            .fold(0.0, f64::max)
    };
    let (ops, episode) = match (check_ops(&GRAD_SEEDS), check_episode(&GRAD_SEEDS)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            return verdict(
                1,
                "gradient fidelity",
                &[(false, format!("check errored: {:?} {:?}", a.err(), b.err()))],
            )
        }
    };
    let err = |v: &[CheckOutcome]| v.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    verdict(
        1,
        "gradient fidelity",
        &[
            (
                ops.iter().all(CheckOutcome::passed),
                format!(
                    "{} op checks, max rel err {:.2e} (tol {:.0e}, worst/tol {:.2e})",
                    ops.len(),
                    err(&ops),
                    ops[0].tolerance,
                    worst(&ops)
                ),
            ),
            (
                episode.iter().all(CheckOutcome::passed),
                format!(
                    "{} episode checks, max rel err {:.2e} (tol {:.0e})",
                    episode.len(),
                    err(&episode),
                    episode[0].tolerance
                ),
            ),
            (
                ops.len() > GRAD_SEEDS.len() && episode.len() == GRAD_SEEDS.len(),
                format!("{} seeds", GRAD_SEEDS.len()),
            ),
            within(t.elapsed(), BUDGET_GRADIENTS),
        ],
    )
}

fn oracle_equivalences() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // Single-cell pooling on cell-aligned masks.
    let mut pool_err: f64 = 0.0;
    let mut pools = 0;
    while pools < 200 {
        let (c, h, w) = (
            rng.gen_range(1..9),
            rng.gen_range(1..8),
            rng.gen_range(1..8),
        );
        let pattern: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..2)).collect();
        let scale = rng.gen_range(1..5);
        let mask = cell_aligned(&pattern, h, w, scale);
        let feat = Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-3.0..3.0));
        for pol in [Polarity::Positive, Polarity::Negative] {
            let cells: Vec<(usize, usize)> = (0..h * w)
                .filter(|&i| pattern[i] == pol.label())
                .map(|i| (i / w, i % w))
                .collect();
            if cells.is_empty() {
                continue;
            }
            let mut tape = Tape::<f64>::new();
            let f = tape.constant(feat.clone());
            let set = mask_pool(&mut tape, f, &mask, pol, 1).unwrap();
            let want = masked_mean(&feat, &cells);
            for (g, w) in tape.value(set.vectors).data().iter().zip(&want) {
                pool_err = pool_err.max((g - w).abs());
            }
            pools += 1;
        }
    }

    // IoU against the confusion-matrix oracle.
    let mut iou_mismatch = 0;
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            match i % 5 {
                0 => vec![rng.gen_range(0..2); h * w],
                _ => (0..h * w).map(|_| rng.gen_range(0..2)).collect(),
            }
        };
        let (p, tr) = (gen(&mut rng), gen(&mut rng));
        let got = compute_iou(
            &SupportMask::new(h, w, p.clone()).unwrap(),
            &SupportMask::new(h, w, tr.clone()).unwrap(),
        )
        .unwrap();
        if (got.free, got.obstacle, got.miou) != oracle_iou(&p, &tr) {
            iou_mismatch += 1;
        }
    }

    // Raycast against slab geometry.
    let mut ray_err: f64 = 0.0;
    for _ in 0..200 {
        let room = Rect {
            min: Point::new(rng.gen_range(-6.0..-1.0), rng.gen_range(-6.0..-1.0)),
            max: Point::new(rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0)),
        };
        let boxes: Vec<Rect> = (0..rng.gen_range(0..6))
            .map(|_| {
                let (cx, cy) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
                Rect::centered(cx, cy, rng.gen_range(0.01..0.6), rng.gen_range(0.01..0.6))
            })
            .filter(|r| !r.contains(Point::new(0.0, 0.0)))
            .collect();
        let plan = FloorPlan {
            walls: room.edges().to_vec(),
            obstacles: boxes.clone(),
        };
        for _ in 0..50 {
            let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let got = plan.raycast(Point::new(0.0, 0.0), a, 5.0).unwrap();
            ray_err = ray_err.max((got - laser_oracle(&room, &boxes, a)).abs());
        }
    }

    verdict(
        2,
        "oracle equivalences",
        &[
            (
                pool_err <= POOL_TOLERANCE,
                format!("mask_pool vs masked mean: {pools} pools, max err {pool_err:.2e}"),
            ),
            (
                iou_mismatch == 0,
                format!("compute_iou vs oracle: {iou_mismatch}/1000 mismatches"),
            ),
            (
                ray_err <= RAYCAST_TOLERANCE,
                format!("raycast vs slabs: 10000 rays, max err {ray_err:.2e}"),
            ),
            within(t.elapsed(), BUDGET_ORACLES),
        ],
    )
}

/// Row-stochastic attention on real scans with the default model size.
fn attention_rows(samples: &[ncl_core::sim::Sample]) -> (bool, String) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut store = ParamStore::<f64>::new();
    model.init_adaptable(&mut store, 3);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    let mut mats = 0;
    for s in samples.iter().take(20) {
        let mut tape = Tape::<f64>::new();
        let p = Bound::new(&mut tape, &store, &[]);
        let tr = model.depth.forward(&mut tape, &p, &s.scan).unwrap();
        let v = tr.vertical.unwrap();
        for m in [
            tr.horizontal.unwrap().weights,
            v.resample,
            v.attention.weights,
        ] {
            let val = tape.value(m);
            let c = val.shape()[1];
            negative |= val.data().iter().any(|&x| x < 0.0);
            for row in val.data().chunks(c) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            mats += 1;
        }
    }
    (
        !negative && worst <= STOCHASTIC_TOLERANCE,
        format!("{mats} attention matrices, max |row sum - 1| {worst:.1e}"),
    )
}

fn cosine_bounds() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mask =
            SupportMask::new(20, 24, (0..480).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        let q = Tensor::from_fn(vec![8, 5, 6], |_| rng.gen_range(-5.0..5.0));
        let s = Tensor::from_fn(vec![8, 5, 6], |_| rng.gen_range(-5.0..5.0));
        for agg in [Aggregation::Max, Aggregation::Mean] {
            for grid in [1, 2] {
                let mut tape = Tape::<f64>::new();
                let (qv, sv) = (tape.constant(q.clone()), tape.constant(s.clone()));
                let set = mask_pool(&mut tape, sv, &mask, Polarity::Negative, grid).unwrap();
                let out = cosine_branch(&mut tape, qv, &set, agg).unwrap();
                for v in tape.value(out).data() {
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    (
        worst <= 1.0 + STOCHASTIC_TOLERANCE,
        format!("max |cosine| {worst:.12}"),
    )
}

fn n2p_census() -> (bool, String) {
    let mut parts = Vec::new();
    let mut ok = true;
    for input in [DecoderInput::Gated, DecoderInput::Similarity] {
        let count = |use_n2p| {
            let model = Model::new(ModelConfig {
                ncl: NclFlags {
                    use_n2p,
                    ..NclFlags::default()
                },
                decoder_input: input,
                ..ModelConfig::default()
            })
            .unwrap();
            let mut store = ParamStore::<f32>::new();
            model.init_backbone(&mut store, 0);
            model.init_adaptable(&mut store, 0);
            store.count_with_prefix(&[""])
        };
        let (with, without) = (count(true), count(false));
        ok &= with == without;
        parts.push(format!("{input:?} {with} vs {without}"));
    }
    (ok, format!("params with/without n2p: {}", parts.join(", ")))
}

fn csv_determinism(frozen: &ParamStore<f32>, pools: &Pools) -> (bool, String) {
    let mut cfg = RunConfig::default();
    cfg.apply_text("episodes=2\nseeds=7\nepochs=12\nwarmup_epochs=2\nmeta_steps=40")
        .unwrap();
    let configs = Matrix::Ncl.configs(&cfg);
    let csv = || {
        let out = run_configs(frozen, pools, &configs).unwrap();
        build_report(&out.results, &out.skips, None).unwrap().csv
    };
    let (a, b) = (csv(), csv());
    (
        a == b && a.lines().count() > 1,
        format!(
            "rerun CSV byte-identical: {} ({} rows)",
            a == b,
            a.lines().count() - 1
        ),
    )
}

fn schedule_exactness() -> Verdict {
    let s = WarmUpPolyLR::default();
    let mut checks = Vec::new();
    for (epoch, want) in [
        (0, 6e-5 / 5.0),
        (4, 6e-5),
        (119, 6e-5 * (1.0f64 / 115.0).powf(0.9)),
    ] {
        let got = s.lr_at(epoch).unwrap();
        checks.push((
            (got - want).abs() <= LR_TOLERANCE,
            format!("lr_at({epoch}) = {got:.6e} (want {want:.6e})"),
        ));
    }
    checks.push((
        RunConfig::default().schedule() == s,
        "run config uses this schedule".into(),
    ));
    verdict(4, "schedule exactness", &checks)
}

fn mean_miou(out: &RunOutput, name: &str) -> f64 {
    let v: Vec<f64> = out
        .results
        .iter()
        .filter(|r| r.config == name)
        .map(|r| r.miou)
        .collect();
    mean(&v)
}

fn main() {
    let run_started = Instant::now();
    let mut verdicts = Vec::new();
    let mut log = String::new();

    verdicts.push(gradient_fidelity());
    verdicts.push(oracle_equivalences());
    verdicts.push(schedule_exactness());

    // Benchmark data and the frozen backbone.
    let t = Instant::now();
    let base = RunConfig::default();
    let mc = base.model_config();
    let train = generate_split(TRAIN_SCENES, Split::Train.base_seed(), H, W).unwrap();
    let frozen = pretrain_backbone(
        &mc,
        &train,
        PretrainOptions {
            epochs: PRETRAIN_EPOCHS,
            seed: 0,
            ..PretrainOptions::default()
        },
    )
    .unwrap()
    .checkpoint;
    let model = Model::new(mc).unwrap();
    let query_samples = generate_split(POOL_SCENES, Split::Query.base_seed(), H, W).unwrap();
    let pools = Pools {
        train: Some(EncodedPool::new(&model, &frozen, train).unwrap()),
        support: EncodedPool::new(
            &model,
            &frozen,
            generate_split(POOL_SCENES, Split::Support.base_seed(), H, W).unwrap(),
        )
        .unwrap(),
        query: EncodedPool::new(&model, &frozen, query_samples.clone()).unwrap(),
    };
    writeln!(
        log,
        "setup: {TRAIN_SCENES} train / {POOL_SCENES} support / {POOL_SCENES} query scenes at \
         {H}x{W}, {PRETRAIN_EPOCHS} pretrain epochs, {:.1}s",
        t.elapsed().as_secs_f64()
    )
    .unwrap();

    // Invariants, except the checksum which brackets the main run.
    let t = Instant::now();
    let mut invariants = vec![
        attention_rows(&query_samples),
        cosine_bounds(),
        n2p_census(),
        csv_determinism(&frozen, &pools),
    ];
    let invariant_time = t.elapsed();

    // Main paired run: the depth matrix plus the n2p-off cells.
    let t = Instant::now();
    let mut configs = Matrix::Depth.configs(&base);
    for (h, w) in [(true, true), (false, false)] {
        configs.push(RunConfig {
            use_h: h,
            use_w: w,
            use_n2p: false,
            ..base.clone()
        });
    }
    let checksum = frozen.checksum(&FROZEN_PREFIXES);
    let main = run_configs(&frozen, &pools, &configs).unwrap();
    let main_time = t.elapsed();
    invariants.push((
        frozen.checksum(&FROZEN_PREFIXES) == checksum,
        format!("frozen checksum unchanged across the main run ({checksum})"),
    ));
    invariants.push(within(invariant_time, BUDGET_INVARIANTS));
    verdicts.push(verdict(3, "invariant suite", &invariants));

    let names = config_order(&main.results);
    let full = "+H+W+n2p/k1";
    let plain = "-H-W+n2p/k1";
    let no_n2p = "+H+W-n2p/k1";
    let baseline = "-H-W-n2p/k1";
    let report = build_report(&main.results, &main.skips, Some(baseline)).unwrap();
    writeln!(
        log,
        "main run: {} configs, {} results, {} skips, {:.1}s",
        names.len(),
        main.results.len(),
        main.skips.len(),
        main_time.as_secs_f64()
    )
    .unwrap();
    for n in &names {
        let legs: Vec<f64> = main
            .results
            .iter()
            .filter(|r| &r.config == n)
            .filter_map(|r| r.leg_recall())
            .collect();
        writeln!(
            log,
            "  {n:<14} mean mIoU {:.4}  mean leg recall {:.4}",
            mean_miou(&main, n),
            mean(&legs)
        )
        .unwrap();
    }

    // Depth module direction.
    let depth_pairs = paired(&main.results, full, plain);
    let depth_median = median(&depth_pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let depth_cells: Vec<String> = Matrix::Depth
        .configs(&base)
        .iter()
        .map(|c| format!("{}/k{}", c.label(), c.k))
        .collect();
    let best = depth_cells
        .iter()
        .max_by(|a, b| mean_miou(&main, a).total_cmp(&mean_miou(&main, b)))
        .unwrap();
    let min_pairs = base.episodes * base.seeds.len();
    verdicts.push(verdict(
        5,
        "depth ablation direction",
        &[
            (
                depth_pairs.len() >= min_pairs && depth_pairs.len() >= 150,
                format!(
                    "{} paired episodes over {} seeds",
                    depth_pairs.len(),
                    base.seeds.len()
                ),
            ),
            (
                depth_median >= DEPTH_MIN_MEDIAN_DELTA,
                format!(
                    "median dmIoU(+H+W vs -H-W) {:+.2} pts >= {:+.0}",
                    100.0 * depth_median,
                    100.0 * DEPTH_MIN_MEDIAN_DELTA
                ),
            ),
            (best == full, format!("best mean mIoU cell {best}")),
            within(main_time, BUDGET_ABLATION),
        ],
    ));

    // Negative-prototype branch direction.
    let ncl_pairs = paired(&main.results, full, no_n2p);
    let ncl_median = median(&ncl_pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let wins = ncl_pairs.iter().filter(|p| p.2 > 0.0).count();
    let win_rate = wins as f64 / ncl_pairs.len().max(1) as f64;
    verdicts.push(verdict(
        6,
        "n2p ablation direction",
        &[
            (
                ncl_median >= NCL_MIN_MEDIAN_DELTA,
                format!(
                    "median dmIoU(+n2p vs -n2p) {:+.2} pts >= {:+.0}",
                    100.0 * ncl_median,
                    100.0 * NCL_MIN_MEDIAN_DELTA
                ),
            ),
            (
                win_rate >= NCL_MIN_OBSTACLE_WIN_RATE,
                format!(
                    "obstacle dIoU > 0 in {wins}/{} = {:.0}% >= {:.0}%",
                    ncl_pairs.len(),
                    100.0 * win_rate,
                    100.0 * NCL_MIN_OBSTACLE_WIN_RATE
                ),
            ),
        ],
    ));

    // Shot count trend.
    let t = Instant::now();
    let one = RunConfig {
        episodes: SHOT_EPISODES_PER_SEED,
        ..base.clone()
    };
    let five = RunConfig {
        k: 5,
        ..one.clone()
    };
    let shots = run_configs(&frozen, &pools, &[five, one]).unwrap();
    let shot_pairs = paired(&shots.results, "+H+W+n2p/k5", full);
    let m5 = mean(
        &shots
            .results
            .iter()
            .filter(|r| r.k == 5 && shot_pairs.iter().any(|p| p.0 == (r.seed, r.episode)))
            .map(|r| r.miou)
            .collect::<Vec<_>>(),
    );
    let m1 = mean(
        &shots
            .results
            .iter()
            .filter(|r| r.k == 1 && shot_pairs.iter().any(|p| p.0 == (r.seed, r.episode)))
            .map(|r| r.miou)
            .collect::<Vec<_>>(),
    );
    writeln!(
        log,
        "shot run: {} results, {:.1}s",
        shots.results.len(),
        t.elapsed().as_secs_f64()
    )
    .unwrap();
    verdicts.push(verdict(
        7,
        "shot-count trend",
        &[
            (
                shot_pairs.len() >= 30,
                format!("{} paired episodes", shot_pairs.len()),
            ),
            (
                m5 >= m1 - SHOT_SLACK,
                format!(
                    "mean mIoU 5-shot {:.4} vs 1-shot {:.4} (slack {:.1} pts)",
                    m5,
                    m1,
                    100.0 * SHOT_SLACK
                ),
            ),
        ],
    ));

    // Thin-leg recall.
    let legs = paired_leg_recall(&main.results, full, baseline);
    let leg_median = median(&legs);
    verdicts.push(verdict(
        8,
        "thin-leg recall",
        &[
            (
                !legs.is_empty(),
                format!("{} paired episodes with leg pixels", legs.len()),
            ),
            (
                leg_median > 0.0,
                format!(
                    "median d leg recall (full vs -H-W-n2p) {:+.2} pts > 0",
                    100.0 * leg_median
                ),
            ),
        ],
    ));

    verdicts.sort_by_key(|v| v.id);
    let mut unexpected = Vec::new();
    let mut lines = String::new();
    for v in &verdicts {
        let known = KNOWN_FAILURES.contains(&v.id);
        let tag = if v.passed { "PASS" } else { "FAIL" };
        let note = match (v.passed, known) {
            (false, true) => " (known failure)",
            (true, true) => " (listed as known failure)",
            _ => "",
        };
        writeln!(lines, "{tag} {} {}{note}: {}", v.id, v.name, v.detail).unwrap();
        if !v.passed && !known {
            unexpected.push(v.id);
        }
    }
    writeln!(
        log,
        "total runtime {:.1}s",
        run_started.elapsed().as_secs_f64()
    )
    .unwrap();

    print!("{log}{lines}");
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("verdicts.txt"), format!("{log}{lines}")).unwrap();
    std::fs::write(dir.join("results.csv"), &report.csv).unwrap();
    std::fs::write(dir.join("summary.txt"), &report.summary).unwrap();
    let shot_report = build_report(&shots.results, &shots.skips, Some(full)).unwrap();
    std::fs::write(dir.join("shots.csv"), &shot_report.csv).unwrap();
    println!("artifacts in {}", dir.display());

    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
