//! Finite-difference gradient checks of every differentiable op and of the
//! composed episode loss at toy sizes, all at fp64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth::DepthScan;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckOptions};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::proto::{self, SupportMask};
use crate::rgb::rgb_embed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-op bound on the relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Bound for the composed episode loss.
pub const EPISODE_TOLERANCE: f64 = 1e-3;

/// Worst relative error of one named check over its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `out` with a fixed random weighting so every output coordinate
/// contributes a distinct amount to the scalar.
fn probe(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(t.shape(out), &mut rng);
    let w = t.constant(w);
    let p = t.mul(out, w)?;
    t.sum(p)
}

type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Tensor<f64>>;
type Op = Box<dyn Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var>>;

fn rand_of(shape: &'static [usize]) -> Make {
    Box::new(move |rng| random(shape, rng))
}

fn op_cases() -> Vec<(String, Make, Op)> {
    let mut v: Vec<(String, Make, Op)> = Vec::new();
    let mut add = |name: &str, make: Make, op: Op| v.push((name.to_string(), make, op));
    add(
        "matmul lhs",
        rand_of(&[3, 4]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[4, 2], r));
            t.matmul(x, b)
        }),
    );
    add(
        "matmul rhs",
        rand_of(&[4, 2]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[3, 4], r));
            t.matmul(a, x)
        }),
    );
    add(
        "matmul chain",
        rand_of(&[2, 2]),
        Box::new(|t, x, _| {
            let y = t.matmul(x, x)?;
            t.matmul(y, x)
        }),
    );
    add(
        "add",
        rand_of(&[2, 3]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[2, 3], r));
            t.add(b, x)
        }),
    );
    add(
        "sub",
        rand_of(&[2, 3]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[2, 3], r));
            t.sub(b, x)
        }),
    );
    add(
        "mul",
        rand_of(&[2, 3]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[2, 3], r));
            let y = t.mul(x, b)?;
            t.mul(y, x)
        }),
    );
    add("scale", rand_of(&[5]), Box::new(|t, x, _| t.scale(x, -2.5)));
    add(
        "add_scalar",
        rand_of(&[5]),
        Box::new(|t, x, _| {
            let y = t.add_scalar(x, 0.3)?;
            t.mul(y, y)
        }),
    );
    add(
        "gelu",
        Box::new(|r| random(&[7], r).map(|v| 3.0 * v)),
        Box::new(|t, x, _| t.gelu(x)),
    );
    // Inputs kept away from the kink at zero.
    add(
        "relu",
        Box::new(|r| random(&[8], r).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })),
        Box::new(|t, x, _| t.relu(x)),
    );
    add(
        "add_row_bias x",
        rand_of(&[3, 4]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[4], r));
            t.add_row_bias(x, b)
        }),
    );
    add(
        "add_row_bias bias",
        rand_of(&[4]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[3, 4], r));
            t.add_row_bias(a, x)
        }),
    );
    add(
        "layer_norm x",
        rand_of(&[3, 5]),
        Box::new(|t, x, r| {
            let g = t.constant(random(&[5], r));
            let b = t.constant(random(&[5], r));
            t.layer_norm(x, g, b)
        }),
    );
    add(
        "layer_norm gamma",
        rand_of(&[5]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[3, 5], r));
            let b = t.constant(random(&[5], r));
            t.layer_norm(a, x, b)
        }),
    );
    add(
        "layer_norm beta",
        rand_of(&[5]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[3, 5], r));
            let g = t.constant(random(&[5], r));
            t.layer_norm(a, g, x)
        }),
    );
    add(
        "softmax_rows",
        Box::new(|r| random(&[3, 4], r).map(|v| 3.0 * v)),
        Box::new(|t, x, _| t.softmax_rows(x)),
    );
    add(
        "l2_normalize_rows",
        rand_of(&[3, 4]),
        Box::new(|t, x, _| t.l2_normalize_rows(x, 1e-8)),
    );
    // Distinct entries per row keep the argmax stable under perturbation.
    add(
        "max_rows",
        Box::new(|r| {
            let mut v: Vec<f64> = (0..12).map(|i| (i % 4) as f64 * 0.5).collect();
            for row in v.chunks_mut(4) {
                for j in (1..4).rev() {
                    row.swap(j, r.gen_range(0..=j));
                }
            }
            Tensor::new([3, 4], v).expect("3×4")
        }),
        Box::new(|t, x, _| t.max_rows(x)),
    );
    add(
        "reshape",
        rand_of(&[2, 6]),
        Box::new(|t, x, _| {
            let y = t.reshape(x, &[3, 4])?;
            t.mul(y, y)
        }),
    );
    add(
        "transpose",
        rand_of(&[2, 3]),
        Box::new(|t, x, r| {
            let y = t.transpose(x)?;
            let b = t.constant(random(&[2, 2], r));
            t.matmul(y, b)
        }),
    );
    add(
        "concat lhs",
        rand_of(&[2, 3, 3]),
        Box::new(|t, x, r| {
            let b = t.constant(random(&[1, 3, 3], r));
            t.concat_channels(x, b)
        }),
    );
    add(
        "concat rhs",
        rand_of(&[1, 3, 3]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[2, 3, 3], r));
            t.concat_channels(a, x)
        }),
    );
    add(
        "outer_add rows",
        rand_of(&[3, 2]),
        Box::new(|t, x, r| {
            let c = t.constant(random(&[4, 2], r));
            t.outer_add(x, c)
        }),
    );
    add(
        "outer_add cols",
        rand_of(&[4, 2]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[3, 2], r));
            t.outer_add(a, x)
        }),
    );
    add(
        "broadcast_mul x",
        rand_of(&[2, 3, 4]),
        Box::new(|t, x, r| {
            let m = t.constant(random(&[3, 4], r));
            t.broadcast_mul(x, m)
        }),
    );
    add(
        "broadcast_mul map",
        rand_of(&[3, 4]),
        Box::new(|t, x, r| {
            let a = t.constant(random(&[2, 3, 4], r));
            t.broadcast_mul(a, x)
        }),
    );
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        let tag = format!("s{stride} p{pad} k{k}");
        add(
            &format!("conv2d x {tag}"),
            rand_of(&[2, 5, 6]),
            Box::new(move |t, x, r| {
                let w = t.constant(random(&[3, 2, k, k], r));
                let b = t.constant(random(&[3], r));
                t.conv2d(x, w, b, stride, pad)
            }),
        );
        add(
            &format!("conv2d weight {tag}"),
            Box::new(move |r| random(&[3, 2, k, k], r)),
            Box::new(move |t, x, r| {
                let a = t.constant(random(&[2, 5, 6], r));
                let b = t.constant(random(&[3], r));
                t.conv2d(a, x, b, stride, pad)
            }),
        );
        add(
            &format!("conv2d bias {tag}"),
            rand_of(&[3]),
            Box::new(move |t, x, r| {
                let a = t.constant(random(&[2, 5, 6], r));
                let w = t.constant(random(&[3, 2, k, k], r));
                t.conv2d(a, w, x, stride, pad)
            }),
        );
    }
    add(
        "bilinear up",
        rand_of(&[2, 3, 4]),
        Box::new(|t, x, _| t.bilinear_resize(x, 7, 9)),
    );
    add(
        "bilinear down",
        rand_of(&[2, 6, 8]),
        Box::new(|t, x, _| t.bilinear_resize(x, 3, 5)),
    );
    add(
        "sum",
        rand_of(&[4]),
        Box::new(|t, x, _| {
            let y = t.mul(x, x)?;
            let s = t.sum(y)?;
            t.mul(s, s)
        }),
    );
    add(
        "mean",
        rand_of(&[2, 3]),
        Box::new(|t, x, _| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
    );
    v
}

/// Every op check at every seed, in a fixed order.
pub fn check_ops(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let opts = GradCheckOptions::default();
    for (name, make, op) in op_cases() {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = make(&mut rng);
            let report = grad_check(
                |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
                    let y = op(t, x, &mut r)?;
                    probe(t, y, seed)
                },
                &x,
                opts,
            )?;
            out.push(CheckOutcome {
                name: name.clone(),
                seed,
                max_rel_error: report.max_rel_error,
                tolerance: OP_TOLERANCE,
            });
        }
    }
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(vec![2, 3, 4], |_| rng.gen_range(-2.0..2.0));
        let mask: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2)).collect();
        let r = grad_check(|t, x| t.cross_entropy_2class(x, &mask), &logits, opts)?;
        out.push(CheckOutcome {
            name: "cross_entropy_2class".into(),
            seed,
            max_rel_error: r.max_rel_error,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Model dimensions small enough to perturb every weight.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        channels: 4,
        beams: 12,
        d_model: 5,
        angle_pairs: 2,
        ..ModelConfig::default()
    }
}

struct ToyFrame {
    rgb: Tensor<f64>,
    scan: DepthScan,
    mask: SupportMask,
}

fn toy_frame(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<ToyFrame> {
    let (h, w) = (cfg.height, cfg.width);
    let rgb = Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0));
    let ranges = (0..cfg.beams).map(|_| rng.gen_range(0.5..5.0)).collect();
    let scan = DepthScan::new(ranges, 3, 9, 5.0)?;
    // Lower half mostly free, upper half obstacle, with random flips.
    let mask = (0..h * w)
        .map(|i| {
            let free = i / w >= h / 2;
            u8::from(free ^ (rng.gen_range(0.0..1.0) < 0.15))
        })
        .collect();
    Ok(ToyFrame {
        rgb,
        scan,
        mask: SupportMask::new(h, w, mask)?,
    })
}

fn fused_frame(tape: &mut Tape<f64>, model: &Model, p: &Bound, frame: &ToyFrame) -> Result<Var> {
    let r = rgb_embed(
        tape,
        &model.rgb,
        p,
        &crate::rgb::RgbImage::new(frame.rgb.cast())?,
    )?;
    let d = model.depth.forward(tape, p, &frame.scan)?.map;
    model.fusion.forward(tape, p, r, d)
}

/// Support-loss plus query-loss of a two-shot toy episode, differentiated
/// with respect to every weight of the model.
pub fn check_episode(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let cfg = toy_model_config();
    let model = Model::new(cfg.clone())?;
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..3)
            .map(|_| toy_frame(&mut rng, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut store = ParamStore::<f64>::new();
        model.init_backbone(&mut store, seed);
        model.init_adaptable(&mut store, seed + 1);
        let report = grad_check_params(
            |t, p| {
                let feats = frames
                    .iter()
                    .map(|f| fused_frame(t, &model, p, f))
                    .collect::<Result<Vec<_>>>()?;
                let supports: Vec<(Var, &SupportMask)> =
                    vec![(feats[0], &frames[0].mask), (feats[1], &frames[1].mask)];
                let mut total = None;
                for (i, &f) in feats.iter().enumerate() {
                    let tr = proto::ncl_forward(t, &supports, f, cfg.ncl, &model.decoder, p)?;
                    let ce = t.cross_entropy_2class(tr.logits, frames[i].mask.data())?;
                    total = Some(match total {
                        None => ce,
                        Some(acc) => t.add(acc, ce)?,
                    });
                }
                Ok(total.expect("three frames"))
            },
            &store,
            &["rgb.", "fuse.", "depth.", "decoder."],
            GradCheckOptions::default(),
        )?;
        out.push(CheckOutcome {
            name: "episode loss".into(),
            seed,
            max_rel_error: report.max_rel_error,
            tolerance: EPISODE_TOLERANCE,
        });
    }
    Ok(out)
}
