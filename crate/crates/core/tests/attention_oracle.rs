//! The attention block against a straight-line fp64 evaluation.

use ncl_core::gradcheck::{grad_check_params, GradCheckOptions};
use ncl_core::nn::AttentionBlock;
use ncl_core::tape::gelu;
use ncl_core::{Bound, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn linear(x: &Mat, p: &ParamStore<f64>, name: &str) -> Mat {
    let w = mat(p.get(&format!("{name}.weight")).unwrap());
    let b = p.get(&format!("{name}.bias")).unwrap().data();
    x.iter()
        .map(|row| {
            (0..w.len())
                .map(|o| b[o] + row.iter().zip(&w[o]).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, p: &ParamStore<f64>, name: &str) -> Mat {
    let g = p.get(&format!("{name}.gamma")).unwrap().data();
    let b = p.get(&format!("{name}.beta")).unwrap().data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Returns (attention weights, block output).
fn oracle(x: &Mat, p: &ParamStore<f64>, scale_dim: f64) -> (Mat, Mat) {
    let q = linear(x, p, "blk.q");
    let k = linear(x, p, "blk.k");
    let v = linear(x, p, "blk.v");
    let l = x.len();
    let mut weights = vec![vec![0.0; l]; l];
    for i in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / scale_dim.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..l {
            weights[i][j] = e[j] / s;
        }
    }
    let a: Mat = (0..l)
        .map(|i| {
            (0..v[0].len())
                .map(|c| (0..l).map(|j| weights[i][j] * v[j][c]).sum())
                .collect()
        })
        .collect();
    let h = layer_norm(&add(x, &linear(&a, p, "blk.o")), p, "blk.ln1");
    let m: Mat = linear(&h, p, "blk.mlp1")
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let out = layer_norm(&add(&h, &linear(&m, p, "blk.mlp2")), p, "blk.ln2");
    (weights, out)
}

fn setup(dim: usize, hidden: usize, seed: u64) -> (AttentionBlock, ParamStore<f64>) {
    let block = AttentionBlock::new("blk", dim, hidden, dim as f64);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    block.init(&mut store, &mut rng);
    // Non-trivial norm affines and biases so every parameter matters.
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        if n.ends_with(".bias") || n.ends_with(".gamma") || n.ends_with(".beta") {
            for v in store.get_mut(&n).unwrap().data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    (block, store)
}

fn run(
    block: &AttentionBlock,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, store, &[]);
    let xv = tape.constant(x.clone());
    let tr = block.forward(&mut tape, &b, xv).unwrap();
    (
        tape.value(tr.weights).clone(),
        tape.value(tr.output).clone(),
    )
}

fn max_diff(a: &Tensor<f64>, b: &Mat) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().cloned().collect();
    a.data()
        .iter()
        .zip(&flat)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn toy_two_by_two_matches_oracle() {
    for seed in 0..5 {
        let (block, store) = setup(2, 4, seed);
        let x = Tensor::new([2, 2], vec![0.3, -1.1, 0.8, 0.25]).unwrap();
        let (w, out) = run(&block, &store, &x);
        let (ow, oo) = oracle(&mat(&x), &store, 2.0);
        assert!(max_diff(&w, &ow) <= 1e-6);
        assert!(max_diff(&out, &oo) <= 1e-6);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let (block, store) = setup(4, 8, 9);
    let x = Tensor::new([1, 4], vec![5.0, -3.0, 0.5, 2.0]).unwrap();
    let (w, _) = run(&block, &store, &x);
    assert_eq!(w.data(), &[1.0]);
}

#[test]
fn zero_projections_reduce_to_normalized_residual() {
    let (block, mut store) = setup(3, 6, 4);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let fill = if n.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = fill;
        }
    }
    let x = Tensor::new([2, 3], vec![1.0, 2.0, 4.0, -1.0, 0.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &store, &[]);
    let xv = tape.constant(x.clone());
    let tr = block.forward(&mut tape, &b, xv).unwrap();
    assert!(tape.value(tr.attended).data().iter().all(|&v| v == 0.0));
    let ln = |m: &Mat| {
        m.iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / 3.0;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 3.0;
                r.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
            })
            .collect::<Mat>()
    };
    let expect = ln(&ln(&mat(&x)));
    assert!(max_diff(tape.value(tr.output), &expect) <= 1e-12);
}

#[test]
fn block_parameters_pass_gradient_check() {
    for seed in 0..5 {
        let (block, store) = setup(4, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-1.0..1.0));
        let probe = Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-1.0..1.0));
        let report = grad_check_params(
            |t, b| {
                let xv = t.constant(x.clone());
                let out = block.forward(t, b, xv)?.output;
                let w = t.constant(probe.clone());
                let p = t.mul(out, w)?;
                t.sum(p)
            },
            &store,
            &["blk."],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }
}
