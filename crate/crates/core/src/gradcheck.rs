//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (chosen by `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, name: &str, idx: usize, err: f64) {
        self.coords_checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), idx));
        }
    }
}

fn coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

fn scalar(tape: &Tape<f64>, v: Var, what: &str, idx: usize) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(
            "grad_check function must return a scalar".into(),
        ));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss while perturbing {what}[{idx}]"
        )));
    }
    Ok(s)
}

/// Checks `f` as a function of the single tensor `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    scalar(&tape, out, "x", 0)?;
    let analytic = tape.backward(out)?.tensor(xv);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let eval = |xp: Tensor<f64>, i: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(xp);
        let o = f(&mut t, v).map_err(|e| annotate(e, "x", i))?;
        scalar(&t, o, "x", i)
    };
    for i in coords(x.numel(), &opts, 0) {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * opts.step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        report.merge("x", i, err);
    }
    Ok(report)
}

/// Checks `f` with respect to every parameter of `store` whose name starts
/// with one of `trainable`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    trainable: &[&str],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, trainable);
    let out = f(&mut tape, &bound)?;
    scalar(&tape, out, "loss", 0)?;
    let grads = bound.grads(&tape.backward(out)?);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let eval = |s: &ParamStore<f64>, name: &str, i: usize| -> Result<f64> {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, s, &[]);
        let o = f(&mut t, &b).map_err(|e| annotate(e, name, i))?;
        scalar(&t, o, name, i)
    };
    for (salt, (name, g)) in grads.iter().enumerate() {
        let base = store.get(name).expect("bound parameter");
        for i in coords(base.numel(), &opts, salt as u64 + 1) {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data_mut()[i] += opts.step;
            let up = eval(&s, name, i)?;
            s.get_mut(name).unwrap().data_mut()[i] -= 2.0 * opts.step;
            let down = eval(&s, name, i)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = (g.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.merge(name, i, err);
        }
    }
    Ok(report)
}

fn annotate(e: Error, what: &str, idx: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (perturbing {what}[{idx}])")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_rounding() {
        let x = Tensor::new([5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 5);
    }

    #[test]
    fn reports_non_finite_with_coordinate() {
        let x = Tensor::new([2], vec![1.0, 1e-6]).unwrap();
        // ln(x) evaluated via a perturbation that crosses zero.
        let err = grad_check(
            |t, x| {
                let v = t.value(x).map(|v| v.ln());
                let c = t.constant(v);
                t.sum(c)
            },
            &x,
            GradCheckOptions {
                step: 1e-5,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("x[1]"), "{err}");
    }
}
