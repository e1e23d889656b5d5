//! Reusable layers plus the AdamW optimizer and the warm-up/poly schedule.
//!
//! Layers are small descriptors (a parameter-name prefix and dimensions);
//! weights live in a [`ParamStore`] and are looked up through a [`Bound`] at
//! forward time.

mod optim;
mod schedule;

pub use optim::{adamw_step, AdamW};
pub use schedule::{lr_at, WarmUpPolyLR};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// `y = x·Wᵀ + b` with `W[out×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        store.init_uniform(&self.weight(), &[self.output, self.input], self.input, rng);
        store.init_const(&self.bias(), &[self.output], 0.0);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.input {
            return Err(Error::shape(
                "linear",
                tape.shape(x),
                &[self.output, self.input],
            ));
        }
        let wt = tape.transpose(p.var(&self.weight())?)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, p.var(&self.bias())?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.init_const(&format!("{}.gamma", self.name), &[self.dim], 1.0);
        store.init_const(&format!("{}.beta", self.name), &[self.dim], 0.0);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let g = p.var(&format!("{}.gamma", self.name))?;
        let b = p.var(&format!("{}.beta", self.name))?;
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Same-padded convolution (`pad = kernel / 2`).
    pub fn new(
        name: impl Into<String>,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            input,
            output,
            kernel,
            stride,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_in = self.input * self.kernel * self.kernel;
        store.init_uniform(
            &format!("{}.weight", self.name),
            &[self.output, self.input, self.kernel, self.kernel],
            fan_in,
            rng,
        );
        store.init_const(&format!("{}.bias", self.name), &[self.output], 0.0);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&format!("{}.weight", self.name))?;
        let b = p.var(&format!("{}.bias", self.name))?;
        tape.conv2d(x, w, b, self.stride, self.kernel / 2)
    }

    pub fn param_count(&self) -> usize {
        self.output * self.input * self.kernel * self.kernel + self.output
    }
}

/// Intermediate values of one attention block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// Row-stochastic attention weights `[L×L]`.
    pub weights: Var,
    /// Attention output after the output projection, before the residual.
    pub attended: Var,
    pub output: Var,
}

/// Post-norm transformer block:
///
/// ```text
/// a   = softmax(q·kᵀ / √m) · v,   q, k, v = FC(x)
/// h   = LN₁(x + FC_o(a))
/// out = LN₂(h + MLP(h)),          MLP = FC₂ ∘ GeLU ∘ FC₁
/// ```
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub name: String,
    pub dim: usize,
    pub hidden: usize,
    /// The `m` in the `1/√m` logit scaling.
    pub scale_dim: f64,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl AttentionBlock {
    pub fn new(name: impl Into<String>, dim: usize, hidden: usize, scale_dim: f64) -> Self {
        let name = name.into();
        let sub = |s: &str| format!("{name}.{s}");
        AttentionBlock {
            q: Linear::new(sub("q"), dim, dim),
            k: Linear::new(sub("k"), dim, dim),
            v: Linear::new(sub("v"), dim, dim),
            o: Linear::new(sub("o"), dim, dim),
            ln1: LayerNorm::new(sub("ln1"), dim),
            ln2: LayerNorm::new(sub("ln2"), dim),
            fc1: Linear::new(sub("mlp1"), dim, hidden),
            fc2: Linear::new(sub("mlp2"), hidden, dim),
            name,
            dim,
            hidden,
            scale_dim,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2] {
            l.init(store, rng);
        }
        self.ln1.init(store);
        self.ln2.init(store);
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<AttentionTrace> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim || shape[0] == 0 {
            return Err(Error::shape("attention_block", shape, &[self.dim]));
        }
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, T::lit(1.0 / self.scale_dim.sqrt()))?;
        let weights = tape.softmax_rows(logits)?;
        let a = tape.matmul(weights, v)?;
        let attended = self.o.forward(tape, p, a)?;
        let r1 = tape.add(x, attended)?;
        let h = self.ln1.forward(tape, p, r1)?;
        let m = self.fc1.forward(tape, p, h)?;
        let m = tape.gelu(m)?;
        let m = self.fc2.forward(tape, p, m)?;
        let r2 = tape.add(h, m)?;
        let output = self.ln2.forward(tape, p, r2)?;
        Ok(AttentionTrace {
            weights,
            attended,
            output,
        })
    }
}

/// Forward pass of an [`AttentionBlock`] returning only the block output.
pub fn attention_block_forward<T: Real>(
    tape: &mut Tape<T>,
    block: &AttentionBlock,
    params: &Bound,
    x: Var,
) -> Result<Var> {
    Ok(block.forward(tape, params, x)?.output)
}
