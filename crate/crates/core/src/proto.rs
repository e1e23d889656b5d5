//! Support masks, mask-pooled part prototypes, the cosine matching branches
//! and the two-way decoder.
//!
//! Positive prototypes summarize freespace, negative ones obstacles. Both
//! branches are non-parametric: the only weights here belong to the decoder.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::pnm;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Cells (and whole regions) lighter than this are treated as empty.
pub const MIN_CELL_WEIGHT: f64 = 1e-6;
/// Norm guard for cosine similarity on zero vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Binary `H×W` mask, 1 = freespace, 0 = obstacle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl SupportMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Validation(format!(
                "mask of {} values does not fill {height}×{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(SupportMask {
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn complement(&self) -> SupportMask {
        SupportMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        let want = polarity.label();
        self.data.iter().filter(|&&v| v == want).count()
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let r = pnm::decode(bytes, b"P5", 1, "pgm")?;
        let data = r
            .data
            .iter()
            .map(|&v| match v {
                255 => Ok(1),
                0 => Ok(0),
                other => Err(Error::format(
                    "pgm",
                    format!("mask byte {other} is neither 0 nor 255"),
                )),
            })
            .collect::<Result<Vec<u8>>>()?;
        SupportMask::new(r.height, r.width, data)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        pnm::encode(b"P5", self.width, self.height, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Mask value selected by this polarity.
    pub fn label(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Soft-weighted averages over a `grid × grid` split of the region's
    /// bounding box.
    MaskPool { grid: usize },
    /// Global average over the region, identical to `MaskPool { grid: 1 }`.
    Gap,
}

impl Pooling {
    pub fn grid(self) -> usize {
        match self {
            Pooling::MaskPool { grid } => grid,
            Pooling::Gap => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
}

/// Prototype rows `[count × C]` recorded on a tape.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub polarity: Polarity,
    pub vectors: Var,
    /// Support shot each row was pooled from.
    pub shots: Vec<usize>,
}

/// Row-major `[out × in]` matrix of 1-D overlap lengths between `n_in` unit
/// pixels and `n_out` equal-width cells spanning the same extent, normalized
/// so each row sums to 1.
fn area_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let step = n_in as f64 / n_out as f64;
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let (a, b) = (o as f64 * step, (o + 1) as f64 * step);
        for i in (a.floor() as usize)..(b.ceil() as usize).min(n_in) {
            let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
            m[o * n_in + i] = overlap / step;
        }
    }
    m
}

/// Area-averaged fraction of each feature cell covered by `polarity`,
/// row-major `[h×w]`.
pub fn soft_region(mask: &SupportMask, polarity: Polarity, h: usize, w: usize) -> Vec<f64> {
    let (ay, ax) = (area_weights(mask.height, h), area_weights(mask.width, w));
    let want = polarity.label();
    let mut tmp = vec![0.0; mask.height * w];
    for i in 0..mask.height {
        for x in 0..w {
            tmp[i * w + x] = (0..mask.width)
                .filter(|&j| mask.data[i * mask.width + j] == want)
                .map(|j| ax[x * mask.width + j])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..mask.height)
                .map(|i| ay[y * mask.height + i] * tmp[i * w + x])
                .sum();
        }
    }
    out
}

/// Pooling matrix `[h·w × P]`: column `p` holds the normalized soft weights of
/// part cell `p`. Errors when the region is empty.
pub fn pooling_weights(
    mask: &SupportMask,
    polarity: Polarity,
    grid: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Vec<f64>>> {
    if grid == 0 {
        return Err(Error::Config("pooling grid must be at least 1".into()));
    }
    let soft = soft_region(mask, polarity, h, w);
    if soft.iter().sum::<f64>() < MIN_CELL_WEIGHT {
        return Err(Error::EmptyRegion {
            polarity: polarity.name(),
        });
    }
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if soft[y * w + x] > 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    let split = |lo: usize, hi: usize, g: usize| lo + (hi - lo) * g / grid;
    let mut cols = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (ya, yb) = (split(y0, y1, gy), split(y0, y1, gy + 1));
            let (xa, xb) = (split(x0, x1, gx), split(x0, x1, gx + 1));
            let mut col = vec![0.0; h * w];
            let mut total = 0.0;
            for y in ya..yb {
                for x in xa..xb {
                    col[y * w + x] = soft[y * w + x];
                    total += soft[y * w + x];
                }
            }
            if total < MIN_CELL_WEIGHT {
                continue;
            }
            col.iter_mut().for_each(|v| *v /= total);
            cols.push(col);
        }
    }
    Ok(cols)
}

/// Part prototypes of `feat[C×h×w]` over the `polarity` region of `mask`.
pub fn mask_pool<T: Real>(
    tape: &mut Tape<T>,
    feat: Var,
    mask: &SupportMask,
    polarity: Polarity,
    grid: usize,
) -> Result<PrototypeSet> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("mask_pool", &s, &[0, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let cols = pooling_weights(mask, polarity, grid, h, w)?;
    let p = cols.len();
    let n = h * w;
    let wm = Tensor::from_fn(vec![n, p], |i| T::lit(cols[i % p][i / p]));
    let wm = tape.constant(wm);
    let flat = tape.reshape(feat, &[c, n])?;
    let pooled = tape.matmul(flat, wm)?;
    let vectors = tape.transpose(pooled)?;
    Ok(PrototypeSet {
        polarity,
        vectors,
        shots: vec![0; p],
    })
}

/// Single global prototype, the `grid = 1` case of [`mask_pool`].
pub fn gap_pool<T: Real>(
    tape: &mut Tape<T>,
    feat: Var,
    mask: &SupportMask,
    polarity: Polarity,
) -> Result<PrototypeSet> {
    mask_pool(tape, feat, mask, polarity, 1)
}

/// Union of per-shot prototype sets of one polarity.
pub fn union<T: Real>(tape: &mut Tape<T>, sets: Vec<PrototypeSet>) -> Result<PrototypeSet> {
    let mut it = sets.into_iter().enumerate();
    let (_, mut acc) = it
        .next()
        .ok_or_else(|| Error::Contract("prototype union over zero shots".into()))?;
    for (shot, s) in it {
        if s.polarity != acc.polarity {
            return Err(Error::Contract(
                "cannot merge prototypes of different polarity".into(),
            ));
        }
        acc.vectors = tape.concat_channels(acc.vectors, s.vectors)?;
        acc.shots
            .extend(std::iter::repeat_n(shot, s.shots.len()));
    }
    Ok(acc)
}

/// Per-pixel cosine similarity of `q[C×h×w]` to the prototypes, aggregated
/// over prototypes into an `[h×w]` map.
pub fn cosine_branch<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    protos: &PrototypeSet,
    agg: Aggregation,
) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    let ps = tape.shape(protos.vectors).to_vec();
    if s.len() != 3 || ps.len() != 2 || ps[1] != s[0] {
        return Err(Error::shape("cosine_branch", &s, &ps));
    }
    if ps[0] == 0 {
        return Err(Error::Contract(
            "cosine_branch needs at least one prototype".into(),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = tape.reshape(q, &[c, h * w])?;
    let pixels = tape.transpose(flat)?;
    let qn = tape.l2_normalize_rows(pixels, COSINE_EPS)?;
    let pn = tape.l2_normalize_rows(protos.vectors, COSINE_EPS)?;
    let pt = tape.transpose(pn)?;
    let sim = tape.matmul(qn, pt)?;
    let agg = match agg {
        Aggregation::Max => tape.max_rows(sim)?,
        Aggregation::Mean => {
            let avg = tape.constant(Tensor::full([ps[0], 1], T::lit(1.0 / ps[0] as f64)));
            tape.matmul(sim, avg)?
        }
    };
    tape.reshape(agg, &[h, w])
}

/// `q ⊙ (1 + sim)/2`, broadcast over channels.
pub fn modulate<T: Real>(tape: &mut Tape<T>, q: Var, sim: Var) -> Result<Var> {
    let half = tape.scale(sim, T::lit(0.5))?;
    let gate = tape.add_scalar(half, T::lit(0.5))?;
    tape.broadcast_mul(q, gate)
}

/// What the decoder consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderInput {
    /// `[q⁺; q⁻]`, the gated features (2C channels).
    Gated,
    /// `[sim⁺; sim⁻]`, the raw similarity maps (2 channels).
    Similarity,
}

/// `concat → 3×3 conv → GeLU → 3×3 conv (2 logits) → bilinear upsample`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub channels: usize,
    pub input: DecoderInput,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Decoder {
    pub fn new(prefix: &str, channels: usize, input: DecoderInput) -> Self {
        let cin = match input {
            DecoderInput::Gated => 2 * channels,
            DecoderInput::Similarity => 2,
        };
        Decoder {
            channels,
            input,
            conv1: Conv2d::new(format!("{prefix}.conv1"), cin, channels, 3, 1),
            conv2: Conv2d::new(format!("{prefix}.conv2"), channels, 2, 3, 1),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    /// Logits `[2×out_h×out_w]`, channel 0 freespace and channel 1 obstacle.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pos: Var,
        neg: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        if tape.shape(pos) != tape.shape(neg) {
            return Err(Error::shape("decode", tape.shape(pos), tape.shape(neg)));
        }
        let x = tape.concat_channels(pos, neg)?;
        let x = self.conv1.forward(tape, p, x)?;
        let x = tape.gelu(x)?;
        let x = self.conv2.forward(tape, p, x)?;
        tape.bilinear_resize(x, out_h, out_w)
    }
}

/// Two-class logits with their per-pixel argmax (1 = freespace; ties go to
/// freespace).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMask {
    pub logits: Tensor<f32>,
    pub mask: SupportMask,
}

impl QueryMask {
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape("query_mask", s, &[2]));
        }
        let n = s[1] * s[2];
        let d = logits.data();
        let mask = (0..n).map(|i| u8::from(d[i] >= d[n + i])).collect();
        Ok(QueryMask {
            logits: logits.cast(),
            mask: SupportMask::new(s[1], s[2], mask)?,
        })
    }
}

/// Free-function form of [`Decoder::forward`] at the decoder's output size.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    decoder: &Decoder,
    p: &Bound,
    q_pos: Var,
    q_neg: Var,
    out_h: usize,
    out_w: usize,
) -> Result<QueryMask> {
    let logits = decoder.forward(tape, p, q_pos, q_neg, out_h, out_w)?;
    QueryMask::from_logits(tape.value(logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NclFlags {
    pub use_n2p: bool,
    pub pooling: Pooling,
    pub aggregation: Aggregation,
}

impl Default for NclFlags {
    fn default() -> Self {
        NclFlags {
            use_n2p: true,
            pooling: Pooling::MaskPool { grid: 2 },
            aggregation: Aggregation::Max,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NclTrace {
    pub positive: PrototypeSet,
    pub negative: Option<PrototypeSet>,
    pub sim_pos: Var,
    pub sim_neg: Option<Var>,
    pub q_pos: Var,
    pub q_neg: Var,
    pub logits: Var,
}

/// Prototype matching and decoding for one query. `supports` pairs fused
/// support features with their image-resolution masks.
pub fn ncl_forward<T: Real>(
    tape: &mut Tape<T>,
    supports: &[(Var, &SupportMask)],
    query: Var,
    flags: NclFlags,
    decoder: &Decoder,
    params: &Bound,
) -> Result<NclTrace> {
    let Some((_, first)) = supports.first() else {
        return Err(Error::Contract(
            "ncl_forward needs at least one support".into(),
        ));
    };
    let (out_h, out_w) = (first.height, first.width);
    let grid = flags.pooling.grid();
    let pool = |tape: &mut Tape<T>, polarity| -> Result<PrototypeSet> {
        let sets = supports
            .iter()
            .map(|(f, m)| mask_pool(tape, *f, m, polarity, grid))
            .collect::<Result<Vec<_>>>()?;
        union(tape, sets)
    };
    let positive = pool(tape, Polarity::Positive)?;
    let sim_pos = cosine_branch(tape, query, &positive, flags.aggregation)?;
    let (negative, sim_neg) = if flags.use_n2p {
        let neg = pool(tape, Polarity::Negative)?;
        let sim = cosine_branch(tape, query, &neg, flags.aggregation)?;
        (Some(neg), Some(sim))
    } else {
        (None, None)
    };
    let (q_pos, q_neg) = match decoder.input {
        DecoderInput::Gated => {
            let qp = modulate(tape, query, sim_pos)?;
            let qn = match sim_neg {
                Some(s) => modulate(tape, query, s)?,
                None => tape.constant(Tensor::zeros(tape.shape(query).to_vec())),
            };
            (qp, qn)
        }
        DecoderInput::Similarity => {
            let s = tape.shape(sim_pos).to_vec();
            let qp = tape.reshape(sim_pos, &[1, s[0], s[1]])?;
            let qn = match sim_neg {
                Some(n) => tape.reshape(n, &[1, s[0], s[1]])?,
                None => tape.constant(Tensor::zeros([1, s[0], s[1]])),
            };
            (qp, qn)
        }
    };
    let logits = decoder.forward(tape, params, q_pos, q_neg, out_h, out_w)?;
    Ok(NclTrace {
        positive,
        negative,
        sim_pos,
        sim_neg,
        q_pos,
        q_neg,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_validation() {
        let m = SupportMask::new(2, 3, vec![1, 0, 1, 1, 1, 0]).unwrap();
        assert_eq!(SupportMask::from_pgm(&m.to_pgm()).unwrap(), m);
        assert!(SupportMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(SupportMask::from_pgm(b"P5\n1 1\n255\n\x80").is_err());
    }

    #[test]
    fn area_weights_rows_sum_to_one() {
        for (a, b) in [(60, 15), (7, 3), (5, 5), (3, 7)] {
            let m = area_weights(a, b);
            for row in m.chunks(a) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_region_is_reported() {
        let m = SupportMask::new(4, 4, vec![1; 16]).unwrap();
        let e = pooling_weights(&m, Polarity::Negative, 2, 2, 2).unwrap_err();
        assert!(matches!(
            e,
            Error::EmptyRegion {
                polarity: "negative"
            }
        ));
    }

    #[test]
    fn modulate_gate_values() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_fn(vec![2, 1, 2], |i| i as f64 + 1.0));
        for (s, k) in [(1.0, 1.0), (-1.0, 0.0), (0.0, 0.5)] {
            let sim = t.constant(Tensor::full([1, 2], s));
            let out = modulate(&mut t, q, sim).unwrap();
            let expect: Vec<f64> = t.value(q).data().iter().map(|v| v * k).collect();
            assert_eq!(t.value(out).data(), expect.as_slice());
        }
    }
}
