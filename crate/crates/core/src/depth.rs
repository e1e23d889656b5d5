//! 1-D laser scans and the two-stage attention encoder that lifts them to a
//! 2-D feature map on the RGB feature grid.
//!
//! Stage 1 attends over beams. Stage 2 resamples the beam axis to the grid
//! height with a learned row-stochastic matrix and attends over rows. The map
//! is `outer_add(height features, width-resampled FOV beams)` followed by a
//! 1×1 channel mix.
//!
//! Scan text format:
//!
//! ```text
//! beams=360,fov_start=135,fov_end=225,max_range=5.0
//! 4.9,4.87,...            (one line of `beams` values per scan)
//! ```

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, AttentionTrace, Conv2d};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BEAMS: usize = 360;
pub const DEFAULT_MAX_RANGE: f64 = 5.0;
pub const DEFAULT_FOV: (usize, usize) = (135, 225);

#[derive(Clone, Debug, PartialEq)]
pub struct DepthScan {
    values: Vec<f64>,
    pub fov_start: usize,
    pub fov_end: usize,
    pub max_range: f64,
}

impl DepthScan {
    /// Builds a scan, clipping values into `[0, max_range]`. Non-finite
    /// returns count as "nothing within range".
    pub fn new(values: Vec<f64>, fov_start: usize, fov_end: usize, max_range: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("scan has no beams".into()));
        }
        if !(max_range > 0.0 && max_range.is_finite()) {
            return Err(Error::Validation(format!(
                "max_range must be positive, got {max_range}"
            )));
        }
        if !(fov_start < fov_end && fov_end <= values.len()) {
            return Err(Error::Validation(format!(
                "fov [{fov_start}, {fov_end}) invalid for {} beams",
                values.len()
            )));
        }
        let values = values
            .into_iter()
            .map(|v| {
                if v.is_finite() {
                    v.clamp(0.0, max_range)
                } else {
                    max_range
                }
            })
            .collect();
        Ok(DepthScan {
            values,
            fov_start,
            fov_end,
            max_range,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn beam_count(&self) -> usize {
        self.values.len()
    }

    pub fn fov_len(&self) -> usize {
        self.fov_end - self.fov_start
    }

    /// Same geometry with different ranges.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        DepthScan::new(values, self.fov_start, self.fov_end, self.max_range)
    }

    pub fn header(&self) -> String {
        format!(
            "beams={},fov_start={},fov_end={},max_range={:?}",
            self.beam_count(),
            self.fov_start,
            self.fov_end,
            self.max_range
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// Parses every scan in a scan file.
pub fn parse_scans(text: &str) -> Result<Vec<DepthScan>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format("scan file", "empty input"))?;
    let (mut beams, mut fov_start, mut fov_end, mut max_range) = (None, None, None, None);
    for field in header.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format("scan file", format!("header field `{field}`")))?;
        let bad = || Error::format("scan file", format!("header value `{field}`"));
        match k.trim() {
            "beams" => beams = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "fov_start" => fov_start = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "fov_end" => fov_end = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "max_range" => max_range = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            other => {
                return Err(Error::format(
                    "scan file",
                    format!("unknown header key `{other}`"),
                ))
            }
        }
    }
    let missing = |k: &str| Error::format("scan file", format!("header lacks `{k}`"));
    let beams = beams.ok_or_else(|| missing("beams"))?;
    let fov_start = fov_start.ok_or_else(|| missing("fov_start"))?;
    let fov_end = fov_end.ok_or_else(|| missing("fov_end"))?;
    let max_range = max_range.ok_or_else(|| missing("max_range"))?;
    let mut scans = Vec::new();
    for (n, line) in lines.enumerate() {
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("scan file", format!("scan {n}: {e}")))?;
        if values.len() != beams {
            return Err(Error::format(
                "scan file",
                format!("scan {n} has {} values, header says {beams}", values.len()),
            ));
        }
        scans.push(DepthScan::new(values, fov_start, fov_end, max_range)?);
    }
    if scans.is_empty() {
        return Err(Error::format("scan file", "no scan lines"));
    }
    Ok(scans)
}

pub fn load_scan(path: &Path) -> Result<DepthScan> {
    Ok(parse_scans(&std::fs::read_to_string(path)?)?.swap_remove(0))
}

pub fn save_scan(path: &Path, scan: &DepthScan) -> Result<()> {
    std::fs::write(path, scan.to_text())?;
    Ok(())
}

/// Align-corners linear interpolation weights taking `n_in` samples to
/// `n_out`, as a row-major `[n_out × n_in]` matrix. Equal sizes give the
/// identity.
pub fn linear_resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for j in 0..n_out {
        let pos = if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n_in - 1);
        let frac = pos - lo as f64;
        m[j * n_in + lo] += 1.0 - frac;
        if frac > 0.0 {
            m[j * n_in + lo + 1] += frac;
        }
    }
    m
}

/// `[w × beams]` matrix resampling the FOV beams of a scan to `w` columns;
/// every out-of-FOV column of the matrix is zero.
pub fn fov_width_matrix(scan: &DepthScan, w: usize) -> Vec<f64> {
    let (b, n) = (scan.beam_count(), scan.fov_len());
    let inner = linear_resample_matrix(n, w);
    let mut m = vec![0.0; w * b];
    for j in 0..w {
        m[j * b + scan.fov_start..j * b + scan.fov_end].copy_from_slice(&inner[j * n..(j + 1) * n]);
    }
    m
}

/// The pseudo-2D baseline: FOV ranges resampled to `w` columns, divided by
/// `max_range`, and repeated down all `h` rows.
pub fn pseudo_2d_warp<T: Real>(scan: &DepthScan, h: usize, w: usize) -> Tensor<T> {
    let m = fov_width_matrix(scan, w);
    let b = scan.beam_count();
    let cols: Vec<f64> = (0..w)
        .map(|j| (0..b).map(|i| m[j * b + i] * scan.values[i]).sum::<f64>() / scan.max_range)
        .collect();
    Tensor::from_fn(vec![1, h, w], |i| T::lit(cols[i % w]))
}

/// Per-beam embedding `[beams × d_model]`: channel 0 is `range / max_range`,
/// then `sin(kθ), cos(kθ)` for `k = 1..=pairs` with `θ = 2π(i + ½)/beams`;
/// remaining channels are zero.
pub fn embed_scan<T: Real>(scan: &DepthScan, d_model: usize, pairs: usize) -> Result<Tensor<T>> {
    if d_model < 1 + 2 * pairs {
        return Err(Error::Config(format!(
            "d_model {d_model} cannot hold a range channel and {pairs} angle pairs"
        )));
    }
    let b = scan.beam_count();
    let mut data = vec![T::zero(); b * d_model];
    for (i, row) in data.chunks_mut(d_model).enumerate() {
        row[0] = T::lit(scan.values[i] / scan.max_range);
        let theta = TAU * (i as f64 + 0.5) / b as f64;
        for k in 1..=pairs {
            row[2 * k - 1] = T::lit((k as f64 * theta).sin());
            row[2 * k] = T::lit((k as f64 * theta).cos());
        }
    }
    Tensor::new([b, d_model], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthConfig {
    pub beams: usize,
    pub d_model: usize,
    pub angle_pairs: usize,
    /// The `m` of the beam-axis attention scaling; `None` means `d_model`.
    pub scale_dim: Option<f64>,
    /// Feature-grid height and width the map is produced on.
    pub rows: usize,
    pub cols: usize,
    pub out_channels: usize,
    pub use_h: bool,
    pub use_w: bool,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            beams: DEFAULT_BEAMS,
            d_model: 32,
            angle_pairs: 8,
            scale_dim: None,
            rows: 15,
            cols: 20,
            out_channels: 32,
            use_h: true,
            use_w: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerticalTrace {
    /// `softmax_rows(R)`, the learned beam→row resampling.
    pub resample: Var,
    /// `h_d1′ = softmax_rows(R) · h_d1`
    pub reshaped: Var,
    pub attention: AttentionTrace,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthTrace {
    pub embedding: Var,
    pub horizontal: Option<AttentionTrace>,
    pub h_d1: Var,
    pub vertical: Option<VerticalTrace>,
    /// `[rows × d_model]`, zeros when the vertical stage is disabled.
    pub height: Var,
    /// `[cols × d_model]` FOV beams of `h_d1` resampled to the grid width.
    pub width: Var,
    /// `[d_model × rows × cols]` before the channel mix.
    pub combined: Var,
    pub map: Var,
}

#[derive(Clone, Debug)]
pub struct DepthBackbone {
    pub cfg: DepthConfig,
    pub prefix: String,
    stage1: AttentionBlock,
    stage2: AttentionBlock,
    mix: Conv2d,
}

impl DepthBackbone {
    pub fn new(prefix: &str, cfg: DepthConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.scale_dim.unwrap_or(d as f64);
        DepthBackbone {
            stage1: AttentionBlock::new(format!("{prefix}.horizontal"), d, 2 * d, m),
            stage2: AttentionBlock::new(format!("{prefix}.vertical"), d, 2 * d, d as f64),
            mix: Conv2d::new(format!("{prefix}.mix"), d, cfg.out_channels, 1, 1),
            prefix: prefix.to_string(),
            cfg,
        }
    }

    fn resample_name(&self) -> String {
        format!("{}.row_resample", self.prefix)
    }

    /// Initializes every stage regardless of the ablation switches, in a
    /// fixed order, so configs seeded alike share their common weights.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stage1.init(store, rng);
        store.init_uniform(
            &self.resample_name(),
            &[self.cfg.rows, self.cfg.beams],
            self.cfg.beams,
            rng,
        );
        self.stage2.init(store, rng);
        self.mix.init(store, rng);
    }

    pub fn embed<T: Real>(&self, scan: &DepthScan) -> Result<Tensor<T>> {
        if scan.beam_count() != self.cfg.beams {
            return Err(Error::shape(
                "embed_scan",
                &[scan.beam_count()],
                &[self.cfg.beams],
            ));
        }
        embed_scan(scan, self.cfg.d_model, self.cfg.angle_pairs)
    }

    pub fn horizontal_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x_emb: Var,
    ) -> Result<AttentionTrace> {
        let s = tape.shape(x_emb);
        if s != [self.cfg.beams, self.cfg.d_model] {
            return Err(Error::shape(
                "horizontal_attention",
                s,
                &[self.cfg.beams, self.cfg.d_model],
            ));
        }
        self.stage1.forward(tape, p, x_emb)
    }

    pub fn vertical_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_d1: Var,
    ) -> Result<VerticalTrace> {
        if self.cfg.rows == 0 {
            return Err(Error::Config(
                "vertical attention needs a positive row count".into(),
            ));
        }
        let s = tape.shape(h_d1);
        if s != [self.cfg.beams, self.cfg.d_model] {
            return Err(Error::shape(
                "vertical_attention",
                s,
                &[self.cfg.beams, self.cfg.d_model],
            ));
        }
        let r = p.var(&self.resample_name())?;
        let resample = tape.softmax_rows(r)?;
        let reshaped = tape.matmul(resample, h_d1)?;
        let attention = self.stage2.forward(tape, p, reshaped)?;
        Ok(VerticalTrace {
            resample,
            reshaped,
            attention,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        scan: &DepthScan,
    ) -> Result<DepthTrace> {
        let cfg = &self.cfg;
        if cfg.rows == 0 || cfg.cols == 0 {
            return Err(Error::Config("depth map grid is not configured".into()));
        }
        if scan.fov_len() == 0 {
            return Err(Error::Validation("scan field of view is empty".into()));
        }
        let embedding = tape.constant(self.embed(scan)?);
        let horizontal = if cfg.use_h {
            Some(self.horizontal_attention(tape, p, embedding)?)
        } else {
            None
        };
        let h_d1 = horizontal.map_or(embedding, |t| t.output);
        let wm = Tensor::new(
            [cfg.cols, cfg.beams],
            fov_width_matrix(scan, cfg.cols)
                .into_iter()
                .map(T::lit)
                .collect(),
        )?;
        let wm = tape.constant(wm);
        let width = tape.matmul(wm, h_d1)?;
        let vertical = if cfg.use_w {
            Some(self.vertical_attention(tape, p, h_d1)?)
        } else {
            None
        };
        let height = match vertical {
            Some(v) => v.attention.output,
            None => tape.constant(Tensor::zeros([cfg.rows, cfg.d_model])),
        };
        let combined = tape.outer_add(height, width)?;
        let map = self.mix.forward(tape, p, combined)?;
        Ok(DepthTrace {
            embedding,
            horizontal,
            h_d1,
            vertical,
            height,
            width,
            combined,
            map,
        })
    }
}

/// `[out_channels × rows × cols]` depth features of `scan`.
pub fn depth_feature_map<T: Real>(
    tape: &mut Tape<T>,
    backbone: &DepthBackbone,
    params: &Bound,
    scan: &DepthScan,
) -> Result<Var> {
    Ok(backbone.forward(tape, params, scan)?.map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_scan(v: f64) -> DepthScan {
        DepthScan::new(vec![v; 360], 135, 225, 5.0).unwrap()
    }

    #[test]
    fn embedding_channels() {
        let e: Tensor<f64> = embed_scan(&constant_scan(5.0), 32, 8).unwrap();
        assert!((0..360).all(|i| e.at(&[i, 0]) == 1.0));
        let e: Tensor<f64> = embed_scan(&constant_scan(2.5), 32, 8).unwrap();
        assert_eq!(e.at(&[17, 0]), 0.5);
        let differs = (1..17).any(|c| (e.at(&[0, c]) - e.at(&[180, c])).abs() > 1e-3);
        assert!(differs);
        assert!((17..32).all(|c| e.at(&[3, c]) == 0.0));
    }

    #[test]
    fn warp_examples() {
        let w: Tensor<f64> = pseudo_2d_warp(&constant_scan(3.0), 4, 7);
        assert!(w.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));

        let mut vals = vec![0.0; 360];
        vals[10] = 1.0;
        vals[11] = 5.0;
        let s = DepthScan::new(vals, 10, 12, 5.0).unwrap();
        let w: Tensor<f64> = pseudo_2d_warp(&s, 2, 3);
        let row: Vec<f64> = w.data()[..3].to_vec();
        for (a, b) in row.iter().zip([0.2, 0.6, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(&w.data()[..3], &w.data()[3..]);
    }

    #[test]
    fn warp_of_fov_width_is_exact_copy() {
        let vals: Vec<f64> = (0..360).map(|i| (i % 50) as f64 / 10.0).collect();
        let s = DepthScan::new(vals.clone(), 135, 225, 5.0).unwrap();
        let w: Tensor<f64> = pseudo_2d_warp(&s, 1, 90);
        for j in 0..90 {
            assert_eq!(w.data()[j], vals[135 + j] / 5.0);
        }
    }

    #[test]
    fn scan_text_round_trip() {
        let vals: Vec<f64> = (0..360)
            .map(|i| 0.1 + (i as f64).sin().abs() * 4.0)
            .collect();
        let s = DepthScan::new(vals, 132, 228, 5.0).unwrap();
        let back = parse_scans(&s.to_text()).unwrap();
        assert_eq!(back, vec![s.clone()]);
        assert!(s
            .to_text()
            .starts_with("beams=360,fov_start=132,fov_end=228,max_range=5.0\n"));
    }

    #[test]
    fn scan_validation() {
        assert!(DepthScan::new(vec![1.0; 10], 5, 5, 5.0).is_err());
        assert!(DepthScan::new(vec![1.0; 10], 0, 11, 5.0).is_err());
        let s = DepthScan::new(vec![7.0, -1.0, f64::NAN], 0, 3, 5.0).unwrap();
        assert_eq!(s.values(), &[5.0, 0.0, 5.0]);
        assert!(parse_scans("beams=3,fov_start=0,fov_end=3,max_range=5.0\n1,2\n").is_err());
        assert!(parse_scans("beams=3,fov_start=0\n1,2,3\n").is_err());
    }
}
