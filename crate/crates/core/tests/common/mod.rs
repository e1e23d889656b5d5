//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ncl_core::depth::DEFAULT_MAX_RANGE;
use ncl_core::proto::SupportMask;
use ncl_core::sim::raycast::Rect;
use ncl_core::tensor::Tensor;

/// Entry distance of the ray `o + t·d` into an axis-aligned box, by slabs.
pub fn slab_entry(o: &[f64], d: &[f64], lo: &[f64], hi: &[f64]) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..o.len() {
        if d[i] == 0.0 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 >= 0.0).then_some(t0)
}

/// Exit distance from inside a box.
pub fn slab_exit(o: &[f64], d: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..o.len())
        .filter(|&i| d[i] != 0.0)
        .map(|i| ((lo[i] - o[i]) / d[i]).max((hi[i] - o[i]) / d[i]))
        .fold(f64::INFINITY, f64::min)
}

/// Laser range from the origin inside `room` past solid `boxes`.
pub fn laser_oracle(room: &Rect, boxes: &[Rect], angle: f64) -> f64 {
    let d = [angle.cos(), angle.sin()];
    let o = [0.0, 0.0];
    let mut best = slab_exit(&o, &d, &[room.min.x, room.min.y], &[room.max.x, room.max.y]);
    for r in boxes {
        if let Some(t) = slab_entry(&o, &d, &[r.min.x, r.min.y], &[r.max.x, r.max.y]) {
            best = best.min(t);
        }
    }
    best.min(DEFAULT_MAX_RANGE)
}

/// Per-class IoU from explicit counts; an empty union scores 1.
pub fn oracle_iou(pred: &[u8], truth: &[u8]) -> (f64, f64, f64) {
    let class = |k: u8| {
        let mut conf = [[0usize; 2]; 2];
        for (&p, &t) in pred.iter().zip(truth) {
            conf[usize::from(p == k)][usize::from(t == k)] += 1;
        }
        let union = conf[1][1] + conf[1][0] + conf[0][1];
        if union == 0 {
            1.0
        } else {
            conf[1][1] as f64 / union as f64
        }
    };
    let (f, o) = (class(1), class(0));
    (f, o, (f + o) / 2.0)
}

/// Image-resolution mask built from whole `scale×scale` blocks of a
/// feature-resolution pattern.
pub fn cell_aligned(pattern: &[u8], h: usize, w: usize, scale: usize) -> SupportMask {
    let (hh, ww) = (h * scale, w * scale);
    let data = (0..hh * ww)
        .map(|i| pattern[(i / ww / scale) * w + (i % ww) / scale])
        .collect();
    SupportMask::new(hh, ww, data).unwrap()
}

/// Channel-wise mean of `feat[C×h×w]` over `cells`.
pub fn masked_mean(feat: &Tensor<f64>, cells: &[(usize, usize)]) -> Vec<f64> {
    let c = feat.shape()[0];
    (0..c)
        .map(|ch| {
            cells
                .iter()
                .map(|&(y, x)| feat.at(&[ch, y, x]))
                .sum::<f64>()
                / cells.len() as f64
        })
        .collect()
}
