//! Two-class IoU and thin-obstacle recall.

use crate::error::{Error, Result};
use crate::proto::SupportMask;

/// Intersection-over-union per class and their unweighted mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub free: f64,
    pub obstacle: f64,
    pub miou: f64,
}

/// Class IoU from a confusion count. A class absent from both masks scores 1.
fn class_iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn compute_iou(pred: &SupportMask, truth: &SupportMask) -> Result<Iou> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "compute_iou",
            &[pred.height, pred.width],
            &[truth.height, truth.width],
        ));
    }
    // c[p][t]: pixels predicted p with truth t.
    let mut c = [[0usize; 2]; 2];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        c[p as usize][t as usize] += 1;
    }
    let free = class_iou(c[1][1], c[1][1] + c[1][0] + c[0][1]);
    let obstacle = class_iou(c[0][0], c[0][0] + c[0][1] + c[1][0]);
    Ok(Iou {
        free,
        obstacle,
        miou: 0.5 * (free + obstacle),
    })
}

/// Obstacle predictions on marked pixels, as `(hits, marked)`. `marked` uses
/// 1 for a thin-leg pixel.
pub fn marked_recall(pred: &SupportMask, marked: &SupportMask) -> Result<(usize, usize)> {
    if (pred.height, pred.width) != (marked.height, marked.width) {
        return Err(Error::shape(
            "marked_recall",
            &[pred.height, pred.width],
            &[marked.height, marked.width],
        ));
    }
    let mut hits = 0;
    let mut total = 0;
    for (&p, &m) in pred.data().iter().zip(marked.data()) {
        if m == 1 {
            total += 1;
            hits += usize::from(p == 0);
        }
    }
    Ok((hits, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> SupportMask {
        SupportMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_and_complementary() {
        let t = mask(2, 2, &[1, 0, 1, 1]);
        let same = compute_iou(&t, &t).unwrap();
        assert_eq!((same.free, same.obstacle, same.miou), (1.0, 1.0, 1.0));
        let opp = compute_iou(&t.complement(), &t).unwrap();
        assert_eq!((opp.free, opp.obstacle, opp.miou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_split_predicted_all_free() {
        let t = mask(2, 2, &[1, 1, 0, 0]);
        let r = compute_iou(&mask(2, 2, &[1; 4]), &t).unwrap();
        assert_eq!((r.free, r.obstacle, r.miou), (0.5, 0.0, 0.25));
    }

    #[test]
    fn absent_class_conventions() {
        let all_free = mask(1, 3, &[1, 1, 1]);
        let r = compute_iou(&all_free, &all_free).unwrap();
        assert_eq!(r.obstacle, 1.0);
        let r = compute_iou(&mask(1, 3, &[1, 0, 1]), &all_free).unwrap();
        assert_eq!(r.obstacle, 0.0);
        assert!(compute_iou(&all_free, &mask(3, 1, &[1, 1, 1])).is_err());
    }

    #[test]
    fn recall_counts_obstacle_hits() {
        let legs = mask(1, 4, &[0, 1, 1, 0]);
        let pred = mask(1, 4, &[0, 0, 1, 1]);
        assert_eq!(marked_recall(&pred, &legs).unwrap(), (1, 2));
    }
}
