//! Analytic 2-D ray casting against wall and obstacle segments.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

/// Axis-aligned rectangle footprint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, hx: f64, hy: f64) -> Self {
        Rect {
            min: Point::new(cx - hx, cy - hy),
            max: Point::new(cx + hx, cy + hy),
        }
    }

    /// Strict interior test.
    pub fn contains(&self, p: Point) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }

    pub fn edges(&self) -> [Segment; 4] {
        let (a, b) = (self.min, self.max);
        let c = [a, Point::new(b.x, a.y), b, Point::new(a.x, b.y)];
        [0, 1, 2, 3].map(|i| Segment {
            a: c[i],
            b: c[(i + 1) % 4],
        })
    }

    /// Gap between two rectangles' closest edges; negative when they overlap.
    pub fn clearance(&self, other: &Rect) -> f64 {
        let dx = (other.min.x - self.max.x).max(self.min.x - other.max.x);
        let dy = (other.min.y - self.max.y).max(self.min.y - other.max.y);
        dx.max(dy)
    }
}

/// Distance along `dir` (not necessarily unit) from `origin` to segment `s`,
/// in units of `|dir|`, when the ray meets it.
pub fn ray_segment(origin: Point, dir: Point, s: &Segment) -> Option<f64> {
    let e = Point::new(s.b.x - s.a.x, s.b.y - s.a.y);
    let denom = dir.x * e.y - dir.y * e.x;
    if denom == 0.0 {
        return None;
    }
    let w = Point::new(s.a.x - origin.x, s.a.y - origin.y);
    let t = (w.x * e.y - w.y * e.x) / denom;
    let u = (w.x * dir.y - w.y * dir.x) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Walls plus solid obstacle footprints.
#[derive(Clone, Debug, Default)]
pub struct FloorPlan {
    pub walls: Vec<Segment>,
    pub obstacles: Vec<Rect>,
}

impl FloorPlan {
    /// Range from `origin` along `angle` (radians, counter-clockwise from +x)
    /// to the nearest wall or obstacle edge, clipped to `max_range`.
    pub fn raycast(&self, origin: Point, angle: f64, max_range: f64) -> Result<f64> {
        if let Some(i) = self.obstacles.iter().position(|r| r.contains(origin)) {
            return Err(Error::Contract(format!(
                "ray origin lies inside obstacle {i}"
            )));
        }
        let dir = Point::new(angle.cos(), angle.sin());
        let mut best = max_range;
        let edges = self.obstacles.iter().flat_map(|r| r.edges());
        for s in self.walls.iter().copied().chain(edges) {
            if let Some(t) = ray_segment(origin, dir, &s) {
                best = best.min(t);
            }
        }
        Ok(best)
    }
}

/// Free-function form of [`FloorPlan::raycast`].
pub fn raycast(plan: &FloorPlan, origin: Point, angle: f64, max_range: f64) -> Result<f64> {
    plan.raycast(origin, angle, max_range)
}
