//! Procedural indoor scenes: a rectangular room seen by a forward-facing
//! pinhole camera and a 360-beam planar laser, both at the origin facing +x.
//!
//! Floors carry the domain (carpet, tile, plastic, wood). Walls and obstacles
//! are drawn from style-independent distributions. Rendering casts one ray per
//! pixel against vertical prisms: walls, boxes and thin legs.

pub mod dataset;
pub mod raycast;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth::{DepthScan, DEFAULT_BEAMS, DEFAULT_FOV, DEFAULT_MAX_RANGE};
use crate::error::{Error, Result};
use crate::proto::SupportMask;
use crate::rgb::RgbImage;
use crate::tensor::Tensor;
use raycast::{FloorPlan, Point, Rect};

pub const LABEL_FLOOR: u8 = 0;
pub const LABEL_WALL: u8 = 1;
pub const LABEL_BOX: u8 = 2;
pub const LABEL_LEG: u8 = 3;

/// Leg sprites must stay below this fraction of the image.
pub const MAX_LEG_FRACTION: f64 = 0.01;
/// Largest hidden yaw offset between laser and camera, in beams.
pub const MAX_FOV_JITTER: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FloorStyle {
    CarpetDark,
    TileWhite,
    PlasticColor,
    Wood,
}

impl FloorStyle {
    pub const ALL: [FloorStyle; 4] = [
        FloorStyle::CarpetDark,
        FloorStyle::TileWhite,
        FloorStyle::PlasticColor,
        FloorStyle::Wood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FloorStyle::CarpetDark => "carpet_dark",
            FloorStyle::TileWhite => "tile_white",
            FloorStyle::PlasticColor => "plastic_color",
            FloorStyle::Wood => "wood",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FloorStyle::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown floor style `{s}`")))
    }

    /// Round-robin style of a scene seed.
    pub fn for_seed(seed: u64) -> Self {
        FloorStyle::ALL[(seed % 4) as usize]
    }
}

impl fmt::Display for FloorStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WallStyle {
    White,
    Beige,
    LightGray,
    PaleBlue,
}

impl WallStyle {
    pub const ALL: [WallStyle; 4] = [
        WallStyle::White,
        WallStyle::Beige,
        WallStyle::LightGray,
        WallStyle::PaleBlue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WallStyle::White => "white",
            WallStyle::Beige => "beige",
            WallStyle::LightGray => "light_gray",
            WallStyle::PaleBlue => "pale_blue",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            WallStyle::White => [0.92, 0.92, 0.9],
            WallStyle::Beige => [0.86, 0.8, 0.68],
            WallStyle::LightGray => [0.74, 0.75, 0.76],
            WallStyle::PaleBlue => [0.72, 0.8, 0.88],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObstacleKind {
    Box,
    ThinLeg,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub footprint: Rect,
    pub height: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub height: f64,
    /// Horizon row as a fraction of the image height.
    pub horizon: f64,
    pub hfov_deg: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            height: 0.8,
            horizon: 0.35,
            hfov_deg: 90.0,
        }
    }
}

impl Camera {
    pub fn focal(&self, w: usize) -> f64 {
        w as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub seed: u64,
    pub floor_style: FloorStyle,
    pub wall_style: WallStyle,
    pub room: Rect,
    pub obstacles: Vec<Obstacle>,
    pub camera: Camera,
    pub laser_height: f64,
    pub fov_jitter: i32,
    pub brightness: f64,
    pub floor_color: [f64; 3],
}

impl ScenePlan {
    pub fn floor_plan(&self) -> FloorPlan {
        FloorPlan {
            walls: self.room.edges().to_vec(),
            obstacles: self
                .obstacles
                .iter()
                .filter(|o| o.height > self.laser_height)
                .map(|o| o.footprint)
                .collect(),
        }
    }

    /// Counter-clockwise laser angle of beam `i` (radians). Beams sweep
    /// clockwise, so the camera FOV beams run left to right across the image.
    pub fn beam_angle(&self, i: usize, beams: usize) -> f64 {
        let deg_per_beam = 360.0 / beams as f64;
        -((i as f64 + 0.5 + self.fov_jitter as f64) * deg_per_beam - 180.0).to_radians()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub seed: u64,
    pub floor_style: FloorStyle,
    pub wall_style: WallStyle,
    pub fov_jitter: i32,
    pub boxes: usize,
    pub legs: usize,
    pub leg_pixels: usize,
}

impl SceneMeta {
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nfloor_style={}\nwall_style={}\nfov_jitter={}\nboxes={}\nlegs={}\nleg_pixels={}\n",
            self.seed,
            self.floor_style,
            self.wall_style.name(),
            self.fov_jitter,
            self.boxes,
            self.legs,
            self.leg_pixels
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("meta.txt", format!("line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format("meta.txt", format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<i64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("meta.txt", format!("bad integer for `{k}`")))
        };
        let wall = get("wall_style")?;
        Ok(SceneMeta {
            seed: num("seed")? as u64,
            floor_style: FloorStyle::parse(get("floor_style")?)?,
            wall_style: WallStyle::ALL
                .into_iter()
                .find(|w| w.name() == wall)
                .ok_or_else(|| Error::format("meta.txt", format!("unknown wall style `{wall}`")))?,
            fov_jitter: num("fov_jitter")? as i32,
            boxes: num("boxes")? as usize,
            legs: num("legs")? as usize,
            leg_pixels: num("leg_pixels")? as usize,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: RgbImage,
    pub scan: DepthScan,
    pub truth: SupportMask,
    /// 1 where a thin-leg sprite is visible.
    pub legs: SupportMask,
    pub meta: SceneMeta,
}

impl Sample {
    pub fn domain(&self) -> FloorStyle {
        self.meta.floor_style
    }
}

const BOX_PALETTE: [[f64; 3]; 8] = [
    [0.58, 0.42, 0.26],
    [0.3, 0.3, 0.34],
    [0.7, 0.14, 0.12],
    [0.16, 0.3, 0.62],
    [0.84, 0.84, 0.8],
    [0.16, 0.16, 0.17],
    [0.36, 0.54, 0.3],
    [0.72, 0.6, 0.25],
];

const LEG_PALETTE: [[f64; 3]; 4] = [
    [0.1, 0.1, 0.1],
    [0.32, 0.32, 0.34],
    [0.45, 0.3, 0.17],
    [0.6, 0.6, 0.62],
];

const PLASTIC_PALETTE: [[f64; 3]; 4] = [
    [0.2, 0.56, 0.3],
    [0.2, 0.4, 0.72],
    [0.66, 0.24, 0.2],
    [0.76, 0.66, 0.22],
];

fn jitter(c: [f64; 3], amount: f64, rng: &mut impl Rng) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Draws a random scene plan; thin legs are dropped until their sprites
/// cover less than [`MAX_LEG_FRACTION`] of an `h×w` image.
pub fn plan_scene(seed: u64, floor_style: FloorStyle, h: usize, w: usize) -> ScenePlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::default();
    let room = Rect {
        min: Point::new(rng.gen_range(-3.0..-1.0), rng.gen_range(-4.0..-1.5)),
        max: Point::new(rng.gen_range(3.0..7.5), rng.gen_range(1.5..4.0)),
    };
    let floor_color = match floor_style {
        FloorStyle::CarpetDark => jitter([0.2, 0.18, 0.23], 0.04, &mut rng),
        FloorStyle::TileWhite => jitter([0.86, 0.86, 0.84], 0.03, &mut rng),
        FloorStyle::PlasticColor => {
            jitter(*PLASTIC_PALETTE.choose(&mut rng).unwrap(), 0.05, &mut rng)
        }
        FloorStyle::Wood => jitter([0.55, 0.36, 0.2], 0.05, &mut rng),
    };
    let mut plan = ScenePlan {
        seed,
        floor_style,
        wall_style: *WallStyle::ALL.choose(&mut rng).unwrap(),
        room,
        obstacles: Vec::new(),
        camera,
        laser_height: 0.2,
        fov_jitter: rng.gen_range(-MAX_FOV_JITTER..=MAX_FOV_JITTER),
        brightness: rng.gen_range(0.85..1.15),
        floor_color,
    };
    let robot = Rect::centered(0.0, 0.0, 0.45, 0.45);
    let fits = |plan: &ScenePlan, r: &Rect, gap: f64| {
        r.min.x > room.min.x + 0.05
            && r.min.y > room.min.y + 0.05
            && r.max.x < room.max.x - 0.05
            && r.max.y < room.max.y - 0.05
            && r.clearance(&robot) > 0.0
            && plan
                .obstacles
                .iter()
                .all(|o| o.footprint.clearance(r) > gap)
    };
    let view = 40f64.to_radians();
    let n_boxes = rng.gen_range(1..=3);
    for _ in 0..n_boxes {
        for _ in 0..20 {
            let (hx, hy) = (rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5));
            let x = rng.gen_range(1.0..room.max.x.min(5.0));
            let y = x * rng.gen_range(-view..view).tan();
            let r = Rect::centered(x, y, hx, hy);
            if fits(&plan, &r, 0.15) {
                plan.obstacles.push(Obstacle {
                    kind: ObstacleKind::Box,
                    footprint: r,
                    height: rng.gen_range(0.35..1.3),
                    color: jitter(*BOX_PALETTE.choose(&mut rng).unwrap(), 0.05, &mut rng),
                });
                break;
            }
        }
    }
    let n_legs = if rng.gen_bool(0.75) {
        rng.gen_range(1..=3)
    } else {
        0
    };
    let f = camera.focal(w);
    for _ in 0..n_legs {
        for _ in 0..20 {
            let x = rng.gen_range(1.2..(room.max.x - 0.3).min(3.5));
            let y = x * rng.gen_range(-view..view).tan();
            let px = rng.gen_range(1.05..1.95);
            let half = px * x / f / 2.0;
            let r = Rect::centered(x, y, half, half);
            if fits(&plan, &r, 0.1) {
                plan.obstacles.push(Obstacle {
                    kind: ObstacleKind::ThinLeg,
                    footprint: r,
                    height: rng.gen_range(0.45..0.8),
                    color: jitter(*LEG_PALETTE.choose(&mut rng).unwrap(), 0.04, &mut rng),
                });
                break;
            }
        }
    }
    let limit = MAX_LEG_FRACTION * (h * w) as f64;
    while render_labels(&plan, h, w)
        .iter()
        .filter(|&&l| l == LABEL_LEG)
        .count() as f64
        >= limit
    {
        let last = plan
            .obstacles
            .iter()
            .rposition(|o| o.kind == ObstacleKind::ThinLeg)
            .unwrap();
        plan.obstacles.remove(last);
    }
    plan
}

/// What one pixel ray meets first.
#[derive(Clone, Copy, Debug)]
enum Hit {
    Floor { x: f64, y: f64 },
    Wall,
    Obstacle(usize),
}

fn interval(r: &Rect, slope: f64) -> Option<(f64, f64)> {
    // Ray (t, slope·t) for t ≥ 0.
    let (mut lo, mut hi) = (r.min.x.max(0.0), r.max.x);
    if slope == 0.0 {
        if !(r.min.y < 0.0 && 0.0 < r.max.y) {
            return None;
        }
    } else {
        let (a, b) = (r.min.y / slope, r.max.y / slope);
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (lo <= hi).then_some((lo, hi))
}

fn trace(plan: &ScenePlan, h: usize, w: usize) -> Vec<Hit> {
    let f = plan.camera.focal(w);
    let cy = plan.camera.horizon * h as f64;
    let hc = plan.camera.height;
    let mut hits = vec![Hit::Wall; h * w];
    for u in 0..w {
        let slope = -(u as f64 + 0.5 - w as f64 / 2.0) / f;
        let room = &plan.room;
        let mut t_wall = room.max.x;
        if slope > 0.0 {
            t_wall = t_wall.min(room.max.y / slope);
        } else if slope < 0.0 {
            t_wall = t_wall.min(room.min.y / slope);
        }
        let spans: Vec<(usize, f64, f64)> = plan
            .obstacles
            .iter()
            .enumerate()
            .filter_map(|(j, o)| interval(&o.footprint, slope).map(|(a, b)| (j, a, b)))
            .collect();
        for v in 0..h {
            let a = (v as f64 + 0.5 - cy) / f;
            let height_at = |t: f64| hc - a * t;
            let mut best = t_wall;
            let mut hit = Hit::Wall;
            if a > 0.0 && hc / a < best {
                best = hc / a;
                hit = Hit::Floor {
                    x: best,
                    y: slope * best,
                };
            }
            for &(j, t_in, t_out) in &spans {
                let top = plan.obstacles[j].height;
                let t = if height_at(t_in) <= top {
                    Some(t_in)
                } else if a > 0.0 && height_at(t_out) <= top {
                    Some((hc - top) / a)
                } else {
                    None
                };
                if let Some(t) = t.filter(|&t| t < best) {
                    best = t;
                    hit = Hit::Obstacle(j);
                }
            }
            hits[v * w + u] = hit;
        }
    }
    hits
}

/// Per-pixel labels (`LABEL_*`) of an `h×w` render.
pub fn render_labels(plan: &ScenePlan, h: usize, w: usize) -> Vec<u8> {
    trace(plan, h, w)
        .into_iter()
        .map(|hit| match hit {
            Hit::Floor { .. } => LABEL_FLOOR,
            Hit::Wall => LABEL_WALL,
            Hit::Obstacle(j) => match plan.obstacles[j].kind {
                ObstacleKind::Box => LABEL_BOX,
                ObstacleKind::ThinLeg => LABEL_LEG,
            },
        })
        .collect()
}

/// Freespace mask: floor pixels that are not within one pixel (8-neighbour)
/// of an obstacle pixel.
pub fn traversability_mask(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let obstacle = |y: usize, x: usize| matches!(labels[y * w + x], LABEL_BOX | LABEL_LEG);
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != LABEL_FLOOR {
                continue;
            }
            let near = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| obstacle(yy, xx)));
            mask[y * w + x] = u8::from(!near);
        }
    }
    mask
}

fn hash(seed: u64, a: i64, b: i64) -> f64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn floor_texture(plan: &ScenePlan, x: f64, y: f64) -> [f64; 3] {
    let c = plan.floor_color;
    let s = plan.seed;
    let scale = |k: f64| c.map(|v| v * k);
    match plan.floor_style {
        FloorStyle::CarpetDark => {
            let n = hash(s, (x / 0.02).floor() as i64, (y / 0.02).floor() as i64);
            scale(0.75 + 0.5 * n)
        }
        FloorStyle::TileWhite => {
            let (fx, fy) = ((x / 0.5).rem_euclid(1.0), (y / 0.5).rem_euclid(1.0));
            if fx < 0.05 || fy < 0.05 {
                [0.55, 0.55, 0.53]
            } else {
                let n = hash(s, (x / 0.5).floor() as i64, (y / 0.5).floor() as i64);
                scale(0.97 + 0.06 * n)
            }
        }
        FloorStyle::PlasticColor => {
            let n = hash(s, (x / 0.05).floor() as i64, (y / 0.05).floor() as i64);
            scale(0.94 + 0.12 * n)
        }
        FloorStyle::Wood => {
            let k = (y / 0.15).floor() as i64;
            if (y / 0.15).rem_euclid(1.0) < 0.06 {
                return scale(0.55);
            }
            let tone = 0.82 + 0.36 * hash(s, k, 7);
            let grain = 0.05 * (x * 37.0 + 6.0 * hash(s, k, 11)).sin();
            scale(tone + grain)
        }
    }
}

/// Renders a plan into a sample: image, scan, freespace mask and leg mask.
pub fn generate_scene(plan: &ScenePlan, h: usize, w: usize) -> Result<Sample> {
    let r = &plan.room;
    let f = plan.camera.focal(w);
    for (i, o) in plan.obstacles.iter().enumerate() {
        let fp = &o.footprint;
        if fp.min.x <= r.min.x || fp.min.y <= r.min.y || fp.max.x >= r.max.x || fp.max.y >= r.max.y
        {
            return Err(Error::Validation(format!(
                "obstacle {i} lies outside the room"
            )));
        }
        if o.kind == ObstacleKind::ThinLeg {
            let depth = (fp.min.x + fp.max.x) / 2.0;
            let px = f * (fp.max.x - fp.min.x) / depth;
            if !(1.0..=2.0).contains(&px) {
                return Err(Error::Validation(format!(
                    "thin leg {i} projects to {px:.2} px, not 1–2"
                )));
            }
        }
    }
    let hits = trace(plan, h, w);
    let labels = render_labels(plan, h, w);
    let mut rgb = vec![0f32; 3 * h * w];
    let wall = plan.wall_style.color();
    for (p, hit) in hits.iter().enumerate() {
        let base = match *hit {
            Hit::Floor { x, y } => floor_texture(plan, x, y),
            Hit::Wall => wall,
            Hit::Obstacle(j) => plan.obstacles[j].color,
        };
        let noise = 0.04 * (hash(plan.seed ^ 0xA5A5, p as i64, 3) - 0.5);
        for c in 0..3 {
            rgb[c * h * w + p] = (base[c] * plan.brightness + noise).clamp(0.0, 1.0) as f32;
        }
    }
    let fp = plan.floor_plan();
    let origin = Point::new(0.0, 0.0);
    let ranges = (0..DEFAULT_BEAMS)
        .map(|i| fp.raycast(origin, plan.beam_angle(i, DEFAULT_BEAMS), DEFAULT_MAX_RANGE))
        .collect::<Result<Vec<_>>>()?;
    let scan = DepthScan::new(ranges, DEFAULT_FOV.0, DEFAULT_FOV.1, DEFAULT_MAX_RANGE)?;
    let truth = SupportMask::new(h, w, traversability_mask(&labels, h, w))?;
    let legs = SupportMask::new(
        h,
        w,
        labels.iter().map(|&l| u8::from(l == LABEL_LEG)).collect(),
    )?;
    let count = |k| plan.obstacles.iter().filter(|o| o.kind == k).count();
    let meta = SceneMeta {
        seed: plan.seed,
        floor_style: plan.floor_style,
        wall_style: plan.wall_style,
        fov_jitter: plan.fov_jitter,
        boxes: count(ObstacleKind::Box),
        legs: count(ObstacleKind::ThinLeg),
        leg_pixels: legs.data().iter().filter(|&&v| v == 1).count(),
    };
    Ok(Sample {
        rgb: RgbImage::new(Tensor::new([3, h, w], rgb)?)?,
        scan,
        truth,
        legs,
        meta,
    })
}

/// Plans and renders the scene of `seed` with its round-robin floor style.
pub fn scene_for_seed(seed: u64, h: usize, w: usize) -> Result<Sample> {
    generate_scene(&plan_scene(seed, FloorStyle::for_seed(seed), h, w), h, w)
}
