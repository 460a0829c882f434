//! Procedural paired scenes.
//!
//! A scene is a flat top-down layout (roads, sidewalks, lane markers,
//! building footprints, tree crowns and the ego car) described in
//! normalized `[0, 1]` coordinates. The aerial view samples it directly. The
//! lower half of the ground view samples it through the fixed ground-plane
//! homography; the upper half holds sky, a hazy far-ground strip, building
//! facades and tree crowns derived from the content near the far edge of
//! the visible ground plane. A car hood covers the bottom center.
//!
//! Shape edges are soft over 1.5 aerial pixels so that bilinear resampling
//! of the aerial raster tracks the analytic ground rendering closely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PaletteSpec, PairedSample, Split};
use crate::geometry::{estimate_homography, Correspondences, Homography};
use crate::image::Image;
#[cfg(test)]
use crate::image::Mask;
use crate::{Error, Result};

/// Scene categories; a category fixes the road layout and the theme.
pub const SCENE_CLASSES: [&str; 8] = [
    "straight-downtown",
    "straight-residential",
    "straight-park",
    "straight-open",
    "cross-downtown",
    "cross-residential",
    "cross-park",
    "cross-open",
];

const EDGE_PX: f64 = 1.5;
const ROAD_HALF: f64 = 0.09;
const SIDEWALK: f64 = 0.035;
const CAR_CENTER: (f64, f64) = (0.5, 0.65);
const CAR_HALF: (f64, f64) = (0.028, 0.09);
const NEAR_HALF_WIDTH: f64 = 0.07;
const NEAR_ROW: f64 = 0.6;
const HOOD_CENTER: (f64, f64) = (0.5, 1.02);
const HOOD_RADII: (f64, f64) = (0.234, 0.273);
/// Depth of the aerial strip (from the far edge) whose buildings and trees
/// rise above the far-ground strip in the ground view.
const SKYLINE_DEPTH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneClass(pub usize);

impl SceneClass {
    pub fn name(&self) -> &'static str {
        SCENE_CLASSES[self.0]
    }

    fn crossing(&self) -> bool {
        self.0 >= 4
    }

    fn theme(&self) -> Theme {
        match self.0 % 4 {
            0 => Theme::Downtown,
            1 => Theme::Residential,
            2 => Theme::Park,
            _ => Theme::Open,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Theme {
    Downtown,
    Residential,
    Park,
    Open,
}

#[derive(Debug, Clone, Copy)]
enum Geom {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Geom {
    /// Signed distance, negative inside.
    fn sdf(&self, u: f64, v: f64) -> f64 {
        match *self {
            Geom::Rect { x0, y0, x1, y1 } => {
                let dx = (x0 - u).max(u - x1);
                let dy = (y0 - v).max(v - y1);
                if dx > 0.0 || dy > 0.0 {
                    (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
                } else {
                    dx.max(dy)
                }
            }
            Geom::Disc { cx, cy, r } => ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() - r,
        }
    }

    fn overlaps(&self, other: &Geom, margin: f64) -> bool {
        let (a, b) = (self.bounds(), other.bounds());
        a.0 - margin < b.2 && b.0 - margin < a.2 && a.1 - margin < b.3 && b.1 - margin < a.3
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geom::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Geom::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    geom: Geom,
    color: [f64; 3],
    class: usize,
}

#[derive(Debug, Clone, Copy)]
struct Building {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    height: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Tree {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

/// Declarative scene description shared by both views.
#[derive(Debug, Clone)]
pub struct Scene {
    pub class: SceneClass,
    base_color: [f64; 3],
    texture_phase: (f64, f64),
    layers: Vec<Shape>,
    buildings: Vec<Building>,
    trees: Vec<Tree>,
    car_color: [f64; 3],
    sky_top: [f64; 3],
    sky_horizon: [f64; 3],
    ids: ClassIds,
}

#[derive(Debug, Clone, Copy)]
struct ClassIds {
    road: usize,
    sidewalk: usize,
    building: usize,
    vegetation: usize,
    terrain: usize,
    sky: usize,
    car: usize,
}

impl ClassIds {
    fn from_palette(p: &PaletteSpec) -> Self {
        let id = |n: &str| p.index_of(n).expect("default palette class");
        Self {
            road: id("road"),
            sidewalk: id("sidewalk"),
            building: id("building"),
            vegetation: id("vegetation"),
            terrain: id("terrain"),
            sky: id("sky"),
            car: id("car"),
        }
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn coverage(d: f64, soft: f64) -> f64 {
    (0.5 - d / soft).clamp(0.0, 1.0)
}

impl Scene {
    pub fn generate(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
        let class = SceneClass(rng.random_range(0..SCENE_CLASSES.len()));
        Scene::generate_class(class, &mut rng)
    }

    fn generate_class(class: SceneClass, rng: &mut ChaCha8Rng) -> Scene {
        let ids = ClassIds::from_palette(&PaletteSpec::default());
        let theme = class.theme();
        let base = match theme {
            Theme::Downtown => [0.56, 0.54, 0.5],
            Theme::Residential => [0.38, 0.56, 0.3],
            Theme::Park => [0.24, 0.5, 0.2],
            Theme::Open => [0.68, 0.62, 0.4],
        };
        let base_color = jitter_color(rng, base, 0.04);
        let texture_phase = (rng.random::<f64>(), rng.random::<f64>());

        let asphalt = jitter_color(rng, [0.3, 0.3, 0.33], 0.03);
        let pavement = jitter_color(rng, [0.72, 0.7, 0.66], 0.04);
        let with_sidewalk = matches!(theme, Theme::Downtown | Theme::Residential);
        let cross_y = rng.random_range(0.12..0.35);

        let mut layers = Vec::new();
        let mut blocked: Vec<Geom> = Vec::new();
        let vertical = |half: f64| Geom::Rect {
            x0: 0.5 - half,
            y0: -1.0,
            x1: 0.5 + half,
            y1: 2.0,
        };
        let horizontal = |half: f64| Geom::Rect {
            x0: -1.0,
            y0: cross_y - half,
            x1: 2.0,
            y1: cross_y + half,
        };
        let outer = if with_sidewalk { ROAD_HALF + SIDEWALK } else { ROAD_HALF };
        blocked.push(vertical(outer));
        if class.crossing() {
            blocked.push(horizontal(outer));
        }
        if with_sidewalk {
            layers.push(Shape { geom: vertical(outer), color: pavement, class: ids.sidewalk });
            if class.crossing() {
                layers.push(Shape { geom: horizontal(outer), color: pavement, class: ids.sidewalk });
            }
        }
        layers.push(Shape { geom: vertical(ROAD_HALF), color: asphalt, class: ids.road });
        if class.crossing() {
            layers.push(Shape { geom: horizontal(ROAD_HALF), color: asphalt, class: ids.road });
        }

        let paint = if rng.random_bool(0.5) {
            [0.95, 0.95, 0.92]
        } else {
            [0.93, 0.8, 0.25]
        };
        let phase = rng.random_range(0.0..0.14);
        let mut y = phase - 0.14;
        while y < 1.05 {
            let dash = Geom::Rect { x0: 0.494, y0: y, x1: 0.506, y1: y + 0.06 };
            let in_crossing = class.crossing() && (y + 0.06 > cross_y - ROAD_HALF && y < cross_y + ROAD_HALF);
            if !in_crossing {
                layers.push(Shape { geom: dash, color: paint, class: ids.road });
            }
            y += 0.14;
        }

        let car = Geom::Rect {
            x0: CAR_CENTER.0 - CAR_HALF.0,
            y0: CAR_CENTER.1 - CAR_HALF.1,
            x1: CAR_CENTER.0 + CAR_HALF.0,
            y1: CAR_CENTER.1 + CAR_HALF.1,
        };
        blocked.push(car);

        let (n_buildings, size_range) = match theme {
            Theme::Downtown => (rng.random_range(9..=13), (0.1, 0.22)),
            Theme::Residential => (rng.random_range(5..=8), (0.07, 0.13)),
            Theme::Park => (rng.random_range(0..=1), (0.06, 0.1)),
            Theme::Open => (rng.random_range(0..=2), (0.05, 0.09)),
        };
        let roofs: &[[f64; 3]] = match theme {
            Theme::Downtown => &[[0.42, 0.44, 0.5], [0.6, 0.6, 0.62], [0.35, 0.33, 0.32], [0.52, 0.48, 0.6]],
            _ => &[[0.62, 0.27, 0.2], [0.5, 0.35, 0.25], [0.45, 0.45, 0.48], [0.7, 0.5, 0.35]],
        };
        let mut buildings = Vec::new();
        for _ in 0..400 {
            if buildings.len() >= n_buildings {
                break;
            }
            let w = rng.random_range(size_range.0..size_range.1);
            let h = rng.random_range(size_range.0..size_range.1);
            let x0 = rng.random_range(-0.05..1.05 - w);
            let y0 = rng.random_range(-0.05..1.05 - h);
            let g = Geom::Rect { x0, y0, x1: x0 + w, y1: y0 + h };
            if blocked.iter().any(|b| g.overlaps(b, 0.02)) {
                continue;
            }
            blocked.push(g);
            let base = roofs[rng.random_range(0..roofs.len())];
            let color = jitter_color(rng, base, 0.05);
            buildings.push(Building {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
                height: rng.random_range(0.35..0.9),
                color,
            });
            layers.push(Shape { geom: g, color, class: ids.building });
        }

        let n_trees = match theme {
            Theme::Downtown => rng.random_range(0..=3),
            Theme::Residential => rng.random_range(6..=10),
            Theme::Park => rng.random_range(14..=22),
            Theme::Open => rng.random_range(2..=5),
        };
        let mut trees = Vec::new();
        for _ in 0..400 {
            if trees.len() >= n_trees {
                break;
            }
            let r = rng.random_range(0.025..0.055);
            let cx = rng.random_range(0.0..1.0);
            let cy = rng.random_range(0.0..1.0);
            let g = Geom::Disc { cx, cy, r };
            if blocked.iter().any(|b| g.overlaps(b, 0.01)) {
                continue;
            }
            let color = jitter_color(rng, [0.16, 0.42, 0.14], 0.06);
            trees.push(Tree { cx, cy, r, color });
            layers.push(Shape { geom: g, color, class: ids.vegetation });
        }

        let car_palette = [
            [0.8, 0.12, 0.1],
            [0.12, 0.25, 0.75],
            [0.9, 0.9, 0.88],
            [0.95, 0.75, 0.1],
            [0.1, 0.1, 0.12],
            [0.2, 0.6, 0.3],
        ];
        let base = car_palette[rng.random_range(0..car_palette.len())];
        let car_color = jitter_color(rng, base, 0.04);
        layers.push(Shape { geom: car, color: car_color, class: ids.car });

        let sky_top = jitter_color(rng, [0.3, 0.5, 0.85], 0.05);
        let sky_horizon = jitter_color(rng, [0.78, 0.86, 0.95], 0.03);

        Scene {
            class,
            base_color,
            texture_phase,
            layers,
            buildings,
            trees,
            car_color,
            sky_top,
            sky_horizon,
            ids,
        }
    }

    /// Color in `[0, 1]` and class index at a normalized ground-plane point.
    /// `soft` is the edge width in normalized units.
    pub fn ground_plane(&self, u: f64, v: f64, soft: f64) -> ([f64; 3], usize) {
        let tau = std::f64::consts::TAU;
        let tex = 0.035
            * (tau * (2.0 * u + self.texture_phase.0)).sin()
            * (tau * (1.5 * v + self.texture_phase.1)).sin();
        let mut color = self.base_color.map(|c| c + tex);
        let mut class = self.ids.terrain;
        for s in &self.layers {
            let d = s.geom.sdf(u, v);
            let a = coverage(d, soft);
            if a > 0.0 {
                color = lerp3(color, s.color, a);
            }
            if d <= 0.0 {
                class = s.class;
            }
        }
        (color, class)
    }
}

/// Four aerial points and the ground-view pixels they are seen at: the far
/// edge of the aerial frame maps to the middle row of the ground view and
/// a narrow segment just ahead of the car maps to the bottom row.
pub fn synth_correspondences(size: usize) -> Correspondences {
    let l = (size - 1) as f64;
    let half = (size / 2) as f64;
    let c = l / 2.0;
    let nw = NEAR_HALF_WIDTH * l;
    let ny = NEAR_ROW * l;
    Correspondences {
        source: [(0.0, 0.0), (l, 0.0), (c + nw, ny), (c - nw, ny)],
        target: [(0.0, half), (l, half), (l, l), (0.0, l)],
    }
}

pub fn synth_homography(size: usize) -> Homography {
    estimate_homography(&synth_correspondences(size)).expect("fixed correspondences are valid")
}

fn to_unit(c: [f64; 3]) -> [f32; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32)
}

struct Rendered {
    aerial: Image,
    aerial_seg: Image,
    ground: Image,
    ground_seg: Image,
}

fn hood_distance(size: usize, row: usize, col: usize) -> f64 {
    let l = (size - 1) as f64;
    let (cx, cy) = (HOOD_CENTER.0 * l, HOOD_CENTER.1 * l);
    let (rx, ry) = (HOOD_RADII.0 * l, HOOD_RADII.1 * l);
    let f = (((col as f64 - cx) / rx).powi(2) + ((row as f64 - cy) / ry).powi(2)).sqrt();
    (f - 1.0) * rx.min(ry)
}

/// Ground-view pixels that show the ground plane: the lower half minus any
/// pixel touched by the hood.
#[cfg(test)]
pub(crate) fn ground_plane_mask(size: usize) -> Mask {
    Mask::from_fn(size, size, |r, c| {
        r >= size / 2 && coverage(hood_distance(size, r, c), EDGE_PX) == 0.0
    })
}

impl Scene {
    fn render(&self, size: usize, h: &Homography) -> Rendered {
        let palette = PaletteSpec::default();
        let seg_color = |class: usize| palette.color_normalized(class);
        let l = (size - 1) as f64;
        let soft = EDGE_PX / l;

        let mut aerial = Image::filled(3, size, size, 0.0);
        let mut aerial_seg = Image::filled(3, size, size, 0.0);
        for r in 0..size {
            for c in 0..size {
                let (color, class) = self.ground_plane(c as f64 / l, r as f64 / l, soft);
                aerial.set_rgb(r, c, to_unit(color));
                aerial_seg.set_rgb(r, c, seg_color(class));
            }
        }

        let inv = h.inverse();
        let half = size / 2;
        let mut ground = Image::filled(3, size, size, 0.0);
        let mut ground_seg = Image::filled(3, size, size, 0.0);

        // lower half: the ground plane seen through the homography, then the hood
        for r in half..size {
            for c in 0..size {
                let (x, y) = inv.apply(c as f64, r as f64).expect("lower half maps into the aerial frame");
                let (mut color, mut class) = self.ground_plane(x / l, y / l, soft);
                let d = hood_distance(size, r, c);
                let a = coverage(d, EDGE_PX);
                if a > 0.0 {
                    let top = (HOOD_CENTER.1 - HOOD_RADII.1) * l;
                    let t = ((r as f64 - top) / (HOOD_RADII.1 * l)).clamp(0.0, 1.0);
                    let shade = self.car_color.map(|v| v * (1.1 - 0.45 * t));
                    color = lerp3(color, shade, a);
                    if d <= 0.0 {
                        class = self.ids.car;
                    }
                }
                ground.set_rgb(r, c, to_unit(color));
                ground_seg.set_rgb(r, c, seg_color(class));
            }
        }

        // upper half: sky, far-ground strip, facades and crowns
        let horizon = (0.4 * size as f64).round() as usize;
        let far_u: Vec<f64> = (0..size)
            .map(|c| inv.apply(c as f64, half as f64).map_or(c as f64, |p| p.0) / l)
            .collect();
        let haze = [0.72, 0.76, 0.8];
        let mut facades: Vec<&Building> = self.buildings.iter().filter(|b| b.y0 < SKYLINE_DEPTH).collect();
        facades.sort_by(|a, b| a.y1.partial_cmp(&b.y1).unwrap());
        let crowns: Vec<&Tree> = self.trees.iter().filter(|t| t.cy - t.r < SKYLINE_DEPTH).collect();
        let stripe = (0.05 * size as f64).max(2.0);
        for r in 0..half {
            for c in 0..size {
                let u = far_u[c];
                let (mut color, mut class) = if r < horizon {
                    let t = r as f64 / horizon.max(1) as f64;
                    (lerp3(self.sky_top, self.sky_horizon, t), self.ids.sky)
                } else {
                    let (col, cls) = self.ground_plane(u, 0.0, soft);
                    let t = 0.55 * (half - r) as f64 / (half - horizon).max(1) as f64;
                    (lerp3(col, haze, t), cls)
                };
                for b in &facades {
                    let top = half as f64 - b.height * 0.75 * half as f64;
                    let du = (b.x0 - u).max(u - b.x1);
                    let a = coverage(du, soft) * coverage(top - r as f64, EDGE_PX);
                    if a > 0.0 {
                        let floors = 1.0 - 0.08 * (0.5 + 0.5 * (std::f64::consts::TAU * r as f64 / stripe).cos());
                        let wall = b.color.map(|v| v * 0.78 * floors);
                        color = lerp3(color, wall, a);
                        if du <= 0.0 && r as f64 >= top {
                            class = self.ids.building;
                        }
                    }
                }
                for t in &crowns {
                    let cy = half as f64 * (1.0 - 0.3);
                    let (ru, rv) = (t.r * 1.3, 0.18 * half as f64);
                    let f = (((u - t.cx) / ru).powi(2) + ((r as f64 - cy) / rv).powi(2)).sqrt();
                    let d = (f - 1.0) * rv;
                    let a = coverage(d, EDGE_PX);
                    if a > 0.0 {
                        color = lerp3(color, t.color, a);
                        if d <= 0.0 {
                            class = self.ids.vegetation;
                        }
                    }
                }
                ground.set_rgb(r, c, to_unit(color));
                ground_seg.set_rgb(r, c, seg_color(class));
            }
        }

        Rendered {
            aerial,
            aerial_seg,
            ground,
            ground_seg,
        }
    }
}

/// Renders the scene for `seed` at `size` (64 or 256).
pub fn synth_scene(seed: u64, size: usize) -> Result<PairedSample> {
    if size != 64 && size != 256 {
        return Err(Error::Config(format!(
            "synthetic scenes are rendered at 64 or 256 px, not {size}"
        )));
    }
    let scene = Scene::generate(seed);
    let r = scene.render(size, &synth_homography(size));
    Ok(PairedSample {
        id: format!("scene-{seed}"),
        aerial: r.aerial,
        ground: r.ground,
        ground_seg: r.ground_seg,
        aerial_seg: Some(r.aerial_seg),
        warped_aerial: None,
        label: Some(scene.class.0),
    })
}

/// `n` scenes with ids `s00000...`; the last `round(n * test_fraction)`
/// samples form the test split.
pub fn synth_dataset(n: usize, seed: u64, size: usize, test_fraction: f64) -> Result<Vec<(PairedSample, Split)>> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    (0..n)
        .map(|i| {
            let scene_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut s = synth_scene(scene_seed, size)?;
            s.id = format!("s{i:05}");
            let split = if i + n_test >= n { Split::Test } else { Split::Train };
            Ok((s, split))
        })
        .collect()
}
