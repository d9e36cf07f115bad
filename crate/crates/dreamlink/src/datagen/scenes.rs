//! Procedural scenes: flat-color backgrounds with 1–3 non-overlapping
//! geometric objects, rendered deterministically with 2× supersampling.
//!
//! Every scene is a pure function of `(seed, index)`. Object colors are
//! kept far from the background color (L1 distance ≥ 0.8) and objects
//! carry pairwise-distinct shapes and colors, so captions like "the circle"
//! are unambiguous and color-based region detection is reliable.

use crate::grid::{ImageGrid, RegionMask};
use crate::seeding::rng_for;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Base rendering resolution (square images).
pub const BASE_SIZE: usize = 64;
/// Supersampling factor per axis.
const SS: usize = 2;

/// Minimum L1 color distance between an object and its background.
pub const MIN_BG_SEPARATION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Sky,
    Grass,
    Water,
    Sand,
    Night,
}

pub const ALL_BACKGROUNDS: [Background; 5] = [
    Background::Sky,
    Background::Grass,
    Background::Water,
    Background::Sand,
    Background::Night,
];

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::Sky => [0.53, 0.80, 0.92],
            Background::Grass => [0.35, 0.75, 0.30],
            Background::Water => [0.15, 0.35, 0.75],
            Background::Sand => [0.90, 0.80, 0.55],
            Background::Night => [0.08, 0.08, 0.20],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Background::Sky => "sky",
            Background::Grass => "grass",
            Background::Water => "water",
            Background::Sand => "sand",
            Background::Night => "night",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Yellow,
    Blue,
    Green,
    Orange,
    Purple,
    Pink,
    Gray,
}

pub const ALL_COLORS: [Color; 8] = [
    Color::Red,
    Color::Yellow,
    Color::Blue,
    Color::Green,
    Color::Orange,
    Color::Purple,
    Color::Pink,
    Color::Gray,
];

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Yellow => [0.95, 0.85, 0.10],
            Color::Blue => [0.15, 0.25, 0.85],
            Color::Green => [0.10, 0.65, 0.20],
            Color::Orange => [0.95, 0.55, 0.10],
            Color::Purple => [0.55, 0.15, 0.70],
            Color::Pink => [0.95, 0.50, 0.75],
            Color::Gray => [0.50, 0.50, 0.50],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Pink => "pink",
            Color::Gray => "gray",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

pub const ALL_SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Tint {
    Warm,
    Cool,
}

pub const ALL_TINTS: [Tint; 2] = [Tint::Warm, Tint::Cool];

impl Tint {
    /// Per-channel multipliers.
    pub fn gains(self) -> [f64; 3] {
        match self {
            Tint::Warm => [1.10, 1.00, 0.85],
            Tint::Cool => [0.85, 1.00, 1.10],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Tint::Warm => "warm",
            Tint::Cool => "cool",
        }
    }
}

/// One scene object at base-resolution coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    /// Center, in pixels at [`BASE_SIZE`] resolution.
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub size: f64,
}

/// A complete renderable scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub tint: Option<Tint>,
}

fn l1_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Colors usable on a given background (far enough to detect reliably).
pub fn colors_for_background(bg: Background) -> Vec<Color> {
    ALL_COLORS
        .iter()
        .copied()
        .filter(|c| l1_dist(c.rgb(), bg.rgb()) >= MIN_BG_SEPARATION)
        .collect()
}

/// Snap to multiples of 1/64 px: exact in f64 and compact in JSON.
fn quantize_coord(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

/// Try to place a new object without overlapping existing ones. Returns
/// `None` when no free position is found within the attempt budget.
pub fn place_object(
    existing: &[ObjectSpec],
    shape: Shape,
    color: Color,
    rng: &mut ChaCha8Rng,
) -> Option<ObjectSpec> {
    for _ in 0..64 {
        let size = quantize_coord(rng.gen_range(7.0..11.0));
        let lo = size + 2.0;
        let hi = BASE_SIZE as f64 - size - 2.0;
        let cx = quantize_coord(rng.gen_range(lo..hi));
        let cy = quantize_coord(rng.gen_range(lo..hi));
        let clear = existing.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d > o.size + size + 2.0
        });
        if clear {
            return Some(ObjectSpec { shape, color, cx, cy, size });
        }
    }
    None
}

/// Deterministically generate the scene for `(seed, index)`.
pub fn synth_scene_spec(seed: u64, index: u64) -> SceneSpec {
    let mut rng = rng_for(seed, "scene", index);
    let background = *ALL_BACKGROUNDS.choose(&mut rng).expect("non-empty");
    let n_objects = rng.gen_range(1..=3usize);
    let mut shapes = ALL_SHAPES.to_vec();
    shapes.shuffle(&mut rng);
    let mut colors = colors_for_background(background);
    colors.shuffle(&mut rng);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    for i in 0..n_objects {
        if let Some(obj) = place_object(&objects, shapes[i], colors[i % colors.len()], &mut rng) {
            objects.push(obj);
        }
    }
    // Placement can fail only in pathological cases; one object always fits.
    if objects.is_empty() {
        objects.push(ObjectSpec {
            shape: shapes[0],
            color: colors[0],
            cx: BASE_SIZE as f64 / 2.0,
            cy: BASE_SIZE as f64 / 2.0,
            size: 9.0,
        });
    }
    SceneSpec {
        background,
        objects,
        tint: None,
    }
}

/// Point-in-shape test in base-resolution coordinates.
fn inside(obj: &ObjectSpec, x: f64, y: f64) -> bool {
    let dx = x - obj.cx;
    let dy = y - obj.cy;
    match obj.shape {
        Shape::Circle => dx * dx + dy * dy <= obj.size * obj.size,
        Shape::Square => {
            // Half-side chosen so the square fills its circumradius box.
            let h = obj.size * 0.82;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // Equilateral, apex up, circumradius `size`.
            let r = obj.size;
            let verts = [
                (0.0, -r),
                (r * 0.8660254037844386, r * 0.5),
                (-r * 0.8660254037844386, r * 0.5),
            ];
            point_in_polygon(dx, dy, &verts)
        }
        Shape::Star => {
            // Five-point star, apex up, inner radius 0.45·outer.
            let r = obj.size;
            let inner = 0.45 * r;
            let mut verts = Vec::with_capacity(10);
            for i in 0..10 {
                let ang = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                let rad = if i % 2 == 0 { r } else { inner };
                verts.push((rad * ang.cos(), rad * ang.sin()));
            }
            point_in_polygon(dx, dy, &verts)
        }
    }
}

/// Even-odd ray-casting point-in-polygon test.
fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut hit = false;
    let n = verts.len();
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let xcross = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < xcross {
                hit = !hit;
            }
        }
    }
    hit
}

/// Per-pixel coverage of one object in `[0,1]`, at base resolution with
/// 2×2 subsampling (values are multiples of 1/4).
pub fn object_coverage(obj: &ObjectSpec) -> ArrayD<f64> {
    let mut cov = ArrayD::zeros(IxDyn(&[BASE_SIZE, BASE_SIZE]));
    // Conservative bounding box to skip empty pixels.
    let r = obj.size + 1.0;
    let y0 = ((obj.cy - r).floor().max(0.0)) as usize;
    let y1 = ((obj.cy + r).ceil().min(BASE_SIZE as f64)) as usize;
    let x0 = ((obj.cx - r).floor().max(0.0)) as usize;
    let x1 = ((obj.cx + r).ceil().min(BASE_SIZE as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(obj, px, py) {
                        hits += 1;
                    }
                }
            }
            cov[[y, x]] = hits as f64 / (SS * SS) as f64;
        }
    }
    cov
}

/// Render a scene to an RGB image.
///
/// Objects never overlap, so each subsample belongs to at most one object;
/// pixel color is the coverage-weighted mix of object and background, with
/// any tint applied last.
pub fn render(scene: &SceneSpec) -> ImageGrid {
    let bg = scene.background.rgb();
    let mut img = ImageGrid::zeros(BASE_SIZE, BASE_SIZE);
    for ch in 0..3 {
        for y in 0..BASE_SIZE {
            for x in 0..BASE_SIZE {
                img.data[[ch, y, x]] = bg[ch];
            }
        }
    }
    for obj in &scene.objects {
        let cov = object_coverage(obj);
        let rgb = obj.color.rgb();
        for y in 0..BASE_SIZE {
            for x in 0..BASE_SIZE {
                let c = cov[[y, x]];
                if c > 0.0 {
                    for ch in 0..3 {
                        let v = img.data[[ch, y, x]];
                        img.data[[ch, y, x]] = c * rgb[ch] + (1.0 - c) * v;
                    }
                }
            }
        }
    }
    if let Some(t) = scene.tint {
        let g = t.gains();
        for ch in 0..3 {
            for y in 0..BASE_SIZE {
                for x in 0..BASE_SIZE {
                    img.data[[ch, y, x]] = (img.data[[ch, y, x]] * g[ch]).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Binary mask of pixels an object touches (coverage > 0).
pub fn object_mask(obj: &ObjectSpec) -> RegionMask {
    let cov = object_coverage(obj);
    RegionMask::new(cov.mapv(|c| if c > 0.0 { 1.0 } else { 0.0 })).expect("binary mask is valid")
}

/// Binary mask of pixels fully covered by any object (coverage == 1).
pub fn full_coverage_mask(scene: &SceneSpec) -> RegionMask {
    let mut m = ArrayD::zeros(IxDyn(&[BASE_SIZE, BASE_SIZE]));
    for obj in &scene.objects {
        let cov = object_coverage(obj);
        for y in 0..BASE_SIZE {
            for x in 0..BASE_SIZE {
                if cov[[y, x]] >= 1.0 {
                    m[[y, x]] = 1.0;
                }
            }
        }
    }
    RegionMask::new(m).expect("binary mask is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn scenes_are_deterministic() {
        let a = synth_scene_spec(42, 7);
        let b = synth_scene_spec(42, 7);
        assert_eq!(a, b);
        let ia = render(&a);
        let ib = render(&b);
        assert_eq!(ia.data, ib.data, "same (seed, index) must give identical pixels");
        assert_ne!(
            synth_scene_spec(42, 8),
            a,
            "different index should give a different scene (overwhelmingly)"
        );
    }

    #[test]
    fn objects_have_distinct_shapes_and_colors() {
        for idx in 0..200 {
            let s = synth_scene_spec(1, idx);
            assert!(!s.objects.is_empty() && s.objects.len() <= 3);
            let shapes: HashSet<_> = s.objects.iter().map(|o| o.shape).collect();
            let colors: HashSet<_> = s.objects.iter().map(|o| o.color).collect();
            assert_eq!(shapes.len(), s.objects.len(), "shapes must be distinct");
            assert_eq!(colors.len(), s.objects.len(), "colors must be distinct");
            for o in &s.objects {
                let d = super::l1_dist(o.color.rgb(), s.background.rgb());
                assert!(d >= MIN_BG_SEPARATION, "object color too close to background");
            }
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        for idx in 0..200 {
            let s = synth_scene_spec(3, idx);
            for i in 0..s.objects.len() {
                for j in (i + 1)..s.objects.len() {
                    let (a, b) = (&s.objects[i], &s.objects[j]);
                    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                    assert!(d > a.size + b.size, "objects {i},{j} overlap in scene {idx}");
                }
            }
        }
    }

    #[test]
    fn corpus_has_variety() {
        let mut bgs = HashSet::new();
        let mut shapes = HashSet::new();
        for idx in 0..1000 {
            let s = synth_scene_spec(5, idx);
            bgs.insert(s.background);
            for o in &s.objects {
                shapes.insert(o.shape);
            }
        }
        assert!(bgs.len() >= 3, "want >= 3 backgrounds, got {}", bgs.len());
        assert!(shapes.len() >= 3, "want >= 3 shapes, got {}", shapes.len());
    }

    #[test]
    fn coverage_quantized_to_quarter_steps() {
        let obj = ObjectSpec {
            shape: Shape::Circle,
            color: Color::Red,
            cx: 32.0,
            cy: 32.0,
            size: 10.0,
        };
        let cov = object_coverage(&obj);
        for &c in cov.iter() {
            let q = c * 4.0;
            assert!((q - q.round()).abs() < 1e-12, "coverage must be k/4, got {c}");
        }
        // Interior fully covered, far field empty.
        assert_eq!(cov[[32, 32]], 1.0);
        assert_eq!(cov[[2, 2]], 0.0);
    }

    #[test]
    fn rendered_shapes_classify_correctly() {
        // The region proposer classifies blobs by fill ratio and convexity;
        // every shape at every typical size and various subpixel offsets
        // must classify as itself.
        for size in [7.0, 8.5, 9.0, 10.0, 11.0] {
            for (dx, dy) in [(0.0, 0.0), (0.37, 0.0), (0.0, 0.61), (0.25, 0.25)] {
                for shape in ALL_SHAPES {
                    let obj = ObjectSpec {
                        shape,
                        color: Color::Red,
                        cx: 32.0 + dx,
                        cy: 32.0 + dy,
                        size,
                    };
                    let cov = object_coverage(&obj);
                    let mut pixels = Vec::new();
                    for y in 0..BASE_SIZE {
                        for x in 0..BASE_SIZE {
                            if cov[[y, x]] > 0.0 {
                                pixels.push((y, x));
                            }
                        }
                    }
                    let class = crate::datagen::region::classify_pixel_blob(&pixels);
                    assert_eq!(
                        class,
                        Some(shape),
                        "misclassified {shape:?} at size {size} offset ({dx},{dy})"
                    );
                }
            }
        }
    }

    #[test]
    fn tint_changes_all_pixels() {
        let mut s = synth_scene_spec(9, 0);
        let plain = render(&s);
        s.tint = Some(Tint::Warm);
        let tinted = render(&s);
        let mut changed = 0;
        for y in 0..BASE_SIZE {
            for x in 0..BASE_SIZE {
                if (0..3).any(|c| plain.data[[c, y, x]] != tinted.data[[c, y, x]]) {
                    changed += 1;
                }
            }
        }
        assert!(
            changed as f64 > 0.95 * (BASE_SIZE * BASE_SIZE) as f64,
            "tint must reach essentially every pixel, changed {changed}"
        );
    }
}
