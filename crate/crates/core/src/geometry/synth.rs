//! Synthetic image pairs with exact ground truth.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_homography, Homography, HomographyBounds, RelativePose};
use crate::attention::GridDims;
use crate::error::{invalid, Error, Result};
use crate::imageio::Image;

/// An infinite 2D intensity field.
pub trait Texture: Sync {
    fn value(&self, x: f64, y: f64) -> f64;
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(octave ^ mix64(ix as u64 ^ mix64(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Debug)]
enum Shape {
    Polygon(Vec<[f64; 2]>),
    Ellipse { c: [f64; 2], a: f64, b: f64, angle: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Polygon(v) => (0..v.len()).all(|i| {
                let (p, q) = (v[i], v[(i + 1) % v.len()]);
                (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]) >= 0.0
            }),
            Shape::Ellipse { c, a, b, angle } => {
                let (s, co) = angle.sin_cos();
                let (dx, dy) = (x - c[0], y - c[1]);
                let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }
}

/// Value-noise octaves overlaid with random convex polygons and ellipses.
pub struct ProceduralTexture {
    seed: u64,
    octaves: u32,
    base_period: f64,
    shapes: Vec<(Shape, f64)>,
    bins: Vec<Vec<u32>>,
    origin: [f64; 2],
    bin: f64,
    nbins: [usize; 2],
}

impl ProceduralTexture {
    /// Shapes cover `[-w/2, 1.5w] × [-h/2, 1.5h]`; beyond that only noise.
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let origin = [-w / 2.0, -h / 2.0];
        let extent = [2.0 * w, 2.0 * h];
        let n = (200.0 * extent[0] * extent[1] / (256.0 * 256.0 * 4.0)).ceil() as usize;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let c = [origin[0] + rng.random::<f64>() * extent[0], origin[1] + rng.random::<f64>() * extent[1]];
            let r = 4.0 * (rng.random::<f64>() * (28.0f64 / 4.0).ln()).exp();
            let shade = rng.random::<f64>();
            let shape = if rng.random_bool(0.6) {
                let k = rng.random_range(3..=6);
                let mut ang: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
                ang.sort_by(f64::total_cmp);
                let rad = r * rng.random_range(0.6..1.0);
                Shape::Polygon(ang.iter().map(|a| [c[0] + rad * a.cos(), c[1] + rad * a.sin()]).collect())
            } else {
                Shape::Ellipse {
                    c,
                    a: r,
                    b: r * rng.random_range(0.3..1.0),
                    angle: rng.random::<f64>() * std::f64::consts::PI,
                }
            };
            shapes.push((shape, shade));
        }
        let bin = 32.0;
        let nbins = [(extent[0] / bin).ceil() as usize, (extent[1] / bin).ceil() as usize];
        let mut bins = vec![Vec::new(); nbins[0] * nbins[1]];
        for (i, (s, _)) in shapes.iter().enumerate() {
            let (lo, hi) = match s {
                Shape::Polygon(v) => v.iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), p| {
                    ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
                }),
                Shape::Ellipse { c, a, .. } => ([c[0] - a, c[1] - a], [c[0] + a, c[1] + a]),
            };
            let to_bin = |v: f64, o: f64, n: usize| (((v - o) / bin).floor().max(0.0) as usize).min(n - 1);
            for by in to_bin(lo[1], origin[1], nbins[1])..=to_bin(hi[1], origin[1], nbins[1]) {
                for bx in to_bin(lo[0], origin[0], nbins[0])..=to_bin(hi[0], origin[0], nbins[0]) {
                    bins[by * nbins[0] + bx].push(i as u32);
                }
            }
        }
        Self { seed, octaves: 5, base_period: 48.0, shapes, bins, origin, bin, nbins }
    }

    fn noise(&self, x: f64, y: f64) -> f64 {
        let (mut sum, mut norm, mut amp, mut period) = (0.0, 0.0, 1.0, self.base_period);
        for o in 0..self.octaves {
            let (u, v) = (x / period, y / period);
            let (ix, iy) = (u.floor(), v.floor());
            let (fx, fy) = (u - ix, v - iy);
            let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            let (ix, iy) = (ix as i64, iy as i64);
            let l = |dx, dy| lattice(self.seed, o as u64, ix + dx, iy + dy);
            let top = l(0, 0) + (l(1, 0) - l(0, 0)) * sx;
            let bot = l(0, 1) + (l(1, 1) - l(0, 1)) * sx;
            sum += amp * (top + (bot - top) * sy);
            norm += amp;
            amp *= 0.55;
            period /= 2.0;
        }
        sum / norm
    }
}

impl Texture for ProceduralTexture {
    fn value(&self, x: f64, y: f64) -> f64 {
        let n = self.noise(x, y);
        let (bx, by) = (((x - self.origin[0]) / self.bin).floor(), ((y - self.origin[1]) / self.bin).floor());
        if bx >= 0.0 && by >= 0.0 && (bx as usize) < self.nbins[0] && (by as usize) < self.nbins[1] {
            let list = &self.bins[by as usize * self.nbins[0] + bx as usize];
            for &i in list.iter().rev() {
                let (s, shade) = &self.shapes[i as usize];
                if s.contains(x, y) {
                    return (0.75 * shade + 0.25 * n).clamp(0.0, 1.0);
                }
            }
        }
        n
    }
}

/// A user image used as a texture (clamped bilinear, offset so that the
/// image spans `[0, w) × [0, h)`).
pub struct ImageTexture(pub Image);

impl Texture for ImageTexture {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.0.sample(x, y)
    }
}

/// Renders `f` at 2×2 supersampling per pixel.
pub fn render(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Image {
    Image::from_fn(width, height, |r, c| {
        let mut s = 0.0;
        for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            s += f(c as f64 + dx, r as f64 + dy);
        }
        (s / 4.0).clamp(0.0, 1.0) as f32
    })
}

/// Camera intrinsics, rigid motion `X_b = r·X_a + t` and per-pixel depths of
/// both views (row-major, `z` in each camera's frame).
#[derive(Clone, Debug, PartialEq)]
pub struct TwoViewTruth {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub depth_a: Vec<f64>,
    pub depth_b: Vec<f64>,
}

impl TwoViewTruth {
    pub fn pose(&self) -> Result<RelativePose> {
        RelativePose::new(self.r, self.t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    Homography(Homography),
    TwoView(Box<TwoViewTruth>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image_a: Image,
    pub image_b: Image,
    pub truth: Truth,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum TruthFile {
    Homography {
        seed: u64,
        width: usize,
        height: usize,
        h: [[f64; 3]; 3],
    },
    TwoView {
        seed: u64,
        width: usize,
        height: usize,
        k: [[f64; 3]; 3],
        r: [[f64; 3]; 3],
        t: [f64; 3],
        depth_a: Vec<f64>,
        depth_b: Vec<f64>,
    },
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}

impl SyntheticPair {
    pub fn size(&self) -> (usize, usize) {
        (self.image_a.width, self.image_a.height)
    }

    /// Writes `<stem>_a.png`, `<stem>_b.png` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.image_a.save_png(&dir.join(format!("{stem}_a.png")))?;
        self.image_b.save_png(&dir.join(format!("{stem}_b.png")))?;
        let (width, height) = self.size();
        let file = match &self.truth {
            Truth::Homography(h) => TruthFile::Homography { seed: self.seed, width, height, h: h.rows() },
            Truth::TwoView(tv) => TruthFile::TwoView {
                seed: self.seed,
                width,
                height,
                k: rows(&tv.k),
                r: rows(&tv.r),
                t: [tv.t.x, tv.t.y, tv.t.z],
                depth_a: tv.depth_a.clone(),
                depth_b: tv.depth_b.clone(),
            },
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let image_a = Image::load(&dir.join(format!("{stem}_a.png")))?;
        let image_b = Image::load(&dir.join(format!("{stem}_b.png")))?;
        let file: TruthFile = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let (seed, w, h, truth) = match file {
            TruthFile::Homography { seed, width, height, h } => {
                (seed, width, height, Truth::Homography(Homography::from_rows(h)?))
            }
            TruthFile::TwoView { seed, width, height, k, r, t, depth_a, depth_b } => {
                if depth_a.len() != width * height || depth_b.len() != width * height {
                    return Err(invalid!("depth maps must have {} entries", width * height));
                }
                let m = |a: [[f64; 3]; 3]| Matrix3::from_row_slice(&a.concat());
                let tv = TwoViewTruth { k: m(k), r: m(r), t: Vector3::from(t), depth_a, depth_b };
                (seed, width, height, Truth::TwoView(Box::new(tv)))
            }
        };
        if (image_a.width, image_a.height) != (w, h) || (image_b.width, image_b.height) != (w, h) {
            return Err(invalid!("images of pair {stem} do not match the recorded size {w}x{h}"));
        }
        Ok(Self { image_a, image_b, truth, seed })
    }

    /// Stems of every pair in `dir` (sorted).
    pub fn list(dir: &Path) -> Result<Vec<String>> {
        let mut stems = Vec::new();
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "json") {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    if dir.join(format!("{s}_a.png")).exists() {
                        stems.push(s.to_string());
                    }
                }
            }
        }
        stems.sort();
        Ok(stems)
    }
}

/// Homography pair: `image_b(p) = tex(h⁻¹ p)`.
pub fn homography_pair(
    seed: u64,
    width: usize,
    height: usize,
    bounds: &HomographyBounds,
    tex: &dyn Texture,
) -> Result<SyntheticPair> {
    let h = sample_homography(seed, bounds, width, height)?;
    let inv = h.inverse();
    let image_a = render(width, height, |x, y| tex.value(x, y)).quantized();
    let image_b = render(width, height, |x, y| match inv.apply([x, y]) {
        Some(p) => tex.value(p[0], p[1]),
        None => 0.0,
    })
    .quantized();
    Ok(SyntheticPair { image_a, image_b, truth: Truth::Homography(h), seed })
}

/// Textured plane patch `n·X = d` bounded in its own `(u, v)` frame.
#[derive(Clone, Debug)]
pub struct Plane {
    pub n: Vector3<f64>,
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half: [f64; 2],
    /// Texture pixels per scene unit and texture-space offset.
    pub density: f64,
    pub offset: [f64; 2],
}

impl Plane {
    pub fn new(origin: Vector3<f64>, normal: Vector3<f64>, half: [f64; 2], density: f64, offset: [f64; 2]) -> Self {
        let n = normal.normalize();
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = (helper - n * n.dot(&helper)).normalize();
        let v = n.cross(&u);
        Self { n, origin, u, v, half, density, offset }
    }

    /// Ray parameter and texture coordinate of the hit, if any.
    fn hit(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 2])> {
        let den = self.n.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let s = self.n.dot(&(self.origin - c)) / den;
        if s <= 1e-9 {
            return None;
        }
        let rel = c + d * s - self.origin;
        let (a, b) = (rel.dot(&self.u), rel.dot(&self.v));
        (a.abs() <= self.half[0] && b.abs() <= self.half[1])
            .then(|| (s, [a * self.density + self.offset[0], b * self.density + self.offset[1]]))
    }
}

/// Nearest-plane ray caster expressed in camera A's frame.
#[derive(Clone, Debug)]
pub struct Scene {
    pub planes: Vec<Plane>,
}

impl Scene {
    /// Depth and texture coordinate seen through pixel coordinate `p` of a
    /// camera with intrinsics `k` and pose `X_cam = r·X_a + t`.
    fn cast(&self, k_inv: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, p: [f64; 2]) -> Option<(f64, [f64; 2])> {
        let rt = r.transpose();
        let c = -(rt * t);
        let ray_cam = k_inv * Vector3::new(p[0], p[1], 1.0);
        let d = rt * ray_cam;
        let mut best: Option<(f64, [f64; 2])> = None;
        for pl in &self.planes {
            if let Some((s, uv)) = pl.hit(&c, &d) {
                if best.is_none_or(|b| s < b.0) {
                    best = Some((s, uv));
                }
            }
        }
        // ray_cam has unit z, so the ray parameter is the depth
        best
    }

    pub fn render_view(
        &self,
        width: usize,
        height: usize,
        k: &Matrix3<f64>,
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        tex: &dyn Texture,
    ) -> Result<(Image, Vec<f64>)> {
        let k_inv = k.try_inverse().ok_or_else(|| invalid!("singular intrinsics"))?;
        let mut depth = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let z = self
                    .cast(&k_inv, r, t, [col as f64 + 0.5, row as f64 + 0.5])
                    .map(|h| h.0)
                    .ok_or_else(|| Error::Runtime("scene does not cover the view".into()))?;
                depth.push(z);
            }
        }
        let img = render(width, height, |x, y| {
            self.cast(&k_inv, r, t, [x, y]).map(|(_, uv)| tex.value(uv[0], uv[1])).unwrap_or(0.0)
        });
        Ok((img.quantized(), depth))
    }
}

pub fn default_intrinsics(width: usize, height: usize) -> Matrix3<f64> {
    let f = 0.9 * width.max(height) as f64;
    Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0)
}

/// Renders both views of `scene` and packages the truth.
pub fn two_view_from_scene(
    seed: u64,
    width: usize,
    height: usize,
    scene: &Scene,
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    tex: &dyn Texture,
) -> Result<SyntheticPair> {
    let (image_a, depth_a) = scene.render_view(width, height, &k, &Matrix3::identity(), &Vector3::zeros(), tex)?;
    let (image_b, depth_b) = scene.render_view(width, height, &k, &r, &t, tex)?;
    let truth = Truth::TwoView(Box::new(TwoViewTruth { k, r, t, depth_a, depth_b }));
    Ok(SyntheticPair { image_a, image_b, truth, seed })
}

/// Random piecewise-planar scene: a tilted back wall plus floating panels,
/// seen from a second camera with a small rotation and lateral baseline.
pub fn two_view_pair(seed: u64, width: usize, height: usize, tex: &dyn Texture) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7477_6f76);
    let k = default_intrinsics(width, height);
    for _ in 0..50 {
        let mut planes = vec![Plane::new(
            Vector3::new(0.0, 0.0, rng.random_range(7.0..9.0)),
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -1.0),
            [1e6, 1e6],
            48.0,
            [width as f64 / 2.0, height as f64 / 2.0],
        )];
        for i in 0..rng.random_range(2..=4) {
            let z = rng.random_range(3.5..6.0);
            planes.push(Plane::new(
                Vector3::new(rng.random_range(-1.2..1.2) * z / 4.0, rng.random_range(-1.2..1.2) * z / 4.0, z),
                Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), -1.0),
                [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)],
                48.0,
                [1000.0 * (i + 1) as f64, 500.0],
            ));
        }
        let axis = Vector3::new(rng.random_range(-0.3..0.3), 1.0, rng.random_range(-0.3..0.3));
        let angle = rng.random_range(3.0..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rot = RelativePose::from_axis_angle(axis, angle, Vector3::x())?.r;
        // camera B centre, placed so it turns towards the scene
        let centre = Vector3::new(-angle.signum() * rng.random_range(0.4..0.9), rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3));
        let t = -(rot * centre);
        let pair = two_view_from_scene(seed, width, height, &Scene { planes }, k, rot, t, tex)?;
        let gt = gt_correspondence(&pair, 8)?;
        if gt.valid.iter().filter(|&&v| v).count() * 2 >= gt.valid.len() {
            return Ok(pair);
        }
    }
    Err(Error::Runtime("no sampled scene keeps half the grid visible".into()))
}

/// Exact target location for every source cell centre at `stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct GtField {
    pub dims: GridDims,
    pub stride: usize,
    pub target: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl GtField {
    /// Target cell (row, col) at stride `s` for source cell `i`, if valid.
    pub fn target_cell(&self, i: usize, s: usize, fine: GridDims) -> Option<(usize, usize)> {
        if !self.valid[i] {
            return None;
        }
        let [x, y] = self.target[i];
        let (c, r) = ((x / s as f64).floor(), (y / s as f64).floor());
        (c >= 0.0 && r >= 0.0 && (r as usize) < fine.h && (c as usize) < fine.w).then_some((r as usize, c as usize))
    }
}

/// Depth at a continuous coordinate by bilinear interpolation of inverse
/// depth (exact within a plane); `None` across depth discontinuities.
pub fn interp_depth(depth: &[f64], width: usize, height: usize, p: [f64; 2]) -> Option<f64> {
    // linear extrapolation within half a pixel of the border keeps planes exact
    let (fx, fy) = (p[0] - 0.5, p[1] - 0.5);
    let x0 = (fx.floor().max(0.0) as usize).min(width.saturating_sub(2));
    let y0 = (fy.floor().max(0.0) as usize).min(height.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let d = [depth[y0 * width + x0], depth[y0 * width + x1], depth[y1 * width + x0], depth[y1 * width + x1]];
    let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || hi / lo > 1.02 {
        return None;
    }
    let inv = (1.0 / d[0] * (1.0 - ax) + 1.0 / d[1] * ax) * (1.0 - ay) + (1.0 / d[2] * (1.0 - ax) + 1.0 / d[3] * ax) * ay;
    Some(1.0 / inv)
}

/// Reprojects pixel `p` of view A into view B; `None` if occluded, behind the
/// camera, out of bounds or on a depth edge.
pub fn reproject(tv: &TwoViewTruth, width: usize, height: usize, p: [f64; 2]) -> Option<[f64; 2]> {
    let z = interp_depth(&tv.depth_a, width, height, p)?;
    let k_inv = tv.k.try_inverse()?;
    let xa = k_inv * Vector3::new(p[0], p[1], 1.0) * z;
    let xb = tv.r * xa + tv.t;
    if xb.z <= 1e-9 {
        return None;
    }
    let q = tv.k * xb / xb.z;
    let q = [q.x, q.y];
    if !(q[0] >= 0.0 && q[1] >= 0.0 && q[0] < width as f64 && q[1] < height as f64) {
        return None;
    }
    let zb = interp_depth(&tv.depth_b, width, height, q)?;
    ((zb - xb.z).abs() <= 0.01 * xb.z).then_some(q)
}

pub fn gt_correspondence(pair: &SyntheticPair, stride: usize) -> Result<GtField> {
    let (w, h) = pair.size();
    if stride == 0 || w % stride != 0 || h % stride != 0 {
        return Err(invalid!("image size {w}x{h} is not divisible by stride {stride}"));
    }
    let dims = GridDims::new(h / stride, w / stride);
    let mut target = Vec::with_capacity(dims.len());
    let mut valid = Vec::with_capacity(dims.len());
    let inside = |q: [f64; 2]| q[0] >= 0.0 && q[1] >= 0.0 && q[0] < w as f64 && q[1] < h as f64;
    for i in 0..dims.len() {
        let (r, c) = dims.cell(i);
        let p = [(c as f64 + 0.5) * stride as f64, (r as f64 + 0.5) * stride as f64];
        let q = match &pair.truth {
            Truth::Homography(hm) => hm.apply(p).filter(|&q| inside(q)),
            Truth::TwoView(tv) => {
                if tv.depth_a.len() != w * h || tv.depth_b.len() != w * h {
                    return Err(invalid!("two-view truth lacks depth maps"));
                }
                reproject(tv, w, h, p)
            }
        };
        target.push(q.unwrap_or([f64::NAN, f64::NAN]));
        valid.push(q.is_some());
    }
    Ok(GtField { dims, stride, target, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat;
    impl Texture for Flat {
        fn value(&self, x: f64, y: f64) -> f64 {
            ((x * 0.1).sin() * (y * 0.13).cos() + 1.0) / 2.0
        }
    }

    fn with_h(h: Homography, size: usize) -> SyntheticPair {
        let img = Image::from_fn(size, size, |_, _| 0.0);
        SyntheticPair { image_a: img.clone(), image_b: img, truth: Truth::Homography(h), seed: 0 }
    }

    #[test]
    fn identity_maps_cells_to_themselves() {
        let gt = gt_correspondence(&with_h(Homography::identity(), 64), 8).unwrap();
        assert!(gt.valid.iter().all(|&v| v));
        for i in 0..gt.dims.len() {
            assert_eq!(gt.target_cell(i, 8, gt.dims), Some(gt.dims.cell(i)));
        }
    }

    #[test]
    fn translation_shifts_two_cells() {
        let gt = gt_correspondence(&with_h(Homography::translation(16.0, 0.0), 64), 8).unwrap();
        for i in 0..gt.dims.len() {
            let (r, c) = gt.dims.cell(i);
            if c >= 6 {
                assert!(!gt.valid[i]);
            } else {
                assert_eq!(gt.target_cell(i, 8, gt.dims), Some((r, c + 2)));
            }
        }
    }

    #[test]
    fn fronto_parallel_plane_matches_induced_homography() {
        let k = default_intrinsics(64, 64);
        let d = 5.0;
        let scene = Scene { planes: vec![Plane::new(Vector3::new(0.0, 0.0, d), -Vector3::z(), [1e6, 1e6], 30.0, [0.0, 0.0])] };
        let pose = RelativePose::from_axis_angle(Vector3::y(), 4.0, Vector3::x()).unwrap();
        let t = Vector3::new(0.3, 0.05, 0.1);
        let pair = two_view_from_scene(1, 64, 64, &scene, k, pose.r, t, &Flat).unwrap();
        // X_b = (R + t nᵀ / d) X_a on the plane z = d
        let n = Vector3::z();
        let hm = Homography::new(k * (pose.r + t * n.transpose() / d) * k.try_inverse().unwrap()).unwrap();
        let gt = gt_correspondence(&pair, 2).unwrap();
        let mut checked = 0;
        for i in 0..gt.dims.len() {
            if gt.valid[i] {
                let (r, c) = gt.dims.cell(i);
                let want = hm.apply([(c as f64 + 0.5) * 2.0, (r as f64 + 0.5) * 2.0]).unwrap();
                assert!((want[0] - gt.target[i][0]).abs() < 1e-6 && (want[1] - gt.target[i][1]).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > gt.dims.len() / 2);
    }

    #[test]
    fn two_view_reprojection_is_self_consistent() {
        let tex = ProceduralTexture::new(3, 64, 64);
        let pair = two_view_pair(3, 64, 64, &tex).unwrap();
        let Truth::TwoView(tv) = &pair.truth else { panic!() };
        let back = TwoViewTruth {
            k: tv.k,
            r: tv.r.transpose(),
            t: -(tv.r.transpose() * tv.t),
            depth_a: tv.depth_b.clone(),
            depth_b: tv.depth_a.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut n = 0;
        while n < 100 {
            let p = [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)];
            let Some(q) = reproject(tv, 64, 64, p) else { continue };
            let Some(p2) = reproject(&back, 64, 64, q) else { continue };
            assert!((p[0] - p2[0]).abs() < 1e-4 && (p[1] - p2[1]).abs() < 1e-4, "{p:?} {q:?} {p2:?}");
            n += 1;
        }
    }

    #[test]
    fn homography_pair_is_deterministic_and_round_trips() {
        let tex = ProceduralTexture::new(9, 64, 64);
        let a = homography_pair(9, 64, 64, &HomographyBounds::default(), &tex).unwrap();
        let b = homography_pair(9, 64, 64, &HomographyBounds::default(), &tex).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), "p0").unwrap();
        let back = SyntheticPair::load(dir.path(), "p0").unwrap();
        assert_eq!(back.image_a, a.image_a);
        let (Truth::Homography(h1), Truth::Homography(h2)) = (&a.truth, &back.truth) else { panic!() };
        assert!((h1.matrix() - h2.matrix()).abs().max() < 1e-12);
        assert_eq!(SyntheticPair::list(dir.path()).unwrap(), vec!["p0".to_string()]);
    }
}
