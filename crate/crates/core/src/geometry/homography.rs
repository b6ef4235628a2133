use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Projective pixel-to-pixel map, normalized so `m[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(invalid!("homography has non-finite entries"));
        }
        let s = m[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(invalid!("homography with m[2][2] = 0 cannot be normalized"));
        }
        let m = m / s;
        if m.determinant().abs() < 1e-12 {
            return Err(invalid!("singular homography"));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn from_rows(r: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&r.concat()))
    }

    pub fn inverse(&self) -> Self {
        let inv = self.m.try_inverse().expect("normalized homographies are invertible");
        Self::new(inv).expect("inverse of a valid homography is valid")
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Projective transform of one point; `None` near the line at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let v = self.m * Vector3::new(p[0], p[1], 1.0);
        (v.z.abs() >= 1e-12).then(|| [v.x / v.z, v.y / v.z])
    }
}

/// Warps points by `h`; fails if any point maps to infinity.
pub fn warp_points(points: &[[f64; 2]], h: &Homography) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|&p| {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(invalid!("non-finite point {:?}", p));
            }
            h.apply(p).ok_or_else(|| Error::Estimation(format!("point {:?} maps to infinity", p)))
        })
        .collect()
}

/// Mean displacement of the four image corners under `est` versus `gt`.
pub fn corner_error(est: &Homography, gt: &Homography, width: f64, height: f64) -> f64 {
    let corners = [[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]];
    let mut sum = 0.0;
    for c in corners {
        match (est.apply(c), gt.apply(c)) {
            (Some(a), Some(b)) => sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
            _ => return f64::INFINITY,
        }
    }
    sum / 4.0
}

/// Perturbation magnitudes for [`sample_homography`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomographyBounds {
    pub rotation_deg: f64,
    /// Scale drawn log-uniformly in `[1/(1+s), 1+s]`.
    pub scale: f64,
    pub translation_x: f64,
    pub translation_y: f64,
    /// Projective coefficients, relative to the half image size.
    pub perspective: f64,
}

impl Default for HomographyBounds {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale: 0.2,
            translation_x: 16.0,
            translation_y: 16.0,
            perspective: 0.15,
        }
    }
}

impl HomographyBounds {
    pub fn zero() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 0.0,
            translation_x: 0.0,
            translation_y: 0.0,
            perspective: 0.0,
        }
    }
}

/// Fraction of 8-px cell centres of a `w×h` image that land inside it.
pub fn grid_coverage(h: &Homography, w: usize, hh: usize) -> f64 {
    let (cw, ch) = (w.div_ceil(8), hh.div_ceil(8));
    let mut inside = 0usize;
    for r in 0..ch {
        for c in 0..cw {
            let p = [(c as f64 + 0.5) * 8.0, (r as f64 + 0.5) * 8.0];
            if let Some(q) = h.apply(p) {
                if q[0] >= 0.0 && q[1] >= 0.0 && q[0] < w as f64 && q[1] < hh as f64 {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (cw * ch) as f64
}

/// Random rotation / scale / translation / perspective about the image
/// centre. Draws are retried until at least half the cell grid stays inside
/// the image.
pub fn sample_homography(seed: u64, bounds: &HomographyBounds, width: usize, height: usize) -> Result<Homography> {
    let b = bounds;
    if [b.rotation_deg, b.scale, b.translation_x, b.translation_y, b.perspective]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(invalid!("homography bounds must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = |r: &mut ChaCha8Rng, a: f64| if a > 0.0 { r.random_range(-a..=a) } else { 0.0 };
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    for _ in 0..100 {
        let th = sym(&mut rng, b.rotation_deg).to_radians();
        let s = sym(&mut rng, (1.0 + b.scale).ln()).exp();
        let (tx, ty) = (sym(&mut rng, b.translation_x), sym(&mut rng, b.translation_y));
        let (p1, p2) = (sym(&mut rng, b.perspective) / cx, sym(&mut rng, b.perspective) / cy);
        let to_centre = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
        let (c, sn) = (th.cos(), th.sin());
        let rs = Matrix3::new(s * c, -s * sn, 0.0, s * sn, s * c, 0.0, 0.0, 0.0, 1.0);
        let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p1, p2, 1.0);
        let h = Homography::new(back * rs * persp * to_centre)?;
        if grid_coverage(&h, width, height) >= 0.5 {
            return Ok(h);
        }
    }
    Err(Error::Runtime("no homography within bounds keeps half the grid visible".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bounds_give_identity() {
        let h = sample_homography(3, &HomographyBounds::zero(), 64, 64).unwrap();
        assert_eq!(h, Homography::identity());
    }

    #[test]
    fn pure_translation() {
        let b = HomographyBounds {
            translation_x: 4.0,
            ..HomographyBounds::zero()
        };
        for seed in 0..20 {
            let h = sample_homography(seed, &b, 64, 64).unwrap();
            let p = h.apply([10.0, 7.0]).unwrap();
            assert!((p[1] - 7.0).abs() < 1e-12);
            assert!((p[0] - 10.0).abs() <= 4.0 + 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let h = sample_homography(7, &HomographyBounds::default(), 256, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 2]> = (0..100).map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]).collect();
        let back = warp_points(&warp_points(&pts, &h).unwrap(), &h.inverse()).unwrap();
        for (p, q) in pts.iter().zip(&back) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_warp_and_infinity() {
        let h = Homography::translation(3.0, -2.0);
        assert_eq!(warp_points(&[[0.0, 0.0]], &h).unwrap(), vec![[3.0, -2.0]]);
        let p = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0)).unwrap();
        assert!(warp_points(&[[-1.0, 0.0]], &p).is_err());
    }
}
