//! Robust homography and essential-matrix estimation.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Homography, MatchSet, RelativePose};
use crate::error::{invalid, Error, Result};

/// Similarity taking points to zero mean and mean distance √2.
fn normalizer(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0] / n, a.1 + p[1] / n));
    let d = pts.iter().map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if d > 1e-15 { std::f64::consts::SQRT_2 / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Right singular vector of the smallest singular value, plus the ratio of the
/// two smallest singular values to the largest (rank diagnostics).
fn null_vector(rows: Vec<[f64; 9]>) -> Option<([f64; 9], f64)> {
    let m = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(m, 9);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..9 {
            a[(i, j)] = r[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
    let v: Vec<f64> = vt.row(order[0]).iter().copied().collect();
    let top = sv[order[sv.len() - 1]].max(1e-300);
    let second = sv[order[1]] / top;
    Some((v.try_into().ok()?, second))
}

/// Normalized direct linear transform over all given correspondences.
pub fn dlt_homography(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<Homography> {
    if a.len() < 4 || a.len() != b.len() {
        return Err(invalid!("homography needs at least 4 correspondences"));
    }
    let (ta, tb) = (normalizer(a), normalizer(b));
    let rows: Vec<[f64; 9]> = a
        .iter()
        .zip(b)
        .flat_map(|(&p, &q)| {
            let ([x, y], [u, v]) = (apply(&ta, p), apply(&tb, q));
            [
                [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
                [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
            ]
        })
        .collect();
    let (h, second) = null_vector(rows).ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    if second < 1e-12 {
        return Err(Error::Estimation("degenerate homography configuration".into()));
    }
    let hn = Matrix3::from_row_slice(&h);
    let tb_inv = tb.try_inverse().ok_or_else(|| Error::Estimation("bad normalizer".into()))?;
    Homography::new(tb_inv * hn * ta).map_err(|e| Error::Estimation(e.to_string()))
}

fn collinear(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> bool {
    let area = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let scale = ((q[0] - p[0]).hypot(q[1] - p[1])) * ((r[0] - p[0]).hypot(r[1] - p[1]));
    area.abs() <= 1e-9 * scale.max(1e-12)
}

fn degenerate_quad(p: &[[f64; 2]]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<_> = (0..4).filter(|&i| i != skip).map(|i| p[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

fn adaptive_iters(inlier_ratio: f64, sample: i32, cap: usize) -> usize {
    let w = inlier_ratio.powi(sample);
    if w >= 1.0 - 1e-12 {
        return 1;
    }
    if w <= 1e-12 {
        return cap;
    }
    let n = (1.0f64 - 0.9999).ln() / (1.0 - w).ln();
    (n.ceil() as usize).min(cap)
}

fn homography_inliers(h: &Homography, a: &[[f64; 2]], b: &[[f64; 2]], thr: f64) -> Vec<bool> {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| h.apply(p).is_some_and(|r| (r[0] - q[0]).hypot(r[1] - q[1]) < thr))
        .collect()
}

/// 4-point RANSAC followed by a least-squares refit on the inliers.
pub fn estimate_homography_ransac(
    matches: &MatchSet,
    threshold_px: f64,
    iters: usize,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    let n = matches.len();
    if n < 4 {
        return Err(invalid!("homography RANSAC needs at least 4 matches, got {n}"));
    }
    let (a, b) = (matches.points_a(), matches.points_b());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Homography)> = None;
    let mut budget = iters.max(1);
    let mut it = 0;
    while it < budget {
        it += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let (pa, pb): (Vec<_>, Vec<_>) = idx.iter().map(|&i| (a[i], b[i])).unzip();
        if degenerate_quad(&pa) || degenerate_quad(&pb) {
            continue;
        }
        let Ok(h) = dlt_homography(&pa, &pb) else { continue };
        let count = homography_inliers(&h, &a, &b, threshold_px).iter().filter(|&&v| v).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
            budget = adaptive_iters(count as f64 / n as f64, 4, iters.max(1));
        }
    }
    let (count, mut h) = best.ok_or_else(|| Error::Estimation("no non-degenerate sample".into()))?;
    if count < 4 {
        return Err(Error::Estimation(format!("best model has only {count} inliers")));
    }
    let mut inliers = homography_inliers(&h, &a, &b, threshold_px);
    for _ in 0..3 {
        let (ia, ib): (Vec<_>, Vec<_>) = inliers.iter().enumerate().filter(|p| *p.1).map(|(i, _)| (a[i], b[i])).unzip();
        if ia.len() < 4 {
            break;
        }
        let Ok(refit) = dlt_homography(&ia, &ib) else { break };
        let next = homography_inliers(&refit, &a, &b, threshold_px);
        if next.iter().filter(|&&v| v).count() < ia.len() {
            break;
        }
        h = refit;
        let done = next == inliers;
        inliers = next;
        if done {
            break;
        }
    }
    Ok((h, inliers))
}

fn to_normalized(k: &Matrix3<f64>, pts: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let ki = k.try_inverse().ok_or_else(|| invalid!("intrinsics are singular"))?;
    Ok(pts.iter().map(|&p| apply(&ki, p)).collect())
}

/// Normalized 8-point essential matrix on camera-normalized coordinates,
/// projected to singular values `(1, 1, 0)`.
pub fn eight_point(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    if a.len() < 8 || a.len() != b.len() {
        return Err(invalid!("essential matrix needs at least 8 correspondences"));
    }
    let (ta, tb) = (normalizer(a), normalizer(b));
    let rows: Vec<[f64; 9]> = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| {
            let ([xa, ya], [xb, yb]) = (apply(&ta, p), apply(&tb, q));
            [xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, 1.0]
        })
        .collect();
    let (e, second) = null_vector(rows).ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    if second < 1e-10 {
        return Err(Error::Estimation("degenerate configuration (no parallax or planar scene)".into()));
    }
    let e = tb.transpose() * Matrix3::from_row_slice(&e) * ta;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    s.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut d = Matrix3::zeros();
    d[(s[0].1, s[0].1)] = 1.0;
    d[(s[1].1, s[1].1)] = 1.0;
    Ok(u * d * vt)
}

fn sampson(e: &Matrix3<f64>, p: [f64; 2], q: [f64; 2]) -> f64 {
    let (x, y) = (Vector3::new(p[0], p[1], 1.0), Vector3::new(q[0], q[1], 1.0));
    let ex = e * x;
    let etx = e.transpose() * y;
    let num = y.dot(&ex).powi(2);
    let den = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
    if den <= 1e-300 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Linear triangulation with `P_a = [I | 0]`, `P_b = [R | t]`; returns the
/// point in camera A.
fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, p: [f64; 2], q: [f64; 2]) -> Option<Vector3<f64>> {
    let mut a = nalgebra::Matrix4::<f64>::zeros();
    let pb = nalgebra::Matrix3x4::from_columns(&[r.column(0).into(), r.column(1).into(), r.column(2).into(), *t]);
    let pa = nalgebra::Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    for j in 0..4 {
        a[(0, j)] = p[0] * pa[(2, j)] - pa[(0, j)];
        a[(1, j)] = p[1] * pa[(2, j)] - pa[(1, j)];
        a[(2, j)] = q[0] * pb[(2, j)] - pb[(0, j)];
        a[(3, j)] = q[1] * pb[(2, j)] - pb[(1, j)];
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let i = (0..4).min_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]))?;
    let h = vt.row(i);
    (h[3].abs() > 1e-15).then(|| Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Chooses among the four `(R, ±t)` factorizations of `e` by cheirality.
pub fn decompose_essential(e: &Matrix3<f64>, a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<(RelativePose, usize)> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let order = {
        let mut o = [0usize, 1, 2];
        o.sort_by(|&x, &y| s[y].total_cmp(&s[x]));
        o
    };
    let perm = Matrix3::from_fn(|i, j| if order[j] == i { 1.0 } else { 0.0 });
    u *= perm;
    vt = perm.transpose() * vt;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let mut best: Option<(usize, RelativePose)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for tt in [t, -t] {
            let count = a
                .iter()
                .zip(b)
                .filter(|(&p, &q)| {
                    triangulate(&r, &tt, p, q).is_some_and(|x| x.z > 0.0 && (r * x + tt).z > 0.0)
                })
                .count();
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, RelativePose::new(r, tt).map_err(|e| Error::Estimation(e.to_string()))?));
            }
        }
    }
    let (count, pose) = best.unwrap();
    if count == 0 {
        return Err(Error::Estimation("no factorization puts points in front of both cameras".into()));
    }
    Ok((pose, count))
}

/// 8-point RANSAC on Sampson distance, refit on inliers, cheirality check.
pub fn estimate_pose_ransac(
    matches: &MatchSet,
    k_a: &Matrix3<f64>,
    k_b: &Matrix3<f64>,
    threshold_px: f64,
    iters: usize,
    seed: u64,
) -> Result<(RelativePose, Vec<bool>)> {
    let n = matches.len();
    if n < 8 {
        return Err(invalid!("pose RANSAC needs at least 8 matches, got {n}"));
    }
    let a = to_normalized(k_a, &matches.points_a())?;
    let b = to_normalized(k_b, &matches.points_b())?;
    let f = (k_a[(0, 0)] + k_a[(1, 1)] + k_b[(0, 0)] + k_b[(1, 1)]) / 4.0;
    let thr2 = (threshold_px / f).powi(2);
    let inliers_of = |e: &Matrix3<f64>| -> Vec<bool> { a.iter().zip(&b).map(|(&p, &q)| sampson(e, p, q) < thr2).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut budget = iters.max(1);
    let mut it = 0;
    while it < budget {
        it += 1;
        let idx = sample(&mut rng, n, 8).into_vec();
        let (pa, pb): (Vec<_>, Vec<_>) = idx.iter().map(|&i| (a[i], b[i])).unzip();
        let Ok(e) = eight_point(&pa, &pb) else { continue };
        let count = inliers_of(&e).iter().filter(|&&v| v).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, e));
            budget = adaptive_iters(count as f64 / n as f64, 8, iters.max(1));
        }
    }
    let (count, mut e) = best.ok_or_else(|| Error::Estimation("every 8-point sample was degenerate".into()))?;
    if count < 8 {
        return Err(Error::Estimation(format!("best essential matrix has only {count} inliers")));
    }
    let mut inliers = inliers_of(&e);
    let (ia, ib): (Vec<_>, Vec<_>) = inliers.iter().enumerate().filter(|p| *p.1).map(|(i, _)| (a[i], b[i])).unzip();
    if let Ok(refit) = eight_point(&ia, &ib) {
        let next = inliers_of(&refit);
        if next.iter().filter(|&&v| v).count() >= ia.len() {
            e = refit;
            inliers = next;
        }
    }
    let (ia, ib): (Vec<_>, Vec<_>) = inliers.iter().enumerate().filter(|p| *p.1).map(|(i, _)| (a[i], b[i])).unzip();
    let (pose, _) = decompose_essential(&e, &ia, &ib)?;
    Ok((pose, inliers))
}

#[cfg(test)]
mod tests {
    use super::super::{corner_error, pose_error_parts, sample_homography, HomographyBounds, Match};
    use super::*;
    use rand::Rng;

    fn matches_from(a: &[[f64; 2]], b: &[[f64; 2]]) -> MatchSet {
        MatchSet::new(
            a.iter()
                .zip(b)
                .map(|(p, q)| Match { xa: p[0], ya: p[1], xb: q[0], yb: q[1], conf: 1.0, scale: 0.5 })
                .collect(),
        )
    }

    #[test]
    fn homography_recovery_with_outliers() {
        let h = sample_homography(5, &HomographyBounds::default(), 256, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(20.0..230.0), rng.random_range(20.0..230.0)]).collect();
        let mut b: Vec<[f64; 2]> = a.iter().map(|&p| h.apply(p).unwrap()).collect();
        let (est, inl) = estimate_homography_ransac(&matches_from(&a, &b), 1.0, 2000, 1).unwrap();
        assert!(corner_error(&est, &h, 256.0, 256.0) < 1e-6);
        assert_eq!(inl.iter().filter(|&&v| v).count(), 20);
        let mut a2 = a.clone();
        for _ in 0..20 {
            a2.push([rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]);
            b.push([rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]);
        }
        let (est, inl) = estimate_homography_ransac(&matches_from(&a2, &b), 1.0, 2000, 1).unwrap();
        assert!(corner_error(&est, &h, 256.0, 256.0) < 1e-6);
        assert!(inl.iter().filter(|&&v| v).count() >= 20);
        assert!(estimate_homography_ransac(&matches_from(&a[..3], &b[..3]), 1.0, 10, 0).is_err());
    }

    fn two_view(deg: f64, t: Vector3<f64>, n: usize, seed: u64) -> (MatchSet, Matrix3<f64>, RelativePose) {
        let k = Matrix3::new(200.0, 0.0, 128.0, 0.0, 200.0, 128.0, 0.0, 0.0, 1.0);
        let gt = RelativePose::from_axis_angle(Vector3::new(0.1, 1.0, 0.2), deg, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        while a.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0));
            let xb = gt.r * x + t;
            let pa = k * x / x.z;
            let pb = k * xb / xb.z;
            a.push([pa.x, pa.y]);
            b.push([pb.x, pb.y]);
        }
        (matches_from(&a, &b), k, gt)
    }

    #[test]
    fn pose_recovery_exact_scene() {
        let (ms, k, gt) = two_view(10.0, Vector3::new(1.0, 0.2, 0.1), 50, 3);
        let (est, _) = estimate_pose_ransac(&ms, &k, &k, 1.0, 2000, 0).unwrap();
        let (r, t) = pose_error_parts(&est, &gt);
        assert!(r < 0.1 && t < 0.5, "rot {r} trans {t}");
    }

    #[test]
    fn pure_sideways_translation() {
        let (ms, k, _) = two_view(0.0, Vector3::new(1.0, 0.0, 0.0), 30, 4);
        let (est, _) = estimate_pose_ransac(&ms, &k, &k, 1.0, 2000, 0).unwrap();
        assert!(super::super::rotation_angle_deg(&est.r) < 0.1);
        assert!(estimate_pose_ransac(&MatchSet::new(ms.entries[..7].to_vec()), &k, &k, 1.0, 10, 0).is_err());
    }

    #[test]
    fn zero_parallax_is_degenerate() {
        let k = Matrix3::new(200.0, 0.0, 128.0, 0.0, 200.0, 128.0, 0.0, 0.0, 1.0);
        let r = *nalgebra::Rotation3::from_euler_angles(0.0, 0.1, 0.0).matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..30 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 5.0);
            let (pa, pb) = (k * x / x.z, k * (r * x) / (r * x).z);
            a.push([pa.x, pa.y]);
            b.push([pb.x, pb.y]);
        }
        assert!(estimate_pose_ransac(&matches_from(&a, &b), &k, &k, 1.0, 200, 0).is_err());
    }
}
