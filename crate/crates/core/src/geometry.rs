//! Model fitting and evaluation metrics: RANSAC homographies and essential
//! matrices, pose errors, corner errors, AUC, NCM/RMSE and homography sampling.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Point = [f64; 2];

/// Row-major copy of a 3×3 matrix.
pub fn to_rows(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

pub fn from_rows(v: &[f64; 9]) -> Mat3 {
    Mat3::from_row_slice(v)
}

/// Scales `h` so that `h33 = 1` when it is nonzero.
pub fn normalize_h(h: &Mat3) -> Mat3 {
    let s = h[(2, 2)];
    if s.abs() > 1e-15 {
        h / s
    } else {
        *h
    }
}

pub fn apply_h(h: &Mat3, p: Point) -> Point {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

pub fn invert(h: &Mat3) -> Result<Mat3> {
    if h.determinant().abs() <= 1e-12 {
        return Err(Error::Degenerate("singular 3x3 matrix".into()));
    }
    h.try_inverse().ok_or_else(|| Error::Degenerate("singular 3x3 matrix".into()))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Similarity that maps points to zero mean and mean distance √2.
fn normalizer(pts: &[Point]) -> Mat3 {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let md = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if md > 1e-15 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Mat3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Right singular vector of the smallest singular value, with zero rows
/// appended so the decomposition is square.
fn null_vector(rows: &[[f64; 9]]) -> Result<[f64; 9]> {
    let n = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..9 {
            a[(i, j)] = r[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Estimation("svd failed".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let mut out = [0.0; 9];
    for j in 0..9 {
        out[j] = vt[(k, j)];
    }
    Ok(out)
}

/// Normalised direct linear transform mapping `a` onto `b`.
pub fn fit_homography(a: &[Point], b: &[Point]) -> Result<Mat3> {
    if a.len() != b.len() || a.len() < 4 {
        return Err(Error::Estimation(format!("homography needs at least 4 matches, got {}", a.len().min(b.len()))));
    }
    let (ta, tb) = (normalizer(a), normalizer(b));
    let rows: Vec<[f64; 9]> = a
        .iter()
        .zip(b)
        .flat_map(|(&p, &q)| {
            let p = apply_h(&ta, p);
            let q = apply_h(&tb, q);
            let (x, y, u, v) = (p[0], p[1], q[0], q[1]);
            [
                [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
                [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
            ]
        })
        .collect();
    let h = from_rows(&null_vector(&rows)?);
    let tb_inv = invert(&tb)?;
    Ok(normalize_h(&(tb_inv * h * ta)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            confidence: 0.9999,
            max_iters: 2000,
            seed: 0,
        }
    }
}

fn needed_iters(inliers: usize, n: usize, sample: usize, confidence: f64) -> usize {
    let w = inliers as f64 / n as f64;
    let denom = (1.0 - w.powi(sample as i32)).ln();
    if denom >= 0.0 || !denom.is_finite() {
        return if w >= 1.0 { 0 } else { usize::MAX };
    }
    ((1.0 - confidence).ln() / denom).ceil().max(0.0) as usize
}

fn collinear(p: &[Point]) -> bool {
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            for k in j + 1..p.len() {
                let area = (p[j][0] - p[i][0]) * (p[k][1] - p[i][1]) - (p[j][1] - p[i][1]) * (p[k][0] - p[i][0]);
                if area.abs() < 1e-6 {
                    return true;
                }
            }
        }
    }
    false
}

/// Generic sample-and-score loop shared by both models.
fn ransac<M>(
    n: usize,
    sample_size: usize,
    cfg: &RansacConfig,
    mut fit: impl FnMut(&[usize]) -> Option<M>,
    residual: impl Fn(&M, usize) -> f64,
) -> Option<(M, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(M, Vec<bool>, usize)> = None;
    let mut limit = cfg.max_iters;
    let mut it = 0;
    while it < limit {
        it += 1;
        let idx = sample(&mut rng, n, sample_size).into_vec();
        let Some(model) = fit(&idx) else { continue };
        let mask: Vec<bool> = (0..n).map(|i| residual(&model, i) < cfg.threshold).collect();
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            limit = limit.min(needed_iters(count, n, sample_size, cfg.confidence).max(1));
            best = Some((model, mask, count));
        }
    }
    best.map(|(m, mask, _)| (m, mask))
}

fn select(pts: &[Point], mask: &[bool]) -> Vec<Point> {
    pts.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
}

/// Best homography by inlier count under the forward transfer error,
/// refit by least squares on the inliers.
pub fn ransac_homography(a: &[Point], b: &[Point], cfg: &RansacConfig) -> Result<(Mat3, Vec<bool>)> {
    if a.len() != b.len() || a.len() < 4 {
        return Err(Error::Estimation(format!("homography needs at least 4 matches, got {}", a.len().min(b.len()))));
    }
    let residual = |h: &Mat3, i: usize| dist(apply_h(h, a[i]), b[i]);
    let fit = |idx: &[usize]| {
        let sa: Vec<Point> = idx.iter().map(|&i| a[i]).collect();
        let sb: Vec<Point> = idx.iter().map(|&i| b[i]).collect();
        if collinear(&sa) || collinear(&sb) {
            return None;
        }
        fit_homography(&sa, &sb).ok()
    };
    let (mut h, mut mask) =
        ransac(a.len(), 4, cfg, fit, residual).ok_or_else(|| Error::Estimation("no non-degenerate sample".into()))?;
    for _ in 0..3 {
        if mask.iter().filter(|&&m| m).count() < 4 {
            break;
        }
        let Ok(refined) = fit_homography(&select(a, &mask), &select(b, &mask)) else { break };
        let new_mask: Vec<bool> = (0..a.len()).map(|i| residual(&refined, i) < cfg.threshold).collect();
        if new_mask.iter().filter(|&&m| m).count() < mask.iter().filter(|&&m| m).count() {
            break;
        }
        let stable = new_mask == mask;
        h = refined;
        mask = new_mask;
        if stable {
            break;
        }
    }
    Ok((h, mask))
}

pub fn skew(t: &Vector3<f64>) -> Mat3 {
    Mat3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0)
}

/// `E = [t]× R` for points with `x_a ~ R x_b + t`, so that `x_aᵀ E x_b = 0`.
pub fn essential_from_pose(r: &Mat3, t: &Vector3<f64>) -> Mat3 {
    skew(t) * r
}

/// Projects onto the essential manifold: singular values `(s, s, 0)`.
pub fn project_essential(e: &Mat3) -> Mat3 {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let s = &svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let m = (s[order[0]] + s[order[1]]) / 2.0;
    let mut d = Vector3::zeros();
    d[order[0]] = m;
    d[order[1]] = m;
    u * Mat3::from_diagonal(&d) * vt
}

/// Eight-point estimate from normalised image coordinates, `x_aᵀ E x_b = 0`.
pub fn fit_essential(a: &[Point], b: &[Point]) -> Result<Mat3> {
    if a.len() != b.len() || a.len() < 8 {
        return Err(Error::Estimation(format!("essential matrix needs at least 8 matches, got {}", a.len().min(b.len()))));
    }
    let (ta, tb) = (normalizer(a), normalizer(b));
    let rows: Vec<[f64; 9]> = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| {
            let p = apply_h(&ta, p);
            let q = apply_h(&tb, q);
            let (xa, ya, xb, yb) = (p[0], p[1], q[0], q[1]);
            [xa * xb, xa * yb, xa, ya * xb, ya * yb, ya, xb, yb, 1.0]
        })
        .collect();
    let f = from_rows(&null_vector(&rows)?);
    let e = ta.transpose() * f * tb;
    let e = project_essential(&e);
    let n = e.norm();
    if n < 1e-15 {
        return Err(Error::Estimation("zero essential matrix".into()));
    }
    Ok(e / n)
}

/// Squared Sampson distance of `(a, b)` under `x_aᵀ E x_b = 0`.
pub fn sampson(e: &Mat3, a: Point, b: Point) -> f64 {
    let xa = Vector3::new(a[0], a[1], 1.0);
    let xb = Vector3::new(b[0], b[1], 1.0);
    let eb = e * xb;
    let ea = e.transpose() * xa;
    let r = xa.dot(&eb);
    let d = eb[0] * eb[0] + eb[1] * eb[1] + ea[0] * ea[0] + ea[1] * ea[1];
    if d <= 0.0 {
        f64::INFINITY
    } else {
        r * r / d
    }
}

/// RANSAC over eight-point samples; `threshold` is in normalised units.
pub fn ransac_essential(a: &[Point], b: &[Point], cfg: &RansacConfig) -> Result<(Mat3, Vec<bool>)> {
    if a.len() != b.len() || a.len() < 8 {
        return Err(Error::Estimation(format!("essential matrix needs at least 8 matches, got {}", a.len().min(b.len()))));
    }
    let residual = |e: &Mat3, i: usize| sampson(e, a[i], b[i]).sqrt();
    let fit = |idx: &[usize]| {
        let sa: Vec<Point> = idx.iter().map(|&i| a[i]).collect();
        let sb: Vec<Point> = idx.iter().map(|&i| b[i]).collect();
        fit_essential(&sa, &sb).ok()
    };
    let (mut e, mut mask) =
        ransac(a.len(), 8, cfg, fit, residual).ok_or_else(|| Error::Estimation("no non-degenerate sample".into()))?;
    if mask.iter().filter(|&&m| m).count() >= 8 {
        if let Ok(refined) = fit_essential(&select(a, &mask), &select(b, &mask)) {
            let new_mask: Vec<bool> = (0..a.len()).map(|i| residual(&refined, i) < cfg.threshold).collect();
            if new_mask.iter().filter(|&&m| m).count() >= mask.iter().filter(|&&m| m).count() {
                e = refined;
                mask = new_mask;
            }
        }
    }
    Ok((e, mask))
}

/// The four `(R, t)` factorisations of `E` with `‖t‖ = 1`.
pub fn decompose_essential(e: &Mat3) -> [(Mat3, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u.expect("u"), svd.v_t.expect("v"));
    // order singular values descending so the null direction is last
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    u = Mat3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    vt = Mat3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Depths of a point seen at `a` (frame a) and `b` (frame b) with `X_a = R X_b + t`.
fn triangulate_depths(r: &Mat3, t: &Vector3<f64>, a: Point, b: Point) -> (f64, f64) {
    let xa = Vector3::new(a[0], a[1], 1.0);
    let xb = Vector3::new(b[0], b[1], 1.0);
    // za·xa = zb·R xb + t, least squares in (za, zb)
    let rb = r * xb;
    let m11 = xa.dot(&xa);
    let m12 = -xa.dot(&rb);
    let m22 = rb.dot(&rb);
    let r1 = xa.dot(t);
    let r2 = -rb.dot(t);
    let det = m11 * m22 - m12 * m12;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    let za = (r1 * m22 - m12 * r2) / det;
    let zb = (m11 * r2 - m12 * r1) / det;
    (za, zb)
}

/// Candidate with the most points in front of both cameras.
pub fn recover_pose(e: &Mat3, a: &[Point], b: &[Point]) -> Result<(Mat3, Vector3<f64>)> {
    let mut best = None;
    let mut best_count = 0;
    for (r, t) in decompose_essential(e) {
        let count = a
            .iter()
            .zip(b)
            .filter(|(&pa, &pb)| {
                let (za, zb) = triangulate_depths(&r, &t, pa, pb);
                za > 0.0 && zb > 0.0
            })
            .count();
        if count > best_count {
            best_count = count;
            best = Some((r, t));
        }
    }
    best.ok_or_else(|| Error::Estimation("no pose candidate passes cheirality".into()))
}

/// Angle of `R1ᵀ R2` in degrees, via the chord length.
pub fn rotation_error(r1: &Mat3, r2: &Mat3) -> f64 {
    let c = (r1 - r2).norm() / (2.0 * std::f64::consts::SQRT_2);
    (2.0 * c.clamp(0.0, 1.0).asin()).to_degrees()
}

/// Angle between two translation directions in degrees.
pub fn translation_error(t1: &Vector3<f64>, t2: &Vector3<f64>) -> f64 {
    t1.cross(t2).norm().atan2(t1.dot(t2)).to_degrees()
}

/// Ground truth for a pose comparison.
#[derive(Clone, Copy, Debug)]
pub enum PoseGt {
    Pose(Mat3, Vector3<f64>),
    Essential(Mat3),
}

/// `(rotation error, translation error)` in degrees; `(180, 180)` when the
/// estimate cannot be decomposed.
pub fn pose_error(e_est: &Mat3, gt: &PoseGt, a: &[Point], b: &[Point]) -> (f64, f64) {
    let Ok((r, t)) = recover_pose(e_est, a, b) else {
        return (180.0, 180.0);
    };
    let (rg, tg) = match gt {
        PoseGt::Pose(r, t) => (*r, *t),
        PoseGt::Essential(e) => match recover_pose(e, a, b) {
            Ok(p) => p,
            Err(_) => return (180.0, 180.0),
        },
    };
    (rotation_error(&r, &rg), translation_error(&t, &tg))
}

pub fn image_corners(w: usize, h: usize) -> [Point; 4] {
    let (x1, y1) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
}

/// Mean distance between the image corners mapped by each homography.
pub fn corner_error(h_est: &Mat3, h_gt: &Mat3, w: usize, h: usize) -> f64 {
    if h_est.determinant().abs() <= 1e-12 || !h_est.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let corners = image_corners(w, h);
    corners.iter().map(|&c| dist(apply_h(h_est, c), apply_h(h_gt, c))).sum::<f64>() / 4.0
}

/// Area under the recall curve up to each threshold, divided by the threshold.
///
/// The curve joins `(0, 0)` and `(e_k, k/n)` over the sorted errors by
/// straight segments and stays flat after the last error below the threshold.
pub fn auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Estimation("AUC of an empty error list".into()));
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::Estimation("errors must be non-negative".into()));
    }
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (k, v) in e.iter().enumerate() {
        xs.push(*v);
        ys.push((k + 1) as f64 / n);
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let last = xs.partition_point(|&x| x <= t);
            let mut area = 0.0;
            for i in 1..last {
                area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0;
            }
            area += (t - xs[last - 1]) * ys[last - 1];
            area / t
        })
        .collect())
}

/// Count of residuals below `tol` and the RMSE of all residuals (`None` without matches).
pub fn ncm_rmse(a: &[Point], b: &[Point], h_gt: &Mat3, tol: f64) -> (usize, Option<f64>) {
    if a.is_empty() {
        return (0, None);
    }
    let res: Vec<f64> = a.iter().zip(b).map(|(&p, &q)| dist(apply_h(h_gt, p), q)).collect();
    let ncm = res.iter().filter(|&&r| r < tol).count();
    let rmse = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    (ncm, Some(rmse))
}

/// Ranges of the random homography; each parameter is drawn uniformly in `[-r, r]`
/// (scale in `[lo, hi]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomographyRanges {
    /// Fraction of the image size.
    pub translation: f64,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Shear angle in radians.
    pub shear: f64,
    /// Perspective coefficients per pixel of centred coordinates.
    pub perspective: f64,
}

impl Default for HomographyRanges {
    fn default() -> Self {
        Self {
            translation: 0.1,
            rotation_deg: 20.0,
            scale: (0.8, 1.2),
            shear: 0.1,
            perspective: 0.003,
        }
    }
}

impl HomographyRanges {
    pub fn identity() -> Self {
        Self {
            translation: 0.0,
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            shear: 0.0,
            perspective: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomographyParams {
    /// Pixels.
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear: f64,
    pub px: f64,
    pub py: f64,
}

impl HomographyParams {
    /// `C · T · R · S · Sh · P · C⁻¹` with `C` the shift to the image centre.
    pub fn matrix(&self, w: usize, h: usize) -> Mat3 {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let c = Mat3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let c_inv = Mat3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        normalize_h(&(c * self.centred() * c_inv))
    }

    /// The transform in centred coordinates.
    pub fn centred(&self) -> Mat3 {
        let t = Mat3::new(1.0, 0.0, self.tx, 0.0, 1.0, self.ty, 0.0, 0.0, 1.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let r = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let sc = Mat3::new(self.scale, 0.0, 0.0, 0.0, self.scale, 0.0, 0.0, 0.0, 1.0);
        let sh = Mat3::new(1.0, self.shear.tan(), 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let p = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, self.px, self.py, 1.0);
        t * r * sc * sh * p
    }

    /// Recovers the parameters from a full-image homography built by [`Self::matrix`].
    pub fn decompose(hm: &Mat3, w: usize, h: usize) -> Self {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let c = Mat3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let c_inv = Mat3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let a = normalize_h(&(c_inv * hm * c));
        let (px, py) = (a[(2, 0)], a[(2, 1)]);
        let p_inv = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -px, -py, 1.0);
        let m = a * p_inv;
        let scale = m[(0, 0)].hypot(m[(1, 0)]);
        let theta = m[(1, 0)].atan2(m[(0, 0)]);
        let (s, co) = theta.sin_cos();
        // Rᵀ L / scale = [[1, tan φ], [0, 1]]
        let k = (co * m[(0, 1)] + s * m[(1, 1)]) / scale;
        Self {
            tx: m[(0, 2)],
            ty: m[(1, 2)],
            rotation_deg: theta.to_degrees(),
            scale,
            shear: k.atan(),
            px,
            py,
        }
    }

    pub fn sample(rng: &mut impl Rng, w: usize, h: usize, r: &HomographyRanges) -> Self {
        let mut u = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            tx: u(-r.translation, r.translation) * w as f64,
            ty: u(-r.translation, r.translation) * h as f64,
            rotation_deg: u(-r.rotation_deg, r.rotation_deg),
            scale: u(r.scale.0, r.scale.1),
            shear: u(-r.shear, r.shear),
            px: u(-r.perspective, r.perspective),
            py: u(-r.perspective, r.perspective),
        }
    }

    /// Whether the parameters lie inside `r` (with slack `eps`).
    pub fn within(&self, w: usize, h: usize, r: &HomographyRanges, eps: f64) -> bool {
        self.tx.abs() <= r.translation * w as f64 + eps
            && self.ty.abs() <= r.translation * h as f64 + eps
            && self.rotation_deg.abs() <= r.rotation_deg + eps
            && self.scale >= r.scale.0 - eps
            && self.scale <= r.scale.1 + eps
            && self.shear.abs() <= r.shear + eps
            && self.px.abs() <= r.perspective + eps
            && self.py.abs() <= r.perspective + eps
    }
}

/// Random homography for a `w × h` image, deterministic per seed.
pub fn sample_homography(w: usize, h: usize, seed: u64, r: &HomographyRanges) -> Result<(Mat3, HomographyParams)> {
    if w < 32 || h < 32 {
        return Err(Error::Dimension(format!("image {w}x{h} is smaller than 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let p = HomographyParams::sample(&mut rng, w, h, r);
        let m = p.matrix(w, h);
        if m.determinant().abs() > 1e-12 {
            return Ok((m, p));
        }
    }
}
