//! Ground-truth assignments and matching losses.

use distillmatch_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_h, invert, Mat3, Point};
use crate::matcher::{cell_center, fine_window, Grid, FINE_TOKENS};

pub const PROB_FLOOR: f64 = 1e-6;
/// Epipolar lines shorter than this are not scored.
pub const LINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseLossWeights {
    pub alpha_c: f64,
    pub beta_c: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for CoarseLossWeights {
    fn default() -> Self {
        Self {
            alpha_c: 1.0,
            beta_c: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_sub: f64,
    pub lambda_kd: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_f: 0.3,
            lambda_sub: 1e4,
            lambda_kd: 0.1,
            lambda_ce: 0.1,
        }
    }
}

/// Cell index of a pixel coordinate at `stride` pixels per cell.
pub fn cell_of(v: f64, stride: usize) -> Option<usize> {
    let c = ((v + 0.5) / stride as f64).floor();
    (c >= 0.0 && c.is_finite()).then_some(c as usize)
}

fn cell_of_point(p: Point, grid: Grid, stride: usize) -> Option<usize> {
    let x = cell_of(p[0], stride)?;
    let y = cell_of(p[1], stride)?;
    (x < grid.w && y < grid.h).then(|| grid.index(x, y))
}

/// Pairs `(i, j)` of cells whose centres land in each other's cell under `h` and `h⁻¹`.
pub fn mutual_cells(h: &Mat3, h_inv: &Mat3, ga: Grid, gb: Grid, stride: usize) -> Vec<(usize, usize)> {
    (0..ga.len())
        .filter_map(|i| {
            let (x, y) = ga.xy(i);
            let j = cell_of_point(apply_h(h, cell_center(x, y, stride)), gb, stride)?;
            let (xb, yb) = gb.xy(j);
            let back = cell_of_point(apply_h(h_inv, cell_center(xb, yb, stride)), ga, stride)?;
            (back == i).then_some((i, j))
        })
        .collect()
}

/// One-hot coarse assignments in both directions plus the matched pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct GtAssignment {
    pub grid_a: Grid,
    pub grid_b: Grid,
    pub pairs: Vec<(usize, usize)>,
    /// `[Na, Nb]`.
    pub p0: Tensor,
    /// `[Nb, Na]`.
    pub p1: Tensor,
}

/// Coarse assignment on the 1/8 grids of two images related by `h` (a to b).
pub fn build_gt_assignment(h: &Mat3, grid_a: Grid, grid_b: Grid) -> Result<GtAssignment> {
    let h_inv = invert(h)?;
    let pairs = mutual_cells(h, &h_inv, grid_a, grid_b, 8);
    let (na, nb) = (grid_a.len(), grid_b.len());
    let mut p0 = Tensor::zeros(&[na, nb]);
    let mut p1 = Tensor::zeros(&[nb, na]);
    for &(i, j) in &pairs {
        p0.set(&[i, j], 1.0);
        p1.set(&[j, i], 1.0);
    }
    Ok(GtAssignment {
        grid_a,
        grid_b,
        pairs,
        p0,
        p1,
    })
}

/// `[25, 25]` fine assignment between the windows of coarse cells `ca` and `cb`.
pub fn fine_gt(h: &Mat3, h_inv: &Mat3, grid: Grid, ca: usize, cb: usize) -> Tensor {
    let half = Grid::new(grid.h * 4, grid.w * 4);
    let (wa, wb) = (fine_window(grid, ca), fine_window(grid, cb));
    let mut t = Tensor::zeros(&[FINE_TOKENS, FINE_TOKENS]);
    for (u, &ia) in wa.iter().enumerate() {
        let (x, y) = half.xy(ia);
        let Some(jb) = cell_of_point(apply_h(h, cell_center(x, y, 2)), half, 2) else { continue };
        let (xb, yb) = half.xy(jb);
        if cell_of_point(apply_h(h_inv, cell_center(xb, yb, 2)), half, 2) != Some(ia) {
            continue;
        }
        if let Some(v) = wb.iter().position(|&c| c == jb) {
            t.set(&[u, v], 1.0);
        }
    }
    t
}

/// Stacked fine assignments `[M, 25, 25]` for the given coarse pairs.
pub fn fine_gt_batch(h: &Mat3, grid: Grid, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let h_inv = invert(h)?;
    let mut data = Vec::with_capacity(pairs.len() * FINE_TOKENS * FINE_TOKENS);
    for &(a, b) in pairs {
        data.extend_from_slice(fine_gt(h, &h_inv, grid, a, b).data());
    }
    Ok(Tensor::new(&[pairs.len(), FINE_TOKENS, FINE_TOKENS], data)?)
}

/// Per-entry weights for the focal loss: positives normalised by their count
/// and negatives (every entry of a row without a positive) by theirs, each
/// matrix of the leading batch weighted equally.
fn focal_weights(gt: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = gt.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!("focal target {s:?}")));
    }
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let per = r * c;
    let batch = gt.numel() / per.max(1);
    let mut wp = Tensor::zeros(s);
    let mut wn = Tensor::zeros(s);
    for b in 0..batch {
        let blk = &gt.data()[b * per..(b + 1) * per];
        let pos = blk.iter().filter(|&&v| v > 0.5).count();
        let empty_rows: Vec<usize> = (0..r).filter(|&i| blk[i * c..(i + 1) * c].iter().all(|&v| v <= 0.5)).collect();
        let neg = empty_rows.len() * c;
        for k in 0..per {
            if blk[k] > 0.5 {
                wp.data_mut()[b * per + k] = 1.0 / (pos as f64 * batch as f64);
            }
        }
        for &i in &empty_rows {
            for j in 0..c {
                wn.data_mut()[b * per + i * c + j] = 1.0 / (neg as f64 * batch as f64);
            }
        }
    }
    Ok((wp, wn))
}

/// Focal loss of probabilities `p` against a 0/1 target of the same shape,
/// averaged over the leading batch of matrices.
pub fn focal_loss(g: &mut Graph, p: Var, gt: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if g.shape(p) != gt.shape() {
        return Err(Error::Dimension(format!("probabilities {:?} vs target {:?}", g.shape(p), gt.shape())));
    }
    let (wp, wn) = focal_weights(gt)?;
    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let q = g.neg(pc)?;
    let q = g.add_scalar(q, 1.0)?;
    // positives: -alpha (1-p)^gamma ln p
    let lp = g.log(pc)?;
    let fq = g.powf(q, gamma)?;
    let pos = g.mul(fq, lp)?;
    // negatives: -(1-alpha) p^gamma ln(1-p)
    let lq = g.log(q)?;
    let fp = g.powf(pc, gamma)?;
    let neg = g.mul(fp, lq)?;
    let wp = g.constant(wp);
    let wn = g.constant(wn);
    let pos = g.mul(pos, wp)?;
    let neg = g.mul(neg, wn)?;
    let pos = g.sum(pos)?;
    let neg = g.sum(neg)?;
    let pos = g.scale(pos, -alpha)?;
    let neg = g.scale(neg, -(1.0 - alpha))?;
    Ok(g.add(pos, neg)?)
}

/// `alpha_c · FL(P0) + beta_c · FL(P1)`; `p0: [1, Na, Nb]` or `[Na, Nb]`.
pub fn loss_coarse(g: &mut Graph, p0: Var, p1: Var, gt: &GtAssignment, w: &CoarseLossWeights) -> Result<Var> {
    let t0 = gt.p0.reshape(g.shape(p0))?;
    let t1 = gt.p1.reshape(g.shape(p1))?;
    let l0 = focal_loss(g, p0, &t0, w.focal_alpha, w.focal_gamma)?;
    let l1 = focal_loss(g, p1, &t1, w.focal_alpha, w.focal_gamma)?;
    let l0 = g.scale(l0, w.alpha_c)?;
    let l1 = g.scale(l1, w.beta_c)?;
    Ok(g.add(l0, l1)?)
}

/// Mean focal loss over the fine windows `pf: [M, 25, 25]`; zero when `M = 0`.
pub fn loss_fine(g: &mut Graph, pf: Option<Var>, gt: &Tensor, w: &CoarseLossWeights) -> Result<Var> {
    match pf {
        Some(p) => focal_loss(g, p, gt, w.focal_alpha, w.focal_gamma),
        None => {
            log::warn!("no coarse matches: fine loss is zero");
            Ok(g.scalar(0.0))
        }
    }
}

/// Mean symmetric epipolar distance of refined matches.
///
/// `xa, xb: [M, 2]` hold points in the coordinates `e` is defined for, with
/// `x_aᵀ E x_b = 0` on exact correspondences. Matches whose epipolar line in
/// either image is shorter than [`LINE_EPS`] are left out; their count is
/// returned alongside the loss.
pub fn loss_subpixel(g: &mut Graph, xa: Var, xb: Var, e: &Mat3) -> Result<(Var, usize)> {
    let s = g.shape(xa).to_vec();
    if s.len() != 2 || s[1] != 2 || g.shape(xb) != s.as_slice() {
        return Err(Error::Dimension(format!("subpixel points {s:?} and {:?}", g.shape(xb))));
    }
    let m = s[0];
    let ones = g.constant(Tensor::ones(&[m, 1]));
    let ha = g.concat(&[xa, ones], 1)?;
    let hb = g.concat(&[xb, ones], 1)?;
    // lb = E x_b (line in a), la = Eᵀ x_a (line in b), stored as rows
    let et = g.constant(mat_tensor(&e.transpose()));
    let en = g.constant(mat_tensor(e));
    let lb = g.matmul(hb, et)?;
    let la = g.matmul(ha, en)?;
    let r = g.mul(ha, lb)?;
    let r = g.sum_axis(r, 1)?;
    let r2 = g.square(r)?;
    let na = line_norm(g, la)?;
    let nb = line_norm(g, lb)?;
    let keep: Vec<usize> = (0..m)
        .filter(|&i| g.value(na).data()[i] >= LINE_EPS && g.value(nb).data()[i] >= LINE_EPS)
        .collect();
    let skipped = m - keep.len();
    if skipped > 0 {
        log::warn!("{skipped} matches with degenerate epipolar lines skipped");
    }
    if keep.is_empty() {
        return Ok((g.scalar(0.0), skipped));
    }
    let r2 = g.index_select(r2, 0, &keep)?;
    let na = g.index_select(na, 0, &keep)?;
    let nb = g.index_select(nb, 0, &keep)?;
    let ia = g.powf(na, -1.0)?;
    let ib = g.powf(nb, -1.0)?;
    let inv = g.add(ia, ib)?;
    let t = g.mul(r2, inv)?;
    Ok((g.mean(t)?, skipped))
}

/// Squared norm of the first two components of each row of `[M, 3]`, shape `[M, 1]`.
fn line_norm(g: &mut Graph, l: Var) -> Result<Var> {
    let xy = g.narrow(l, 1, 0, 2)?;
    let sq = g.square(xy)?;
    Ok(g.sum_axis(sq, 1)?)
}

pub fn mat_tensor(m: &Mat3) -> Tensor {
    Tensor::from_fn(&[3, 3], |i| m[(i / 3, i % 3)])
}

/// Rows `[M, 3]` of homogeneous points mapped by `h`, returned as `[M, 2]`.
fn warp_rows(g: &mut Graph, x: Var, h: &Mat3) -> Result<Var> {
    let m = g.shape(x)[0];
    let ones = g.constant(Tensor::ones(&[m, 1]));
    let hx = g.concat(&[x, ones], 1)?;
    let ht = g.constant(mat_tensor(&h.transpose()));
    let y = g.matmul(hx, ht)?;
    let xy = g.narrow(y, 1, 0, 2)?;
    let z = g.narrow(y, 1, 2, 1)?;
    Ok(g.div(xy, z)?)
}

/// Symmetric squared transfer distance under `h` (a to b), averaged over
/// matches and divided by `width²`. Used when only a homography is known.
pub fn loss_reprojection(g: &mut Graph, xa: Var, xb: Var, h: &Mat3, width: usize) -> Result<Var> {
    let h_inv = invert(h)?;
    let fa = warp_rows(g, xa, h)?;
    let fb = warp_rows(g, xb, &h_inv)?;
    let da = g.sub(fa, xb)?;
    let db = g.sub(fb, xa)?;
    let da = g.square(da)?;
    let db = g.square(db)?;
    let s = g.add(da, db)?;
    let s = g.sum_axis(s, 1)?;
    let s = g.mean(s)?;
    Ok(g.scale(s, 1.0 / (width * width) as f64)?)
}

/// Loss components of one pair.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub kd: Var,
    pub ce: Var,
    pub coarse: Var,
    pub fine: Var,
    pub sub: Var,
}

pub fn total_loss(g: &mut Graph, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (t.kd, w.lambda_kd),
        (t.ce, w.lambda_ce),
        (t.coarse, w.lambda_c),
        (t.fine, w.lambda_f),
        (t.sub, w.lambda_sub),
    ];
    let mut acc: Option<Var> = None;
    for (v, lambda) in parts {
        let s = g.scale(v, lambda)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("five terms"))
}
