//! Coarse-to-fine matching: coarse cells on the 1/8 grid, fine points inside
//! local windows at 1/2 and 1/4 scale, then bounded subpixel offsets.

use distillmatch_tensor::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, map_to_tokens, Block, Builder, Linear, LoftrLayer, Mlp};

/// Side of the fine window on the 1/2 grid.
pub const FINE_WIN: usize = 5;
/// Side of the window on the 1/4 grid.
pub const MID_WIN: usize = 3;
pub const FINE_TOKENS: usize = FINE_WIN * FINE_WIN;
/// Pixel bound of each subpixel offset component (half a 1/2-scale cell).
pub const SUBPIXEL_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub a: usize,
    pub b: usize,
    pub conf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    /// Index into the coarse list the window came from.
    pub coarse: usize,
    /// Window slots on each side.
    pub ua: usize,
    pub ub: usize,
    pub pa: [f64; 2],
    pub pb: [f64; 2],
    pub p: f64,
}

/// Final correspondence in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub conf: f64,
}

/// Row-major grid of `h × w` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x, y)` of cell `i`.
    pub fn xy(&self, i: usize) -> (usize, usize) {
        (i % self.w, i / self.w)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.w + x
    }

    /// Clamped `side × side` window starting at `(x0, y0)`, row-major.
    pub fn window(&self, x0: isize, y0: isize, side: usize) -> Vec<usize> {
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = Vec::with_capacity(side * side);
        for dy in 0..side as isize {
            for dx in 0..side as isize {
                out.push(self.index(clamp(x0 + dx, self.w), clamp(y0 + dy, self.h)));
            }
        }
        out
    }
}

/// Centre of a cell at `stride` pixels per cell.
pub fn cell_center(x: usize, y: usize, stride: usize) -> [f64; 2] {
    let off = (stride as f64 - 1.0) / 2.0;
    [(stride * x) as f64 + off, (stride * y) as f64 + off]
}

/// 5×5 window on the 1/2 grid for coarse cell `c` of the 1/8 grid.
pub fn fine_window(coarse: Grid, c: usize) -> Vec<usize> {
    let (x, y) = coarse.xy(c);
    let g = Grid::new(coarse.h * 4, coarse.w * 4);
    g.window(4 * x as isize, 4 * y as isize, FINE_WIN)
}

/// 3×3 window on the 1/4 grid for coarse cell `c`.
pub fn mid_window(coarse: Grid, c: usize) -> Vec<usize> {
    let (x, y) = coarse.xy(c);
    let g = Grid::new(coarse.h * 2, coarse.w * 2);
    g.window(2 * x as isize, 2 * y as isize, MID_WIN)
}

/// Pixel centre of a cell on the 1/2 grid.
pub fn fine_point(coarse: Grid, idx: usize) -> [f64; 2] {
    let g = Grid::new(coarse.h * 4, coarse.w * 4);
    let (x, y) = g.xy(idx);
    cell_center(x, y, 2)
}

#[derive(Clone, Copy, Debug)]
pub struct CmmOutput {
    /// Transformed tokens `[1, Na, C]` and `[1, Nb, C]`.
    pub feat_a: Var,
    pub feat_b: Var,
    pub sim: Var,
    /// Row softmax of `sim`, `[1, Na, Nb]`.
    pub p0: Var,
    /// Row softmax of `simᵀ`, `[1, Nb, Na]`.
    pub p1: Var,
}

/// Linear-attention transformer over both 1/8 maps followed by a similarity
/// matrix with a row softmax in each direction.
#[derive(Clone, Debug)]
pub struct Cmm {
    pub rounds: Vec<(LoftrLayer, LoftrLayer)>,
    pub proj: Linear,
    pub temperature: f64,
}

impl Cmm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("cmm");
        let c = cfg.c3();
        let heads = if c % 8 == 0 { 8 } else { 1 };
        let rounds = (0..cfg.loftr_rounds)
            .map(|i| {
                (
                    LoftrLayer::new(&mut s, &format!("self{i}"), c, heads),
                    LoftrLayer::new(&mut s, &format!("cross{i}"), c, heads),
                )
            })
            .collect();
        Self {
            rounds,
            proj: Linear::new(&mut s, "proj", c, c, false),
            temperature: cfg.thresholds.temperature,
        }
    }

    /// Turns every layer into the identity and the projection into `I`.
    pub fn set_identity(&self, p: &mut ParamStore) {
        for (s, c) in &self.rounds {
            s.zero_residual(p);
            c.zero_residual(p);
        }
        let c = p.value(self.proj.w).shape()[0];
        p.set(self.proj.w, Tensor::eye(c)).expect("square projection");
    }

    /// Transforms token sequences `[1, N, C]` with both sides updated together.
    pub fn transform(&self, g: &mut Graph, p: &ParamStore, mut a: Var, mut b: Var) -> Result<(Var, Var)> {
        for (sl, cl) in &self.rounds {
            let a1 = sl.forward(g, p, a, a)?;
            let b1 = sl.forward(g, p, b, b)?;
            let a2 = cl.forward(g, p, a1, b1)?;
            let b2 = cl.forward(g, p, b1, a1)?;
            a = a2;
            b = b2;
        }
        Ok((a, b))
    }

    /// `fa: [1, C, ha, wa]`, `fb: [1, C, hb, wb]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, fa: Var, fb: Var) -> Result<CmmOutput> {
        let (sa, sb) = (g.shape(fa).to_vec(), g.shape(fb).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != 1 || sb[0] != 1 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!("coarse inputs {sa:?} and {sb:?}")));
        }
        let ta = map_to_tokens(g, fa)?;
        let tb = map_to_tokens(g, fb)?;
        let (feat_a, feat_b) = self.transform(g, p, ta, tb)?;
        let pa = self.proj.forward(g, p, feat_a)?;
        let pa = l2_normalize(g, pa)?;
        let pb = self.proj.forward(g, p, feat_b)?;
        let pb = l2_normalize(g, pb)?;
        let pbt = g.transpose(pb, 1, 2)?;
        let sim = g.matmul(pa, pbt)?;
        let sim = g.scale(sim, 1.0 / self.temperature)?;
        let p0 = g.softmax(sim, 2)?;
        let st = g.transpose(sim, 1, 2)?;
        let p1 = g.softmax(st, 2)?;
        Ok(CmmOutput {
            feat_a,
            feat_b,
            sim,
            p0,
            p1,
        })
    }
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    match t.shape() {
        [r, c] | [1, r, c] => Ok((*r, *c, t.data())),
        s => Err(Error::Dimension(format!("expected a matrix, got {s:?}"))),
    }
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Pairs `(i, j)` where `j` is the best column of row `i` and `i` the best row of column `j`.
pub fn mutual_argmax(s: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (r, c, d) = as_matrix(s)?;
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let col_best: Vec<usize> = (0..c)
        .map(|j| {
            let mut best = 0;
            for i in 0..r {
                if d[i * c + j] > d[best * c + j] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok((0..r)
        .filter_map(|i| {
            let j = row_argmax(&d[i * c..(i + 1) * c]);
            (col_best[j] == i).then_some((i, j))
        })
        .collect())
}

/// Mutual best pairs of the similarity matrix whose probability in both
/// directions reaches `theta_c`. Confidence is the forward probability.
pub fn coarse_matches(sim: &Tensor, p0: &Tensor, p1: &Tensor, theta_c: f64) -> Result<Vec<CoarseMatch>> {
    let (r, c, d0) = as_matrix(p0)?;
    let (r1, c1, d1) = as_matrix(p1)?;
    if (r1, c1) != (c, r) {
        return Err(Error::Dimension(format!("p0 {r}x{c} vs p1 {r1}x{c1}")));
    }
    Ok(mutual_argmax(sim)?
        .into_iter()
        .filter_map(|(i, j)| {
            let (f, b) = (d0[i * c + j], d1[j * r + i]);
            (f.min(b) >= theta_c).then_some(CoarseMatch { a: i, b: j, conf: f })
        })
        .collect())
}

/// Window features handed to the fine stage, one map per image.
#[derive(Clone, Copy, Debug)]
pub struct FineInputs {
    /// `[1, C1, H/2, W/2]`.
    pub half_a: Var,
    pub half_b: Var,
    /// `[1, C2, H/4, W/4]`.
    pub quarter_a: Var,
    pub quarter_b: Var,
    /// Coarse tokens `[1, N, C3]`.
    pub coarse_a: Var,
    pub coarse_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FmmOutput {
    /// Refined 5×5 window tokens `[M, 25, Cf]`.
    pub fa: Var,
    pub fb: Var,
    pub sim: Var,
    /// Dual-softmax probabilities `[M, 25, 25]`.
    pub pf: Var,
}

#[derive(Clone, Debug)]
pub struct Fmm {
    pub proj_coarse: Linear,
    pub proj_mid: Linear,
    pub proj_fine: Linear,
    pub self_block: Block,
    pub cross_block: Block,
    pub dim: usize,
    pub temperature: f64,
}

impl Fmm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("fmm");
        let d = cfg.fine_dim;
        let heads = if d % 2 == 0 { 2 } else { 1 };
        Self {
            proj_coarse: Linear::new(&mut s, "proj_coarse", cfg.c3(), d, true),
            proj_mid: Linear::new(&mut s, "proj_mid", cfg.c2(), d, true),
            proj_fine: Linear::new(&mut s, "proj_fine", cfg.c1(), d, true),
            self_block: Block::new(&mut s, "self", d, heads, 2),
            cross_block: Block::cross(&mut s, "cross", d, heads, 2),
            dim: d,
            temperature: cfg.thresholds.temperature,
        }
    }

    fn gather(g: &mut Graph, map: Var, idx: &[usize], m: usize, k: usize) -> Result<Var> {
        let t = map_to_tokens(g, map)?;
        let sel = g.index_select(t, 1, idx)?;
        let c = g.shape(sel)[2];
        Ok(g.reshape(sel, &[m, k, c])?)
    }

    fn side_tokens(&self, g: &mut Graph, p: &ParamStore, half: Var, quarter: Var, coarse: Var, cells: &[usize], grid: Grid) -> Result<Var> {
        let m = cells.len();
        let fine_idx: Vec<usize> = cells.iter().flat_map(|&c| fine_window(grid, c)).collect();
        let mid_idx: Vec<usize> = cells.iter().flat_map(|&c| mid_window(grid, c)).collect();
        let f = Self::gather(g, half, &fine_idx, m, FINE_TOKENS)?;
        let q = Self::gather(g, quarter, &mid_idx, m, MID_WIN * MID_WIN)?;
        let c = g.index_select(coarse, 1, cells)?;
        let cdim = g.shape(c)[2];
        let c = g.reshape(c, &[m, 1, cdim])?;
        let f = self.proj_fine.forward(g, p, f)?;
        let q = self.proj_mid.forward(g, p, q)?;
        let c = self.proj_coarse.forward(g, p, c)?;
        Ok(g.concat(&[c, q, f], 1)?)
    }

    /// Fine probabilities for each `(cell_a, cell_b)` pair; `None` when `pairs` is empty.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: &FineInputs, pairs: &[(usize, usize)], grid: Grid) -> Result<Option<FmmOutput>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let ca: Vec<usize> = pairs.iter().map(|pr| pr.0).collect();
        let cb: Vec<usize> = pairs.iter().map(|pr| pr.1).collect();
        let ta = self.side_tokens(g, p, x.half_a, x.quarter_a, x.coarse_a, &ca, grid)?;
        let tb = self.side_tokens(g, p, x.half_b, x.quarter_b, x.coarse_b, &cb, grid)?;
        let ta = self.self_block.forward(g, p, ta)?;
        let tb = self.self_block.forward(g, p, tb)?;
        let a2 = self.cross_block.forward_cross(g, p, ta, tb)?;
        let b2 = self.cross_block.forward_cross(g, p, tb, ta)?;
        let total = g.shape(a2)[1];
        let fa = g.narrow(a2, 1, total - FINE_TOKENS, FINE_TOKENS)?;
        let fb = g.narrow(b2, 1, total - FINE_TOKENS, FINE_TOKENS)?;
        let na = l2_normalize(g, fa)?;
        let nb = l2_normalize(g, fb)?;
        let nbt = g.transpose(nb, 1, 2)?;
        let sim = g.matmul(na, nbt)?;
        let sim = g.scale(sim, 1.0 / self.temperature)?;
        let pf = dual_softmax(g, sim)?;
        Ok(Some(FmmOutput { fa, fb, sim, pf }))
    }
}

/// Product of the row and column softmax over the last two axes.
pub fn dual_softmax(g: &mut Graph, sim: Var) -> Result<Var> {
    let r = sim_rank(g, sim)?;
    let rows = g.softmax(sim, r - 1)?;
    let cols = g.softmax(sim, r - 2)?;
    Ok(g.mul(rows, cols)?)
}

fn sim_rank(g: &Graph, v: Var) -> Result<usize> {
    let r = g.shape(v).len();
    if r < 2 {
        return Err(Error::Dimension(format!("similarity of rank {r}")));
    }
    Ok(r)
}

/// Best dual-softmax entry per window above `theta_f`, in pixel coordinates.
pub fn fine_matches(pf: &Tensor, pairs: &[(usize, usize)], grid: Grid, theta_f: f64) -> Result<Vec<FineMatch>> {
    let s = pf.shape();
    if s.len() != 3 || s[0] != pairs.len() || s[1] != FINE_TOKENS || s[2] != FINE_TOKENS {
        return Err(Error::Dimension(format!("fine probabilities {s:?} for {} windows", pairs.len())));
    }
    let per = FINE_TOKENS * FINE_TOKENS;
    let mut out = Vec::new();
    for (m, &(ca, cb)) in pairs.iter().enumerate() {
        let block = &pf.data()[m * per..(m + 1) * per];
        let best = row_argmax(block);
        let pv = block[best];
        if pv > theta_f {
            let (ua, ub) = (best / FINE_TOKENS, best % FINE_TOKENS);
            out.push(FineMatch {
                coarse: m,
                ua,
                ub,
                pa: fine_point(grid, fine_window(grid, ca)[ua]),
                pb: fine_point(grid, fine_window(grid, cb)[ub]),
                p: pv,
            });
        }
    }
    Ok(out)
}

/// Subpixel offset regressor over the two refined 5×5 windows.
#[derive(Clone, Debug)]
pub struct Srm {
    pub mlp: Mlp,
}

impl Srm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("srm");
        let mlp = Mlp::new(&mut s, "mlp", 2 * FINE_TOKENS * cfg.fine_dim, cfg.srm_hidden, 4);
        mlp.fc2.zero(s.store);
        Self { mlp }
    }

    /// `fa, fb: [M, 25, Cf]` to offsets `[M, 4]` in pixels: `(dxa, dya, dxb, dyb)`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, fa: Var, fb: Var) -> Result<Var> {
        let s = g.shape(fa).to_vec();
        let a = g.reshape(fa, &[s[0], s[1] * s[2]])?;
        let b = g.reshape(fb, &[s[0], s[1] * s[2]])?;
        let x = g.concat(&[a, b], 1)?;
        let h = self.mlp.forward(g, p, x)?;
        let t = g.tanh(h)?;
        Ok(g.scale(t, SUBPIXEL_SCALE)?)
    }
}

/// Adds offsets `[M, 4]` (rows aligned with `fine`) to the fine points.
pub fn apply_offsets(fine: &[FineMatch], offsets: &Tensor) -> Vec<Match> {
    fine.iter()
        .enumerate()
        .map(|(i, f)| {
            let o = |k: usize| offsets.data()[i * 4 + k];
            Match {
                a: [f.pa[0] + o(0), f.pa[1] + o(1)],
                b: [f.pb[0] + o(2), f.pb[1] + o(3)],
                conf: f.p,
            }
        })
        .collect()
}
