//! Feature distillation losses between teacher and student maps `[B, C, h, w]`.

use distillmatch_tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 0.5,
            gamma: 0.25,
        }
    }
}

fn check_pair(g: &Graph, a: Var, b: Var) -> Result<[usize; 4]> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 4 {
        return Err(Error::Dimension(format!("distillation inputs {sa:?} and {sb:?}")));
    }
    Ok([sa[0], sa[1], sa[2], sa[3]])
}

/// Each sample divided by the L2 norm of its flattened feature; returns `[B, C·h·w]`.
fn normalise_samples(g: &mut Graph, x: Var, s: [usize; 4]) -> Result<Var> {
    let flat = g.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    let sq = g.square(flat)?;
    let ss = g.sum_axis(sq, 1)?;
    if g.value(ss).data().iter().any(|&v| v == 0.0) {
        return Err(Error::Degenerate("zero-norm feature in distillation".into()));
    }
    let n = g.sqrt(ss)?;
    Ok(g.div(flat, n)?)
}

/// Mean over the `B·h·w` positions of the squared difference of the
/// per-sample L2-normalised features.
pub fn loss_mse(g: &mut Graph, f_tea: Var, f_stu: Var) -> Result<Var> {
    let s = check_pair(g, f_tea, f_stu)?;
    let t = normalise_samples(g, f_tea, s)?;
    let u = normalise_samples(g, f_stu, s)?;
    let d = g.sub(t, u)?;
    let d = g.square(d)?;
    let total = g.sum(d)?;
    Ok(g.scale(total, 1.0 / (s[0] * s[2] * s[3]) as f64)?)
}

/// `F Fᵀ / (h·w)` per sample, `[B, C, C]`.
pub fn gram(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let f = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let ft = g.transpose(f, 1, 2)?;
    let m = g.matmul(f, ft)?;
    Ok(g.scale(m, 1.0 / (s[2] * s[3]) as f64)?)
}

/// Mean squared difference of the Gram matrices over all `B·C²` entries.
pub fn loss_gram(g: &mut Graph, f_tea: Var, f_stu: Var) -> Result<Var> {
    check_pair(g, f_tea, f_stu)?;
    let gt = gram(g, f_tea)?;
    let gs = gram(g, f_stu)?;
    let d = g.sub(gt, gs)?;
    let d = g.square(d)?;
    Ok(g.mean(d)?)
}

/// KL(teacher ‖ student) of the channel softmax at each position, averaged over positions.
pub fn loss_kl(g: &mut Graph, f_tea: Var, f_stu: Var) -> Result<Var> {
    let s = check_pair(g, f_tea, f_stu)?;
    let lp = g.log_softmax(f_tea, 1)?;
    let lq = g.log_softmax(f_stu, 1)?;
    let p = g.exp(lp)?;
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let total = g.sum(t)?;
    Ok(g.scale(total, 1.0 / (s[0] * s[2] * s[3]) as f64)?)
}

/// The three components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub mse: Var,
    pub gram: Var,
    pub kl: Var,
    pub total: Var,
}

pub fn loss_kd(g: &mut Graph, f_tea: Var, f_stu: Var, w: &DistillWeights) -> Result<KdTerms> {
    let mse = loss_mse(g, f_tea, f_stu)?;
    let gram = loss_gram(g, f_tea, f_stu)?;
    let kl = loss_kl(g, f_tea, f_stu)?;
    let a = g.scale(mse, w.alpha)?;
    let b = g.scale(gram, w.beta)?;
    let c = g.scale(kl, w.gamma)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(KdTerms { mse, gram, kl, total })
}
