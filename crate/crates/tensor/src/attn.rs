//! Attention built from graph primitives.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

fn check(g: &Graph, q: Var, k: Var, v: Var, op: &'static str) -> Result<()> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r || qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    Ok(())
}

/// `softmax(q kᵀ · scale) v` over the last two axes.
///
/// `q: [.., Lq, D]`, `k: [.., Lk, D]`, `v: [.., Lk, Dv]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    check(g, q, k, v, "attention")?;
    let r = g.shape(q).len();
    let kt = g.transpose(k, r - 2, r - 1)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, scale)?;
    let p = g.softmax(s, r - 1)?;
    g.matmul(p, v)
}

/// Added to the normaliser of [`linear_attention`].
pub const LINEAR_EPS: f64 = 1e-6;

/// Kernelised attention with feature map `elu(x) + 1`.
pub fn linear_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    check(g, q, k, v, "linear_attention")?;
    let r = g.shape(q).len();
    let fq = g.elu(q)?;
    let fq = g.add_scalar(fq, 1.0)?;
    let fk = g.elu(k)?;
    let fk = g.add_scalar(fk, 1.0)?;
    let fkt = g.transpose(fk, r - 2, r - 1)?;
    let kv = g.matmul(fkt, v)?;
    let ksum = g.sum_axis(fk, r - 2)?;
    let ksum_t = g.transpose(ksum, r - 2, r - 1)?;
    let z = g.matmul(fq, ksum_t)?;
    let z = g.add_scalar(z, LINEAR_EPS)?;
    let num = g.matmul(fq, kv)?;
    g.div(num, z)
}
