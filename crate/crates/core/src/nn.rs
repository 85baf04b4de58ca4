//! Layers shared by the branches: linear maps, norms, convolutions and
//! transformer blocks. Each layer owns parameter ids, never values.

use distillmatch_tensor::{attention, linear_attention, Conv2dOptions, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;
pub const TRANSFORMER_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value, true)
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::trunc_normal(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    /// He-style normal init scaled by fan-in.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.add(name, t)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut *self.rng
    }
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let mut s = b.sub(name);
        let w = s.trunc_normal("w", &[din, dout], TRANSFORMER_STD);
        let bias = bias.then(|| s.zeros("b", &[dout]));
        Self { w, b: bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.param(p, b);
                g.add(y, b)?
            }
            None => y,
        })
    }

    pub fn zero(&self, p: &mut ParamStore) {
        zero_param(p, self.w);
        if let Some(b) = self.b {
            zero_param(p, b);
        }
    }
}

pub fn zero_param(p: &mut ParamStore, id: ParamId) {
    let shape = p.value(id).shape().to_vec();
    p.set(id, Tensor::zeros(&shape)).expect("same shape");
}

/// Layer norm over one axis (the last one unless built with [`LayerNorm::channel`]).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    channel_axis: bool,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.ones("gamma", &[dim]),
            beta: s.zeros("beta", &[dim]),
            channel_axis: false,
        }
    }

    /// Normalises axis 1 of a `[B, C, H, W]` map.
    pub fn channel(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            channel_axis: true,
            ..Self::new(b, name, dim)
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let axis = if self.channel_axis { 1 } else { g.shape(x).len() - 1 };
        let (gm, bt) = (g.param(p, self.gamma), g.param(p, self.beta));
        Ok(g.layer_norm(x, axis, gm, bt, LN_EPS)?)
    }

    pub fn zero(&self, p: &mut ParamStore) {
        zero_param(p, self.gamma);
        zero_param(p, self.beta);
    }
}

/// Two linear layers with a GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", din, hidden, true),
            fc2: Linear::new(&mut s, "fc2", hidden, dout, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOptions, bias: bool) -> Self {
        let mut s = b.sub(name);
        let cin_g = cin / opts.groups;
        let w = s.kaiming("w", &[cout, cin_g, k, k], cin_g * k * k);
        let bias = bias.then(|| s.zeros("b", &[cout]));
        Self { w, b: bias, opts }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        Ok(g.conv2d(x, w, b, self.opts)?)
    }

    pub fn zero(&self, p: &mut ParamStore) {
        zero_param(p, self.w);
        if let Some(b) = self.b {
            zero_param(p, b);
        }
    }
}

/// `[B, C, H, W]` to `[B, H·W, C]`.
/// `x` scaled to unit L2 norm along the last axis; zero rows stay zero.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let last = g.shape(x).len() - 1;
    let sq = g.square(x)?;
    let ss = g.sum_axis(sq, last)?;
    let ss = g.add_scalar(ss, 1e-12)?;
    let n = g.sqrt(ss)?;
    Ok(g.div(x, n)?)
}

pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.permute(r, &[0, 2, 1])?)
}

/// `[B, H·W, C]` to `[B, C, H, W]`.
pub fn tokens_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1])?;
    Ok(g.reshape(t, &[s[0], s[2], h, w])?)
}

/// `[B, L, D]` to `[B, heads, L, D/heads]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[s[0], s[2], s[1] * s[3]])?)
}

/// Multi-head softmax attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, true),
            v: Linear::new(&mut s, "v", dim, dim, true),
            o: Linear::new(&mut s, "o", dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, src: Var) -> Result<Var> {
        let dim = *g.shape(x).last().expect("rank");
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, src)?;
        let v = self.v.forward(g, p, src)?;
        let (q, k, v) = (
            split_heads(g, q, self.heads)?,
            split_heads(g, k, self.heads)?,
            split_heads(g, v, self.heads)?,
        );
        let scale = 1.0 / ((dim / self.heads) as f64).sqrt();
        let o = attention(g, q, k, v, scale)?;
        let o = merge_heads(g, o)?;
        self.o.forward(g, p, o)
    }
}

/// Pre-norm transformer block; attends to itself or, in cross mode, to a source sequence.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub ln_src: Option<LayerNorm>,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self::build(b, name, dim, heads, mlp_ratio, false)
    }

    pub fn cross(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self::build(b, name, dim, heads, mlp_ratio, true)
    }

    fn build(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize, cross: bool) -> Self {
        let mut s = b.sub(name);
        Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            ln_src: cross.then(|| LayerNorm::new(&mut s, "ln_src", dim)),
            attn: Attention::new(&mut s, "attn", dim, heads),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x)
    }

    pub fn forward_cross(&self, g: &mut Graph, p: &ParamStore, x: Var, src: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let s = match &self.ln_src {
            Some(ln) => ln.forward(g, p, src)?,
            None => self.ln1.forward(g, p, src)?,
        };
        let a = self.attn.forward(g, p, h, s)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x)
    }

    fn feed_forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        Ok(g.add(x, m)?)
    }
}

/// Linear-attention encoder layer in the detector-free matching style.
#[derive(Clone, Debug)]
pub struct LoftrLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub merge: Linear,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl LoftrLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim, false),
            k: Linear::new(&mut s, "k", dim, dim, false),
            v: Linear::new(&mut s, "v", dim, dim, false),
            merge: Linear::new(&mut s, "merge", dim, dim, false),
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            fc1: Linear::new(&mut s, "fc1", 2 * dim, 2 * dim, false),
            fc2: Linear::new(&mut s, "fc2", 2 * dim, dim, false),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            heads,
        }
    }

    /// `x + message(x, src)`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, src: Var) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, src)?;
        let v = self.v.forward(g, p, src)?;
        let (q, k, v) = (
            split_heads(g, q, self.heads)?,
            split_heads(g, k, self.heads)?,
            split_heads(g, v, self.heads)?,
        );
        let m = linear_attention(g, q, k, v)?;
        let m = merge_heads(g, m)?;
        let m = self.merge.forward(g, p, m)?;
        let m = self.norm1.forward(g, p, m)?;
        let last = g.shape(x).len() - 1;
        let cat = g.concat(&[x, m], last)?;
        let h = self.fc1.forward(g, p, cat)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }

    /// Makes the layer an exact identity.
    pub fn zero_residual(&self, p: &mut ParamStore) {
        self.norm2.zero(p);
    }
}

/// Fixed 2D sin-cos position table `[gh·gw, dim]`.
///
/// The first half of the channels encodes the row, the second half the
/// column; each half is `[sin | cos]` over geometric frequencies.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "position dim must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut t = Tensor::zeros(&[gh * gw, dim]);
    for y in 0..gh {
        for x in 0..gw {
            let row = y * gw + x;
            for (i, &w) in omega.iter().enumerate() {
                let (py, px) = (y as f64 * w, x as f64 * w);
                t.set(&[row, i], py.sin());
                t.set(&[row, quarter + i], py.cos());
                t.set(&[row, 2 * quarter + i], px.sin());
                t.set(&[row, 3 * quarter + i], px.cos());
            }
        }
    }
    t
}
