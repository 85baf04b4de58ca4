//! Semantic/texture aggregation: channel cross-attention (CAA) followed by
//! spatial cross-attention with a residual to the texture map (SAA).

use distillmatch_tensor::{attention, Conv2dOptions, Graph, ParamId, ParamStore, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, zero_param, Builder, Conv, LayerNorm, Linear, Mlp};

#[derive(Clone, Debug)]
pub struct Caa {
    compress: Conv,
    mlp_s: Mlp,
    ln_s: LayerNorm,
    mlp_t: Mlp,
    ln_t: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct CaaOutput {
    /// `[B, N, C3]`.
    pub out: Var,
    /// Channel attention `[B, C3, C3]`, rows sum to one.
    pub attn: Var,
}

impl Caa {
    pub fn new(b: &mut Builder, name: &str, c_sem: usize, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            compress: Conv::new(&mut s, "compress", c_sem, c, 1, Conv2dOptions::default(), false),
            mlp_s: Mlp::new(&mut s, "mlp_s", c, 2 * c, c),
            ln_s: LayerNorm::new(&mut s, "ln_s", c),
            mlp_t: Mlp::new(&mut s, "mlp_t", c, 2 * c, c),
            ln_t: LayerNorm::new(&mut s, "ln_t", c),
        }
    }

    /// Semantic map resampled to the texture grid and compressed to `C3` channels.
    pub fn align(&self, g: &mut Graph, p: &ParamStore, f_s: Var, h: usize, w: usize) -> Result<Var> {
        let r = g.resize_bilinear(f_s, h, w)?;
        self.compress.forward(g, p, r)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f_s: Var, f_t: Var) -> Result<CaaOutput> {
        let ts = g.shape(f_t).to_vec();
        let (h, w) = (ts[2], ts[3]);
        let s = self.align(g, p, f_s, h, w)?;
        let s = map_to_tokens(g, s)?;
        let t = map_to_tokens(g, f_t)?;
        let s = self.mlp_s.forward(g, p, s)?;
        let s = self.ln_s.forward(g, p, s)?;
        let t = self.mlp_t.forward(g, p, t)?;
        let t = self.ln_t.forward(g, p, t)?;
        let q = g.transpose(s, 1, 2)?;
        let kv = g.transpose(t, 1, 2)?;
        let kt = g.transpose(kv, 1, 2)?;
        let a = g.matmul(q, kt)?;
        let a = g.scale(a, 1.0 / ((h * w) as f64).sqrt())?;
        let attn = g.softmax(a, 2)?;
        let o = g.matmul(attn, kv)?;
        let out = g.transpose(o, 1, 2)?;
        Ok(CaaOutput { out, attn })
    }
}

#[derive(Clone, Debug)]
pub struct Saa {
    q: Conv,
    k: Conv,
    v: Conv,
    pub out: Linear,
}

impl Saa {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        let saa = Self {
            q: Conv::new(&mut s, "q", c, c, 1, Conv2dOptions::default(), true),
            k: Conv::new(&mut s, "k", c, c, 1, Conv2dOptions::default(), true),
            v: Conv::new(&mut s, "v", c, c, 1, Conv2dOptions::default(), true),
            out: Linear::new(&mut s, "out", c, c, true),
        };
        saa.out.zero(s.store);
        saa
    }

    /// Returns `(F_T + reshape(F_SAA), F_SAA)`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f_caa: Var, f_t: Var) -> Result<(Var, Var)> {
        let ts = g.shape(f_t).to_vec();
        let (c, h, w) = (ts[1], ts[2], ts[3]);
        let caa_map = tokens_to_map(g, f_caa, h, w)?;
        let q = self.q.forward(g, p, f_t)?;
        let k = self.k.forward(g, p, caa_map)?;
        let v = self.v.forward(g, p, caa_map)?;
        let (q, k, v) = (map_to_tokens(g, q)?, map_to_tokens(g, k)?, map_to_tokens(g, v)?);
        let o = attention(g, q, k, v, 1.0 / (c as f64).sqrt())?;
        let saa = self.out.forward(g, p, o)?;
        let m = tokens_to_map(g, saa, h, w)?;
        Ok((g.add(f_t, m)?, saa))
    }
}

/// Single-head cross-attention from texture tokens to semantic tokens,
/// added back through a learnable scalar gate that starts at zero.
#[derive(Clone, Debug)]
pub struct GatedCross {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub gate: ParamId,
}

impl GatedCross {
    pub fn new(b: &mut Builder, name: &str, c_t: usize, c_s: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", c_t, c_t, true),
            k: Linear::new(&mut s, "k", c_s, c_t, true),
            v: Linear::new(&mut s, "v", c_s, c_t, true),
            o: Linear::new(&mut s, "o", c_t, c_t, true),
            gate: s.zeros("gate", &[1]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f_t: Var, f_s: Var) -> Result<Var> {
        let ts = g.shape(f_t).to_vec();
        let t = map_to_tokens(g, f_t)?;
        let s = map_to_tokens(g, f_s)?;
        let q = self.q.forward(g, p, t)?;
        let k = self.k.forward(g, p, s)?;
        let v = self.v.forward(g, p, s)?;
        let o = attention(g, q, k, v, 1.0 / (ts[1] as f64).sqrt())?;
        let o = self.o.forward(g, p, o)?;
        let gate = g.param(p, self.gate);
        let o = g.mul(o, gate)?;
        let m = tokens_to_map(g, o, ts[2], ts[3])?;
        Ok(g.add(f_t, m)?)
    }
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    down1: Conv,
    down2: Conv,
    half: GatedCross,
    quarter: GatedCross,
}

#[derive(Clone, Copy, Debug)]
pub struct StfaOutput {
    pub eighth: Var,
    pub saa: Var,
    pub caa_attn: Var,
    pub half: Option<Var>,
    pub quarter: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Stfa {
    pub caa: Caa,
    pub saa: Saa,
    pub hierarchy: Option<Hierarchy>,
}

impl Stfa {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("stfa");
        let (c4, c3) = (cfg.c4(), cfg.c3());
        let caa = Caa::new(&mut s, "caa", c4, c3);
        let saa = Saa::new(&mut s, "saa", c3);
        let hierarchy = cfg.hierarchical.then(|| {
            let mut h = s.sub("hier");
            Hierarchy {
                down1: Conv::new(&mut h, "down1", c4, c4, 3, Conv2dOptions::same(3).stride(2), true),
                down2: Conv::new(&mut h, "down2", c4, c4, 3, Conv2dOptions::same(3).stride(2), true),
                half: GatedCross::new(&mut h, "half", cfg.c1(), c4),
                quarter: GatedCross::new(&mut h, "quarter", cfg.c2(), c4),
            }
        });
        Self { caa, saa, hierarchy }
    }

    /// Single-scale path on the 1/8 grid.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f_s: Var, f_t: Var) -> Result<StfaOutput> {
        let caa = self.caa.forward(g, p, f_s, f_t)?;
        let (eighth, saa) = self.saa.forward(g, p, caa.out, f_t)?;
        Ok(StfaOutput {
            eighth,
            saa,
            caa_attn: caa.attn,
            half: None,
            quarter: None,
        })
    }

    /// Multi-scale path fed by a semantic map at 1/2 resolution.
    pub fn forward_hierarchical(&self, g: &mut Graph, p: &ParamStore, f_s_half: Var, half: Var, quarter: Var, eighth: Var) -> Result<StfaOutput> {
        let hier = self
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::Config("hierarchical aggregation is not enabled".into()))?;
        let s4 = hier.down1.forward(g, p, f_s_half)?;
        let s4 = g.relu(s4)?;
        let s8 = hier.down2.forward(g, p, s4)?;
        let mut out = self.forward(g, p, s8, eighth)?;
        out.half = Some(hier.half.forward(g, p, half, f_s_half)?);
        out.quarter = Some(hier.quarter.forward(g, p, quarter, s4)?);
        Ok(out)
    }

    pub fn zero_gates(&self, p: &mut ParamStore) {
        if let Some(h) = &self.hierarchy {
            zero_param(p, h.half.gate);
            zero_param(p, h.quarter.gate);
        }
    }
}
