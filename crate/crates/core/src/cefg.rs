//! Category-enhanced feature guidance.
//!
//! A learnable category token rides along with the shallow 1/2-scale
//! features through a small transformer encoder, is classified as visible or
//! infrared, and is then added to the *other* image's deep features before a
//! per-modality transfer block. The result is fused into the 1/8 texture map.

use distillmatch_tensor::{Conv2dOptions, Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, zero_param, Block, Builder, Conv, LayerNorm, Mlp, TRANSFORMER_STD};

/// Class index of the visible stream; the infrared stream is the other one.
pub const VISIBLE_CLASS: usize = 1;
pub const INFRARED_CLASS: usize = 0;

#[derive(Clone, Debug)]
pub struct Restormer {
    ln1: LayerNorm,
    qkv: Conv,
    qkv_dw: Conv,
    proj: Conv,
    temperature: ParamId,
    ln2: LayerNorm,
    ffn_in: Conv,
    ffn_dw: Conv,
    ffn_out: Conv,
}

impl Restormer {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        let hidden = 2 * c;
        Self {
            ln1: LayerNorm::channel(&mut s, "ln1", c),
            qkv: Conv::new(&mut s, "qkv", c, 3 * c, 1, Conv2dOptions::default(), false),
            qkv_dw: Conv::new(&mut s, "qkv_dw", 3 * c, 3 * c, 3, Conv2dOptions::same(3).groups(3 * c), false),
            proj: Conv::new(&mut s, "proj", c, c, 1, Conv2dOptions::default(), false),
            temperature: s.ones("temperature", &[1]),
            ln2: LayerNorm::channel(&mut s, "ln2", c),
            ffn_in: Conv::new(&mut s, "ffn_in", c, 2 * hidden, 1, Conv2dOptions::default(), false),
            ffn_dw: Conv::new(&mut s, "ffn_dw", 2 * hidden, 2 * hidden, 3, Conv2dOptions::same(3).groups(2 * hidden), false),
            ffn_out: Conv::new(&mut s, "ffn_out", hidden, c, 1, Conv2dOptions::default(), false),
        }
    }

    /// Rows of `x: [B, C, L]` scaled to unit L2 norm.
    fn l2_rows(g: &mut Graph, x: Var) -> Result<Var> {
        let sq = g.square(x)?;
        let ss = g.sum_axis(sq, 2)?;
        let ss = g.add_scalar(ss, 1e-12)?;
        let n = g.sqrt(ss)?;
        Ok(g.div(x, n)?)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c, l) = (s[0], s[1], s[2] * s[3]);
        // transposed (channel) attention
        let h = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let qkv = self.qkv_dw.forward(g, p, qkv)?;
        let qkv = g.reshape(qkv, &[b, 3 * c, l])?;
        let q = g.narrow(qkv, 1, 0, c)?;
        let k = g.narrow(qkv, 1, c, c)?;
        let v = g.narrow(qkv, 1, 2 * c, c)?;
        let q = Self::l2_rows(g, q)?;
        let k = Self::l2_rows(g, k)?;
        let kt = g.transpose(k, 1, 2)?;
        let a = g.matmul(q, kt)?;
        let t = g.param(p, self.temperature);
        let a = g.mul(a, t)?;
        let a = g.softmax(a, 2)?;
        let o = g.matmul(a, v)?;
        let o = g.reshape(o, &s)?;
        let o = self.proj.forward(g, p, o)?;
        let x = g.add(x, o)?;
        // gated feed-forward
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ffn_in.forward(g, p, h)?;
        let h = self.ffn_dw.forward(g, p, h)?;
        let half = g.shape(h)[1] / 2;
        let h1 = g.narrow(h, 1, 0, half)?;
        let h2 = g.narrow(h, 1, half, half)?;
        let h1 = g.gelu(h1)?;
        let h = g.mul(h1, h2)?;
        let h = self.ffn_out.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Shallow tokens `[B, N, C3]` on the 1/8 grid.
    pub shallow: Var,
    /// Category token after the encoder, `[B, 1, C3]`.
    pub token: Var,
    /// Deep tokens `[B, N, C3]`.
    pub deep: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CefgOutput {
    pub encoded: Encoded,
    pub logits: Var,
    pub enhanced: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Cefg {
    pub restormer: Restormer,
    pub merge: Conv,
    pub merge_norm: LayerNorm,
    pub token: ParamId,
    pub layers: Vec<Block>,
    pub classifier: Mlp,
    pub transfer_a: Block,
    pub transfer_b: Block,
    pub fuse1: Conv,
    pub fuse_norm1: LayerNorm,
    pub fuse2: Conv,
    pub fuse_norm2: LayerNorm,
}

impl Cefg {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("cefg");
        let (c1, c3) = (cfg.c1(), cfg.c3());
        let heads = 4;
        Self {
            restormer: Restormer::new(&mut s, "restormer", c1),
            merge: Conv::new(&mut s, "merge", c1, c3, 4, Conv2dOptions::default().stride(4), true),
            merge_norm: LayerNorm::new(&mut s, "merge_norm", c3),
            token: s.trunc_normal("token", &[1, 1, c3], TRANSFORMER_STD),
            layers: (0..cfg.cefg_layers)
                .map(|i| Block::new(&mut s, &format!("layer{i}"), c3, heads, 2))
                .collect(),
            classifier: Mlp::new(&mut s, "classifier", c3, c3, 2),
            transfer_a: Block::new(&mut s, "transfer_a", c3, heads, 2),
            transfer_b: Block::new(&mut s, "transfer_b", c3, heads, 2),
            fuse1: Conv::new(&mut s, "fuse1", c3, c3, 3, Conv2dOptions::same(3), true),
            fuse_norm1: LayerNorm::channel(&mut s, "fuse_norm1", c3),
            fuse2: Conv::new(&mut s, "fuse2", c3, c3, 3, Conv2dOptions::same(3), true),
            fuse_norm2: LayerNorm::channel(&mut s, "fuse_norm2", c3),
        }
    }

    /// `f_half: [B, C1, H/2, W/2]`.
    pub fn encode(&self, g: &mut Graph, p: &ParamStore, f_half: Var) -> Result<Encoded> {
        let x = self.restormer.forward(g, p, f_half)?;
        let x = self.merge.forward(g, p, x)?;
        let shallow = map_to_tokens(g, x)?;
        let shallow = self.merge_norm.forward(g, p, shallow)?;
        self.encode_tokens(g, p, shallow)
    }

    /// Runs the encoder on given shallow tokens `[B, N, C3]`.
    pub fn encode_tokens(&self, g: &mut Graph, p: &ParamStore, shallow: Var) -> Result<Encoded> {
        let (bsz, n) = (g.shape(shallow)[0], g.shape(shallow)[1]);
        let tok = g.param(p, self.token);
        let tok = g.index_select(tok, 0, &vec![0; bsz])?;
        let mut seq = g.concat(&[tok, shallow], 1)?;
        for layer in &self.layers {
            seq = layer.forward(g, p, seq)?;
        }
        let token = g.narrow(seq, 1, 0, 1)?;
        let deep = g.narrow(seq, 1, 1, n)?;
        Ok(Encoded { shallow, token, deep })
    }

    /// Logits `[B, 2]` from the refined token.
    pub fn classify(&self, g: &mut Graph, p: &ParamStore, token: Var) -> Result<Var> {
        let bsz = g.shape(token)[0];
        let l = self.classifier.forward(g, p, token)?;
        Ok(g.reshape(l, &[bsz, 2])?)
    }

    /// `(TransferA(deep_a + token_b), TransferB(deep_b + token_a))`.
    pub fn cross_inject(&self, g: &mut Graph, p: &ParamStore, deep_a: Var, token_b: Var, deep_b: Var, token_a: Var) -> Result<(Var, Var)> {
        let xa = g.add(deep_a, token_b)?;
        let xb = g.add(deep_b, token_a)?;
        let ya = self.transfer_a.forward(g, p, xa)?;
        let yb = self.transfer_b.forward(g, p, xb)?;
        Ok((ya, yb))
    }

    /// `s = enhanced + f_eighth; s + norm(conv2(relu(norm(conv1(s)))))`.
    pub fn fuse(&self, g: &mut Graph, p: &ParamStore, enhanced: Var, f_eighth: Var) -> Result<Var> {
        let fs = g.shape(f_eighth).to_vec();
        let es = g.shape(enhanced).to_vec();
        if fs.len() != 4 || es != [fs[0], fs[2] * fs[3], fs[1]] {
            return Err(Error::Dimension(format!("fuse: tokens {es:?} vs map {fs:?}")));
        }
        let e = tokens_to_map(g, enhanced, fs[2], fs[3])?;
        let s = g.add(e, f_eighth)?;
        let h = self.fuse1.forward(g, p, s)?;
        let h = self.fuse_norm1.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.fuse2.forward(g, p, h)?;
        let h = self.fuse_norm2.forward(g, p, h)?;
        Ok(g.add(s, h)?)
    }

    /// Full branch on a stacked pair: batch index 0 is visible, 1 is infrared.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, f_half: Var, f_eighth: Var) -> Result<CefgOutput> {
        if g.shape(f_half)[0] != 2 {
            return Err(Error::Dimension("cefg expects a stacked visible/infrared pair".into()));
        }
        let encoded = self.encode(g, p, f_half)?;
        let logits = self.classify(g, p, encoded.token)?;
        let deep_a = g.narrow(encoded.deep, 0, 0, 1)?;
        let deep_b = g.narrow(encoded.deep, 0, 1, 1)?;
        let tok_a = g.narrow(encoded.token, 0, 0, 1)?;
        let tok_b = g.narrow(encoded.token, 0, 1, 1)?;
        let (ea, eb) = self.cross_inject(g, p, deep_a, tok_b, deep_b, tok_a)?;
        let enhanced = g.concat(&[ea, eb], 0)?;
        let fused = self.fuse(g, p, enhanced, f_eighth)?;
        Ok(CefgOutput {
            encoded,
            logits,
            enhanced,
            fused,
        })
    }

    /// Zeroes the second fuse convolution so that the fuse is `enhanced + f_eighth`.
    pub fn zero_fuse_residual(&self, p: &mut ParamStore) {
        zero_param(p, self.fuse2.w);
        if let Some(b) = self.fuse2.b {
            zero_param(p, b);
        }
        self.fuse_norm2.zero(p);
    }
}

/// Summed cross-entropy of `logits: [B, 2]` against class indices.
pub fn loss_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
        return Err(Error::Dimension(format!("logits {s:?} vs {} targets", targets.len())));
    }
    let onehot = Tensor::from_fn(&s, |i| if targets[i / s[1]] == i % s[1] { 1.0 } else { 0.0 });
    let mask = g.constant(onehot);
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked)?;
    Ok(g.neg(total)?)
}

/// Targets of a stacked visible/infrared pair.
pub fn pair_targets() -> [usize; 2] {
    [VISIBLE_CLASS, INFRARED_CLASS]
}
