//! Texture pyramid, ViT student and the frozen stand-in teacher.

use std::path::Path;

use distillmatch_tensor::{io, Conv2dOptions, Graph, PadMode, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TeacherPath, VitConfig};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, sincos_2d, tokens_to_map, Block, Builder, Conv, LayerNorm, Linear};

/// Texture features at 1/2, 1/4 and 1/8 resolution.
#[derive(Clone, Copy, Debug)]
pub struct TexturePyramid {
    pub half: Var,
    pub quarter: Var,
    pub eighth: Var,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: LayerNorm,
    conv2: Conv,
    norm2: LayerNorm,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            conv1: Conv::new(&mut s, "conv1", c, c, 3, Conv2dOptions::same(3), true),
            norm1: LayerNorm::channel(&mut s, "norm1", c),
            conv2: Conv::new(&mut s, "conv2", c, c, 3, Conv2dOptions::same(3), true),
            norm2: LayerNorm::channel(&mut s, "norm2", c),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, mode: PadMode) -> Result<Var> {
        let h = conv_mode(&self.conv1, g, p, x, mode)?;
        let h = self.norm1.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = conv_mode(&self.conv2, g, p, h, mode)?;
        let h = self.norm2.forward(g, p, h)?;
        let s = g.add(x, h)?;
        Ok(g.relu(s)?)
    }
}

fn conv_mode(c: &Conv, g: &mut Graph, p: &ParamStore, x: Var, mode: PadMode) -> Result<Var> {
    let w = g.param(p, c.w);
    let b = c.b.map(|b| g.param(p, b));
    Ok(g.conv2d(x, w, b, c.opts.pad_mode(mode))?)
}

/// Residual CNN: stride-2 stem, then three stages of two residual blocks
/// with stride-2 convolutions between them.
#[derive(Clone, Debug)]
pub struct TextureNet {
    stem: (Conv, LayerNorm),
    stages: Vec<Vec<ResBlock>>,
    downs: Vec<(Conv, LayerNorm)>,
    pub pad_mode: PadMode,
}

impl TextureNet {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut s = b.sub("texture");
        let widths = [cfg.c1(), cfg.c2(), cfg.c3()];
        let stem = (
            Conv::new(&mut s, "stem", 3, widths[0], 3, Conv2dOptions::same(3).stride(2), true),
            LayerNorm::channel(&mut s, "stem_norm", widths[0]),
        );
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            if i > 0 {
                downs.push((
                    Conv::new(&mut s, &format!("down{i}"), widths[i - 1], c, 3, Conv2dOptions::same(3).stride(2), true),
                    LayerNorm::channel(&mut s, &format!("down{i}_norm"), c),
                ));
            }
            stages.push((0..2).map(|j| ResBlock::new(&mut s, &format!("stage{i}.block{j}"), c)).collect());
        }
        Self {
            stem,
            stages,
            downs,
            pad_mode: PadMode::Zero,
        }
    }

    /// `img: [B, 3, H, W]` with `H, W` divisible by 8.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, img: Var) -> Result<TexturePyramid> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 3 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(Error::Dimension(format!("texture input {s:?}: expected [B,3,H,W] with H, W divisible by 8")));
        }
        let mut x = conv_mode(&self.stem.0, g, p, img, self.pad_mode)?;
        x = self.stem.1.forward(g, p, x)?;
        x = g.relu(x)?;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let (conv, norm) = &self.downs[i - 1];
                x = conv_mode(conv, g, p, x, self.pad_mode)?;
                x = norm.forward(g, p, x)?;
                x = g.relu(x)?;
            }
            for blk in stage {
                x = blk.forward(g, p, x, self.pad_mode)?;
            }
            outs.push(x);
        }
        Ok(TexturePyramid {
            half: outs[0],
            quarter: outs[1],
            eighth: outs[2],
        })
    }
}

/// Patch-embedding transformer with a small decoder and a linear head to `out_dim`.
#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    patch: Conv,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Vit {
    pub fn new(b: &mut Builder, name: &str, cfg: &VitConfig, out_dim: usize) -> Self {
        let mut s = b.sub(name);
        let d = cfg.embed_dim;
        let patch = Conv::new(
            &mut s,
            "patch",
            3,
            d,
            cfg.patch_size,
            Conv2dOptions::default().stride(cfg.patch_size),
            true,
        );
        let encoder = (0..cfg.depth)
            .map(|i| Block::new(&mut s, &format!("enc{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect();
        let decoder = (0..cfg.decoder_depth)
            .map(|i| Block::new(&mut s, &format!("dec{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect();
        Self {
            cfg: cfg.clone(),
            patch,
            norm: LayerNorm::new(&mut s, "norm", d),
            head: Linear::new(&mut s, "head", d, out_dim, true),
            encoder,
            decoder,
        }
    }

    /// Patch tokens `[B, P, D]` with positions added when enabled.
    pub fn embed(&self, g: &mut Graph, p: &ParamStore, img: Var) -> Result<(Var, usize, usize)> {
        let s = g.shape(img).to_vec();
        let ps = self.cfg.patch_size;
        if s.len() != 4 || s[2] % ps != 0 || s[3] % ps != 0 {
            return Err(Error::Dimension(format!("image {s:?} not divisible by patch size {ps}")));
        }
        let (gh, gw) = (s[2] / ps, s[3] / ps);
        let x = self.patch.forward(g, p, img)?;
        let mut t = map_to_tokens(g, x)?;
        if self.cfg.positions {
            let pos = g.constant(sincos_2d(gh, gw, self.cfg.embed_dim));
            t = g.add(t, pos)?;
        }
        Ok((t, gh, gw))
    }

    /// Encoder, decoder, norm and head applied to a token sequence.
    pub fn forward_tokens(&self, g: &mut Graph, p: &ParamStore, mut t: Var) -> Result<Var> {
        for blk in self.encoder.iter().chain(&self.decoder) {
            t = blk.forward(g, p, t)?;
        }
        let t = self.norm.forward(g, p, t)?;
        self.head.forward(g, p, t)
    }

    /// `[B, 3, H, W]` to `[B, out_dim, H/ps, W/ps]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, img: Var) -> Result<Var> {
        let (t, gh, gw) = self.embed(g, p, img)?;
        let t = self.forward_tokens(g, p, t)?;
        tokens_to_map(g, t, gh, gw)
    }
}

/// Frozen teacher: same architecture as the student, wider and deeper,
/// drawn once from its own fixed seed.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub vit: Vit,
    pub path: TeacherPath,
}

pub const TEACHER_PREFIX: &str = "teacher.";

impl Teacher {
    /// Registers the teacher weights (frozen) in `store`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed);
        let mut b = Builder::new(store, &mut rng, "");
        let vit = Vit::new(&mut b, "teacher", &cfg.teacher, cfg.c4());
        store.freeze_prefix(TEACHER_PREFIX);
        Self {
            vit,
            path: cfg.teacher_path,
        }
    }

    /// Semantic map at the 1/8 grid. The teacher parameters are bound as constants.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        let (h8, w8) = (s[2] / 8, s[3] / 8);
        match self.path {
            TeacherPath::Direct => self.vit.forward(g, p, img),
            TeacherPath::SevenEighths => {
                if s[2] % 8 != 0 || s[3] % 8 != 0 {
                    return Err(Error::Dimension(format!("image {s:?} not divisible by 8")));
                }
                let small = g.resize_bilinear(img, s[2] * 7 / 8, s[3] * 7 / 8)?;
                let f = self.vit.forward(g, p, small)?;
                Ok(g.resize_bilinear(f, h8, w8)?)
            }
        }
    }
}

/// Reads externally computed teacher features and checks their shape.
pub fn load_external_features(path: impl AsRef<Path>, expected: &[usize]) -> Result<Tensor> {
    let t = io::load(path)?;
    if t.shape() != expected {
        return Err(Error::Dimension(format!(
            "external features have shape {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(t)
}
