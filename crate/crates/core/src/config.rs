use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer encoder/decoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Adds fixed 2D sin-cos positions to the patch embeddings.
    pub positions: bool,
}

impl VitConfig {
    /// Token count `P` for an `h x w` input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        (h / self.patch_size) * (w / self.patch_size)
    }
}

/// How the frozen teacher sees the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPath {
    /// Input used as is; the teacher patch size must be 8.
    Direct,
    /// Input scaled to 7/8, patchified with the teacher patch size, then
    /// resized to the 1/8 grid.
    SevenEighths,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub theta_c: f64,
    pub theta_f: f64,
    pub temperature: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            theta_c: 0.3,
            theta_f: 0.1,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width_factor: f64,
    pub student: VitConfig,
    pub teacher: VitConfig,
    pub teacher_path: TeacherPath,
    pub teacher_seed: u64,
    pub fine_dim: usize,
    pub srm_hidden: usize,
    pub loftr_rounds: usize,
    pub cefg_layers: usize,
    pub hierarchical: bool,
    pub thresholds: MatchThresholds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0.25)
    }
}

impl ModelConfig {
    pub fn desk(width_factor: f64) -> Self {
        let c4 = scaled(384, width_factor);
        Self {
            width_factor,
            student: VitConfig {
                patch_size: 8,
                embed_dim: c4,
                depth: 2,
                decoder_depth: 2,
                heads: 4,
                mlp_ratio: 2,
                positions: true,
            },
            teacher: VitConfig {
                patch_size: 7,
                embed_dim: 2 * c4,
                depth: 4,
                decoder_depth: 2,
                heads: 6,
                mlp_ratio: 2,
                positions: true,
            },
            teacher_path: TeacherPath::SevenEighths,
            teacher_seed: 0x7EAC_4E55,
            fine_dim: 32,
            srm_hidden: 64,
            loftr_rounds: 2,
            cefg_layers: 2,
            hierarchical: false,
            thresholds: MatchThresholds::default(),
        }
    }

    pub fn c1(&self) -> usize {
        scaled(128, self.width_factor)
    }
    pub fn c2(&self) -> usize {
        scaled(196, self.width_factor)
    }
    pub fn c3(&self) -> usize {
        scaled(256, self.width_factor)
    }
    pub fn c4(&self) -> usize {
        scaled(384, self.width_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_factor > 0.0) {
            return Err(Error::Config("width factor must be positive".into()));
        }
        for (name, v) in [("student", &self.student), ("teacher", &self.teacher)] {
            if v.embed_dim % v.heads != 0 {
                return Err(Error::Config(format!("{name} embed dim {} not divisible by {} heads", v.embed_dim, v.heads)));
            }
            if v.patch_size == 0 || v.depth == 0 {
                return Err(Error::Config(format!("{name} needs a positive patch size and depth")));
            }
        }
        if self.student.patch_size != 8 {
            return Err(Error::Config("student patch size must be 8".into()));
        }
        match self.teacher_path {
            TeacherPath::Direct if self.teacher.patch_size != 8 => {
                return Err(Error::Config("direct teacher path needs patch size 8".into()))
            }
            TeacherPath::SevenEighths if self.teacher.patch_size != 7 => {
                return Err(Error::Config("7/8 teacher path needs patch size 7".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that an image size is usable by every branch.
    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        if h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Dimension(format!(
                "image {h}x{w}: both sides must be at least 32 and divisible by 8"
            )));
        }
        Ok(())
    }
}

fn scaled(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_widths() {
        let c = ModelConfig::desk(0.25);
        assert_eq!((c.c1(), c.c2(), c.c3(), c.c4()), (32, 49, 64, 96));
        assert_eq!(c.student.token_count(64, 64), 64);
        c.validate().unwrap();
        assert!(c.check_image(60, 64).is_err());
        assert!(c.check_image(24, 24).is_err());
    }
}
