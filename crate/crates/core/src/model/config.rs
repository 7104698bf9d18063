use serde::{Deserialize, Serialize};

use crate::data::MAX_EXTENT;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Full-resolution projector: every patch becomes a vision token.
    Teacher,
    /// Efficient projector: 2-D adaptive pooling before the MLP.
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Patch grid `[H, W]` of the image input.
    pub patch_grid: [usize; 2],
    pub patch_dim: usize,
    /// Vision token grid after the projector; equals `patch_grid` for a
    /// teacher.
    pub vision_tokens_out: [usize; 2],
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub role: Role,
}

impl ModelConfig {
    /// Desk-scale teacher: 8x8 patches, 64 vision tokens.
    pub fn teacher() -> Self {
        Self {
            vocab_size: 64,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            patch_grid: [8, 8],
            patch_dim: 16,
            vision_tokens_out: [8, 8],
            mlp_ratio: 4,
            max_seq_len: 96,
            role: Role::Teacher,
        }
    }

    /// Desk-scale student: the same patches pooled to 4x4, 16 vision tokens.
    pub fn student() -> Self {
        Self {
            vision_tokens_out: [4, 4],
            role: Role::Student,
            ..Self::teacher()
        }
    }

    pub fn vision_tokens(&self) -> usize {
        self.vision_tokens_out[0] * self.vision_tokens_out[1]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        let sizes = [
            self.vocab_size,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.patch_grid[0],
            self.patch_grid[1],
            self.patch_dim,
            self.vision_tokens_out[0],
            self.vision_tokens_out[1],
            self.mlp_ratio,
            self.max_seq_len,
        ];
        if sizes.iter().any(|&n| n > MAX_EXTENT) {
            return bad(format!("sizes are limited to {MAX_EXTENT}"));
        }
        if self.vocab_size < 2 || self.hidden_dim < 2 || self.num_layers == 0 {
            return bad("vocab_size, hidden_dim >= 2 and num_layers >= 1 required".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.patch_dim == 0 || self.mlp_ratio == 0 {
            return bad("patch_dim and mlp_ratio must be positive".into());
        }
        let [ph, pw] = self.patch_grid;
        let [vh, vw] = self.vision_tokens_out;
        if ph == 0 || pw == 0 || vh == 0 || vw == 0 {
            return bad("grids must be non-empty".into());
        }
        match self.role {
            Role::Teacher if self.vision_tokens_out != self.patch_grid => bad(format!(
                "teacher vision_tokens_out {:?} must equal patch_grid {:?}",
                self.vision_tokens_out, self.patch_grid
            )),
            Role::Student if vh > ph || vw > pw => bad(format!(
                "student vision_tokens_out {:?} exceeds patch_grid {:?}",
                self.vision_tokens_out, self.patch_grid
            )),
            _ if self.vision_tokens() >= self.max_seq_len => bad(format!(
                "max_seq_len {} leaves no room after {} vision tokens",
                self.max_seq_len,
                self.vision_tokens()
            )),
            _ => Ok(()),
        }
    }
}
