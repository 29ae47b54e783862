//! Architecture description shared by teacher and student.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SitError};
use crate::slim::{schedule, SlimAxis, StageSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Blocks per stage. A single entry means no token slimming (teacher);
    /// `k` entries insert `k − 1` slimming modules at the stage boundaries.
    pub stages: Vec<usize>,
    pub keep_ratio: f64,
    pub num_classes: usize,
    pub use_distill_head: bool,
    pub mlp_ratio: usize,
    pub slim_axis: SlimAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_student()
    }
}

impl ModelConfig {
    /// 32×32 inputs, 64 patch tokens, depth 8, width 128: the desk-scale
    /// teacher.
    pub fn desk_teacher() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 128,
            heads: 4,
            depth: 8,
            stages: vec![8],
            keep_ratio: 1.0,
            num_classes: 10,
            use_distill_head: false,
            mlp_ratio: 4,
            slim_axis: SlimAxis::Columns,
        }
    }

    /// Desk-scale student: four stages of two blocks, halving tokens at each
    /// boundary.
    pub fn desk_student() -> Self {
        ModelConfig {
            stages: vec![2, 2, 2, 2],
            keep_ratio: 0.5,
            ..Self::desk_teacher()
        }
    }

    /// ImageNet-scale tiny variant: depth 14, stages {1,1,1,11}, width 320,
    /// 5 heads, 224² inputs with 16² patches.
    pub fn sit_ti() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 320,
            heads: 5,
            depth: 14,
            stages: vec![1, 1, 1, 11],
            keep_ratio: 0.5,
            num_classes: 1000,
            use_distill_head: false,
            mlp_ratio: 4,
            slim_axis: SlimAxis::Columns,
        }
    }

    /// Same backbone with slimming removed.
    pub fn teacher(&self) -> Self {
        ModelConfig {
            stages: vec![self.depth],
            keep_ratio: 1.0,
            ..self.clone()
        }
    }

    pub fn is_slimmed(&self) -> bool {
        self.stages.len() > 1
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count before any slimming (class token excluded).
    pub fn content_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        schedule(self.content_tokens(), &self.stages, self.keep_ratio)
    }

    /// Stage index of every block.
    pub fn block_stages(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat(s).take(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SitError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.stages.is_empty() || self.stages.iter().any(|&s| s == 0) {
            return fail(format!(
                "stages {:?} must be non-empty positive counts",
                self.stages
            ));
        }
        if self.stages.iter().sum::<usize>() != self.depth {
            return fail(format!(
                "stages {:?} do not sum to depth {}",
                self.stages, self.depth
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return fail(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return fail("num_classes ≥ 2, in_channels ≥ 1 and mlp_ratio ≥ 1 required".into());
        }
        self.schedule().map(|_| ())
    }
}
