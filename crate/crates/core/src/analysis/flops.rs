//! Analytic inference cost of a configuration. Pure arithmetic on the
//! config; no weights are instantiated.
//!
//! Dense products are counted per multiply-accumulate by default. Norms,
//! activations and softmax are not counted. The recalibration branch is
//! training-only and costs nothing at inference.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate = one FLOP.
    #[default]
    MultiplyAccumulate,
    /// Multiply and add counted separately (2 per MAC).
    Arithmetic,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::MultiplyAccumulate => 1,
            FlopConvention::Arithmetic => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostComponent {
    pub name: String,
    /// Token count (including the class token) the component runs at.
    pub tokens: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: FlopConvention,
    pub components: Vec<CostComponent>,
    pub total_flops: u64,
    /// Parameters used at inference.
    pub params: u64,
    /// Additional training-only parameters (recalibration branches).
    pub training_only_params: u64,
    /// Filled in by `bench` when a measurement is attached.
    pub throughput: Option<super::bench::BenchReport>,
}

impl CostReport {
    /// Sum of the components whose name starts with `prefix`.
    pub fn sum(&self, prefix: &str) -> u64 {
        self.components
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.flops)
            .sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// MACs of the four `C × C` projections (q, k, v, out) over `t` tokens.
pub fn msa_linear_macs(t: usize, c: usize) -> u64 {
    4 * (t * c * c) as u64
}

/// MACs of `QKᵀ` and `attn · V` over `t` tokens.
pub fn msa_matmul_macs(t: usize, c: usize) -> u64 {
    2 * (t * t * c) as u64
}

pub fn mlp_macs(t: usize, c: usize, ratio: usize) -> u64 {
    2 * (t * c * c * ratio) as u64
}

/// Keys `N·C·C/2`, logits `N̂·(C/2)·N`, aggregation `N̂·N·C`.
pub fn tsm_macs(n: usize, n_hat: usize, c: usize) -> u64 {
    let half = c / 2;
    (n * c * half + n_hat * half * n + n_hat * n * c) as u64
}

pub fn flops(config: &ModelConfig, convention: FlopConvention) -> Result<CostReport> {
    config.validate()?;
    let sched = config.schedule()?;
    let c = config.embed_dim;
    let n = config.content_tokens();
    let f = convention.factor();
    let mut components = vec![CostComponent {
        name: "stem".into(),
        tokens: n,
        flops: f * (n * config.patch_dim() * c) as u64,
    }];
    let mut prev = 0;
    for (b, stage) in config.block_stages().into_iter().enumerate() {
        let t = sched.tokens(stage) + 1;
        if stage != prev {
            prev = stage;
            components.push(CostComponent {
                name: format!("tsm.{stage}"),
                tokens: sched.tokens(stage - 1) + 1,
                flops: f * tsm_macs(sched.tokens(stage - 1), sched.tokens(stage), c),
            });
        }
        components.push(CostComponent {
            name: format!("msa.{b}"),
            tokens: t,
            flops: f * (msa_linear_macs(t, c) + msa_matmul_macs(t, c)),
        });
        components.push(CostComponent {
            name: format!("mlp.{b}"),
            tokens: t,
            flops: f * mlp_macs(t, c, config.mlp_ratio),
        });
    }
    let heads = 1 + usize::from(config.use_distill_head);
    components.push(CostComponent {
        name: "head".into(),
        tokens: heads,
        flops: f * (heads * c * config.num_classes) as u64,
    });
    let total_flops = components.iter().map(|c| c.flops).sum();
    let (params, training_only_params) = param_count(config)?;
    Ok(CostReport {
        convention,
        components,
        total_flops,
        params,
        training_only_params,
        throughput: None,
    })
}

/// `(inference, training_only)` parameter counts.
pub fn param_count(config: &ModelConfig) -> Result<(u64, u64)> {
    let sched = config.schedule()?;
    let c = config.embed_dim;
    let h = c * config.mlp_ratio;
    let n = config.content_tokens();
    let linear = |i: usize, o: usize| i * o + o;
    let mlp = 2 * c + linear(c, h) + linear(h, c);
    let block = 2 * c + linear(c, 3 * c) + linear(c, c) + mlp;
    let heads = 1 + usize::from(config.use_distill_head);
    let mut inference = linear(config.patch_dim(), c) + c + n * c + config.depth * block + 2 * c;
    inference += heads * linear(c, config.num_classes);
    let mut training = 0;
    for s in 1..sched.stages() {
        inference += c * (c / 2) + sched.tokens(s) * (c / 2) + 1;
        let full = sched.tokens(0);
        training += 4 * full * sched.tokens(s) + full * 4 * full + mlp;
    }
    Ok((inference as u64, training as u64))
}
