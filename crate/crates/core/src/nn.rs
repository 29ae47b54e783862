//! Transformer building blocks expressed as parameter handles plus a
//! forward recorder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SitError};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn lookup<T: Scalar>(store: &ParamStore<T>, name: String) -> Result<ParamId> {
    store
        .id(&name)
        .ok_or_else(|| SitError::Format(format!("missing parameter `{name}`")))
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearIds {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        training_only: bool,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng);
        let weight = store.add(format!("{prefix}.weight"), w, group, training_only);
        let bias = bias.then(|| {
            store.add(
                format!("{prefix}.bias"),
                Tensor::zeros(&[fan_out]),
                group,
                training_only,
            )
        });
        LinearIds { weight, bias }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(LinearIds {
            weight: lookup(store, format!("{prefix}.weight"))?,
            bias: store.id(&format!("{prefix}.bias")),
        })
    }

    pub fn forward<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        group: ParamGroup,
        training_only: bool,
    ) -> Self {
        LayerNormIds {
            gamma: store.add(
                format!("{prefix}.gamma"),
                Tensor::full(&[dim], T::one()),
                group,
                training_only,
            ),
            beta: store.add(
                format!("{prefix}.beta"),
                Tensor::zeros(&[dim]),
                group,
                training_only,
            ),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(LayerNormIds {
            gamma: lookup(store, format!("{prefix}.gamma"))?,
            beta: lookup(store, format!("{prefix}.beta"))?,
        })
    }

    pub fn forward<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b)
    }
}

/// Pre-norm MLP: `fc2(gelu(fc1(norm(x))))`, hidden width `ratio·C`.
#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub norm: LayerNormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ratio: usize,
        group: ParamGroup,
        training_only: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * ratio;
        MlpIds {
            norm: LayerNormIds::register(
                store,
                &format!("{prefix}.norm"),
                dim,
                group,
                training_only,
            ),
            fc1: LinearIds::register(
                store,
                &format!("{prefix}.fc1"),
                dim,
                hidden,
                true,
                group,
                training_only,
                rng,
            ),
            fc2: LinearIds::register(
                store,
                &format!("{prefix}.fc2"),
                hidden,
                dim,
                true,
                group,
                training_only,
                rng,
            ),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(MlpIds {
            norm: LayerNormIds::resolve(store, &format!("{prefix}.norm"))?,
            fc1: LinearIds::resolve(store, &format!("{prefix}.fc1"))?,
            fc2: LinearIds::resolve(store, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.norm.forward(store, tape, x)?;
        let h = self.fc1.forward(store, tape, h)?;
        let h = tape.gelu(h);
        self.fc2.forward(store, tape, h)
    }
}

/// Pre-norm transformer block:
/// `x + proj(attn(qkv(norm1 x)))` followed by `x + mlp(x)`.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm1: LayerNormIds,
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub mlp: MlpIds,
    pub heads: usize,
}

/// Output of one block: the tokens and the attention node whose
/// probabilities can be read back with [`Tape::attention_probs`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub tokens: Var,
    pub attention: Var,
}

impl BlockIds {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Backbone;
        BlockIds {
            norm1: LayerNormIds::register(store, &format!("{prefix}.norm1"), dim, g, false),
            qkv: LinearIds::register(
                store,
                &format!("{prefix}.attn.qkv"),
                dim,
                3 * dim,
                true,
                g,
                false,
                rng,
            ),
            proj: LinearIds::register(
                store,
                &format!("{prefix}.attn.proj"),
                dim,
                dim,
                true,
                g,
                false,
                rng,
            ),
            mlp: MlpIds::register(
                store,
                &format!("{prefix}.mlp"),
                dim,
                mlp_ratio,
                g,
                false,
                rng,
            ),
            heads,
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(BlockIds {
            norm1: LayerNormIds::resolve(store, &format!("{prefix}.norm1"))?,
            qkv: LinearIds::resolve(store, &format!("{prefix}.attn.qkv"))?,
            proj: LinearIds::resolve(store, &format!("{prefix}.attn.proj"))?,
            mlp: MlpIds::resolve(store, &format!("{prefix}.mlp"))?,
            heads,
        })
    }

    pub fn forward<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
    ) -> Result<BlockVars> {
        let h = self.norm1.forward(store, tape, x)?;
        let qkv = self.qkv.forward(store, tape, h)?;
        let attention = tape.attention(qkv, self.heads)?;
        let h = self.proj.forward(store, tape, attention)?;
        let x = tape.add(x, h)?;
        let h = self.mlp.forward(store, tape, x)?;
        let tokens = tape.add(x, h)?;
        Ok(BlockVars { tokens, attention })
    }
}
