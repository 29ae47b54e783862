//! Reverse token slimming: a training-only token-axis auto-encoder that
//! expands `N̂` slimmed tokens back to the `N` token positions of the
//! unslimmed model, `X' = X̂' + MLP(X̂')` with `X̂' = A₂·gelu(A₁·X̂)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SitError};
use crate::nn::MlpIds;
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slim::StageSchedule;
use crate::tensor::Tensor;

/// Expansion factor of the hidden token axis (`A₁` has `4N` rows).
pub const EXPANSION: usize = 4;

/// Token counts of the auto-encoder attached to one slimmed stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RtsmShape {
    /// Unslimmed content-token count `N`.
    pub full: usize,
    /// Slimmed content-token count `N̂` of the stage.
    pub slim: usize,
}

impl RtsmShape {
    pub fn a1_shape(&self) -> [usize; 2] {
        [EXPANSION * self.full, self.slim]
    }

    pub fn a2_shape(&self) -> [usize; 2] {
        [self.full, EXPANSION * self.full]
    }

    /// `4N·N̂ + N·4N` plus the channel MLP (norm, two biased linears).
    pub fn param_count(&self, channels: usize, mlp_ratio: usize) -> usize {
        let hidden = channels * mlp_ratio;
        let token_axis = EXPANSION * self.full * self.slim + self.full * EXPANSION * self.full;
        let mlp = 2 * channels + channels * hidden + hidden + hidden * channels + channels;
        token_axis + mlp
    }
}

/// The recalibration shape for `stage`, or `None` for the unslimmed first
/// stage (which is compared directly).
pub fn rtsm_for_stage(stage: usize, schedule: &StageSchedule) -> Option<RtsmShape> {
    (stage > 0 && stage < schedule.stages()).then(|| RtsmShape {
        full: schedule.tokens(0),
        slim: schedule.tokens(stage),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct RtsmIds {
    pub a1: ParamId,
    pub a2: ParamId,
    pub mlp: MlpIds,
    pub shape: RtsmShape,
}

impl RtsmIds {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        shape: RtsmShape,
        channels: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Recalibration;
        let [h, n_hat] = shape.a1_shape();
        let a1 = store.add(
            format!("{prefix}.a1"),
            xavier_uniform(&[h, n_hat], n_hat, h, rng),
            g,
            true,
        );
        let a2 = store.add(
            format!("{prefix}.a2"),
            xavier_uniform(&shape.a2_shape(), h, shape.full, rng),
            g,
            true,
        );
        let mlp = MlpIds::register(
            store,
            &format!("{prefix}.mlp"),
            channels,
            mlp_ratio,
            g,
            true,
            rng,
        );
        RtsmIds { a1, a2, mlp, shape }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Option<Self> {
        let a1 = store.id(&format!("{prefix}.a1"))?;
        let a2 = store.id(&format!("{prefix}.a2"))?;
        let mlp = MlpIds::resolve(store, &format!("{prefix}.mlp")).ok()?;
        let s1 = store.get(a1).shape();
        let shape = RtsmShape {
            full: s1[0] / EXPANSION,
            slim: s1[1],
        };
        Some(RtsmIds { a1, a2, mlp, shape })
    }

    /// Records the recalibration of `N̂ × C` slimmed tokens.
    pub fn forward<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x_hat: Var,
    ) -> Result<Var> {
        if tape.shape(x_hat).first() != Some(&self.shape.slim) {
            return Err(SitError::shape(
                "recalibrate",
                tape.shape(x_hat),
                &self.shape.a1_shape(),
            ));
        }
        let a1 = tape.param(store, self.a1);
        let a2 = tape.param(store, self.a2);
        let h = tape.matmul(a1, x_hat)?;
        let h = tape.gelu(h);
        let x = tape.matmul(a2, h)?;
        let m = self.mlp.forward(store, tape, x)?;
        tape.add(x, m)
    }

    /// Sets `A₂·gelu(A₁·)` to the identity (requires `N̂ = N`) using
    /// `gelu(z) − gelu(−z) = z`, and zeroes the MLP output projection.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>, gain: f64) -> Result<()> {
        let n = self.shape.full;
        if self.shape.slim != n {
            return Err(SitError::Config(
                "identity recalibration needs N̂ = N".into(),
            ));
        }
        let h = EXPANSION * n;
        let mut a1 = Tensor::<T>::zeros(&[h, n]);
        let mut a2 = Tensor::<T>::zeros(&[n, h]);
        for i in 0..n {
            a1.data_mut()[i * n + i] = T::lit(gain);
            a1.data_mut()[(n + i) * n + i] = T::lit(-gain);
            a2.data_mut()[i * h + i] = T::lit(1.0 / gain);
            a2.data_mut()[i * h + n + i] = T::lit(-1.0 / gain);
        }
        store.get_mut(self.a1).data_mut().copy_from_slice(a1.data());
        store.get_mut(self.a2).data_mut().copy_from_slice(a2.data());
        store
            .get_mut(self.mlp.fc2.weight)
            .data_mut()
            .fill(T::zero());
        if let Some(b) = self.mlp.fc2.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
        Ok(())
    }
}

/// Stand-alone recalibration of a slimmed token matrix.
pub fn recalibrate<T: Scalar>(
    x_hat: &Tensor<T>,
    store: &ParamStore<T>,
    ids: &RtsmIds,
) -> Result<Tensor<T>> {
    let mut tape = Tape::frozen();
    let x = tape.constant(x_hat.clone());
    let y = ids.forward(store, &mut tape, x)?;
    Ok(tape.value(y).clone())
}
