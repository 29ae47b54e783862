//! Token slimming: a learned, input-dependent normalized aggregation that
//! maps `N` content tokens onto `N̂ ≤ N` informative tokens, `X̂ = Â·X`.
//!
//! `Â = softmax(W_q · gelu(X·W_k)ᵀ / τ)` is normalized over the output axis,
//! so every input token distributes a unit of weight across the outputs and
//! the column sums of `Â` are exactly one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SitError};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis along which the aggregation logits are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlimAxis {
    /// Each column (input token) sums to one over the outputs.
    #[default]
    Columns,
    /// Each row (output token) is a convex combination of inputs.
    Rows,
}

impl SlimAxis {
    fn tensor_axis(self) -> usize {
        match self {
            SlimAxis::Columns => 0,
            SlimAxis::Rows => 1,
        }
    }
}

/// Content-token count of each stage (class token excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule(pub Vec<usize>);

impl StageSchedule {
    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn stages(&self) -> usize {
        self.0.len()
    }

    pub fn tokens(&self, stage: usize) -> usize {
        self.0[stage]
    }
}

/// Applies `ceil(r · N)` at every stage boundary.
pub fn schedule(n0: usize, stages: &[usize], keep_ratio: f64) -> Result<StageSchedule> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(SitError::Config(format!(
            "keep_ratio {keep_ratio} outside (0, 1]"
        )));
    }
    if stages.is_empty() {
        return Err(SitError::Config("at least one stage required".into()));
    }
    let mut counts = vec![n0];
    for _ in 1..stages.len() {
        let prev = *counts.last().unwrap() as f64;
        // Guard against products like 0.3·10 = 3.0000000000000004.
        let next = (keep_ratio * prev - 1e-9).ceil() as usize;
        if next < 1 {
            return Err(SitError::Config(format!(
                "keep_ratio {keep_ratio} slims {prev} tokens to zero"
            )));
        }
        counts.push(next);
    }
    Ok(StageSchedule(counts))
}

/// Values of one slimming module.
#[derive(Clone, Debug)]
pub struct TsmParams<T> {
    /// `C × C/2` key projection.
    pub w_k: Tensor<T>,
    /// `N̂ × C/2` learned, input-independent queries.
    pub w_q: Tensor<T>,
    /// `τ = exp(tau_raw)`.
    pub tau_raw: T,
}

impl<T: Scalar> TsmParams<T> {
    /// Xavier-uniform projections and `τ₀ = sqrt(C/2)`.
    pub fn init<R: Rng>(channels: usize, out_tokens: usize, rng: &mut R) -> Self {
        let half = channels / 2;
        TsmParams {
            w_k: xavier_uniform(&[channels, half], channels, half, rng),
            w_q: xavier_uniform(&[out_tokens, half], half, out_tokens, rng),
            tau_raw: T::lit(0.5 * (half as f64).ln()),
        }
    }

    pub fn tau(&self) -> T {
        self.tau_raw.exp()
    }

    pub fn out_tokens(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Normalized `N̂ × N` aggregation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimMatrix<T>(pub Tensor<T>);

impl<T: Scalar> SlimMatrix<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn out_tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn in_tokens(&self) -> usize {
        self.0.shape()[1]
    }

    /// Largest deviation of a column sum from one.
    pub fn column_sum_error(&self) -> f64 {
        self.0
            .column_sums()
            .expect("2-D")
            .iter()
            .map(|s| (s.as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Parameter handles of a slimming module registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct TsmIds {
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub tau_raw: ParamId,
}

impl TsmIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        params: TsmParams<T>,
    ) -> Self {
        let g = ParamGroup::Backbone;
        TsmIds {
            w_k: store.add(format!("{prefix}.w_k"), params.w_k, g, false),
            w_q: store.add(format!("{prefix}.w_q"), params.w_q, g, false),
            tau_raw: store.add(
                format!("{prefix}.tau_raw"),
                Tensor::scalar(params.tau_raw),
                g,
                false,
            ),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Option<Self> {
        Some(TsmIds {
            w_k: store.id(&format!("{prefix}.w_k"))?,
            w_q: store.id(&format!("{prefix}.w_q"))?,
            tau_raw: store.id(&format!("{prefix}.tau_raw"))?,
        })
    }

    pub fn values<T: Scalar>(&self, store: &ParamStore<T>) -> TsmParams<T> {
        TsmParams {
            w_k: store.get(self.w_k).clone(),
            w_q: store.get(self.w_q).clone(),
            tau_raw: store.get(self.tau_raw).data()[0],
        }
    }

    /// Records `Â` for the `N × C` content tokens `x`.
    pub fn attention<'p, T: Scalar>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
        axis: SlimAxis,
    ) -> Result<Var> {
        let w_k = tape.param(store, self.w_k);
        let w_q = tape.param(store, self.w_q);
        let tau_raw = tape.param(store, self.tau_raw);
        slim_attention_on_tape(tape, x, w_k, w_q, tau_raw, axis)
    }
}

/// `softmax(W_q · gelu(X·W_k)ᵀ · exp(−tau_raw))` recorded on a tape.
pub fn slim_attention_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    w_k: Var,
    w_q: Var,
    tau_raw: Var,
    axis: SlimAxis,
) -> Result<Var> {
    let keys = tape.matmul(x, w_k)?;
    let keys = tape.gelu(keys);
    let logits = tape.matmul_t(w_q, keys, false, true)?;
    let neg = tape.scale(tau_raw, -T::one());
    let inv_tau = tape.exp(neg);
    let scaled = tape.mul_scalar(logits, inv_tau)?;
    tape.softmax(scaled, axis.tensor_axis())
}

/// Computes the aggregation matrix for `N × C` tokens `x`.
pub fn tsm_attention<T: Scalar>(
    x: &Tensor<T>,
    params: &TsmParams<T>,
    axis: SlimAxis,
) -> Result<SlimMatrix<T>> {
    let (_, c) = x.dims2()?;
    if params.w_k.shape() != [c, c / 2] || params.w_q.rank() != 2 || params.w_q.shape()[1] != c / 2
    {
        return Err(SitError::shape(
            "tsm_attention",
            x.shape(),
            params.w_k.shape(),
        ));
    }
    let mut tape = Tape::frozen();
    let xv = tape.constant(x.clone());
    let w_k = tape.constant(params.w_k.clone());
    let w_q = tape.constant(params.w_q.clone());
    let tau = tape.constant(Tensor::scalar(params.tau_raw));
    let a = slim_attention_on_tape(&mut tape, xv, w_k, w_q, tau, axis)?;
    Ok(SlimMatrix(tape.value(a).clone()))
}

/// `X̂ = Â·X`.
pub fn slim<T: Scalar>(a: &SlimMatrix<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if a.0.rank() != 2 || x.rank() != 2 || a.in_tokens() != x.shape()[0] {
        return Err(SitError::shape("slim", a.0.shape(), x.shape()));
    }
    a.0.matmul(x)
}

/// Hard-dropping comparator: keeps the `keep` highest-scoring tokens in their
/// original order; equal scores prefer the lower index.
pub fn hard_drop_baseline<T: Scalar>(
    x: &Tensor<T>,
    scores: &[T],
    keep: usize,
) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    if scores.len() != n {
        return Err(SitError::shape(
            "hard_drop_baseline",
            x.shape(),
            &[scores.len()],
        ));
    }
    if keep > n {
        return Err(SitError::Index {
            index: keep,
            len: n,
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SitError::NonFinite("hard_drop_baseline scores".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let mut out = Vec::with_capacity(keep * c);
    for &i in &kept {
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(&[keep, c], out)
}

/// The binary selection matrix equivalent to [`hard_drop_baseline`].
pub fn hard_drop_matrix<T: Scalar>(scores: &[T], keep: usize) -> Result<SlimMatrix<T>> {
    let n = scores.len();
    let eye = Tensor::<T>::eye(n);
    let rows = hard_drop_baseline(&eye, scores, keep)?;
    Ok(SlimMatrix(rows))
}
