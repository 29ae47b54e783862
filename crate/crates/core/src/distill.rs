//! Feature recalibration distillation: the block-to-block token loss on
//! recalibrated features, soft-logit KL, optional hard-label loss, weight
//! inheritance from the teacher, and the training loops.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SitError};
use crate::io::dataset::Dataset;
use crate::optim::{warmup_cosine, Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

/// Coefficients of the three distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillWeights {
    pub lambda_token: f64,
    pub lambda_logits: f64,
    pub lambda_hard: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            lambda_token: 2.0,
            lambda_logits: 2.0,
            lambda_hard: 0.0,
        }
    }
}

impl DistillWeights {
    /// Defaults when an auxiliary hard-label teacher is available.
    pub fn with_hard_teacher() -> Self {
        DistillWeights {
            lambda_hard: 1.0,
            ..Self::default()
        }
    }

    /// Classification loss only.
    pub fn none() -> Self {
        DistillWeights {
            lambda_token: 0.0,
            lambda_logits: 0.0,
            lambda_hard: 0.0,
        }
    }

    pub fn validate(&self, has_hard_teacher: bool) -> Result<()> {
        let all = [self.lambda_token, self.lambda_logits, self.lambda_hard];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(SitError::Config(format!(
                "distillation weights must be ≥ 0: {self:?}"
            )));
        }
        if self.lambda_hard > 0.0 && !has_hard_teacher {
            return Err(SitError::Config(
                "lambda_hard > 0 requires a hard-label teacher".into(),
            ));
        }
        Ok(())
    }
}

/// Optimization schedule. Learning rates scale linearly with batch size:
/// `lr = base · batch / reference_batch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr_backbone: f64,
    pub base_lr_recalibration: f64,
    pub reference_batch: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub hard_teacher: Option<PathBuf>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 30,
            batch_size: 64,
            base_lr_backbone: 2e-4,
            base_lr_recalibration: 1e-3,
            reference_batch: 1024,
            weight_decay: 0.05,
            warmup_epochs: 5,
            seed: 0,
            optimizer: OptimizerKind::default(),
            hard_teacher: None,
        }
    }
}

impl TrainPlan {
    pub fn lr_backbone(&self) -> f64 {
        self.base_lr_backbone * self.batch_size as f64 / self.reference_batch as f64
    }

    pub fn lr_recalibration(&self) -> f64 {
        self.base_lr_recalibration * self.batch_size as f64 / self.reference_batch as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.reference_batch == 0 {
            return Err(SitError::Config(
                "batch_size and reference_batch must be positive".into(),
            ));
        }
        if !(self.base_lr_backbone > 0.0 && self.base_lr_recalibration > 0.0) {
            return Err(SitError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over layers of the per-layer mean squared difference (averaged over
/// tokens and channels).
pub fn token_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    student: &[Var],
    teacher: &[Var],
) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(SitError::shape(
            "token_loss",
            &[student.len()],
            &[teacher.len()],
        ));
    }
    let w = T::one() / T::from_usize(student.len()).unwrap();
    let mut terms = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        terms.push((tape.mse(s, t)?, w));
    }
    tape.weighted_sum(&terms)
}

/// `KL(softmax(student) ‖ softmax(teacher))`, teacher detached.
pub fn logits_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    student: Var,
    teacher: &Tensor<T>,
) -> Result<Var> {
    tape.kl_div(student, teacher)
}

/// Cross-entropy of the distillation head against the hard teacher label.
pub fn hard_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    distill_logits: Option<Var>,
    label: usize,
) -> Result<Var> {
    let z = distill_logits
        .ok_or_else(|| SitError::Config("hard loss needs a distillation head".into()))?;
    tape.cross_entropy(z, &[label])
}

/// Token loss over plain tensors (one `T × C` tensor per layer).
pub fn token_loss<T: Scalar>(student: &[Tensor<T>], teacher: &[Tensor<T>]) -> Result<T> {
    let mut tape = Tape::frozen();
    let s: Vec<Var> = student.iter().map(|t| tape.constant(t.clone())).collect();
    let t: Vec<Var> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
    let l = token_loss_on_tape(&mut tape, &s, &t)?;
    Ok(tape.value(l).data()[0])
}

/// KL term over `B × K` logit rows, averaged over rows.
pub fn logits_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::frozen();
    let s = tape.constant(student.clone());
    let l = logits_loss_on_tape(&mut tape, s, teacher)?;
    Ok(tape.value(l).data()[0])
}

/// Hard-label term over `B × K` distillation-head rows.
pub fn hard_loss<T: Scalar>(distill_logits: Option<&Tensor<T>>, labels: &[usize]) -> Result<T> {
    let z = distill_logits
        .ok_or_else(|| SitError::Config("hard loss needs a distillation head".into()))?;
    let mut tape = Tape::frozen();
    let v = tape.constant(z.clone());
    let l = tape.cross_entropy(v, labels)?;
    Ok(tape.value(l).data()[0])
}

/// Frozen-teacher outputs for one image.
#[derive(Clone, Debug)]
pub struct TeacherTargets<T> {
    pub block_tokens: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    /// Argmax of the auxiliary hard-label teacher, when configured.
    pub hard_label: Option<usize>,
}

pub fn teacher_targets<T: Scalar>(
    teacher: &VisionTransformer<T>,
    hard_teacher: Option<&VisionTransformer<T>>,
    image: &Tensor<T>,
) -> Result<TeacherTargets<T>> {
    let mut tape = Tape::frozen();
    let out = teacher.forward(&mut tape, image, false)?;
    let hard_label = match hard_teacher {
        Some(h) => Some(argmax(h.predict(image)?.data())),
        None => None,
    };
    Ok(TeacherTargets {
        block_tokens: out
            .block_tokens
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        logits: tape.value(out.logits).clone(),
        hard_label,
    })
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Component values of the global objective. Components whose weight is
/// zero are not evaluated and reported as `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub token: Option<f64>,
    pub logits: Option<f64>,
    pub hard: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `cls + Σ λ·component`, recomputed from the parts.
    pub fn reassemble(&self, w: &DistillWeights) -> f64 {
        self.cls
            + w.lambda_token * self.token.unwrap_or(0.0)
            + w.lambda_logits * self.logits.unwrap_or(0.0)
            + w.lambda_hard * self.hard.unwrap_or(0.0)
    }

    fn add_scaled(&mut self, other: &LossBreakdown, f: f64) {
        let acc = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + f * b);
            }
        };
        self.cls += f * other.cls;
        acc(&mut self.token, other.token);
        acc(&mut self.logits, other.logits);
        acc(&mut self.hard, other.hard);
        self.total += f * other.total;
    }
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub token: Option<Var>,
    pub logits: Option<Var>,
    pub hard: Option<Var>,
    pub student_logits: Var,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossBreakdown {
            cls: v(self.cls),
            token: self.token.map(v),
            logits: self.logits.map(v),
            hard: self.hard.map(v),
            total: v(self.total),
        }
    }
}

/// Records `L_cls + λ_token·L_token + λ_logits·L_logits + λ_hard·L_hard` for
/// one labeled image. `targets` may be `None` only when the token and logit
/// weights are zero.
pub fn sample_loss_on_tape<'p, T: Scalar>(
    student: &VisionTransformer<T>,
    store: &'p ParamStore<T>,
    tape: &mut Tape<'p, T>,
    image: &Tensor<T>,
    label: usize,
    targets: Option<&TeacherTargets<T>>,
    weights: &DistillWeights,
) -> Result<LossVars> {
    let need_teacher = weights.lambda_token > 0.0 || weights.lambda_logits > 0.0;
    if need_teacher && targets.is_none() {
        return Err(SitError::Config(
            "teacher targets required by non-zero distillation weights".into(),
        ));
    }
    let out = student.forward_with(store, tape, image, weights.lambda_token > 0.0)?;
    let cls = tape.cross_entropy(out.logits, &[label])?;
    let mut terms = vec![(cls, T::one())];
    let token = if weights.lambda_token > 0.0 {
        let t = targets.unwrap();
        let teacher: Vec<Var> = t
            .block_tokens
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect();
        let l = token_loss_on_tape(tape, &out.recalibrated, &teacher)?;
        terms.push((l, T::lit(weights.lambda_token)));
        Some(l)
    } else {
        None
    };
    let logits = if weights.lambda_logits > 0.0 {
        let l = logits_loss_on_tape(tape, out.logits, &targets.unwrap().logits)?;
        terms.push((l, T::lit(weights.lambda_logits)));
        Some(l)
    } else {
        None
    };
    let hard = if weights.lambda_hard > 0.0 {
        let y = targets.and_then(|t| t.hard_label).ok_or_else(|| {
            SitError::Config("lambda_hard > 0 requires a hard-label teacher".into())
        })?;
        let l = hard_loss_on_tape(tape, out.distill_logits, y)?;
        terms.push((l, T::lit(weights.lambda_hard)));
        Some(l)
    } else {
        None
    };
    let total = tape.weighted_sum(&terms)?;
    Ok(LossVars {
        total,
        cls,
        token,
        logits,
        hard,
        student_logits: out.logits,
    })
}

/// Batch-mean global objective and its components (no gradients).
pub fn global_loss<T: Scalar>(
    batch: &[(Tensor<T>, usize)],
    student: &VisionTransformer<T>,
    teacher: &VisionTransformer<T>,
    hard_teacher: Option<&VisionTransformer<T>>,
    weights: &DistillWeights,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let f = 1.0 / batch.len() as f64;
    for (image, label) in batch {
        let targets = teacher_targets(teacher, hard_teacher, image)?;
        let mut tape = Tape::frozen();
        let vars = sample_loss_on_tape(
            student,
            &student.params,
            &mut tape,
            image,
            *label,
            Some(&targets),
            weights,
        )?;
        acc.add_scaled(&vars.values(&tape), f);
    }
    Ok(acc)
}

/// Copies every backbone tensor of `teacher` into `student` bit-exactly.
/// Slimming and recalibration tensors (and a distillation head the teacher
/// lacks) keep their fresh initialization.
pub fn inherit_weights<T: Scalar>(
    teacher: &VisionTransformer<T>,
    student: &mut VisionTransformer<T>,
) -> Result<()> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.depth != sc.depth || tc.embed_dim != sc.embed_dim || tc.heads != sc.heads {
        return Err(SitError::Config(format!(
            "teacher (depth {}, dim {}, heads {}) and student (depth {}, dim {}, heads {}) disagree",
            tc.depth, tc.embed_dim, tc.heads, sc.depth, sc.embed_dim, sc.heads
        )));
    }
    let student_only =
        |n: &str| n.starts_with("tsm.") || n.starts_with("rtsm.") || n.starts_with("head_dist.");
    let mut bad = Vec::new();
    let mut copies = Vec::new();
    for (id, p) in student.params.iter() {
        match teacher.params.by_name(&p.name) {
            Some(t) if t.shape() == p.tensor.shape() => copies.push((id, t)),
            Some(t) => bad.push(format!(
                "{} (teacher {:?}, student {:?})",
                p.name,
                t.shape(),
                p.tensor.shape()
            )),
            None if student_only(&p.name) => {}
            None => bad.push(format!("{} (missing in teacher)", p.name)),
        }
    }
    for (_, p) in teacher.params.iter() {
        if student.params.id(&p.name).is_none() && !student_only(&p.name) {
            bad.push(format!("{} (missing in student)", p.name));
        }
    }
    if !bad.is_empty() {
        return Err(SitError::Inherit(bad));
    }
    for (id, t) in copies {
        student
            .params
            .get_mut(id)
            .data_mut()
            .copy_from_slice(t.data());
    }
    Ok(())
}

/// Fraction of correctly classified samples (main head).
pub fn accuracy<T: Scalar>(model: &VisionTransformer<T>, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = model.predict(&data.image::<T>(i))?;
        correct += usize::from(argmax(logits.data()) == data.label(i));
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        loss: LossBreakdown,
        lr_backbone: f64,
        lr_recalibration: f64,
        wall_clock_s: f64,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        loss: LossBreakdown,
        train_accuracy: f64,
        test_accuracy: Option<f64>,
        wall_clock_s: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Epoch-mean loss components.
    pub epoch_losses: Vec<LossBreakdown>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<Option<f64>>,
    pub final_loss: f64,
    pub wall_clock_s: f64,
}

impl TrainSummary {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.test_accuracy.last().copied().flatten()
    }
}

/// Supervised training of the full-token teacher (`L_cls` only).
pub fn train_teacher<T: Scalar>(
    model: &mut VisionTransformer<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    plan: &TrainPlan,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    fit(
        model,
        None,
        None,
        data,
        test,
        plan,
        &DistillWeights::none(),
        log,
    )
}

/// Trains `student` against the frozen `teacher` with the full objective.
pub fn distill<T: Scalar>(
    student: &mut VisionTransformer<T>,
    teacher: &VisionTransformer<T>,
    hard_teacher: Option<&VisionTransformer<T>>,
    data: &Dataset,
    test: Option<&Dataset>,
    plan: &TrainPlan,
    weights: &DistillWeights,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    weights.validate(hard_teacher.is_some())?;
    fit(
        student,
        Some(teacher),
        hard_teacher,
        data,
        test,
        plan,
        weights,
        log,
    )
}

#[allow(clippy::too_many_arguments)]
fn fit<T: Scalar>(
    model: &mut VisionTransformer<T>,
    teacher: Option<&VisionTransformer<T>>,
    hard_teacher: Option<&VisionTransformer<T>>,
    data: &Dataset,
    test: Option<&Dataset>,
    plan: &TrainPlan,
    weights: &DistillWeights,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    plan.validate()?;
    if data.is_empty() {
        return Err(SitError::Config("empty training set".into()));
    }
    let need_targets =
        weights.lambda_token > 0.0 || weights.lambda_logits > 0.0 || weights.lambda_hard > 0.0;
    if need_targets && teacher.is_none() {
        return Err(SitError::Config(
            "distillation weights set without a teacher".into(),
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Optimizer::<T>::new(
        plan.optimizer,
        plan.lr_backbone(),
        plan.lr_recalibration(),
        plan.weight_decay,
    );
    let steps_per_epoch = data.len().div_ceil(plan.batch_size);
    let total_steps = steps_per_epoch * plan.epochs;
    let warmup = (steps_per_epoch * plan.warmup_epochs).min(total_steps / 2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut summary = TrainSummary::default();
    let mut global_step = 0;
    model.params.zero_grad();
    for epoch in 0..plan.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut correct = 0usize;
        for (step, batch) in order.chunks(plan.batch_size).enumerate() {
            let f = 1.0 / batch.len() as f64;
            let mut batch_loss = LossBreakdown::default();
            for &i in batch {
                let image = data.image::<T>(i);
                let label = data.label(i);
                let targets = match teacher {
                    Some(t) if need_targets => Some(teacher_targets(t, hard_teacher, &image)?),
                    _ => None,
                };
                let (values, predicted, grads) = {
                    let mut tape = Tape::new();
                    let vars = sample_loss_on_tape(
                        model,
                        &model.params,
                        &mut tape,
                        &image,
                        label,
                        targets.as_ref(),
                        weights,
                    )?;
                    let values = vars.values(&tape);
                    if !values.total.is_finite() {
                        return Err(non_finite_dump(epoch, step, batch, data, &values));
                    }
                    let predicted = argmax(tape.value(vars.student_logits).data());
                    let scaled = tape.scale(vars.total, T::lit(f));
                    (values, predicted, tape.backward(scaled)?)
                };
                grads.accumulate_into(&mut model.params);
                correct += usize::from(predicted == label);
                batch_loss.add_scaled(&values, f);
            }
            let factor = warmup_cosine(global_step, total_steps, warmup);
            opt.step(&mut model.params, factor);
            global_step += 1;
            epoch_loss.add_scaled(&batch_loss, batch.len() as f64 / data.len() as f64);
            log(&LogRecord::Step {
                epoch,
                step,
                loss: batch_loss,
                lr_backbone: plan.lr_backbone() * factor,
                lr_recalibration: plan.lr_recalibration() * factor,
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
        }
        let train_accuracy = correct as f64 / data.len() as f64;
        let test_accuracy = match test {
            Some(t) => Some(accuracy(model, t)?),
            None => None,
        };
        log(&LogRecord::Epoch {
            epoch,
            steps: steps_per_epoch,
            loss: epoch_loss,
            train_accuracy,
            test_accuracy,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        summary.epoch_losses.push(epoch_loss);
        summary.train_accuracy.push(train_accuracy);
        summary.test_accuracy.push(test_accuracy);
        summary.final_loss = epoch_loss.total;
    }
    summary.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(summary)
}

fn non_finite_dump(
    epoch: usize,
    step: usize,
    batch: &[usize],
    data: &Dataset,
    loss: &LossBreakdown,
) -> SitError {
    let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
    let dump = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "sample_indices": batch,
        "labels": labels,
        "loss": loss,
    });
    SitError::NonFinite(format!("training loss; last batch: {dump}"))
}
