//! Randomized invariants of slimming, losses and training.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sit_core::distill::{
    self, logits_loss, sample_loss_on_tape, teacher_targets, token_loss, DistillWeights, TrainPlan,
};
use sit_core::io::dataset::{gen_synth, SynthSpec};
use sit_core::{slim, tsm_attention, ModelConfig, SlimAxis, Tape, Tensor, TsmParams, Vit64};

fn instance(n: usize, n_hat: usize, c: usize, seed: u64) -> (Tensor<f64>, TsmParams<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, c], &mut r);
    let mut p = TsmParams::init(c, n_hat, &mut r);
    p.w_q = Tensor::randn(&[n_hat, c / 2], &mut r);
    (x, p)
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (4usize..=64, 1usize..=8, any::<u64>())
        .prop_flat_map(|(n, half, seed)| (Just(n), 2usize..=n.min(32), Just(2 * half), Just(seed)))
}

pub fn tiny_student() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        in_channels: 3,
        embed_dim: 16,
        heads: 2,
        depth: 4,
        stages: vec![1, 1, 1, 1],
        keep_ratio: 0.5,
        num_classes: 3,
        use_distill_head: true,
        mlp_ratio: 2,
        slim_axis: SlimAxis::Columns,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn columns_are_distributions((n, n_hat, c, seed) in shapes()) {
        let (x, p) = instance(n, n_hat, c, seed);
        let a = tsm_attention(&x, &p, SlimAxis::Columns).unwrap();
        prop_assert_eq!(a.tensor().shape(), &[n_hat, n]);
        prop_assert!(a.column_sum_error() < 1e-6);
        prop_assert!(a.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn token_mass_is_conserved((n, n_hat, c, seed) in shapes()) {
        let (x, p) = instance(n, n_hat, c, seed);
        let xs = slim(&tsm_attention(&x, &p, SlimAxis::Columns).unwrap(), &x).unwrap();
        for ch in 0..c {
            let before: f64 = (0..n).map(|j| x.at(&[j, ch])).sum();
            let after: f64 = (0..n_hat).map(|i| xs.at(&[i, ch])).sum();
            prop_assert!((before - after).abs() < 1e-5);
        }
    }

    #[test]
    fn slimming_ignores_token_order((n, n_hat, c, seed) in shapes()) {
        let (x, p) = instance(n, n_hat, c, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let rows: Vec<f64> = perm.iter().flat_map(|&j| x.row(j).to_vec()).collect();
        let px = Tensor::new(&[n, c], rows).unwrap();
        let a = slim(&tsm_attention(&x, &p, SlimAxis::Columns).unwrap(), &x).unwrap();
        let b = slim(&tsm_attention(&px, &p, SlimAxis::Columns).unwrap(), &px).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn kl_is_non_negative(k in 2usize..12, seed: u64, scale in 0.1f64..20.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::<f64>::randn(&[1, k], &mut r).map(|v| v * scale);
        let t = Tensor::<f64>::randn(&[1, k], &mut r).map(|v| v * scale);
        prop_assert!(logits_loss(&s, &t).unwrap() >= 0.0);
        prop_assert!(logits_loss(&s, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn token_loss_matches_triple_loop(l in 1usize..=4, n in 1usize..=16, c in 1usize..=8, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Tensor<f64>> = (0..l).map(|_| Tensor::randn(&[n, c], &mut r)).collect();
        let t: Vec<Tensor<f64>> = (0..l).map(|_| Tensor::randn(&[n, c], &mut r)).collect();
        let mut acc = 0.0;
        for layer in 0..l {
            for i in 0..n {
                for ch in 0..c {
                    let d = s[layer].at(&[i, ch]) - t[layer].at(&[i, ch]);
                    acc += d * d;
                }
            }
        }
        let oracle = acc / (l * n * c) as f64;
        let got = token_loss(&s, &t).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12));
    }

    #[test]
    fn token_loss_of_constant_shift(c_shift in -3.0f64..3.0, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[5, 4], &mut r)).collect();
        let t: Vec<Tensor<f64>> = s.iter().map(|x| x.map(|v| v + c_shift)).collect();
        prop_assert!((token_loss(&s, &t).unwrap() - c_shift * c_shift).abs() < 1e-10);
    }
}

fn tiny_pair() -> (Vit64, Vit64, Tensor<f64>) {
    let teacher = Vit64::new(tiny_student().teacher(), 1).unwrap();
    let mut student = Vit64::new(tiny_student(), 2).unwrap();
    distill::inherit_weights(&teacher, &mut student).unwrap();
    let image = Tensor::randn(&[8, 8, 3], &mut ChaCha8Rng::seed_from_u64(3));
    (teacher, student, image)
}

#[test]
fn loss_components_reassemble() {
    let (teacher, student, image) = tiny_pair();
    let hard = Vit64::new(tiny_student().teacher(), 9).unwrap();
    let targets = teacher_targets(&teacher, Some(&hard), &image).unwrap();
    for w in [
        DistillWeights::default(),
        DistillWeights::with_hard_teacher(),
        DistillWeights {
            lambda_token: 0.3,
            lambda_logits: 1.7,
            lambda_hard: 0.5,
        },
        DistillWeights::none(),
    ] {
        let mut tape = Tape::frozen();
        let v = sample_loss_on_tape(
            &student,
            &student.params,
            &mut tape,
            &image,
            1,
            Some(&targets),
            &w,
        )
        .unwrap();
        let b = v.values(&tape);
        assert!(
            (b.reassemble(&w) - b.total).abs() <= 1e-6 * b.total.abs().max(1.0),
            "{b:?}"
        );
        if w == DistillWeights::none() {
            assert_eq!(b.total, b.cls);
        }
    }
}

#[test]
fn gradients_route_through_token_loss_only_to_recalibration() {
    let (teacher, student, image) = tiny_pair();
    let targets = teacher_targets(&teacher, None, &image).unwrap();
    let rtsm_grad = |w: DistillWeights| {
        let mut tape = Tape::new();
        let v = sample_loss_on_tape(
            &student,
            &student.params,
            &mut tape,
            &image,
            0,
            Some(&targets),
            &w,
        )
        .unwrap();
        let g = tape.backward(v.total).unwrap();
        let mut touched = (false, false);
        for (id, p) in student.params.iter() {
            let has = g.param(id).is_some_and(|d| d.iter().any(|&x| x != 0.0));
            if p.name.starts_with("rtsm.") {
                touched.0 |= has;
            }
            if p.name.starts_with("tsm.") {
                touched.1 |= has;
            }
        }
        touched
    };
    assert_eq!(
        rtsm_grad(DistillWeights {
            lambda_token: 0.0,
            ..DistillWeights::default()
        }),
        (false, true)
    );
    assert_eq!(
        rtsm_grad(DistillWeights {
            lambda_token: 2.0,
            lambda_logits: 0.0,
            lambda_hard: 0.0
        }),
        (true, true)
    );
}

#[test]
fn distillation_leaves_teacher_untouched() {
    let (teacher, mut student, _) = tiny_pair();
    let before: Vec<Vec<f64>> = teacher
        .params
        .iter()
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    let data = gen_synth(&SynthSpec {
        classes: 3,
        samples_per_class: 4,
        size: 8,
        ..SynthSpec::default()
    });
    let plan = TrainPlan {
        epochs: 1,
        batch_size: 4,
        ..TrainPlan::default()
    };
    distill::distill(
        &mut student,
        &teacher,
        None,
        &data,
        None,
        &plan,
        &DistillWeights::default(),
        &mut |_| {},
    )
    .unwrap();
    let after: Vec<Vec<f64>> = teacher
        .params
        .iter()
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    assert_eq!(before, after);
    let tsm = student.params.by_name("tsm.1.w_k").unwrap();
    assert!(teacher
        .params
        .iter()
        .all(|(_, p)| p.tensor.data() != tsm.data()));
}

#[test]
fn training_is_deterministic() {
    let data = gen_synth(&SynthSpec {
        classes: 3,
        samples_per_class: 6,
        size: 8,
        ..SynthSpec::default()
    });
    let plan = TrainPlan {
        epochs: 2,
        batch_size: 4,
        base_lr_backbone: 0.05,
        ..TrainPlan::default()
    };
    let run = || {
        let (teacher, mut student, _) = tiny_pair();
        let s = distill::distill(
            &mut student,
            &teacher,
            None,
            &data,
            None,
            &plan,
            &DistillWeights::default(),
            &mut |_| {},
        )
        .unwrap();
        (
            s.final_loss.to_bits(),
            student
                .params
                .iter()
                .map(|(_, p)| p.tensor.data().to_vec())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
