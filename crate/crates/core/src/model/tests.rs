use super::*;
use crate::gradcheck::{random_samples, run_gradcheck, CheckSample};
use crate::numeric::AdamConfig;
use proptest::prelude::*;

fn tiny(kind: ModelKind) -> Model {
    Model::new(kind, &ModelConfig::tiny(), 42).unwrap()
}

fn zero_all(model: &mut Model) {
    for b in model.blocks_mut() {
        b.value.fill(0.0);
    }
}

fn windows(samples: &[CheckSample]) -> Vec<Vec<Option<&VisitFeatures>>> {
    samples
        .iter()
        .map(|s| s.window.iter().map(Option::as_ref).collect())
        .collect()
}

#[test]
fn zero_encoders_give_zero_latent() {
    let mut m = tiny(ModelKind::Flare);
    zero_all(&mut m);
    let s = random_samples(m.config().dims, 2, 1, false, 1);
    let (f, _) = m.encode_visit(s[0].window[0].as_ref()).unwrap();
    assert_eq!(f, vec![0.0; 6]);
}

#[test]
fn latent_dim_is_sum_of_encoder_outputs() {
    let mut cfg = ModelConfig::tiny();
    cfg.enc_out = EncoderOut {
        volumetric: 3,
        demographic: 1,
        cognitive: 2,
    };
    let m = Model::new(ModelKind::Flare, &cfg, 0).unwrap();
    let s = random_samples(cfg.dims, 2, 1, false, 1);
    assert_eq!(m.encode_visit(s[0].window[0].as_ref()).unwrap().0.len(), 6);
}

#[test]
fn encoding_an_unobserved_visit_fails() {
    let m = tiny(ModelKind::Flare);
    assert!(matches!(
        m.encode_visit(None),
        Err(ModelError::UnobservedVisit)
    ));
}

#[test]
fn zero_rho_predicts_zero() {
    let mut m = tiny(ModelKind::Flare);
    zero_all(&mut m);
    let (f, _) = m.predict_next_feature(&[0.3, -0.2, 0.1, 0.9, -0.5]).unwrap();
    assert_eq!(f, vec![0.0; 6]);
}

#[test]
fn rho_output_matches_latent_dim_for_any_depth() {
    for hidden in [vec![], vec![3], vec![7, 2, 5]] {
        let cfg = ModelConfig {
            rho_hidden: hidden,
            ..ModelConfig::tiny()
        };
        let m = Model::new(ModelKind::Flare, &cfg, 0).unwrap();
        assert_eq!(m.predict_next_feature(&[0.0; 5]).unwrap().0.len(), 6);
    }
}

#[test]
fn rollout_counts_fully_observed() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 2, 1, false, 3);
    let w = &windows(&s)[0];
    let tr = m.forward_flare(w, 1, false).unwrap();
    assert_eq!(tr.rnn_steps(), 3);
    assert_eq!(tr.rho_calls_on_path(), 1);
    assert_eq!(
        tr.provenance(),
        vec![StepSource::Encoded, StepSource::Encoded, StepSource::RolledOut]
    );
}

#[test]
fn rollout_counts_with_missing_second_visit() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 2, 1, true, 3);
    let w = &windows(&s)[0];
    assert!(w[1].is_none());
    let tr = m.forward_flare(w, 1, true).unwrap();
    assert_eq!(tr.rnn_steps(), 3);
    assert_eq!(tr.rho_calls_on_path(), 2);
    assert_eq!(tr.aux_rho_calls(), 0);
    assert_eq!(tr.imputed_count(), 1);
    assert_eq!(tr.predicted_latents().len(), 2);
    assert_eq!(tr.latents().len(), 1);
}

#[test]
fn classifier_reads_the_last_rolled_out_state() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 3, 2, false, 5);
    let tr = m.forward_flare(&windows(&s)[0], 2, false).unwrap();
    assert_eq!(tr.rnn_steps(), 5);
    assert_eq!(tr.hidden_states().len(), 3);
    assert_eq!(tr.rolled_out_hidden().len(), 2);
    assert_eq!(tr.final_hidden(), tr.rolled_out_hidden()[1]);
    let (logits, _) = m.classifier.forward(tr.final_hidden()).unwrap();
    assert_eq!(logits, tr.logits);
}

#[test]
fn rollout_input_errors() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 2, 1, false, 3);
    let mut w = windows(&s)[0].clone();
    assert!(matches!(
        m.forward_flare(&w, 0, false),
        Err(ModelError::Contract(_))
    ));
    w[0] = None;
    assert!(matches!(
        m.forward_flare(&w, 1, false),
        Err(ModelError::ImputationAnchor)
    ));
    assert!(m.forward_baseline(&windows(&s)[0], 1).is_err());
}

#[test]
fn baseline_appends_horizon() {
    let m = tiny(ModelKind::Concat);
    assert_eq!(m.classifier.in_dim(), 5 + 1);
    let s = random_samples(m.config().dims, 3, 1, false, 9);
    let w = &windows(&s)[0];
    let a = m.forward_baseline(w, 1).unwrap();
    let b = m.forward_baseline(w, 2).unwrap();
    assert_eq!(a.rnn_steps(), 3);
    assert_eq!(a.classifier_input[..5], b.classifier_input[..5]);
    assert_eq!(a.classifier_input[5], 1.0);
    assert_eq!(b.classifier_input[5], 2.0);
    assert!(m.predict_next_feature(&[0.0; 5]).is_err());
}

#[test]
fn baseline_one_hot_horizon() {
    let cfg = ModelConfig {
        tau_encoding: TauEncoding::OneHot,
        ..ModelConfig::tiny()
    };
    let m = Model::new(ModelKind::Concat, &cfg, 1).unwrap();
    assert_eq!(m.classifier.in_dim(), 5 + 3);
    assert_eq!(m.tau_repr(2), vec![0.0, 1.0, 0.0]);
    let s = random_samples(cfg.dims, 2, 1, false, 9);
    assert!(m.forward_baseline(&windows(&s)[0], 4).is_err());
}

#[test]
fn baseline_rejects_missing_visits() {
    let m = tiny(ModelKind::Concat);
    let s = random_samples(m.config().dims, 3, 1, true, 9);
    assert!(matches!(
        m.forward_baseline(&windows(&s)[0], 1),
        Err(ModelError::UnsupportedInput(_))
    ));
}

#[test]
fn alpha_zero_total_is_cross_entropy() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 3, 1, false, 4);
    let tr = m.forward_flare(&windows(&s)[0], 1, true).unwrap();
    let weights = LossWeights {
        alpha: 0.0,
        ..LossWeights::default()
    };
    let (loss, _) = loss_flare(&tr, &tr.teacher_latents(), Stage::Mci, &weights).unwrap();
    assert_eq!(loss.total, loss.cel);
    assert!(loss.aux > 0.0);
}

#[test]
fn two_observed_visits_give_one_aux_term() {
    let m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 2, 2, false, 4);
    let tr = m.forward_flare(&windows(&s)[0], 2, true).unwrap();
    assert_eq!(tr.aux_rho_calls(), 1);
    let teacher = tr.teacher_latents();
    assert_eq!(teacher.len(), 1);
    let pred = tr.aux_predictions()[0].unwrap();
    let expected = crate::numeric::mse(pred, teacher[0].as_ref().unwrap()).unwrap().0;
    let (loss, _) = loss_flare(&tr, &teacher, Stage::Cn, &LossWeights::default()).unwrap();
    assert_eq!(loss.aux, expected);
}

#[test]
fn encoder_gradient_flows_through_rollout() {
    let cfg = ModelConfig {
        loss: LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        },
        ..ModelConfig::tiny()
    };
    let mut m = Model::new(ModelKind::Flare, &cfg, 8).unwrap();
    let s = random_samples(cfg.dims, 2, 1, false, 8);
    m.accumulate_sample(&windows(&s)[0], 1, Stage::Ad).unwrap();
    let enc_grad: f64 = m
        .enc_volumetric
        .blocks()
        .chain(m.enc_cognitive.blocks())
        .map(|b| b.grad.as_slice().iter().map(|g| g.abs()).sum::<f64>())
        .sum();
    assert!(enc_grad > 0.0);
}

#[test]
fn zero_upstream_accumulates_nothing() {
    let mut m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 3, 2, true, 2);
    let tr = m.forward_flare(&windows(&s)[0], 2, true).unwrap();
    let zeros = LossGrads::zeros(&tr);
    m.zero_grads();
    m.backward_flare(&tr, &zeros).unwrap();
    assert!(m
        .blocks()
        .iter()
        .all(|b| b.grad.as_slice().iter().all(|&g| g == 0.0)));
}

#[test]
fn backward_after_update_is_stale() {
    let mut m = tiny(ModelKind::Flare);
    let s = random_samples(m.config().dims, 2, 1, false, 2);
    let tr = m.forward_flare(&windows(&s)[0], 1, true).unwrap();
    let (_, g) = loss_flare(&tr, &tr.teacher_latents(), Stage::Cn, &LossWeights::default()).unwrap();
    m.backward_flare(&tr, &g).unwrap();
    m.adam_step(&AdamConfig::default(), 1).unwrap();
    assert!(matches!(
        m.backward_flare(&tr, &g),
        Err(ModelError::StaleTrace { .. })
    ));
}

#[test]
fn full_model_gradcheck_tiny_config() {
    let report = run_gradcheck(&ModelConfig::tiny(), 17, None).unwrap();
    for case in &report.cases {
        for b in &case.blocks {
            assert!(b.passed, "{} / {}: {}", case.case, b.block, b.max_rel_error);
        }
    }
    assert_eq!(report.cases.len(), 15);
}

#[test]
fn gradcheck_with_tanh_cell_and_one_hot_baseline() {
    let cfg = ModelConfig {
        cell: CellKind::Tanh,
        tau_encoding: TauEncoding::OneHot,
        activation: crate::numeric::Activation::Tanh,
        ..ModelConfig::tiny()
    };
    let report = run_gradcheck(&cfg, 5, None).unwrap();
    assert!(report.passed(), "{:?}", report.failures());
}

#[test]
fn gradcheck_names_corrupted_block() {
    let report = run_gradcheck(&ModelConfig::tiny(), 17, Some("cell.w_hh")).unwrap();
    let failures = report.failures();
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|(_, block)| block == "cell.w_hh"));
}

fn train_fixed_batch(kind: ModelKind, steps: u64) -> (f64, f64, Model) {
    let cfg = ModelConfig::tiny();
    let mut m = Model::new(kind, &cfg, 3).unwrap();
    let mut samples = random_samples(cfg.dims, 3, 2, false, 30);
    samples.extend(random_samples(cfg.dims, 2, 1, false, 31));
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut first = None;
    let mut last = 0.0;
    for t in 1..=steps {
        m.zero_grads();
        let mut total = 0.0;
        for s in &samples {
            let w: Vec<_> = s.window.iter().map(Option::as_ref).collect();
            total += m.accumulate_sample(&w, s.tau, s.label).unwrap().total;
        }
        first.get_or_insert(total);
        last = total;
        m.adam_step(&adam, t).unwrap();
    }
    (first.unwrap(), last, m)
}

#[test]
fn fixed_batch_loss_drops_ninety_percent() {
    for kind in [ModelKind::Flare, ModelKind::Concat] {
        let (first, last, _) = train_fixed_batch(kind, 200);
        assert!(last <= 0.1 * first, "{kind:?}: {first} -> {last}");
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (_, _, a) = train_fixed_batch(ModelKind::Flare, 20);
    let (_, _, b) = train_fixed_batch(ModelKind::Flare, 20);
    assert_eq!(a.to_checkpoint(20).to_binary(), b.to_checkpoint(20).to_binary());
}

#[test]
fn checkpoint_round_trip_and_strict_shapes() {
    let (_, _, m) = train_fixed_batch(ModelKind::Flare, 5);
    let ck = m.to_checkpoint(5);
    let back = Model::from_checkpoint(&ck, Some((ModelKind::Flare, m.config()))).unwrap();
    assert_eq!(back.to_checkpoint(5).to_binary(), ck.to_binary());

    assert!(Model::from_checkpoint(&ck, Some((ModelKind::Concat, m.config()))).is_err());
    let other = ModelConfig {
        rnn_hidden: 6,
        ..ModelConfig::tiny()
    };
    assert!(Model::from_checkpoint(&ck, Some((ModelKind::Flare, &other))).is_err());

    let mut tampered = ck.clone();
    tampered.blocks[0] = crate::numeric::ParamBlock::zeros(tampered.blocks[0].name.clone(), 1, 1);
    assert!(Model::from_checkpoint(&tampered, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_is_stateless(seed in any::<u64>()) {
        let m = tiny(ModelKind::Flare);
        let s = random_samples(m.config().dims, 2, 1, false, seed);
        let (a, b) = (s[0].window[0].as_ref(), s[1].window[0].as_ref());
        let fa = m.encode_visit(a).unwrap().0;
        let fb = m.encode_visit(b).unwrap().0;
        prop_assert_eq!(m.encode_visit(b).unwrap().0, fb);
        prop_assert_eq!(m.encode_visit(a).unwrap().0, fa);
    }

    #[test]
    fn dims_are_constant_along_a_trace(
        t in 1usize..5,
        tau in 1usize..4,
        holes in prop::collection::vec(any::<bool>(), 4),
        seed in any::<u64>(),
    ) {
        let m = tiny(ModelKind::Flare);
        let mut s = random_samples(m.config().dims, t, tau, false, seed).remove(0);
        for (i, hole) in holes.iter().enumerate().take(t).skip(1) {
            if *hole { s.window[i] = None; }
        }
        let w: Vec<_> = s.window.iter().map(Option::as_ref).collect();
        let tr = m.forward_flare(&w, tau, true).unwrap();
        let imputed = holes.iter().take(t).skip(1).filter(|h| **h).count();
        prop_assert_eq!(tr.rnn_steps(), t + tau);
        prop_assert_eq!(tr.rho_calls_on_path(), tau + imputed);
        prop_assert!(tr.latents().iter().chain(&tr.predicted_latents()).all(|f| f.len() == 6));
        prop_assert!(tr.hidden_states().iter().chain(&tr.rolled_out_hidden()).all(|h| h.len() == 5));
    }
}
