use super::*;
use crate::model::{prepare_akpm_targets, total_loss};

#[test]
fn lr_schedule_ramps_linearly() {
    let cfg = TrainConfig { learning_rate: 1e-3, warmup_steps: 100, ..TrainConfig::desk() };
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert_eq!(lr_schedule(100, &cfg), 1e-3);
    assert!((lr_schedule(50, &cfg) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(5000, &cfg), 1e-3);
    let no_warmup = TrainConfig { warmup_steps: 0, ..cfg };
    assert_eq!(lr_schedule(0, &no_warmup), 1e-3);
}

#[test]
fn config_validation() {
    let bad = TrainConfig { warmup_steps: 50, steps: 10, ..TrainConfig::desk() };
    assert!(bad.validate().is_err());
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig::paper_scale().validate().is_ok());
}

#[test]
fn adam_zero_gradient_zero_decay_is_identity() {
    let mut p = vec![1.0, -2.0, 0.5];
    let g = vec![0.0; 3];
    let mut m = vec![0.0; 3];
    let mut v = vec![0.0; 3];
    adam_update(&mut p, &g, &mut m, &mut v, 1, 1e-3, 0.0);
    assert_eq!(p, vec![1.0, -2.0, 0.5]);
}

#[test]
fn adam_first_step_magnitude_is_lr_regardless_of_scale() {
    for &scale in &[1e-6, 1.0, 1e6] {
        let mut p = vec![0.0];
        let g = vec![scale];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 1e-2, 0.0);
        // bias correction makes m_hat/sqrt(v_hat) = sign(g), up to the
        // epsilon in the denominator
        let ratio = p[0].abs() / 1e-2;
        assert!((ratio - 1.0).abs() < 0.02, "scale {scale}: step {}", p[0]);
        assert!(p[0] < 0.0);
    }
}

#[test]
fn adam_constant_gradient_step_approaches_lr() {
    let mut p = vec![0.0];
    let mut m = vec![0.0];
    let mut v = vec![0.0];
    let g = vec![3.7];
    let lr = 1e-3;
    let mut prev = p[0];
    let mut last_step = 0.0;
    for t in 1..=2000u64 {
        adam_update(&mut p, &g, &mut m, &mut v, t, lr, 0.0);
        last_step = (p[0] - prev).abs();
        prev = p[0];
    }
    assert!((last_step - lr).abs() < lr * 0.01, "limit step {last_step}");
}

#[test]
fn adam_decoupled_decay_shrinks_params_without_gradient() {
    let mut p = vec![2.0];
    let mut m = vec![0.0];
    let mut v = vec![0.0];
    adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-2, 0.1);
    assert!((p[0] - (2.0 - 1e-2 * 0.1 * 2.0)).abs() < 1e-12);
}

fn tiny_corpus(seed: u64, count: usize) -> PreparedCorpus {
    let records = crate::data::generate_corpus(seed, count);
    PreparedCorpus::prepare(records, DEFAULT_TAU).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig { layers: 1, hidden: 16, heads: 2, d_img: 16, ..ModelConfig::micro() }
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = std::env::temp_dir().join("kaleido_train_test0");
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = tiny_corpus(1, 12);
    let cfg = TrainConfig { steps: 0, warmup_steps: 0, ..TrainConfig::desk() };
    let out = pretrain(
        &corpus,
        tiny_model(),
        &cfg,
        &dir.join("loss.csv"),
        &dir.join("model.kbck"),
    )
    .unwrap();
    let init = ModelParams::init(tiny_model(), cfg.seed).unwrap();
    assert_eq!(out.params, init);
    let loaded = crate::model::load_checkpoint(&dir.join("model.kbck")).unwrap();
    assert_eq!(loaded, init);
    assert_eq!(out.csv.lines().count(), 1, "only the header for zero steps");
}

#[test]
fn pretrain_is_deterministic_and_parallel_invariant() {
    let dir = std::env::temp_dir().join("kaleido_train_test1");
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = tiny_corpus(2, 16);
    let cfg = TrainConfig {
        steps: 8,
        batch_size: 4,
        warmup_steps: 2,
        log_interval: 2,
        seed: 9,
        ..TrainConfig::desk()
    };
    let a = pretrain(&corpus, tiny_model(), &cfg, &dir.join("a.csv"), &dir.join("a.kbck")).unwrap();
    let b = pretrain(&corpus, tiny_model(), &cfg, &dir.join("b.csv"), &dir.join("b.kbck")).unwrap();
    assert_eq!(a.csv, b.csv);
    assert_eq!(a.params, b.params);
    assert_eq!(
        std::fs::read(dir.join("a.kbck")).unwrap(),
        std::fs::read(dir.join("b.kbck")).unwrap()
    );
    // CSV structure: header + one row per interval
    let mut lines = a.csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(lines.count(), 4);
}

#[test]
fn pretrain_losses_are_logged_per_active_task() {
    let dir = std::env::temp_dir().join("kaleido_train_test2");
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = tiny_corpus(3, 16);
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 4,
        warmup_steps: 0,
        log_interval: 4,
        seed: 1,
        ..TrainConfig::desk()
    };
    let out = pretrain(&corpus, tiny_model(), &cfg, &dir.join("loss.csv"), &dir.join("m.kbck"))
        .unwrap();
    let row = out.csv.lines().nth(1).unwrap();
    let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(cols.len(), 9);
    // near init, classified losses sit near ln(classes)
    assert!((cols[1] - 4.0f64.ln()).abs() < 1.0, "RR {}", cols[1]);
    assert!((cols[2] - 24.0f64.ln()).abs() < 1.5, "JPS {}", cols[2]);
    assert!(cols[8] > 0.0);
}

#[test]
fn overfit_single_example_drops_loss_below_ten_percent() {
    // 500 Adam steps on one fixed positive example.
    let corpus = tiny_corpus(4, 10);
    let cfg = TrainConfig { seed: 5, ..TrainConfig::desk() };
    let example = super::slot_example(&corpus, &cfg, 1, 0).unwrap();
    // make sure we landed on a positive example
    let example = if example.targets.y_m == 1 {
        example
    } else {
        super::slot_example(&corpus, &cfg, 1, 1).unwrap()
    };
    assert_eq!(example.targets.y_m, 1);

    let mut params = ModelParams::init(tiny_model(), 5).unwrap();
    let mut adam = AdamState::for_params(&params);
    let tasks = TaskSet::full();
    let mut initial = None;
    let mut final_loss = f64::INFINITY;
    let mut jps_loss_at_200 = f64::INFINITY;
    for step in 1..=500u64 {
        let akpm = prepare_akpm_targets(&params, &example);
        let (breakdown, grads) =
            crate::model::loss_and_gradients(&params, &example, &tasks, &akpm, None).unwrap();
        if initial.is_none() {
            initial = Some(breakdown.total);
        }
        final_loss = breakdown.total;
        if step == 200 {
            jps_loss_at_200 = breakdown.jps;
        }
        adam_step(&mut params, &grads, &mut adam, 2e-3, 0.0);
    }
    let initial = initial.unwrap();
    assert!(
        final_loss < 0.10 * initial,
        "loss {initial} -> {final_loss} did not reach 10%"
    );
    assert!(jps_loss_at_200 < 24.0f64.ln(), "JPS at step 200: {jps_loss_at_200}");
}

#[test]
fn micro_grad_check_spot_subset() {
    // The acceptance suite runs every coordinate; here a smaller model
    // config keeps the full harness quick.
    let cfg = ModelConfig { layers: 1, hidden: 4, heads: 1, d_img: 4, ..ModelConfig::micro() };
    let (err, count) = grad_check_model(cfg, 3, 1e-5).unwrap();
    assert!(count > 3000);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let dir = std::env::temp_dir().join("kaleido_train_test3");
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = tiny_corpus(6, 12);
    // absurd learning rate forces divergence quickly
    let cfg = TrainConfig {
        steps: 80,
        batch_size: 2,
        warmup_steps: 0,
        learning_rate: 1e4,
        log_interval: 1,
        seed: 3,
        ..TrainConfig::desk()
    };
    let res = pretrain(&corpus, tiny_model(), &cfg, &dir.join("loss.csv"), &dir.join("m.kbck"));
    match res {
        Err(KbError::Numeric(_)) => {
            // checkpoint must exist and be loadable
            let p = crate::model::load_checkpoint(&dir.join("m.kbck")).unwrap();
            assert!(p.is_finite());
        }
        Ok(_) => {
            // divergence is expected but not guaranteed; at least the
            // run must have produced a finite model
            let p = crate::model::load_checkpoint(&dir.join("m.kbck")).unwrap();
            assert!(p.is_finite());
        }
        Err(other) => panic!("unexpected error {other}"),
    }
}

#[test]
fn akpm_targets_freeze_protects_gradcheck_consistency() {
    // perturbing encoder weights must not change frozen targets
    let corpus = tiny_corpus(7, 8);
    let cfg = TrainConfig { seed: 2, ..TrainConfig::desk() };
    let ex = super::slot_example(&corpus, &cfg, 2, 0).unwrap();
    if ex.targets.y_m == 0 {
        return; // negative example carries no reconstruction targets
    }
    let params = ModelParams::init(tiny_model(), 8).unwrap();
    let akpm = prepare_akpm_targets(&params, &ex);
    let mut perturbed = params.clone();
    perturbed.patch_encoder.conv1_w.data_mut()[0] += 0.1;
    let out_a = total_loss(&params, &ex, &TaskSet::full(), &akpm, None).unwrap();
    let out_b = total_loss(&perturbed, &ex, &TaskSet::full(), &akpm, None).unwrap();
    // same targets, different encoder: the losses differ but both use
    // identical target distributions by construction
    assert_ne!(out_a.breakdown.total, out_b.breakdown.total);
    let fresh = prepare_akpm_targets(&perturbed, &ex);
    assert_ne!(akpm.g2cm[0].1, fresh.g2cm[0].1);
}

