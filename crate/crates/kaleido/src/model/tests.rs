use super::*;
use crate::agm::{self, DonorSource, MaskingStrategy, TaskSet};
use crate::data::{self, IMG_SIZE};
use crate::kpg;
use crate::rng::mix;

fn example(seed: u64, negative: bool) -> TrainingExample {
    let rec = data::generate_record(60, seed);
    let donor_rec = data::generate_record(60, seed + 500);
    let set = kpg::split_image(&rec.image, IMG_SIZE, IMG_SIZE).unwrap();
    let donor_set = kpg::split_image(&donor_rec.image, IMG_SIZE, IMG_SIZE).unwrap();
    let aligns =
        crate::aag::ground_truth_alignments(&rec, &set.bbox, crate::aag::DEFAULT_TAU).unwrap();
    let donor = DonorSource {
        caption: &donor_rec.tokens,
        caption_product: donor_rec.product_id,
        camo_pixels: &donor_set.patches[kpg::patch_id(3, 0, 2)].pixels,
        camo_product: donor_rec.product_id,
        protected_token: None,
    };
    let mut rng = Rng::new(mix(61, seed));
    agm::assemble_example(
        &rec,
        &set,
        &aligns,
        negative,
        &donor,
        MaskingStrategy::Agm,
        &TaskSet::full(),
        &mut rng,
    )
    .unwrap()
}

fn zeroed_params(cfg: ModelConfig) -> ModelParams {
    let mut params = ModelParams::init(cfg, 0).unwrap();
    for (_, t) in params.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    params
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::micro();
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::desk().validate().is_ok());
}

#[test]
fn pad_positions_are_attention_masked_out() {
    let params = ModelParams::init(ModelConfig::micro(), 3).unwrap();
    let ex = example(0, false);
    let mut padded = ex.clone();
    for _ in 0..3 {
        padded.tokens.push(data::ID_PAD);
        padded.segments.insert(padded.tokens.len() - 1, 0);
    }
    let fwd_a = forward(&params, &ex, None).unwrap();
    let fwd_b = forward(&params, &padded, None).unwrap();
    let h = params.config.hidden;
    let cls_a = &fwd_a.tape.data(fwd_a.hidden)[..h];
    let cls_b = &fwd_b.tape.data(fwd_b.hidden)[..h];
    for (a, b) in cls_a.iter().zip(cls_b) {
        assert!((a - b).abs() < 1e-9, "PAD changed [CLS]: {a} vs {b}");
    }
}

#[test]
fn same_token_at_two_positions_embeds_differently() {
    let params = ModelParams::init(ModelConfig::micro(), 4).unwrap();
    let mut ex = example(1, false);
    // force identical token ids at caption positions 0 and 1
    ex.tokens[1] = 42;
    ex.tokens[2] = 42;
    let mut cfg0 = params.config.clone();
    cfg0.layers = 0;
    let params0 = ModelParams { config: cfg0, layers: vec![], ..params };
    let fwd = forward(&params0, &ex, None).unwrap();
    let h = params0.config.hidden;
    let row1 = &fwd.tape.data(fwd.hidden)[h..2 * h];
    let row2 = &fwd.tape.data(fwd.hidden)[2 * h..3 * h];
    assert!(row1.iter().zip(row2).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn zero_layer_encoder_returns_embeddings() {
    // With L=0 the hidden states are exactly the post-LN embeddings;
    // verify the [CLS] row against a by-hand recomputation.
    let mut cfg = ModelConfig::micro();
    cfg.layers = 0;
    let params = ModelParams::init(cfg, 5).unwrap();
    let ex = example(2, false);
    let fwd = forward(&params, &ex, None).unwrap();
    let h = params.config.hidden;
    let cls = &fwd.tape.data(fwd.hidden)[..h];

    let cls_id = ex.tokens[0] as usize;
    let mut row: Vec<f64> = (0..h)
        .map(|j| {
            params.token_emb.data()[cls_id * h + j]
                + params.text_pos.data()[j]
                + params.segment.data()[j]
        })
        .collect();
    let mean = row.iter().sum::<f64>() / h as f64;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (j, v) in row.iter_mut().enumerate() {
        *v = (*v - mean) * inv * params.emb_ln_g.data()[j] + params.emb_ln_b.data()[j];
    }
    for (a, b) in cls.iter().zip(&row) {
        assert!((a - b).abs() < 1e-12, "embedding mismatch {a} vs {b}");
    }
}

#[test]
fn blank_and_pixel_patches_embed_differently() {
    let mut cfg = ModelConfig::micro();
    cfg.layers = 0;
    let params = ModelParams::init(cfg, 6).unwrap();
    let ex = example(3, false);
    let plan = ex.plan.as_ref().unwrap();
    let blank_id = plan.level5[0].0;
    let fwd = forward(&params, &ex, None).unwrap();
    let h = params.config.hidden;
    let start = ex.patch_start();
    let blank_row =
        &fwd.tape.data(fwd.hidden)[(start + blank_id) * h..(start + blank_id + 1) * h];
    // a non-blank level-5 patch at a different position
    let other_id = (30..55).find(|id| !plan.level5.iter().any(|&(p, _)| p == *id)).unwrap();
    let other_row =
        &fwd.tape.data(fwd.hidden)[(start + other_id) * h..(start + other_id + 1) * h];
    assert!(blank_row.iter().zip(other_row).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn equal_features_different_positions_differ() {
    let mut cfg = ModelConfig::micro();
    cfg.layers = 0;
    let params = ModelParams::init(cfg, 7).unwrap();
    let mut ex = example(4, false);
    // same pixels in two level-5 slots, different 5D positions
    let src = match &ex.patches[31].input {
        PatchInput::Pixels(px) => px.clone(),
        PatchInput::Blank => panic!(),
    };
    ex.patches[32].input = PatchInput::Pixels(src);
    let fwd = forward(&params, &ex, None).unwrap();
    let h = params.config.hidden;
    let start = ex.patch_start();
    let a = &fwd.tape.data(fwd.hidden)[(start + 31) * h..(start + 32) * h];
    let b = &fwd.tape.data(fwd.hidden)[(start + 32) * h..(start + 33) * h];
    assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn patch_order_enters_only_via_position_features() {
    let params = ModelParams::init(ModelConfig::micro(), 8).unwrap();
    let ex = example(5, false);
    let h = params.config.hidden;
    let cls = |e: &TrainingExample| -> Vec<f64> {
        let fwd = forward(&params, e, None).unwrap();
        fwd.tape.data(fwd.hidden)[..h].to_vec()
    };
    let base = cls(&ex);

    // swap two level-5 patches fully (content and 5D position)
    let mut swapped = ex.clone();
    swapped.patches.swap(40, 41);
    let full_swap = cls(&swapped);
    for (a, b) in base.iter().zip(&full_swap) {
        assert!((a - b).abs() < 1e-9, "consistent swap changed [CLS]: {a} vs {b}");
    }

    // swap only the contents: the pair (content, position) changes
    let mut content_only = ex.clone();
    let tmp = content_only.patches[40].input.clone();
    content_only.patches[40].input = content_only.patches[41].input.clone();
    content_only.patches[41].input = tmp;
    let partial = cls(&content_only);
    assert!(
        base.iter().zip(&partial).any(|(a, b)| (a - b).abs() > 1e-12),
        "content-only swap should change [CLS]"
    );
}

#[test]
fn forward_is_finite_over_many_seeds() {
    let ex = example(6, false);
    for seed in 0..100 {
        let params = ModelParams::init(ModelConfig::micro(), seed).unwrap();
        let fwd = forward(&params, &ex, None).unwrap();
        assert!(fwd.tape.data(fwd.hidden).iter().all(|v| v.is_finite()), "seed {seed}");
    }
}

#[test]
fn negative_pair_total_is_itm_only() {
    let params = ModelParams::init(ModelConfig::micro(), 9).unwrap();
    let ex = example(7, true);
    let akpm = prepare_akpm_targets(&params, &ex);
    let out = total_loss(&params, &ex, &TaskSet::full(), &akpm, None).unwrap();
    let b = out.breakdown;
    assert_eq!(b.amlm, 0.0);
    assert_eq!(b.rr, 0.0);
    assert_eq!(b.jps, 0.0);
    assert_eq!(b.cp, 0.0);
    assert_eq!(b.g2cm, 0.0);
    assert_eq!(b.b2cm, 0.0);
    assert!((b.total - b.itm).abs() < 1e-15);
}

#[test]
fn breakdown_sums_to_total_within_1e12() {
    let params = ModelParams::init(ModelConfig::micro(), 10).unwrap();
    for seed in 0..5 {
        let ex = example(20 + seed, false);
        let akpm = prepare_akpm_targets(&params, &ex);
        let out = total_loss(&params, &ex, &TaskSet::full(), &akpm, None).unwrap();
        let b = out.breakdown;
        let sum = b.amlm + b.itm + b.rr + b.jps + b.cp + b.g2cm + b.b2cm;
        assert!((sum - b.total).abs() < 1e-12, "seed {seed}: {sum} vs {}", b.total);
    }
}

#[test]
fn zeroed_params_give_analytic_uniform_losses() {
    // All-zero weights: every classifier is uniform, reconstruction
    // targets and predictions are both uniform, the ITM logit is 0.
    let params = zeroed_params(ModelConfig::micro());
    let ex = example(8, false);
    let akpm = prepare_akpm_targets(&params, &ex);
    let out = total_loss(&params, &ex, &TaskSet::full(), &akpm, None).unwrap();
    let b = out.breakdown;
    let v = params.config.vocab_size as f64;
    assert!((b.itm - 2.0f64.ln()).abs() < 1e-9, "itm {}", b.itm);
    assert!((b.amlm - v.ln()).abs() < 1e-9, "amlm {}", b.amlm);
    assert!((b.rr - 4.0f64.ln()).abs() < 1e-9, "rr {}", b.rr);
    assert!((b.jps - 24.0f64.ln()).abs() < 1e-9, "jps {}", b.jps);
    assert!((b.cp - 9.0f64.ln()).abs() < 1e-9, "cp {}", b.cp);
    assert!(b.g2cm.abs() < 1e-9, "g2cm {}", b.g2cm);
    assert!(b.b2cm.abs() < 1e-9, "b2cm {}", b.b2cm);
    let expect = 2.0f64.ln() + v.ln() + 4.0f64.ln() + 24.0f64.ln() + 9.0f64.ln();
    assert!((b.total - expect).abs() < 1e-9);
}

#[test]
fn saturated_heads_drive_losses_to_zero() {
    let mut params = zeroed_params(ModelConfig::micro());
    let mut ex = example(9, false);
    // single masked token so one boosted bias can saturate AMLM too
    ex.targets.amlm.truncate(1);
    let y_r = ex.targets.y_r.unwrap();
    params.rr_b.data_mut()[y_r] = 30.0;
    let y_j = ex.targets.y_j.unwrap();
    params.jps_b.data_mut()[y_j] = 30.0;
    let y_c = ex.targets.y_c.unwrap();
    params.cp_b.data_mut()[y_c] = 30.0;
    params.amlm_b.data_mut()[ex.targets.amlm[0].original as usize] = 30.0;
    params.itm_b.data_mut()[0] = 30.0; // y_m = 1
    let akpm = prepare_akpm_targets(&params, &ex);
    let out = total_loss(&params, &ex, &TaskSet::full(), &akpm, None).unwrap();
    let b = out.breakdown;
    assert!(b.rr < 1e-9 && b.jps < 1e-9 && b.cp < 1e-9 && b.itm < 1e-9);
    assert!(b.amlm < 1e-9, "amlm {}", b.amlm);
}

#[test]
fn amlm_matches_hand_composed_cross_entropy() {
    let params = ModelParams::init(ModelConfig::micro(), 11).unwrap();
    let ex = example(10, false);
    let akpm = prepare_akpm_targets(&params, &ex);
    let out = total_loss(&params, &ex, &TaskSet::base(), &akpm, None).unwrap();
    // recompute from the hidden states directly
    let fwd = forward(&params, &ex, None).unwrap();
    let h = params.config.hidden;
    let v = params.config.vocab_size;
    let hidden = fwd.tape.data(fwd.hidden);
    let mut manual = 0.0;
    for t in &ex.targets.amlm {
        let row = &hidden[(t.position + 1) * h..(t.position + 2) * h];
        let mut logits = vec![0.0; v];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = params.amlm_b.data()[j];
            for (k, &x) in row.iter().enumerate() {
                acc += x * params.amlm_w.data()[k * v + j];
            }
            *l = acc;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
        manual += lse - logits[t.original as usize];
    }
    manual /= ex.targets.amlm.len() as f64;
    assert!((out.breakdown.amlm - manual).abs() < 1e-9, "{} vs {manual}", out.breakdown.amlm);
}

#[test]
fn itm_score_properties() {
    let rec = data::generate_record(62, 0);
    let set = kpg::split_image(&rec.image, IMG_SIZE, IMG_SIZE).unwrap();
    let ex = agm::assemble_pair(&rec.tokens, &set, rec.product_id);

    let mut params = zeroed_params(ModelConfig::micro());
    let s0 = itm_score(&params, &ex).unwrap();
    assert!((s0 - 0.5).abs() < 1e-12);
    params.itm_b.data_mut()[0] = 2.0;
    let s1 = itm_score(&params, &ex).unwrap();
    params.itm_b.data_mut()[0] = 4.0;
    let s2 = itm_score(&params, &ex).unwrap();
    assert!(s0 < s1 && s1 < s2, "monotone in the logit: {s0} {s1} {s2}");
    assert!(s2 > 0.0 && s2 < 1.0);
    let again = itm_score(&params, &ex).unwrap();
    assert_eq!(s2, again);
}

#[test]
fn g2cm_targets_are_distributions() {
    let params = ModelParams::init(ModelConfig::micro(), 12).unwrap();
    let ex = example(11, false);
    let akpm = prepare_akpm_targets(&params, &ex);
    assert_eq!(akpm.g2cm.len(), 2);
    assert_eq!(akpm.b2cm.len(), 3);
    for (_, dist) in akpm.g2cm.iter().chain(&akpm.b2cm) {
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn spot_gradient_check_on_real_example() {
    // Random sample of parameter coordinates checked against central
    // differences; the acceptance suite runs the exhaustive version.
    // Conditioned initialization: at tiny weight scales attention-path
    // gradients sink below the f64 finite-difference noise floor.
    let params = ModelParams::init_with_std(ModelConfig::micro(), 13, 0.25).unwrap();
    let ex = example(12, false);
    let tasks = TaskSet::full();
    let akpm = prepare_akpm_targets(&params, &ex);
    let (_, grads) = loss_and_gradients(&params, &ex, &tasks, &akpm, None).unwrap();

    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut rng = Rng::new(99);
    let eps = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for _ in 0..80 {
        let ti = rng.choose_index(names.len());
        let numel = params.named_tensors()[ti].1.numel();
        let ei = rng.choose_index(numel);
        let eval = |delta: f64| -> f64 {
            let mut p = params.clone();
            p.named_tensors_mut()[ti].1.data_mut()[ei] += delta;
            let out = total_loss(&p, &ex, &tasks, &akpm, None).unwrap();
            out.breakdown.total
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let analytic = grads[ti][ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, format!("{}[{}]", names[ti], ei));
        }
    }
    assert!(worst.0 < 1e-4, "worst rel err {} at {}", worst.0, worst.1);
}

#[test]
fn checkpoint_roundtrip_and_validation() {
    let dir = std::env::temp_dir().join("kaleido_ckpt_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.kbck");
    let params = ModelParams::init(ModelConfig::micro(), 14).unwrap();
    save_checkpoint(&params, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(params, loaded);

    // magic corruption
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    let bad = dir.join("bad.kbck");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(load_checkpoint(&bad).is_err());

    // config/shape mismatch: rewrite hidden=8 to hidden=4 in the header
    let bytes = std::fs::read(&path).unwrap();
    let text_pos = bytes.windows(9).position(|w| w == b"hidden=8\n").unwrap();
    let mut edited = bytes.clone();
    edited[text_pos + 7] = b'4';
    let mismatched = dir.join("mismatch.kbck");
    std::fs::write(&mismatched, &edited).unwrap();
    match load_checkpoint(&mismatched) {
        Err(crate::KbError::Format { .. }) => {}
        other => panic!("expected shape mismatch error, got {other:?}"),
    }

    // truncation
    let bytes = std::fs::read(&path).unwrap();
    let trunc = dir.join("trunc.kbck");
    std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&trunc).is_err());
}

#[test]
fn dropout_changes_training_forward_only() {
    let mut cfg = ModelConfig::micro();
    cfg.dropout = 0.5;
    let params = ModelParams::init(cfg, 15).unwrap();
    let ex = example(13, false);
    let fwd_plain = forward(&params, &ex, None).unwrap();
    let mut rng = Rng::new(1);
    let fwd_drop = forward(&params, &ex, Some(&mut rng)).unwrap();
    let a = fwd_plain.tape.data(fwd_plain.hidden);
    let b = fwd_drop.tape.data(fwd_drop.hidden);
    assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    // same rng seed reproduces the same masked forward
    let mut rng2 = Rng::new(1);
    let fwd_drop2 = forward(&params, &ex, Some(&mut rng2)).unwrap();
    assert_eq!(b, fwd_drop2.tape.data(fwd_drop2.hidden));
}
