use super::*;
use crate::aag::DEFAULT_TAU;
use crate::model::{ModelConfig, ModelParams};

fn corpus(seed: u64, count: usize) -> PreparedCorpus {
    PreparedCorpus::prepare(crate::data::generate_corpus(seed, count), DEFAULT_TAU).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig { layers: 1, hidden: 16, heads: 2, d_img: 16, ..ModelConfig::micro() }
}

#[test]
fn macro_f_perfect_diagonal_is_one() {
    let confusion = vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]];
    assert_eq!(macro_f(&confusion).unwrap(), 1.0);
}

#[test]
fn macro_f_hand_computed_case() {
    let confusion = vec![vec![1, 1], vec![1, 1]];
    assert!((macro_f(&confusion).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn macro_f_invariant_under_class_permutation() {
    let a = vec![vec![4, 1, 0], vec![2, 6, 1], vec![0, 2, 9]];
    // permute classes (0,1,2) -> (2,0,1)
    let p = [2usize, 0, 1];
    let mut b = vec![vec![0u64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[p[i]][p[j]] = a[i][j];
        }
    }
    assert!((macro_f(&a).unwrap() - macro_f(&b).unwrap()).abs() < 1e-12);
}

#[test]
fn macro_f_excludes_absent_classes() {
    // class 2 never occurs and is never predicted
    let confusion = vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 0]];
    assert_eq!(macro_f(&confusion).unwrap(), 1.0);
    assert!(macro_f(&[vec![1, 2], vec![3]]).is_err());
}

#[test]
fn oracle_scorer_achieves_rank1() {
    let c = corpus(100, 120);
    let m = retrieval_eval_with(&c, 20, 7, |q, cand| Ok(if q == cand { 1.0 } else { 0.0 }))
        .unwrap();
    assert_eq!(m.rank1, 1.0);
    assert_eq!(m.rank5, 1.0);
    assert_eq!(m.rank10, 1.0);
}

#[test]
fn constant_scorer_ranks_worst_case() {
    // pessimistic ties: a constant scorer must rank the true pair last
    let c = corpus(101, 120);
    let m = retrieval_eval_with(&c, 20, 7, |_, _| Ok(0.5)).unwrap();
    assert_eq!(m.rank1, 0.0);
    assert_eq!(m.rank10, 0.0);
}

#[test]
fn rank_k_is_monotone() {
    let c = corpus(102, 150);
    let m = retrieval_eval_with(&c, 30, 3, |q, cand| {
        let mut rng = Rng::new(crate::rng::mix3(5, q as u64, cand as u64));
        Ok(rng.next_f64())
    })
    .unwrap();
    assert!(m.rank1 <= m.rank5 && m.rank5 <= m.rank10);
}

#[test]
fn random_scorer_sits_near_chance() {
    // with N negatives, a random scorer puts the true pair first with
    // probability 1/(N+1)
    let c = corpus(103, 400);
    let negatives = 20;
    let m = retrieval_eval_with(&c, negatives, 11, |q, cand| {
        let mut rng = Rng::new(crate::rng::mix3(17, q as u64, cand as u64));
        Ok(rng.next_f64())
    })
    .unwrap();
    let p = 1.0 / (negatives as f64 + 1.0);
    let sigma = (p * (1.0 - p) / m.queries as f64).sqrt();
    assert!(
        (m.rank1 - p).abs() < 3.0 * sigma + 1e-9,
        "rank1 {} vs chance {p} (3 sigma {})",
        m.rank1,
        3.0 * sigma
    );
}

#[test]
fn negatives_never_include_the_query_product() {
    let c = corpus(104, 120);
    let query_set: std::collections::BTreeSet<usize> = c.test_indices.iter().copied().collect();
    let seen = std::sync::Mutex::new(Vec::new());
    retrieval_eval_with(&c, 25, 9, |q, cand| {
        if q != cand {
            seen.lock().unwrap().push((q, cand));
        }
        Ok(0.1)
    })
    .unwrap();
    for (q, cand) in seen.lock().unwrap().iter() {
        assert!(query_set.contains(q));
        assert_ne!(c.records[*q].product_id, c.records[*cand].product_id);
    }
}

#[test]
fn small_pools_widen_and_log() {
    // 60 products across 24 subcategories: every subcategory pool is far
    // below 50 negatives, so widening must kick in and be logged
    let c = corpus(105, 60);
    let m = retrieval_eval_with(&c, 50, 1, |q, cand| Ok(if q == cand { 1.0 } else { 0.0 }))
        .unwrap();
    assert!(!m.widening_log.is_empty());
    assert!(m.widening_log.iter().all(|l| l.contains("widened")));
}

#[test]
fn retrieval_is_deterministic() {
    let c = corpus(106, 100);
    let params = ModelParams::init(tiny_model(), 3).unwrap();
    let a = retrieval_eval(&params, &c, Direction::Itr, 10, 5).unwrap();
    let b = retrieval_eval(&params, &c, Direction::Itr, 10, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn itm_accuracy_near_half_for_constant_scores() {
    // a fresh model is uninformative; accuracy should be near 0.5 because
    // every pair lands on the same side of the threshold
    let c = corpus(107, 80);
    let params = ModelParams::init(tiny_model(), 1).unwrap();
    let acc = itm_accuracy(&params, &c, 3).unwrap();
    assert!((0.3..=0.7).contains(&acc), "untrained accuracy {acc}");
}

#[test]
fn degenerate_single_class_corpus_reaches_full_accuracy() {
    // keep only records of one category; the head bias alone solves it
    let full = crate::data::generate_corpus(108, 400);
    let filtered: Vec<crate::data::CorpusRecord> =
        full.into_iter().filter(|r| r.category == 2).collect();
    assert!(filtered.len() > 20);
    let c = PreparedCorpus::prepare(filtered, DEFAULT_TAU).unwrap();
    let params = ModelParams::init(tiny_model(), 5).unwrap();
    let cfg = FinetuneConfig { steps: 25, batch_size: 4, ..FinetuneConfig::desk() };
    let (tuned, head) = category_finetune(&params, &c, ClsTarget::Category, &cfg).unwrap();
    let (acc, confusion) = cls_eval(&tuned, &head, &c, ClsTarget::Category).unwrap();
    assert_eq!(acc, 1.0, "confusion {confusion:?}");
}

#[test]
fn frozen_encoder_flag_keeps_model_weights() {
    let c = corpus(109, 60);
    let params = ModelParams::init(tiny_model(), 6).unwrap();
    let cfg = FinetuneConfig { steps: 4, batch_size: 2, freeze_encoder: true, ..FinetuneConfig::desk() };
    let (tuned, head) = category_finetune(&params, &c, ClsTarget::Category, &cfg).unwrap();
    assert_eq!(tuned, params, "frozen encoder must not change");
    let fresh = ClsHead::init(params.config.hidden, 8, cfg.seed);
    assert_ne!(head, fresh, "head must have trained");
}

#[test]
fn finetune_overfits_a_fixed_batch() {
    // train and measure on the same six records: the loss must drop
    let pool = crate::data::generate_corpus(110, 60);
    let fixed: Vec<crate::data::CorpusRecord> = pool
        .into_iter()
        .filter(|r| !crate::data::is_test_product(r.product_id))
        .take(6)
        .collect();
    let c = PreparedCorpus::prepare(fixed, DEFAULT_TAU).unwrap();
    assert_eq!(c.train_indices.len(), 6);
    let params = ModelParams::init(tiny_model(), 7).unwrap();
    let head0 = ClsHead::init(params.config.hidden, 8, 4);
    let mean_ce = |p: &ModelParams, h: &ClsHead| -> f64 {
        let mut total = 0.0;
        for &i in &c.train_indices {
            let (mut tape, _, _, _, logits) = super::cls_forward(p, h, &c, i).unwrap();
            let label = ClsTarget::Category.label(&c.records[i]);
            let loss = tape.cross_entropy_rows(logits, &[label]).unwrap();
            total += tape.scalar_value(loss);
        }
        total / c.train_indices.len() as f64
    };
    let before = mean_ce(&params, &head0);
    let cfg = FinetuneConfig {
        steps: 80,
        batch_size: 6,
        learning_rate: 3e-3,
        seed: 4,
        freeze_encoder: false,
    };
    let (tuned, head) = category_finetune(&params, &c, ClsTarget::Category, &cfg).unwrap();
    let after = mean_ce(&tuned, &head);
    assert!(after < before, "finetune loss {before} -> {after}");
    assert!(after < 1.0, "fixed batch should be largely memorized, got {after}");
}

#[test]
fn finetune_is_deterministic() {
    let c = corpus(111, 50);
    let params = ModelParams::init(tiny_model(), 8).unwrap();
    let cfg = FinetuneConfig { steps: 5, batch_size: 3, seed: 11, ..FinetuneConfig::desk() };
    let (a_params, a_head) = category_finetune(&params, &c, ClsTarget::Subcategory, &cfg).unwrap();
    let (b_params, b_head) = category_finetune(&params, &c, ClsTarget::Subcategory, &cfg).unwrap();
    assert_eq!(a_params, b_params);
    assert_eq!(a_head, b_head);
}

#[test]
fn report_identities_and_format() {
    let metrics = |r1: f64, r5: f64, r10: f64| RetrievalMetrics {
        rank1: r1,
        rank5: r5,
        rank10: r10,
        queries: 100,
        widening_log: vec![],
    };
    let report = EvalReport {
        itr: Some(metrics(0.3, 0.5, 0.6)),
        tir: Some(metrics(0.25, 0.45, 0.55)),
        cr_acc: Some(0.9),
        cr_macro_f: Some(0.85),
        sub_acc: Some(0.8),
        sub_macro_f: Some(0.75),
        loss_csv: Some("runs/loss.csv".into()),
    };
    let sum_r = report.sum_r().unwrap();
    assert!((sum_r - (0.3 + 0.5 + 0.6 + 0.25 + 0.45 + 0.55) * 100.0).abs() < 1e-9);
    let sum_cls = report.sum_cls().unwrap();
    assert!((sum_cls - (0.9 + 0.85 + 0.8 + 0.75) * 100.0).abs() < 1e-9);
    let text = report.to_text();
    assert!(text.contains("itr_rank1=0.3\n"));
    assert!(text.contains("sum_r="));
    assert!(text.contains("loss_csv=runs/loss.csv\n"));
    // partial reports omit composed metrics
    let partial = EvalReport { itr: Some(metrics(0.1, 0.2, 0.3)), ..EvalReport::default() };
    assert!(partial.sum_r().is_none());
    assert!(!partial.to_text().contains("sum_r"));
}
