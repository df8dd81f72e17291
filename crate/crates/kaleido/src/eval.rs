//! Downstream evaluation: image-text retrieval in both directions with
//! Rank@K over same-subcategory negatives, held-out match accuracy,
//! category/subcategory recognition with accuracy and macro-F, and the
//! flat key=value evaluation report.

use std::collections::BTreeSet;
use std::path::Path;

use crate::agm::assemble_pair;
use crate::error::{KbError, Result};
use crate::model::{itm_score, ModelParams};
use crate::rng::{mix3, Rng};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::train::{adam_update, AdamState, PreparedCorpus};

/// Retrieval direction: query by image for captions, or by caption for
/// images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Itr,
    Tir,
}

impl std::str::FromStr for Direction {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itr" => Ok(Direction::Itr),
            "tir" => Ok(Direction::Tir),
            other => Err(KbError::Usage(format!("unknown direction '{other}' (itr|tir)"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Itr => "itr",
            Direction::Tir => "tir",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub queries: usize,
    /// One line per query whose negative pool had to widen.
    pub widening_log: Vec<String>,
}

/// Negative candidate pool for one query: same subcategory from the whole
/// corpus, widening to category and then to everything when too small.
/// The query's own product is always excluded.
fn negative_pool(
    corpus: &PreparedCorpus,
    query: usize,
    negatives: usize,
    log: &mut Vec<String>,
) -> Vec<usize> {
    let q = &corpus.records[query];
    let same_sub: Vec<usize> = (0..corpus.records.len())
        .filter(|&i| {
            corpus.records[i].product_id != q.product_id
                && corpus.records[i].subcategory == q.subcategory
        })
        .collect();
    if same_sub.len() >= negatives {
        return same_sub;
    }
    let same_cat: Vec<usize> = (0..corpus.records.len())
        .filter(|&i| {
            corpus.records[i].product_id != q.product_id
                && corpus.records[i].category == q.category
        })
        .collect();
    if same_cat.len() >= negatives {
        log.push(format!(
            "query product {}: subcategory pool {} < {negatives}, widened to category",
            q.product_id,
            same_sub.len()
        ));
        return same_cat;
    }
    log.push(format!(
        "query product {}: category pool {} < {negatives}, widened to full corpus",
        q.product_id,
        same_cat.len()
    ));
    (0..corpus.records.len())
        .filter(|&i| corpus.records[i].product_id != q.product_id)
        .collect()
}

/// Rank@1/5/10 with a pluggable pair scorer. Queries are the corpus test
/// split; candidates are the true pair plus `negatives` sampled products.
/// Ties rank pessimistically (a tie counts as ranking below).
pub fn retrieval_eval_with<S>(
    corpus: &PreparedCorpus,
    negatives: usize,
    seed: u64,
    score: S,
) -> Result<RetrievalMetrics>
where
    S: Fn(usize, usize) -> Result<f64> + Sync,
{
    let queries = &corpus.test_indices;
    if queries.is_empty() {
        return Err(KbError::Contract("corpus has no test records".into()));
    }
    let mut pools = Vec::with_capacity(queries.len());
    let mut widening_log = Vec::new();
    for &query in queries {
        pools.push(negative_pool(corpus, query, negatives, &mut widening_log));
    }

    let ranks: Vec<Result<usize>> = crate::exec::map_indexed(queries.len(), |qi| {
        let query = queries[qi];
        let pool = &pools[qi];
        let mut rng = Rng::new(mix3(seed, query as u64, 0x47));
        let mut chosen: Vec<usize> = Vec::with_capacity(negatives);
        if pool.len() <= negatives {
            chosen.extend_from_slice(pool);
        } else {
            let mut indices: Vec<usize> = pool.clone();
            rng.shuffle(&mut indices);
            chosen.extend_from_slice(&indices[..negatives]);
        }
        let true_score = score(query, query)?;
        let mut worse_or_equal = 0usize;
        for &cand in &chosen {
            if score(query, cand)? >= true_score {
                worse_or_equal += 1;
            }
        }
        Ok(1 + worse_or_equal)
    });

    let mut rank_counts = [0usize; 3];
    let mut total = 0usize;
    for r in ranks {
        let rank = r?;
        total += 1;
        if rank <= 1 {
            rank_counts[0] += 1;
        }
        if rank <= 5 {
            rank_counts[1] += 1;
        }
        if rank <= 10 {
            rank_counts[2] += 1;
        }
    }
    let frac = |c: usize| c as f64 / total as f64;
    Ok(RetrievalMetrics {
        rank1: frac(rank_counts[0]),
        rank5: frac(rank_counts[1]),
        rank10: frac(rank_counts[2]),
        queries: total,
        widening_log,
    })
}

/// Retrieval with the trained match head as the scorer.
pub fn retrieval_eval(
    params: &ModelParams,
    corpus: &PreparedCorpus,
    direction: Direction,
    negatives: usize,
    seed: u64,
) -> Result<RetrievalMetrics> {
    retrieval_eval_with(corpus, negatives, seed, |query, candidate| {
        let (image_idx, caption_idx) = match direction {
            Direction::Itr => (query, candidate),
            Direction::Tir => (candidate, query),
        };
        let patch_set = corpus.split_record(image_idx);
        let caption = &corpus.records[caption_idx].tokens;
        let ex = assemble_pair(caption, &patch_set, corpus.records[caption_idx].product_id);
        itm_score(params, &ex)
    })
}

/// Held-out match accuracy: every test record scored as its true pair and
/// as one swapped pair, thresholded at 0.5.
pub fn itm_accuracy(params: &ModelParams, corpus: &PreparedCorpus, seed: u64) -> Result<f64> {
    let queries = &corpus.test_indices;
    if queries.len() < 2 {
        return Err(KbError::Contract("need at least two test records".into()));
    }
    let verdicts: Vec<Result<(bool, bool)>> = crate::exec::map_indexed(queries.len(), |qi| {
        let idx = queries[qi];
        let rec = &corpus.records[idx];
        let patch_set = corpus.split_record(idx);
        let pos = assemble_pair(&rec.tokens, &patch_set, rec.product_id);
        let pos_score = itm_score(params, &pos)?;
        let mut rng = Rng::new(mix3(seed, idx as u64, 0x177));
        let donor = loop {
            let other = queries[rng.choose_index(queries.len())];
            if corpus.records[other].product_id != rec.product_id {
                break other;
            }
        };
        let neg = assemble_pair(&corpus.records[donor].tokens, &patch_set, rec.product_id);
        let neg_score = itm_score(params, &neg)?;
        Ok((pos_score > 0.5, neg_score <= 0.5))
    });
    let mut correct = 0usize;
    let mut total = 0usize;
    for v in verdicts {
        let (pos_ok, neg_ok) = v?;
        correct += pos_ok as usize + neg_ok as usize;
        total += 2;
    }
    Ok(correct as f64 / total as f64)
}

// ── Classification ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Category,
    Subcategory,
}

impl std::str::FromStr for ClsTarget {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(ClsTarget::Category),
            "subcategory" => Ok(ClsTarget::Subcategory),
            other => Err(KbError::Usage(format!(
                "unknown target '{other}' (category|subcategory)"
            ))),
        }
    }
}

impl ClsTarget {
    pub fn num_classes(&self) -> usize {
        match self {
            ClsTarget::Category => crate::data::CATEGORIES.len(),
            ClsTarget::Subcategory => crate::data::CATEGORIES.len() * 3,
        }
    }

    pub fn label(&self, rec: &crate::data::CorpusRecord) -> usize {
        match self {
            ClsTarget::Category => rec.category as usize,
            ClsTarget::Subcategory => rec.subcategory as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClsHead {
    pub fn init(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = Rng::new(crate::rng::mix(seed, 0xC1A55));
        ClsHead { w: Tensor::randn(vec![hidden, classes], 0.02, &mut rng), b: Tensor::zeros(vec![classes]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

/// Builds the classification logits for one record on a fresh tape.
fn cls_forward(
    params: &ModelParams,
    head: &ClsHead,
    corpus: &PreparedCorpus,
    index: usize,
) -> Result<(Tape, Vec<NodeId>, NodeId, NodeId, NodeId)> {
    let rec = &corpus.records[index];
    let patch_set = corpus.split_record(index);
    let ex = assemble_pair(&rec.tokens, &patch_set, rec.product_id);
    let fwd = crate::model::forward(params, &ex, None)?;
    let mut tape = fwd.tape;
    let head_w = tape.leaf_tensor(&head.w);
    let head_b = tape.leaf_tensor(&head.b);
    let cls = tape.gather_rows(fwd.hidden, &[0])?;
    let logits_x = tape.matmul(cls, head_w)?;
    let logits = tape.add_row(logits_x, head_b)?;
    Ok((tape, fwd.param_ids, head_w, head_b, logits))
}

/// Finetunes a fresh FC head on the [CLS] hidden; encoder weights update
/// end-to-end unless frozen. Deterministic given the seed.
pub fn category_finetune(
    pretrained: &ModelParams,
    corpus: &PreparedCorpus,
    target: ClsTarget,
    cfg: &FinetuneConfig,
) -> Result<(ModelParams, ClsHead)> {
    if corpus.train_indices.is_empty() {
        return Err(KbError::Contract("corpus has no training records".into()));
    }
    let mut params = pretrained.clone();
    let mut head = ClsHead::init(params.config.hidden, target.num_classes(), cfg.seed);
    let mut adam = AdamState::for_params(&params);
    let mut head_adam = AdamState::new(&[head.w.numel(), head.b.numel()]);

    for step in 1..=cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|slot| {
                let mut rng = Rng::new(mix3(cfg.seed ^ 0xF17E, step as u64, slot as u64));
                corpus.train_indices[rng.choose_index(corpus.train_indices.len())]
            })
            .collect();
        let params_ref = &params;
        let head_ref = &head;
        let results: Vec<Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)>> =
            crate::exec::map_indexed(batch.len(), |slot| {
                let index = batch[slot];
                let (mut tape, param_ids, head_w, head_b, logits) =
                    cls_forward(params_ref, head_ref, corpus, index)?;
                let label = target.label(&corpus.records[index]);
                let loss = tape.cross_entropy_rows(logits, &[label])?;
                tape.backward(loss)?;
                let model_grads: Vec<Vec<f64>> =
                    param_ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
                Ok((model_grads, tape.grad(head_w).to_vec(), tape.grad(head_b).to_vec()))
            });

        let mut model_sum: Option<Vec<Vec<f64>>> = None;
        let mut head_w_sum = vec![0.0; head.w.numel()];
        let mut head_b_sum = vec![0.0; head.b.numel()];
        for res in results {
            let (mg, hw, hb) = res?;
            match &mut model_sum {
                None => model_sum = Some(mg),
                Some(sum) => {
                    for (dst, src) in sum.iter_mut().zip(&mg) {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            for (d, s) in head_w_sum.iter_mut().zip(&hw) {
                *d += s;
            }
            for (d, s) in head_b_sum.iter_mut().zip(&hb) {
                *d += s;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut model_grads = model_sum.unwrap();
        for g in &mut model_grads {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        head_w_sum.iter_mut().for_each(|v| *v *= inv);
        head_b_sum.iter_mut().for_each(|v| *v *= inv);

        if !cfg.freeze_encoder {
            crate::train::adam_step(&mut params, &model_grads, &mut adam, cfg.learning_rate, 0.0);
        }
        head_adam.t += 1;
        let t = head_adam.t;
        adam_update(
            head.w.data_mut(),
            &head_w_sum,
            &mut head_adam.m[0],
            &mut head_adam.v[0],
            t,
            cfg.learning_rate,
            0.0,
        );
        adam_update(
            head.b.data_mut(),
            &head_b_sum,
            &mut head_adam.m[1],
            &mut head_adam.v[1],
            t,
            cfg.learning_rate,
            0.0,
        );
    }
    Ok((params, head))
}

/// Predicted class of one record.
pub fn classify(
    params: &ModelParams,
    head: &ClsHead,
    corpus: &PreparedCorpus,
    index: usize,
) -> Result<usize> {
    let (tape, _, _, _, logits) = cls_forward(params, head, corpus, index)?;
    let row = tape.data(logits);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Accuracy and confusion matrix over the test split.
pub fn cls_eval(
    params: &ModelParams,
    head: &ClsHead,
    corpus: &PreparedCorpus,
    target: ClsTarget,
) -> Result<(f64, Vec<Vec<u64>>)> {
    let n = target.num_classes();
    let preds: Vec<Result<(usize, usize)>> =
        crate::exec::map_indexed(corpus.test_indices.len(), |qi| {
            let index = corpus.test_indices[qi];
            let truth = target.label(&corpus.records[index]);
            let pred = classify(params, head, corpus, index)?;
            Ok((truth, pred))
        });
    let mut confusion = vec![vec![0u64; n]; n];
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in preds {
        let (truth, pred) = p?;
        confusion[truth][pred] += 1;
        correct += (truth == pred) as usize;
        total += 1;
    }
    Ok((correct as f64 / total.max(1) as f64, confusion))
}

/// Unweighted mean of per-class F1 over classes that have instances or
/// predictions; rows are truth, columns are predictions.
pub fn macro_f(confusion: &[Vec<u64>]) -> Result<f64> {
    let n = confusion.len();
    for row in confusion {
        if row.len() != n {
            return Err(KbError::Shape("confusion matrix must be square".into()));
        }
    }
    let mut f1_sum = 0.0;
    let mut classes = 0usize;
    for c in 0..n {
        let instances: u64 = confusion[c].iter().sum();
        let predictions: u64 = confusion.iter().map(|row| row[c]).sum();
        if instances == 0 && predictions == 0 {
            continue;
        }
        classes += 1;
        let tp = confusion[c][c] as f64;
        let precision = if predictions > 0 { tp / predictions as f64 } else { 0.0 };
        let recall = if instances > 0 { tp / instances as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    if classes == 0 {
        return Err(KbError::Contract("empty confusion matrix".into()));
    }
    Ok(f1_sum / classes as f64)
}

// ── Report ──────────────────────────────────────────────────────────────

/// Flat key=value evaluation report; only present metrics are written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub itr: Option<RetrievalMetrics>,
    pub tir: Option<RetrievalMetrics>,
    pub cr_acc: Option<f64>,
    pub cr_macro_f: Option<f64>,
    pub sub_acc: Option<f64>,
    pub sub_macro_f: Option<f64>,
    pub loss_csv: Option<String>,
}

impl EvalReport {
    /// (Rank@1+Rank@5+Rank@10 of ITR plus the same of TIR) * 100.
    pub fn sum_r(&self) -> Option<f64> {
        match (&self.itr, &self.tir) {
            (Some(i), Some(t)) => Some(
                (i.rank1 + i.rank5 + i.rank10 + t.rank1 + t.rank5 + t.rank10) * 100.0,
            ),
            _ => None,
        }
    }

    /// (ACC + macro-F summed over CR and SUB) * 100.
    pub fn sum_cls(&self) -> Option<f64> {
        match (self.cr_acc, self.cr_macro_f, self.sub_acc, self.sub_macro_f) {
            (Some(a), Some(b), Some(c), Some(d)) => Some((a + b + c + d) * 100.0),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: f64| out.push_str(&format!("{k}={v}\n"));
        if let Some(i) = &self.itr {
            kv("itr_rank1", i.rank1);
            kv("itr_rank5", i.rank5);
            kv("itr_rank10", i.rank10);
            kv("itr_queries", i.queries as f64);
        }
        if let Some(t) = &self.tir {
            kv("tir_rank1", t.rank1);
            kv("tir_rank5", t.rank5);
            kv("tir_rank10", t.rank10);
            kv("tir_queries", t.queries as f64);
        }
        if let Some(s) = self.sum_r() {
            kv("sum_r", s);
        }
        if let Some(v) = self.cr_acc {
            kv("cr_acc", v);
        }
        if let Some(v) = self.cr_macro_f {
            kv("cr_macro_f", v);
        }
        if let Some(v) = self.sub_acc {
            kv("sub_acc", v);
        }
        if let Some(v) = self.sub_macro_f {
            kv("sub_macro_f", v);
        }
        if let Some(s) = self.sum_cls() {
            kv("sum_cls", s);
        }
        if let Some(p) = &self.loss_csv {
            out.push_str(&format!("loss_csv={p}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::train::write_text(path, &self.to_text())
    }
}

/// Negative pools may repeat across directions; expose the distinct
/// subcategories present for diagnostics.
pub fn subcategory_pool_sizes(corpus: &PreparedCorpus) -> Vec<(u16, usize)> {
    let subs: BTreeSet<u16> = corpus.records.iter().map(|r| r.subcategory).collect();
    subs.into_iter()
        .map(|s| (s, corpus.records.iter().filter(|r| r.subcategory == s).count()))
        .collect()
}

#[cfg(test)]
mod tests;
