//! Pre-training: Adam with linear warmup, the batch loop with
//! deterministic fixed-order gradient reduction, loss-curve CSV logging,
//! and the end-to-end gradient checker.

use std::io::Write;
use std::path::Path;

use crate::aag::{ground_truth_alignments, AlignmentSet, DEFAULT_TAU};
use crate::agm::{assemble_example, DonorSource, MaskingStrategy, TaskSet};
use crate::data::CorpusRecord;
use crate::error::{KbError, Result};
use crate::kpg::{foreground_mask, kaleido_split, object_bbox, patch_id, BBox, KaleidoPatchSet};
use crate::model::{
    loss_and_gradients, prepare_akpm_targets, save_checkpoint, LossBreakdown, ModelConfig,
    ModelParams,
};
use crate::rng::{mix, mix3, Rng};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Loss-curve CSV header; the column order is part of the format.
pub const CSV_HEADER: &str = "step,L_RR,L_JPS,L_CP,L_G2CM,L_B2CM,L_AMLM,L_ITM,total";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub strategy: MaskingStrategy,
    pub tasks: TaskSet,
    pub log_interval: usize,
    /// Fraction of examples built as negative (caption-swapped) pairs.
    pub negative_rate: f64,
    /// Alignment threshold parameter passed to the alignment generator.
    pub tau: f64,
}

impl TrainConfig {
    /// Desk-scale defaults. The paper-scale preset keeps the published
    /// optimizer settings for reference; it is not sized for this crate's
    /// toy models.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            seed: 0,
            strategy: MaskingStrategy::Agm,
            tasks: TaskSet::full(),
            log_interval: 10,
            negative_rate: 0.5,
            tau: DEFAULT_TAU,
        }
    }

    /// The published large-model settings: lr 2e-5, weight decay 1e-4,
    /// 5000 warmup steps.
    pub fn paper_scale() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            warmup_steps: 5000,
            steps: 100_000,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(KbError::Contract(format!(
                "warmup {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(KbError::Contract("batch size and log interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_rate) {
            return Err(KbError::Contract("negative rate must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to the configured rate over the warmup steps,
/// constant afterwards.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    let ramp = (step as f64 / cfg.warmup_steps as f64).min(1.0);
    cfg.learning_rate * ramp
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Self::new(&sizes)
    }
}

/// One Adam update on a single flat parameter buffer (decoupled decay).
/// `t` is the 1-based step for bias correction.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * param[i]);
    }
}

/// Applies one optimizer step across every model tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let t = state.t;
    for (i, (_, tensor)) in params.named_tensors_mut().into_iter().enumerate() {
        adam_update(
            tensor.data_mut(),
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            t,
            lr,
            weight_decay,
        );
    }
}

// ── Corpus preparation ──────────────────────────────────────────────────

/// Records with their cached object boxes, pre-alignments, and split.
pub struct PreparedCorpus {
    pub records: Vec<CorpusRecord>,
    pub bboxes: Vec<BBox>,
    pub alignments: Vec<AlignmentSet>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl PreparedCorpus {
    /// Runs foreground/bbox/alignment extraction once per record
    /// (parallel) and splits train/test by product-id hash.
    pub fn prepare(records: Vec<CorpusRecord>, tau: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(KbError::Contract("empty corpus".into()));
        }
        let derived: Vec<Result<(BBox, AlignmentSet)>> =
            crate::exec::map_indexed(records.len(), |i| {
                let rec = &records[i];
                let mask = foreground_mask(&rec.image, rec.height as usize, rec.width as usize)?;
                let bbox = object_bbox(&mask, rec.height as usize, rec.width as usize)?;
                let aligns = ground_truth_alignments(rec, &bbox, tau)?;
                Ok((bbox, aligns))
            });
        let mut bboxes = Vec::with_capacity(records.len());
        let mut alignments = Vec::with_capacity(records.len());
        for (i, d) in derived.into_iter().enumerate() {
            let (bbox, aligns) = d.map_err(|e| match e {
                KbError::EmptyForeground => KbError::format_at(i, "record has no foreground"),
                other => other,
            })?;
            bboxes.push(bbox);
            alignments.push(aligns);
        }
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            if crate::data::is_test_product(rec.product_id) {
                test_indices.push(i);
            } else {
                train_indices.push(i);
            }
        }
        Ok(PreparedCorpus { records, bboxes, alignments, train_indices, test_indices })
    }

    pub fn split_record(&self, index: usize) -> KaleidoPatchSet {
        let rec = &self.records[index];
        kaleido_split(&rec.image, rec.height as usize, rec.width as usize, self.bboxes[index])
    }
}

/// The training example one batch slot sees at a given step: record,
/// negative/positive draw, donors, and transforms, all from the slot's
/// own deterministic stream.
pub fn slot_example(
    corpus: &PreparedCorpus,
    cfg: &TrainConfig,
    step: usize,
    slot: usize,
) -> Result<crate::agm::TrainingExample> {
    let mut rng = Rng::new(mix3(cfg.seed, step as u64, slot as u64));
    let pool = &corpus.train_indices;
    if pool.is_empty() {
        return Err(KbError::Contract("corpus has no training records".into()));
    }
    let rec_idx = pool[rng.choose_index(pool.len())];
    let record = &corpus.records[rec_idx];
    let negative = rng.next_f64() < cfg.negative_rate;
    // a slice of clean pairs matches the evaluation input distribution,
    // where captions carry no [MSK] and patches are untransformed
    let clean_pair = rng.next_f64() < 0.15;

    let pick_other = |rng: &mut Rng| -> usize {
        loop {
            let i = pool[rng.choose_index(pool.len())];
            if corpus.records[i].product_id != record.product_id {
                return i;
            }
        }
    };
    // Negative captions are dominated by hard sources: a caption of the
    // same product with exactly one semantic field flipped, or a real
    // same-subcategory product; a small remainder is drawn from anywhere.
    // Retrieval negatives share the query's subcategory, so the match
    // task must contrast fine-grained attributes, not garment type.
    enum NegativeCaption {
        /// (tokens, position of the flipped word)
        Flipped(Vec<u16>, Option<usize>),
        Record(usize),
    }
    let pick_negative_caption = |rng: &mut Rng| -> NegativeCaption {
        let roll = rng.next_f64();
        if roll < 0.20 {
            if let Some(sem) = crate::data::record_semantics(record) {
                let mut flipped = sem.clone();
                let bump = |v: usize, n: u64, rng: &mut Rng| -> usize {
                    (v + 1 + rng.gen_range(n - 1) as usize) % n as usize
                };
                match rng.gen_range(4) {
                    0 => flipped.color = bump(flipped.color, 8, rng),
                    1 => flipped.texture = bump(flipped.texture, 4, rng),
                    2 => flipped.decoration = bump(flipped.decoration, 4, rng),
                    _ => {
                        let base = (flipped.subcategory / 3) * 3;
                        flipped.subcategory =
                            base + bump((flipped.subcategory % 3) as usize, 3, rng) as u16;
                    }
                }
                let tokens = crate::data::synthesize_caption(&flipped, rng.next_u64());
                let flipped_pos = crate::data::flipped_position(&sem, &flipped, &tokens);
                return NegativeCaption::Flipped(tokens, flipped_pos);
            }
        }
        if roll < 0.40 {
            let same_sub: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| {
                    corpus.records[i].subcategory == record.subcategory
                        && corpus.records[i].product_id != record.product_id
                })
                .collect();
            if !same_sub.is_empty() {
                return NegativeCaption::Record(same_sub[rng.choose_index(same_sub.len())]);
            }
            let same_cat: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| {
                    corpus.records[i].category == record.category
                        && corpus.records[i].product_id != record.product_id
                })
                .collect();
            if !same_cat.is_empty() {
                return NegativeCaption::Record(same_cat[rng.choose_index(same_cat.len())]);
            }
        }
        NegativeCaption::Record(pick_other(rng))
    };

    // Train on a fresh view of the product: same semantics, new geometry
    // and caption fillers, plus a small per-channel color gain. One fixed
    // rendering per product would let the match head memorize pairings
    // instead of comparing content; fresh views leave semantic matching
    // as the only trainable solution. The corpus rendering itself stays
    // untouched for evaluation.
    let view_seed = rng.next_u64();
    let view = crate::data::synthesize_view(record, view_seed)
        .unwrap_or_else(|| record.clone());
    let mut image = view.image.clone();
    let gains = [
        1.0 + (rng.next_f64() - 0.5) * 0.16,
        1.0 + (rng.next_f64() - 0.5) * 0.16,
        1.0 + (rng.next_f64() - 0.5) * 0.16,
    ];
    for px in image.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] as f64 * gains[c]).clamp(0.0, 1.0) as f32;
        }
    }
    let height = view.height as usize;
    let width = view.width as usize;
    let mask = foreground_mask(&image, height, width)?;
    let bbox = object_bbox(&mask, height, width)?;
    let patch_set = kaleido_split(&image, height, width, bbox);
    let alignments = ground_truth_alignments(&view, &bbox, cfg.tau)?;
    let negative_caption = if negative { Some(pick_negative_caption(&mut rng)) } else { None };
    let camo_idx = pick_other(&mut rng);
    let donor_patch_local = rng.choose_index(9);
    let camo_set = corpus.split_record(camo_idx);
    let (caption, caption_product, protected_token): (&[u16], u64, Option<usize>) =
        match &negative_caption {
            Some(NegativeCaption::Flipped(tokens, pos)) => {
                // flipped semantics denote a different (virtual) product
                (tokens, record.product_id ^ u64::MAX, *pos)
            }
            Some(NegativeCaption::Record(idx)) => {
                (&corpus.records[*idx].tokens, corpus.records[*idx].product_id, None)
            }
            None => (&view.tokens, record.product_id, None),
        };
    if clean_pair {
        let mut ex = crate::agm::assemble_pair(caption, &patch_set, record.product_id);
        ex.targets.y_m = (!negative) as u8;
        return Ok(ex);
    }
    let donor = DonorSource {
        caption,
        caption_product,
        camo_pixels: &camo_set.patches[patch_id(3, donor_patch_local / 3, donor_patch_local % 3)]
            .pixels,
        camo_product: corpus.records[camo_idx].product_id,
        protected_token,
    };
    assemble_example(
        &view,
        &patch_set,
        &alignments,
        negative,
        &donor,
        cfg.strategy,
        &cfg.tasks,
        &mut rng,
    )
}

/// Per-interval accumulation for the loss CSV.
#[derive(Default, Clone)]
struct CurveAccumulator {
    sums: [f64; 7],
    counts: [u64; 7],
    total_sum: f64,
    total_count: u64,
}

impl CurveAccumulator {
    fn add(&mut self, b: &LossBreakdown, positive: bool, tasks: &TaskSet) {
        let active = [
            positive && tasks.rr,
            positive && tasks.jps,
            positive && tasks.cp,
            positive && tasks.g2cm,
            positive && tasks.b2cm,
            positive,
            true,
        ];
        for (k, (&value, &on)) in b.tasks().iter().zip(active.iter()).enumerate() {
            if on {
                self.sums[k] += value;
                self.counts[k] += 1;
            }
        }
        self.total_sum += b.total;
        self.total_count += 1;
    }

    fn row(&self, step: usize) -> String {
        let mean = |k: usize| {
            if self.counts[k] == 0 {
                0.0
            } else {
                self.sums[k] / self.counts[k] as f64
            }
        };
        let total = if self.total_count == 0 {
            0.0
        } else {
            self.total_sum / self.total_count as f64
        };
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            mean(0),
            mean(1),
            mean(2),
            mean(3),
            mean(4),
            mean(5),
            mean(6),
            total
        )
    }
}

pub struct PretrainOutput {
    pub params: ModelParams,
    pub csv: String,
}

/// Runs pre-training, writing the loss CSV and final checkpoint to the
/// given paths. A non-finite loss aborts with the last logged checkpoint
/// on disk and a numeric error.
pub fn pretrain(
    corpus: &PreparedCorpus,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    csv_path: &Path,
    checkpoint_path: &Path,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::for_params(&params);
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    // the CSV is appended to disk at every interval so aborted runs keep
    // their curve so far
    write_text(csv_path, &csv)?;
    let mut acc = CurveAccumulator::default();
    let mut last_good = params.clone();

    for step in 1..=cfg.steps {
        let examples: Vec<Result<crate::agm::TrainingExample>> =
            crate::exec::map_indexed(cfg.batch_size, |slot| {
                slot_example(corpus, cfg, step, slot)
            });
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for ex in examples {
            batch.push(ex?);
        }

        // Per-example gradients in parallel; reduction below is in fixed
        // slot order so results do not depend on thread scheduling.
        let params_ref = &params;
        let tasks = &cfg.tasks;
        let use_dropout = params_ref.config.dropout > 0.0;
        let results: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> =
            crate::exec::map_indexed(batch.len(), |slot| {
                let ex = &batch[slot];
                let akpm = prepare_akpm_targets(params_ref, ex);
                let mut dropout_rng =
                    Rng::new(mix3(cfg.seed ^ 0xD80F, step as u64, slot as u64));
                let rng_opt = if use_dropout { Some(&mut dropout_rng) } else { None };
                loss_and_gradients(params_ref, ex, tasks, &akpm, rng_opt)
            });

        let mut grad_sum: Option<Vec<Vec<f64>>> = None;
        let mut batch_finite = true;
        for (slot, res) in results.into_iter().enumerate() {
            let (breakdown, grads) = res?;
            if !breakdown.total.is_finite() {
                batch_finite = false;
            }
            acc.add(&breakdown, batch[slot].targets.y_m == 1, &cfg.tasks);
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(sum) => {
                    for (dst, src) in sum.iter_mut().zip(&grads) {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        if !batch_finite {
            save_checkpoint(&last_good, checkpoint_path)?;
            return Err(KbError::Numeric(format!(
                "non-finite loss at step {step}; last good checkpoint saved"
            )));
        }
        let mut grads = grad_sum.expect("batch is nonempty");
        let inv = 1.0 / cfg.batch_size as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v *= inv);
        }

        let lr = lr_schedule(step, cfg);
        adam_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay);

        if step % cfg.log_interval == 0 || step == cfg.steps {
            let row = acc.row(step);
            csv.push_str(&row);
            csv.push('\n');
            append_line(csv_path, &row)?;
            acc = CurveAccumulator::default();
            if params.is_finite() {
                last_good = params.clone();
            }
        }
    }

    save_checkpoint(&params, checkpoint_path)?;
    Ok(PretrainOutput { params, csv })
}

// ── End-to-end gradient verification ────────────────────────────────────

/// Full central-difference check of every model parameter on one real
/// example at the micro configuration. Returns (max relative error,
/// parameter count). Runs at a conditioned weight scale so attention-path
/// gradients stay above the f64 finite-difference noise floor.
pub fn micro_grad_check(seed: u64, eps: f64) -> Result<(f64, usize)> {
    grad_check_model(ModelConfig::micro(), seed, eps)
}

pub fn grad_check_model(model_cfg: ModelConfig, seed: u64, eps: f64) -> Result<(f64, usize)> {
    let record = crate::data::generate_record(mix(seed, 0x6C), 0);
    let donor_rec = crate::data::generate_record(mix(seed, 0x6C), 1);
    let mask = foreground_mask(&record.image, record.height as usize, record.width as usize)?;
    let bbox = object_bbox(&mask, record.height as usize, record.width as usize)?;
    let patch_set =
        kaleido_split(&record.image, record.height as usize, record.width as usize, bbox);
    let donor_mask =
        foreground_mask(&donor_rec.image, donor_rec.height as usize, donor_rec.width as usize)?;
    let donor_bbox =
        object_bbox(&donor_mask, donor_rec.height as usize, donor_rec.width as usize)?;
    let donor_set = kaleido_split(
        &donor_rec.image,
        donor_rec.height as usize,
        donor_rec.width as usize,
        donor_bbox,
    );
    let alignments = ground_truth_alignments(&record, &bbox, DEFAULT_TAU)?;
    let donor = DonorSource {
        caption: &donor_rec.tokens,
        caption_product: donor_rec.product_id,
        camo_pixels: &donor_set.patches[patch_id(3, 1, 1)].pixels,
        camo_product: donor_rec.product_id,
        protected_token: None,
    };
    let mut rng = Rng::new(mix(seed, 0x9D));
    let tasks = TaskSet::full();
    let example = assemble_example(
        &record,
        &patch_set,
        &alignments,
        false,
        &donor,
        MaskingStrategy::Agm,
        &tasks,
        &mut rng,
    )?;

    let base = ModelParams::init_with_std(model_cfg.clone(), seed, 0.25)?;
    // Targets are frozen at the unperturbed encoder, exactly as one
    // optimizer step treats them.
    let akpm = prepare_akpm_targets(&base, &example);
    let tensors: Vec<Tensor> =
        base.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let total: usize = tensors.iter().map(Tensor::numel).sum();

    // Analytic gradients once, then a (parallel) central-difference sweep
    // over every coordinate with loss-only evaluations.
    let (_, analytic) = loss_and_gradients(&base, &example, &tasks, &akpm, None)?;
    let cfg = model_cfg;
    let loss_only = |ts: &[Tensor]| -> Result<f64> {
        let params = ModelParams::from_tensors(cfg.clone(), ts)?;
        let out = crate::model::total_loss(&params, &example, &tasks, &akpm, None)?;
        Ok(out.breakdown.total)
    };
    let coords: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |i| (ti, i)))
        .collect();
    let errs: Vec<Result<f64>> = crate::exec::map_indexed(coords.len(), |k| {
        let (ti, i) = coords[k];
        let mut work = tensors.clone();
        crate::tensor::central_difference_rel_err(&mut work, ti, i, &loss_only, analytic[ti][i], eps)
    });
    let mut worst = 0.0f64;
    for e in errs {
        worst = worst.max(e?);
    }
    Ok((worst, total))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Writes text to a file, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests;
