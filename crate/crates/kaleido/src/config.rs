//! Resolved run configuration and the command runners behind the CLI.
//!
//! The config file is a flat, line-oriented key=value format with
//! `[section]` headers and `#` comments. Resolution order: built-in
//! defaults, then the config file, then the KB_SEED environment variable,
//! then command-line flags. Every run writes its fully resolved
//! configuration next to its outputs so the run can be repeated
//! bit-for-bit from that file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::agm::TaskSet;
use crate::error::{KbError, Result};
use crate::eval::{ClsTarget, Direction, EvalReport, FinetuneConfig};
use crate::model::ModelConfig;
use crate::train::{PreparedCorpus, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    /// Master seed; flows into whichever stage the command runs.
    pub seed: u64,
    pub count: usize,
    pub record: usize,
    pub negatives: usize,
    pub direction: Direction,
    pub target: ClsTarget,
    pub grad_eps: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub heatmaps: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            count: 1000,
            record: 0,
            negatives: 100,
            direction: Direction::Itr,
            target: ClsTarget::Category,
            grad_eps: 1e-5,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            finetune: FinetuneConfig::desk(),
            corpus: None,
            checkpoint: None,
            out: None,
            out_dir: None,
            heatmaps: None,
        }
    }
}

impl RunConfig {
    /// Serializes every field; parsing this text reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "record={}", self.record);
        let _ = writeln!(s, "negatives={}", self.negatives);
        let _ = writeln!(s, "direction={}", self.direction);
        let _ = writeln!(
            s,
            "target={}",
            match self.target {
                ClsTarget::Category => "category",
                ClsTarget::Subcategory => "subcategory",
            }
        );
        let _ = writeln!(s, "grad_eps={}", self.grad_eps);
        let _ = writeln!(s, "[model]");
        let m = &self.model;
        let _ = writeln!(s, "layers={}", m.layers);
        let _ = writeln!(s, "hidden={}", m.hidden);
        let _ = writeln!(s, "heads={}", m.heads);
        let _ = writeln!(s, "d_img={}", m.d_img);
        let _ = writeln!(s, "vocab_size={}", m.vocab_size);
        let _ = writeln!(s, "max_text_len={}", m.max_text_len);
        let _ = writeln!(s, "dropout={}", m.dropout);
        let _ = writeln!(s, "[train]");
        let t = &self.train;
        let _ = writeln!(s, "steps={}", t.steps);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "learning_rate={}", t.learning_rate);
        let _ = writeln!(s, "weight_decay={}", t.weight_decay);
        let _ = writeln!(s, "warmup_steps={}", t.warmup_steps);
        let _ = writeln!(s, "strategy={}", t.strategy);
        let _ = writeln!(s, "tasks={}", t.tasks);
        let _ = writeln!(s, "log_interval={}", t.log_interval);
        let _ = writeln!(s, "negative_rate={}", t.negative_rate);
        let _ = writeln!(s, "tau={}", t.tau);
        let _ = writeln!(s, "[finetune]");
        let f = &self.finetune;
        let _ = writeln!(s, "steps={}", f.steps);
        let _ = writeln!(s, "batch_size={}", f.batch_size);
        let _ = writeln!(s, "learning_rate={}", f.learning_rate);
        let _ = writeln!(s, "freeze_encoder={}", f.freeze_encoder);
        let _ = writeln!(s, "[paths]");
        let mut path = |k: &str, v: &Option<PathBuf>| {
            if let Some(p) = v {
                let _ = writeln!(s, "{k}={}", p.display());
            }
        };
        path("corpus", &self.corpus);
        path("checkpoint", &self.checkpoint);
        path("out", &self.out);
        path("out_dir", &self.out_dir);
        path("heatmaps", &self.heatmaps);
        s
    }

    /// Applies key=value pairs from the sectioned text onto `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::from("run");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                KbError::Usage(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.apply(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one field by section and key.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| KbError::Usage(format!("bad value '{value}' for {section}.{what}"));
        let parse_usize = |v: &str, what: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(what))
        };
        let parse_f64 = |v: &str, what: &str| -> Result<f64> { v.parse().map_err(|_| bad(what)) };
        match (section, key) {
            ("run", "command") => self.command = value.to_string(),
            ("run", "seed") => self.seed = value.parse().map_err(|_| bad("seed"))?,
            ("run", "count") => self.count = parse_usize(value, "count")?,
            ("run", "record") => self.record = parse_usize(value, "record")?,
            ("run", "negatives") => self.negatives = parse_usize(value, "negatives")?,
            ("run", "direction") => self.direction = value.parse()?,
            ("run", "target") => self.target = value.parse()?,
            ("run", "grad_eps") => self.grad_eps = parse_f64(value, "grad_eps")?,
            ("model", "layers") => self.model.layers = parse_usize(value, "layers")?,
            ("model", "hidden") => self.model.hidden = parse_usize(value, "hidden")?,
            ("model", "heads") => self.model.heads = parse_usize(value, "heads")?,
            ("model", "d_img") => self.model.d_img = parse_usize(value, "d_img")?,
            ("model", "vocab_size") => self.model.vocab_size = parse_usize(value, "vocab_size")?,
            ("model", "max_text_len") => {
                self.model.max_text_len = parse_usize(value, "max_text_len")?
            }
            ("model", "dropout") => self.model.dropout = parse_f64(value, "dropout")?,
            ("train", "steps") => self.train.steps = parse_usize(value, "steps")?,
            ("train", "batch_size") => self.train.batch_size = parse_usize(value, "batch_size")?,
            ("train", "learning_rate") => {
                self.train.learning_rate = parse_f64(value, "learning_rate")?
            }
            ("train", "weight_decay") => {
                self.train.weight_decay = parse_f64(value, "weight_decay")?
            }
            ("train", "warmup_steps") => {
                self.train.warmup_steps = parse_usize(value, "warmup_steps")?
            }
            ("train", "strategy") => self.train.strategy = value.parse()?,
            ("train", "tasks") => self.train.tasks = TaskSet::parse(value)?,
            ("train", "log_interval") => {
                self.train.log_interval = parse_usize(value, "log_interval")?
            }
            ("train", "negative_rate") => {
                self.train.negative_rate = parse_f64(value, "negative_rate")?
            }
            ("train", "tau") => self.train.tau = parse_f64(value, "tau")?,
            ("finetune", "steps") => self.finetune.steps = parse_usize(value, "steps")?,
            ("finetune", "batch_size") => {
                self.finetune.batch_size = parse_usize(value, "batch_size")?
            }
            ("finetune", "learning_rate") => {
                self.finetune.learning_rate = parse_f64(value, "learning_rate")?
            }
            ("finetune", "freeze_encoder") => {
                self.finetune.freeze_encoder = value.parse().map_err(|_| bad("freeze_encoder"))?
            }
            ("paths", "corpus") => self.corpus = Some(PathBuf::from(value)),
            ("paths", "checkpoint") => self.checkpoint = Some(PathBuf::from(value)),
            ("paths", "out") => self.out = Some(PathBuf::from(value)),
            ("paths", "out_dir") => self.out_dir = Some(PathBuf::from(value)),
            ("paths", "heatmaps") => self.heatmaps = Some(PathBuf::from(value)),
            _ => {
                return Err(KbError::Usage(format!("unknown config key {section}.{key}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Propagates the master seed into the per-stage configs.
    pub fn resolve_seed(&mut self) {
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    fn required_corpus(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| KbError::Usage("missing --corpus".into()))
    }

    fn required_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| KbError::Usage("missing --checkpoint".into()))
    }

    fn load_prepared(&self) -> Result<PreparedCorpus> {
        let records = crate::data::read_corpus(self.required_corpus()?)?;
        PreparedCorpus::prepare(records, self.train.tau)
    }

    /// Writes the resolved config next to the given output location.
    fn save_beside(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("run-{}.cfg", self.command));
        crate::train::write_text(&path, &self.to_text())?;
        Ok(path)
    }
}

// ── Command runners ─────────────────────────────────────────────────────

pub fn run_gen_data(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out.as_deref().ok_or_else(|| KbError::Usage("missing --out".into()))?;
    let records = crate::data::generate_corpus(cfg.seed, cfg.count);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    crate::data::write_corpus(&records, out)?;
    if let Some(dir) = out.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        cfg.save_beside(dir)?;
    }
    Ok(format!("wrote {} records to {}", records.len(), out.display()))
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<String> {
    let out_dir = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| KbError::Usage("missing --out-dir".into()))?;
    let corpus = cfg.load_prepared()?;
    std::fs::create_dir_all(out_dir)?;
    cfg.save_beside(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let ckpt_path = out_dir.join("model.kbck");
    let _ = crate::train::pretrain(&corpus, cfg.model.clone(), &cfg.train, &csv_path, &ckpt_path)?;
    Ok(format!(
        "trained {} steps; checkpoint {}; loss curve {}",
        cfg.train.steps,
        ckpt_path.display(),
        csv_path.display()
    ))
}

pub fn run_eval_retrieval(cfg: &RunConfig) -> Result<(EvalReport, String)> {
    let out = cfg.out.as_deref().ok_or_else(|| KbError::Usage("missing --out".into()))?;
    let corpus = cfg.load_prepared()?;
    let params = crate::model::load_checkpoint(cfg.required_checkpoint()?)?;
    let metrics =
        crate::eval::retrieval_eval(&params, &corpus, cfg.direction, cfg.negatives, cfg.seed)?;
    for line in &metrics.widening_log {
        eprintln!("note: {line}");
    }
    let mut report = EvalReport::default();
    match cfg.direction {
        Direction::Itr => report.itr = Some(metrics.clone()),
        Direction::Tir => report.tir = Some(metrics.clone()),
    }
    report.write(out)?;
    if let Some(dir) = out.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        cfg.save_beside(dir)?;
    }
    let summary = format!(
        "{}: rank@1 {:.4} rank@5 {:.4} rank@10 {:.4} over {} queries",
        cfg.direction, metrics.rank1, metrics.rank5, metrics.rank10, metrics.queries
    );
    Ok((report, summary))
}

pub fn run_finetune(cfg: &RunConfig) -> Result<(EvalReport, String)> {
    let out = cfg.out.as_deref().ok_or_else(|| KbError::Usage("missing --out".into()))?;
    let corpus = cfg.load_prepared()?;
    let params = crate::model::load_checkpoint(cfg.required_checkpoint()?)?;
    let (tuned, head) = crate::eval::category_finetune(&params, &corpus, cfg.target, &cfg.finetune)?;
    let (acc, confusion) = crate::eval::cls_eval(&tuned, &head, &corpus, cfg.target)?;
    let mf = crate::eval::macro_f(&confusion)?;
    let mut report = EvalReport::default();
    match cfg.target {
        ClsTarget::Category => {
            report.cr_acc = Some(acc);
            report.cr_macro_f = Some(mf);
        }
        ClsTarget::Subcategory => {
            report.sub_acc = Some(acc);
            report.sub_macro_f = Some(mf);
        }
    }
    report.write(out)?;
    if let Some(dir) = out.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        cfg.save_beside(dir)?;
    }
    let summary = format!("acc {acc:.4} macro-F {mf:.4}");
    Ok((report, summary))
}

pub fn run_grad_check(cfg: &RunConfig) -> Result<(f64, usize)> {
    crate::train::grad_check_model(cfg.model.clone(), cfg.seed, cfg.grad_eps)
}

pub fn run_inspect_kpg(cfg: &RunConfig) -> Result<String> {
    let out_dir = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| KbError::Usage("missing --out-dir".into()))?;
    let corpus = crate::data::read_corpus(cfg.required_corpus()?)?;
    let rec = corpus
        .get(cfg.record)
        .ok_or_else(|| KbError::Index(format!("record {} out of range", cfg.record)))?;
    let set = crate::kpg::split_image(&rec.image, rec.height as usize, rec.width as usize)?;
    std::fs::create_dir_all(out_dir)?;
    let mut table = String::from("patch_id,level,row,col,x1,x2,y1,y2,area\n");
    for p in &set.patches {
        crate::kpg::write_ppm(
            &out_dir.join(format!("patch_{:02}.ppm", p.patch_id)),
            crate::kpg::PATCH_SIZE,
            crate::kpg::PATCH_SIZE,
            &p.pixels,
        )?;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            p.patch_id,
            p.level,
            p.row,
            p.col,
            p.position5d[0],
            p.position5d[1],
            p.position5d[2],
            p.position5d[3],
            p.position5d[4]
        );
    }
    crate::train::write_text(&out_dir.join("positions.csv"), &table)?;
    cfg.save_beside(out_dir)?;
    Ok(format!(
        "wrote 55 patch images and positions.csv to {} (bbox {:?})",
        out_dir.display(),
        set.bbox
    ))
}

pub fn run_inspect_align(cfg: &RunConfig) -> Result<String> {
    let corpus = crate::data::read_corpus(cfg.required_corpus()?)?;
    let rec = corpus
        .get(cfg.record)
        .ok_or_else(|| KbError::Index(format!("record {} out of range", cfg.record)))?;
    let mask = crate::kpg::foreground_mask(&rec.image, rec.height as usize, rec.width as usize)?;
    let bbox = crate::kpg::object_bbox(&mask, rec.height as usize, rec.width as usize)?;
    let heatmaps = match &cfg.heatmaps {
        Some(path) => crate::aag::heatmaps_from_file(path, rec)?,
        None => crate::aag::heatmaps_from_ground_truth(rec, &bbox),
    };
    let set = crate::aag::build_alignments(&heatmaps, cfg.train.tau)?;
    let v = crate::data::vocab();
    let mut out = format!(
        "record {} (product {}): {} heatmaps, {} alignment pairs (tau {})\n",
        cfg.record,
        rec.product_id,
        heatmaps.len(),
        set.len(),
        cfg.train.tau
    );
    for &(token, patch) in &set.pairs {
        let (level, row, col) = crate::kpg::id_to_level_row_col(patch);
        let word = v.word(rec.tokens[token]);
        let _ = writeln!(
            out,
            "  token {token:2} '{word}' -> patch {patch:2} (level {level}, row {row}, col {col})"
        );
    }
    Ok(out)
}

pub fn run_inspect_masking(cfg: &RunConfig) -> Result<String> {
    let corpus = crate::data::read_corpus(cfg.required_corpus()?)?;
    let rec = corpus
        .get(cfg.record)
        .ok_or_else(|| KbError::Index(format!("record {} out of range", cfg.record)))?;
    let mask = crate::kpg::foreground_mask(&rec.image, rec.height as usize, rec.width as usize)?;
    let bbox = crate::kpg::object_bbox(&mask, rec.height as usize, rec.width as usize)?;
    let aligns = crate::aag::ground_truth_alignments(rec, &bbox, cfg.train.tau)?;
    let mut rng = crate::rng::Rng::new(cfg.seed);
    let plan = crate::agm::select_masking_with(
        cfg.train.strategy,
        &aligns,
        rec.tokens.len(),
        &mut rng,
    )?;
    let v = crate::data::vocab();
    let mut out = format!(
        "record {} (product {}), strategy {}, seed {}\n",
        cfg.record, rec.product_id, cfg.train.strategy, cfg.seed
    );
    let prov = |p: crate::agm::Provenance| match p {
        crate::agm::Provenance::Aligned => "aligned",
        crate::agm::Provenance::Random => "random",
    };
    let _ = writeln!(out, "masked tokens ({}):", plan.tokens.len());
    for &(t, p) in &plan.tokens {
        let _ = writeln!(out, "  {t:2} '{}' [{}]", v.word(rec.tokens[t]), prov(p));
    }
    for (name, list) in
        [("level3", &plan.level3), ("level4", &plan.level4), ("level5", &plan.level5)]
    {
        let ids: Vec<String> =
            list.iter().map(|&(id, p)| format!("{id} [{}]", prov(p))).collect();
        let _ = writeln!(out, "masked {name}: {}", ids.join(", "));
    }
    Ok(out)
}

/// Environment overrides: KB_SEED replaces the config seed unless a flag
/// already set it.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("KB_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| KbError::Usage(format!("KB_SEED is not a u64: '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// Metrics parsed back from an EvalReport text file (used by tooling and
/// tests to compare runs).
pub fn parse_report(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}
