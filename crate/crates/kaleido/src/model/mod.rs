//! Single-stream cross-modality transformer with the seven task heads.
//!
//! Text tokens and the 55 kaleido patches share one encoder. Token
//! embeddings sum token/position/segment tables; patch embeddings sum
//! projections of the encoder feature, the 5D position, and the modality
//! segment; both pass one layer norm. The encoder is original-BERT
//! post-LN blocks with full bidirectional attention across modalities.
//! Patch order carries no positional signal of its own: position enters
//! only through the 5D features.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::agm::{PatchInput, TaskSet, TrainingExample};
use crate::data::ID_PAD;
use crate::error::{KbError, Result};
use crate::kpg::{encode_patch, EncoderNodes, PatchEncoderParams, NUM_PATCHES};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const ATTN_MASK_NEG: f64 = -1e30;

/// Transformer dimensions and the task-head geometry derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Single dropout rate applied to the embedding output during
    /// training forward passes; 0 disables it.
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: L=2, H=64, A=4.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            d_img: 64,
            vocab_size: crate::data::vocab().len(),
            max_text_len: 32,
            dropout: 0.0,
        }
    }

    /// Tiny configuration used by the gradient checker: L=1, H=8.
    pub fn micro() -> Self {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            d_img: 8,
            vocab_size: crate::data::vocab().len(),
            max_text_len: 32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(KbError::Contract(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_text_len < 3 {
            return Err(KbError::Contract("degenerate model config".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    /// No key bias: softmax shift-invariance makes it gradient-free.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

impl LayerParams {
    fn init_with_std(cfg: &ModelConfig, std: f64, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        LayerParams {
            wq: Tensor::randn(vec![h, h], std, rng),
            bq: Tensor::zeros(vec![h]),
            wk: Tensor::randn(vec![h, h], std, rng),
            wv: Tensor::randn(vec![h, h], std, rng),
            bv: Tensor::zeros(vec![h]),
            wo: Tensor::randn(vec![h, h], std, rng),
            bo: Tensor::zeros(vec![h]),
            ln1_g: Tensor::full(vec![h], 1.0),
            ln1_b: Tensor::zeros(vec![h]),
            ffn_w1: Tensor::randn(vec![h, f], std, rng),
            ffn_b1: Tensor::zeros(vec![f]),
            ffn_w2: Tensor::randn(vec![f, h], std, rng),
            ffn_b2: Tensor::zeros(vec![h]),
            ln2_g: Tensor::full(vec![h], 1.0),
            ln2_b: Tensor::zeros(vec![h]),
        }
    }
}

/// Every trainable weight of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_emb: Tensor,
    pub text_pos: Tensor,
    pub segment: Tensor,
    pub img_seg: Tensor,
    pub img_feat_w: Tensor,
    pub img_feat_b: Tensor,
    pub img_pos_w: Tensor,
    pub img_pos_b: Tensor,
    pub emb_ln_g: Tensor,
    pub emb_ln_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub patch_encoder: PatchEncoderParams,
    pub amlm_w: Tensor,
    pub amlm_b: Tensor,
    pub itm_w: Tensor,
    pub itm_b: Tensor,
    pub rr_w: Tensor,
    pub rr_b: Tensor,
    pub jps_w: Tensor,
    pub jps_b: Tensor,
    pub cp_w: Tensor,
    pub cp_b: Tensor,
    pub g2cm_w: Tensor,
    pub g2cm_b: Tensor,
    pub b2cm_w: Tensor,
    pub b2cm_b: Tensor,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_impl(config, seed, INIT_STD, 0.05)
    }

    /// Initialization with a chosen uniform weight scale. Training uses
    /// the default; the gradient checker runs at a larger scale so
    /// attention is neither uniform nor saturated and no true gradient
    /// sits below the finite-difference noise floor.
    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        Self::init_impl(config, seed, std, std)
    }

    fn init_impl(config: ModelConfig, seed: u64, std: f64, enc_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(crate::rng::mix(seed, 0x1217));
        let h = config.hidden;
        let d = config.d_img;
        let v = config.vocab_size;
        let layers =
            (0..config.layers).map(|_| LayerParams::init_with_std(&config, std, &mut rng)).collect();
        let max_text_len = config.max_text_len;
        Ok(ModelParams {
            config,
            token_emb: Tensor::randn(vec![v, h], std, &mut rng),
            text_pos: Tensor::randn(vec![max_text_len, h], std, &mut rng),
            segment: Tensor::randn(vec![2, h], std, &mut rng),
            img_seg: Tensor::randn(vec![2, h], std, &mut rng),
            img_feat_w: Tensor::randn(vec![d, h], std, &mut rng),
            img_feat_b: Tensor::zeros(vec![h]),
            img_pos_w: Tensor::randn(vec![5, h], std, &mut rng),
            img_pos_b: Tensor::zeros(vec![h]),
            emb_ln_g: Tensor::full(vec![h], 1.0),
            emb_ln_b: Tensor::zeros(vec![h]),
            layers,
            patch_encoder: PatchEncoderParams::init_with_std(d, enc_std, &mut rng),
            amlm_w: Tensor::randn(vec![h, v], std, &mut rng),
            amlm_b: Tensor::zeros(vec![v]),
            itm_w: Tensor::randn(vec![h, 1], std, &mut rng),
            itm_b: Tensor::zeros(vec![1]),
            rr_w: Tensor::randn(vec![h, 4], std, &mut rng),
            rr_b: Tensor::zeros(vec![4]),
            jps_w: Tensor::randn(vec![h, 24], std, &mut rng),
            jps_b: Tensor::zeros(vec![24]),
            cp_w: Tensor::randn(vec![h, 9], std, &mut rng),
            cp_b: Tensor::zeros(vec![9]),
            g2cm_w: Tensor::randn(vec![h, d], std, &mut rng),
            g2cm_b: Tensor::zeros(vec![d]),
            b2cm_w: Tensor::randn(vec![h, d], std, &mut rng),
            b2cm_b: Tensor::zeros(vec![d]),
        })
    }

    /// Rebuilds a parameter set from tensors in `named_tensors` order.
    pub fn from_tensors(config: ModelConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut params = ModelParams::init(config, 0)?;
        let named = params.named_tensors_mut();
        if named.len() != tensors.len() {
            return Err(KbError::Shape(format!(
                "expected {} tensors, got {}",
                named.len(),
                tensors.len()
            )));
        }
        for ((name, dst), src) in named.into_iter().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(KbError::Shape(format!(
                    "tensor '{name}' shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(params)
    }

    /// Canonical (name, tensor) enumeration; checkpoints, the optimizer,
    /// and the gradient checker all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("text_pos".into(), &self.text_pos),
            ("segment".into(), &self.segment),
            ("img_seg".into(), &self.img_seg),
            ("img_feat_w".into(), &self.img_feat_w),
            ("img_feat_b".into(), &self.img_feat_b),
            ("img_pos_w".into(), &self.img_pos_w),
            ("img_pos_b".into(), &self.img_pos_b),
            ("emb_ln_g".into(), &self.emb_ln_g),
            ("emb_ln_b".into(), &self.emb_ln_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let pre = format!("layer{i}");
            out.push((format!("{pre}.wq"), &l.wq));
            out.push((format!("{pre}.bq"), &l.bq));
            out.push((format!("{pre}.wk"), &l.wk));
            out.push((format!("{pre}.wv"), &l.wv));
            out.push((format!("{pre}.bv"), &l.bv));
            out.push((format!("{pre}.wo"), &l.wo));
            out.push((format!("{pre}.bo"), &l.bo));
            out.push((format!("{pre}.ln1_g"), &l.ln1_g));
            out.push((format!("{pre}.ln1_b"), &l.ln1_b));
            out.push((format!("{pre}.ffn_w1"), &l.ffn_w1));
            out.push((format!("{pre}.ffn_b1"), &l.ffn_b1));
            out.push((format!("{pre}.ffn_w2"), &l.ffn_w2));
            out.push((format!("{pre}.ffn_b2"), &l.ffn_b2));
            out.push((format!("{pre}.ln2_g"), &l.ln2_g));
            out.push((format!("{pre}.ln2_b"), &l.ln2_b));
        }
        for (name, t) in self.patch_encoder.tensors() {
            out.push((format!("patch_encoder.{name}"), t));
        }
        out.push(("amlm_w".into(), &self.amlm_w));
        out.push(("amlm_b".into(), &self.amlm_b));
        out.push(("itm_w".into(), &self.itm_w));
        out.push(("itm_b".into(), &self.itm_b));
        out.push(("rr_w".into(), &self.rr_w));
        out.push(("rr_b".into(), &self.rr_b));
        out.push(("jps_w".into(), &self.jps_w));
        out.push(("jps_b".into(), &self.jps_b));
        out.push(("cp_w".into(), &self.cp_w));
        out.push(("cp_b".into(), &self.cp_b));
        out.push(("g2cm_w".into(), &self.g2cm_w));
        out.push(("g2cm_b".into(), &self.g2cm_b));
        out.push(("b2cm_w".into(), &self.b2cm_w));
        out.push(("b2cm_b".into(), &self.b2cm_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_emb".into(), &mut self.token_emb),
            ("text_pos".into(), &mut self.text_pos),
            ("segment".into(), &mut self.segment),
            ("img_seg".into(), &mut self.img_seg),
            ("img_feat_w".into(), &mut self.img_feat_w),
            ("img_feat_b".into(), &mut self.img_feat_b),
            ("img_pos_w".into(), &mut self.img_pos_w),
            ("img_pos_b".into(), &mut self.img_pos_b),
            ("emb_ln_g".into(), &mut self.emb_ln_g),
            ("emb_ln_b".into(), &mut self.emb_ln_b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let pre = format!("layer{i}");
            out.push((format!("{pre}.wq"), &mut l.wq));
            out.push((format!("{pre}.bq"), &mut l.bq));
            out.push((format!("{pre}.wk"), &mut l.wk));
            out.push((format!("{pre}.wv"), &mut l.wv));
            out.push((format!("{pre}.bv"), &mut l.bv));
            out.push((format!("{pre}.wo"), &mut l.wo));
            out.push((format!("{pre}.bo"), &mut l.bo));
            out.push((format!("{pre}.ln1_g"), &mut l.ln1_g));
            out.push((format!("{pre}.ln1_b"), &mut l.ln1_b));
            out.push((format!("{pre}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("{pre}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("{pre}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("{pre}.ffn_b2"), &mut l.ffn_b2));
            out.push((format!("{pre}.ln2_g"), &mut l.ln2_g));
            out.push((format!("{pre}.ln2_b"), &mut l.ln2_b));
        }
        for (name, t) in self.patch_encoder.tensors_mut() {
            out.push((format!("patch_encoder.{name}"), t));
        }
        out.push(("amlm_w".into(), &mut self.amlm_w));
        out.push(("amlm_b".into(), &mut self.amlm_b));
        out.push(("itm_w".into(), &mut self.itm_w));
        out.push(("itm_b".into(), &mut self.itm_b));
        out.push(("rr_w".into(), &mut self.rr_w));
        out.push(("rr_b".into(), &mut self.rr_b));
        out.push(("jps_w".into(), &mut self.jps_w));
        out.push(("jps_b".into(), &mut self.jps_b));
        out.push(("cp_w".into(), &mut self.cp_w));
        out.push(("cp_b".into(), &mut self.cp_b));
        out.push(("g2cm_w".into(), &mut self.g2cm_w));
        out.push(("g2cm_b".into(), &mut self.g2cm_b));
        out.push(("b2cm_w".into(), &mut self.b2cm_w));
        out.push(("b2cm_b".into(), &mut self.b2cm_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub tape: Tape,
    /// Leaf ids aligned with `ModelParams::named_tensors` order.
    pub param_ids: Vec<NodeId>,
    /// Hidden states [seq_len, hidden] after the last layer.
    pub hidden: NodeId,
    pub text_len: usize,
    pub patch_start: usize,
}

struct NodeIndex {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl NodeIndex {
    fn get(&self, name: &str) -> NodeId {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.ids[i],
            None => unreachable!("unknown parameter {name}"),
        }
    }
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Runs the full embedding + encoder stack for one example.
///
/// `dropout_rng` enables embedding dropout at the configured rate; pass
/// None for deterministic inference/evaluation forward passes.
pub fn forward(
    params: &ModelParams,
    example: &TrainingExample,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Forward> {
    let cfg = &params.config;
    cfg.validate()?;
    if example.patches.len() != NUM_PATCHES {
        return Err(KbError::Contract(format!(
            "example has {} patches, expected {NUM_PATCHES}",
            example.patches.len()
        )));
    }
    let text_len = example.tokens.len();
    if text_len > cfg.max_text_len {
        return Err(KbError::Contract(format!(
            "text length {text_len} exceeds max {}",
            cfg.max_text_len
        )));
    }
    for &t in &example.tokens {
        if t as usize >= cfg.vocab_size {
            return Err(KbError::Index(format!("token id {t} out of vocabulary")));
        }
    }

    let mut tape = Tape::new();
    let named = params.named_tensors();
    let mut index = NodeIndex { names: Vec::with_capacity(named.len()), ids: Vec::with_capacity(named.len()) };
    for (name, tensor) in &named {
        index.names.push(name.clone());
        index.ids.push(tape.leaf_tensor(tensor));
    }
    let param_ids = index.ids.clone();

    // Text side: token + position + segment('T') embeddings.
    let token_ids: Vec<usize> = example.tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(index.get("token_emb"), &token_ids)?;
    let positions: Vec<usize> = (0..text_len).collect();
    let pos = tape.gather_rows(index.get("text_pos"), &positions)?;
    let seg = tape.gather_rows(index.get("segment"), &vec![0usize; text_len])?;
    let text_sum = tape.add(tok, pos)?;
    let text_emb = tape.add(text_sum, seg)?;

    // Image side: FC(feature) + FC(position5d) + FC(seg='I').
    let enc_nodes = EncoderNodes {
        conv1_w: index.get("patch_encoder.conv1_w"),
        conv1_b: index.get("patch_encoder.conv1_b"),
        conv2_w: index.get("patch_encoder.conv2_w"),
        conv2_b: index.get("patch_encoder.conv2_b"),
        proj_w: index.get("patch_encoder.proj_w"),
        proj_b: index.get("patch_encoder.proj_b"),
    };
    let mut feature_rows = Vec::with_capacity(NUM_PATCHES);
    for entry in &example.patches {
        let row = match &entry.input {
            PatchInput::Pixels(px) => encode_patch(&mut tape, &enc_nodes, px)?,
            PatchInput::Blank => tape.leaf(vec![1, cfg.d_img], vec![0.0; cfg.d_img])?,
        };
        feature_rows.push(row);
    }
    let features = tape.concat_rows(&feature_rows)?;
    let feat_emb = linear(&mut tape, features, index.get("img_feat_w"), index.get("img_feat_b"))?;
    let mut pos5d = Vec::with_capacity(NUM_PATCHES * 5);
    for entry in &example.patches {
        pos5d.extend_from_slice(&entry.position5d);
    }
    let pos_in = tape.leaf(vec![NUM_PATCHES, 5], pos5d)?;
    let pos_emb = linear(&mut tape, pos_in, index.get("img_pos_w"), index.get("img_pos_b"))?;
    let img_seg = tape.gather_rows(index.get("img_seg"), &vec![1usize; NUM_PATCHES])?;
    let img_sum = tape.add(feat_emb, pos_emb)?;
    let img_emb = tape.add(img_sum, img_seg)?;

    let seq = tape.concat_rows(&[text_emb, img_emb])?;
    let mut x = tape.layer_norm(seq, index.get("emb_ln_g"), index.get("emb_ln_b"), LN_EPS)?;

    if cfg.dropout > 0.0 {
        if let Some(rng) = dropout_rng.as_deref_mut() {
            let seq_len = text_len + NUM_PATCHES;
            let keep = 1.0 - cfg.dropout;
            let mask: Vec<f64> = (0..seq_len * cfg.hidden)
                .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask_node = tape.leaf(vec![seq_len, cfg.hidden], mask)?;
            x = tape.mul(x, mask_node)?;
        }
    }

    // Attention mask: [PAD] positions contribute embeddings but are never
    // attended to.
    let seq_len = text_len + NUM_PATCHES;
    let pad_mask: Option<NodeId> = if example.tokens.contains(&ID_PAD) {
        let mut row = vec![0.0; seq_len];
        for (i, &t) in example.tokens.iter().enumerate() {
            if t == ID_PAD {
                row[i] = ATTN_MASK_NEG;
            }
        }
        Some(tape.leaf(vec![1, seq_len], row)?)
    } else {
        None
    };

    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        let q = linear(&mut tape, x, index.get(&format!("{pre}.wq")), index.get(&format!("{pre}.bq")))?;
        let k = tape.matmul(x, index.get(&format!("{pre}.wk")))?;
        let v = linear(&mut tape, x, index.get(&format!("{pre}.wv")), index.get(&format!("{pre}.bv")))?;
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(mask) = pad_mask {
                scores = tape.add_row(scores, mask)?;
            }
            let attn = tape.softmax_rows(scores)?;
            head_ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let attn_out =
            linear(&mut tape, ctx, index.get(&format!("{pre}.wo")), index.get(&format!("{pre}.bo")))?;
        let res1 = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(
            res1,
            index.get(&format!("{pre}.ln1_g")),
            index.get(&format!("{pre}.ln1_b")),
            LN_EPS,
        )?;
        let f1 = linear(&mut tape, x1, index.get(&format!("{pre}.ffn_w1")), index.get(&format!("{pre}.ffn_b1")))?;
        let act = tape.gelu(f1);
        let f2 = linear(&mut tape, act, index.get(&format!("{pre}.ffn_w2")), index.get(&format!("{pre}.ffn_b2")))?;
        let res2 = tape.add(x1, f2)?;
        x = tape.layer_norm(
            res2,
            index.get(&format!("{pre}.ln2_g")),
            index.get(&format!("{pre}.ln2_b")),
            LN_EPS,
        )?;
    }

    Ok(Forward { tape, param_ids, hidden: x, text_len, patch_start: text_len })
}

// ── Task losses ─────────────────────────────────────────────────────────

/// Reconstruction targets computed with gradient-stopped encoder weights:
/// softmax of the frozen encoder's features on the original color pixels.
#[derive(Debug, Clone, Default)]
pub struct AkpmTargets {
    pub g2cm: Vec<(usize, Vec<f64>)>,
    pub b2cm: Vec<(usize, Vec<f64>)>,
}

fn softmax_data(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Recomputed each step so targets track the current encoder without
/// feeding gradients back into it.
pub fn prepare_akpm_targets(params: &ModelParams, example: &TrainingExample) -> AkpmTargets {
    let encode = |pixels: &[f64]| -> Vec<f64> {
        softmax_data(&crate::kpg::encode_patch_data(&params.patch_encoder, pixels))
    };
    AkpmTargets {
        g2cm: example
            .targets
            .g2cm
            .iter()
            .map(|t| (t.patch_id, encode(&t.original_pixels)))
            .collect(),
        b2cm: example
            .targets
            .b2cm
            .iter()
            .map(|t| (t.patch_id, encode(&t.original_pixels)))
            .collect(),
    }
}

/// Per-task loss values for one example; inactive tasks report 0 and are
/// excluded from curve averaging via the matching `active` flags.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub amlm: f64,
    pub itm: f64,
    pub rr: f64,
    pub jps: f64,
    pub cp: f64,
    pub g2cm: f64,
    pub b2cm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn tasks(&self) -> [f64; 7] {
        [self.rr, self.jps, self.cp, self.g2cm, self.b2cm, self.amlm, self.itm]
    }
}

pub struct LossOutput {
    pub forward: Forward,
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
}

fn head_logits(
    tape: &mut Tape,
    hidden: NodeId,
    positions: &[usize],
    w: NodeId,
    b: NodeId,
    pool: bool,
) -> Result<NodeId> {
    let rows = tape.gather_rows(hidden, positions)?;
    let pooled = if pool { tape.mean_rows(rows)? } else { rows };
    linear(tape, pooled, w, b)
}

/// Sum of the seven objectives (active tasks only) on one example.
/// Negative pairs contribute the match loss alone.
pub fn total_loss(
    params: &ModelParams,
    example: &TrainingExample,
    tasks: &TaskSet,
    akpm: &AkpmTargets,
    dropout_rng: Option<&mut Rng>,
) -> Result<LossOutput> {
    let mut fwd = forward(params, example, dropout_rng)?;
    let tape = &mut fwd.tape;
    let hidden = fwd.hidden;
    let ps = fwd.patch_start;
    let named = params.named_tensors();
    let get = |name: &str| -> NodeId {
        let i = named.iter().position(|(n, _)| n == name).unwrap();
        fwd.param_ids[i]
    };

    let mut parts: Vec<NodeId> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    // ITM on the [CLS] hidden, always active.
    let itm_logits = head_logits(tape, hidden, &[0], get("itm_w"), get("itm_b"), false)?;
    let itm_scalar = tape.reshape(itm_logits, vec![1])?;
    let itm = tape.bce_with_logits(itm_scalar, example.targets.y_m as f64)?;
    breakdown.itm = tape.scalar_value(itm);
    parts.push(itm);

    // AMLM over masked token positions ([CLS] shifts captions by one).
    if !example.targets.amlm.is_empty() {
        let positions: Vec<usize> =
            example.targets.amlm.iter().map(|t| t.position + 1).collect();
        let labels: Vec<usize> =
            example.targets.amlm.iter().map(|t| t.original as usize).collect();
        let logits = head_logits(tape, hidden, &positions, get("amlm_w"), get("amlm_b"), false)?;
        let amlm = tape.cross_entropy_rows(logits, &labels)?;
        breakdown.amlm = tape.scalar_value(amlm);
        parts.push(amlm);
    }

    if tasks.rr {
        if let Some(y_r) = example.targets.y_r {
            let logits = head_logits(tape, hidden, &[ps], get("rr_w"), get("rr_b"), false)?;
            let rr = tape.cross_entropy_rows(logits, &[y_r])?;
            breakdown.rr = tape.scalar_value(rr);
            parts.push(rr);
        }
    }
    if tasks.jps {
        if let Some(y_j) = example.targets.y_j {
            let positions: Vec<usize> = (1..5).map(|k| ps + k).collect();
            let logits = head_logits(tape, hidden, &positions, get("jps_w"), get("jps_b"), true)?;
            let jps = tape.cross_entropy_rows(logits, &[y_j])?;
            breakdown.jps = tape.scalar_value(jps);
            parts.push(jps);
        }
    }
    if tasks.cp {
        if let Some(y_c) = example.targets.y_c {
            let positions: Vec<usize> = (5..14).map(|k| ps + k).collect();
            let logits = head_logits(tape, hidden, &positions, get("cp_w"), get("cp_b"), true)?;
            let cp = tape.cross_entropy_rows(logits, &[y_c])?;
            breakdown.cp = tape.scalar_value(cp);
            parts.push(cp);
        }
    }
    if tasks.g2cm && !akpm.g2cm.is_empty() {
        let mut terms = Vec::with_capacity(akpm.g2cm.len());
        for (patch_id, target) in &akpm.g2cm {
            let logits =
                head_logits(tape, hidden, &[ps + patch_id], get("g2cm_w"), get("g2cm_b"), false)?;
            let probs = tape.softmax_rows(logits)?;
            let flat = tape.reshape(probs, vec![params.config.d_img])?;
            terms.push(tape.kl_div(target, flat)?);
        }
        let g2cm = tape.add_n(&terms)?;
        breakdown.g2cm = tape.scalar_value(g2cm);
        parts.push(g2cm);
    }
    if tasks.b2cm && !akpm.b2cm.is_empty() {
        let mut terms = Vec::with_capacity(akpm.b2cm.len());
        for (patch_id, target) in &akpm.b2cm {
            let logits =
                head_logits(tape, hidden, &[ps + patch_id], get("b2cm_w"), get("b2cm_b"), false)?;
            let probs = tape.softmax_rows(logits)?;
            let flat = tape.reshape(probs, vec![params.config.d_img])?;
            terms.push(tape.kl_div(target, flat)?);
        }
        let b2cm = tape.add_n(&terms)?;
        breakdown.b2cm = tape.scalar_value(b2cm);
        parts.push(b2cm);
    }

    let loss = tape.add_n(&parts)?;
    breakdown.total = tape.scalar_value(loss);
    Ok(LossOutput { forward: fwd, loss, breakdown })
}

/// Sigmoid match probability of a caption/image pair; inference only.
pub fn itm_score(params: &ModelParams, example: &TrainingExample) -> Result<f64> {
    let mut fwd = forward(params, example, None)?;
    let tape = &mut fwd.tape;
    let named = params.named_tensors();
    let get = |name: &str| -> NodeId {
        let i = named.iter().position(|(n, _)| n == name).unwrap();
        fwd.param_ids[i]
    };
    let logits = head_logits(tape, fwd.hidden, &[0], get("itm_w"), get("itm_b"), false)?;
    let scalar = tape.reshape(logits, vec![1])?;
    let prob = tape.sigmoid(scalar);
    Ok(tape.scalar_value(prob))
}

/// Gradient of the summed loss w.r.t. every parameter, in
/// `named_tensors` order. The loss value and breakdown come along.
pub fn loss_and_gradients(
    params: &ModelParams,
    example: &TrainingExample,
    tasks: &TaskSet,
    akpm: &AkpmTargets,
    dropout_rng: Option<&mut Rng>,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut out = total_loss(params, example, tasks, akpm, dropout_rng)?;
    out.forward.tape.backward(out.loss)?;
    let grads = out
        .forward
        .param_ids
        .iter()
        .map(|&id| out.forward.tape.grad(id).to_vec())
        .collect();
    Ok((out.breakdown, grads))
}

#[cfg(test)]
mod tests;
