//! Alignment-guided masking and construction of training examples.
//!
//! `select_masking` walks the pre-aligned pairs in random order and flips a
//! fair coin per pair to mask its token or its patch, redirecting to the
//! other side when the chosen side's budget is already met. When traversal
//! cannot fill the budgets, unaligned candidates are drawn at random.
//! Budgets: 15% of caption tokens (rounded up) and exactly one level-3,
//! two level-4, and three level-5 patches; levels 1-2 are never masked.
//!
//! The selected patches double as the victims of the five kaleido tasks:
//! the level-3 mask is camouflaged, level-4 masks are greyed, level-5
//! masks are blanked; rotation and jigsaw touch levels 1-2 of every
//! positive example. `reference` holds an independent exact enumeration of
//! the traversal/coin process for verification.

pub mod reference;

use std::collections::BTreeSet;

use crate::aag::AlignmentSet;
use crate::data::{vocab, CorpusRecord, ID_CLS, ID_MSK, ID_SEP, RESERVED_TOKENS};
use crate::error::{KbError, Result};
use crate::kpg::{id_to_level_row_col, KaleidoPatchSet, LEVEL_OFFSETS, PATCH_SIZE};
use crate::rng::Rng;

/// How a masked item was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Aligned,
    Random,
}

/// Patch budgets for levels 3, 4, 5.
pub const PATCH_BUDGETS: [usize; 3] = [1, 2, 3];

/// ceil(0.15 * token_count), in integer arithmetic.
pub fn token_budget(token_count: usize) -> usize {
    (token_count * 15).div_ceil(100)
}

/// Per-example masking decisions. Lists are sorted by item index.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Caption token indices (0-based, [CLS]/[SEP] excluded by layout).
    pub tokens: Vec<(usize, Provenance)>,
    pub level3: Vec<(usize, Provenance)>,
    pub level4: Vec<(usize, Provenance)>,
    pub level5: Vec<(usize, Provenance)>,
}

impl MaskPlan {
    pub fn masked_patches(&self) -> impl Iterator<Item = (usize, Provenance)> + '_ {
        self.level3.iter().chain(&self.level4).chain(&self.level5).copied()
    }

    /// Aligned-provenance selections, sorted: the statistic compared
    /// against the brute-force process enumeration.
    pub fn aligned_outcome(&self) -> (Vec<usize>, Vec<usize>) {
        let tokens: Vec<usize> = self
            .tokens
            .iter()
            .filter(|(_, p)| *p == Provenance::Aligned)
            .map(|(t, _)| *t)
            .collect();
        let patches: Vec<usize> = self
            .masked_patches()
            .filter(|(_, p)| *p == Provenance::Aligned)
            .map(|(id, _)| id)
            .collect();
        (tokens, patches)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskingStrategy {
    Agm,
    Random,
}

impl std::str::FromStr for MaskingStrategy {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agm" => Ok(MaskingStrategy::Agm),
            "random" => Ok(MaskingStrategy::Random),
            other => Err(KbError::Usage(format!("unknown masking strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingStrategy::Agm => "agm",
            MaskingStrategy::Random => "random",
        })
    }
}

/// Fills `chosen` up to `budget` from shuffled `candidates`.
fn fill_random(
    chosen: &mut Vec<(usize, Provenance)>,
    budget: usize,
    mut candidates: Vec<usize>,
    rng: &mut Rng,
) {
    rng.shuffle(&mut candidates);
    for c in candidates {
        if chosen.len() >= budget {
            break;
        }
        chosen.push((c, Provenance::Random));
    }
}

/// Alignment-guided masking; see module docs for the exact process.
pub fn select_masking(
    alignments: &AlignmentSet,
    token_count: usize,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    if token_count == 0 {
        return Err(KbError::Contract("select_masking wants at least one token".into()));
    }
    let tok_budget = token_budget(token_count);
    let mut tokens: Vec<(usize, Provenance)> = Vec::with_capacity(tok_budget);
    // levels 3, 4, 5
    let mut patches: [Vec<(usize, Provenance)>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    let mut pairs: Vec<(usize, usize)> = alignments
        .pairs
        .iter()
        .copied()
        .filter(|&(t, p)| t < token_count && p >= LEVEL_OFFSETS[2])
        .collect();
    rng.shuffle(&mut pairs);

    for &(token, patch) in &pairs {
        let tokens_full = tokens.len() >= tok_budget;
        let patches_full =
            patches.iter().enumerate().all(|(k, l)| l.len() >= PATCH_BUDGETS[k]);
        if tokens_full && patches_full {
            break;
        }
        let lvl = id_to_level_row_col(patch).0 - 3;
        let token_free = !tokens_full && !tokens.iter().any(|&(t, _)| t == token);
        let patch_free = patches[lvl].len() < PATCH_BUDGETS[lvl]
            && !patches[lvl].iter().any(|&(p, _)| p == patch);
        // fair coin chooses the side; redirect if that side cannot accept
        if rng.gen_bool() {
            if token_free {
                tokens.push((token, Provenance::Aligned));
            } else if patch_free {
                patches[lvl].push((patch, Provenance::Aligned));
            }
        } else if patch_free {
            patches[lvl].push((patch, Provenance::Aligned));
        } else if token_free {
            tokens.push((token, Provenance::Aligned));
        }
    }

    // Random fallback: unaligned candidates first, then whatever is left.
    let aligned_tokens: BTreeSet<usize> = pairs.iter().map(|&(t, _)| t).collect();
    if tokens.len() < tok_budget {
        let masked: BTreeSet<usize> = tokens.iter().map(|&(t, _)| t).collect();
        let unaligned: Vec<usize> = (0..token_count)
            .filter(|t| !aligned_tokens.contains(t) && !masked.contains(t))
            .collect();
        fill_random(&mut tokens, tok_budget, unaligned, rng);
    }
    if tokens.len() < tok_budget {
        let masked: BTreeSet<usize> = tokens.iter().map(|&(t, _)| t).collect();
        let rest: Vec<usize> = (0..token_count).filter(|t| !masked.contains(t)).collect();
        fill_random(&mut tokens, tok_budget, rest, rng);
    }
    let aligned_patches: BTreeSet<usize> = pairs.iter().map(|&(_, p)| p).collect();
    for lvl in 0..3 {
        let range = LEVEL_OFFSETS[lvl + 2]..LEVEL_OFFSETS[lvl + 3];
        if patches[lvl].len() < PATCH_BUDGETS[lvl] {
            let masked: BTreeSet<usize> = patches[lvl].iter().map(|&(p, _)| p).collect();
            let unaligned: Vec<usize> = range
                .clone()
                .filter(|p| !aligned_patches.contains(p) && !masked.contains(p))
                .collect();
            fill_random(&mut patches[lvl], PATCH_BUDGETS[lvl], unaligned, rng);
        }
        if patches[lvl].len() < PATCH_BUDGETS[lvl] {
            let masked: BTreeSet<usize> = patches[lvl].iter().map(|&(p, _)| p).collect();
            let rest: Vec<usize> = range.clone().filter(|p| !masked.contains(p)).collect();
            fill_random(&mut patches[lvl], PATCH_BUDGETS[lvl], rest, rng);
        }
        debug_assert_eq!(patches[lvl].len(), PATCH_BUDGETS[lvl]);
    }
    debug_assert_eq!(tokens.len(), tok_budget);

    let [mut level3, mut level4, mut level5] = patches;
    tokens.sort_unstable_by_key(|&(t, _)| t);
    level3.sort_unstable_by_key(|&(p, _)| p);
    level4.sort_unstable_by_key(|&(p, _)| p);
    level5.sort_unstable_by_key(|&(p, _)| p);
    Ok(MaskPlan { tokens, level3, level4, level5 })
}

/// Ablation baseline: uniform random masking at the same budgets.
pub fn select_masking_random(token_count: usize, rng: &mut Rng) -> Result<MaskPlan> {
    if token_count == 0 {
        return Err(KbError::Contract("select_masking wants at least one token".into()));
    }
    let mut tokens = Vec::new();
    fill_random(&mut tokens, token_budget(token_count), (0..token_count).collect(), rng);
    let mut levels: [Vec<(usize, Provenance)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for lvl in 0..3 {
        let ids: Vec<usize> = (LEVEL_OFFSETS[lvl + 2]..LEVEL_OFFSETS[lvl + 3]).collect();
        fill_random(&mut levels[lvl], PATCH_BUDGETS[lvl], ids, rng);
    }
    let [mut level3, mut level4, mut level5] = levels;
    tokens.sort_unstable_by_key(|&(t, _)| t);
    level3.sort_unstable_by_key(|&(p, _)| p);
    level4.sort_unstable_by_key(|&(p, _)| p);
    level5.sort_unstable_by_key(|&(p, _)| p);
    Ok(MaskPlan { tokens, level3, level4, level5 })
}

pub fn select_masking_with(
    strategy: MaskingStrategy,
    alignments: &AlignmentSet,
    token_count: usize,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    match strategy {
        MaskingStrategy::Agm => select_masking(alignments, token_count, rng),
        MaskingStrategy::Random => select_masking_random(token_count, rng),
    }
}

/// (caption position, original token id) label for masked-language modeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmlmTarget {
    pub position: usize,
    pub original: u16,
}

/// Applies the 80/10/10 rule to the plan's token positions.
pub fn apply_token_masking(
    caption: &[u16],
    plan: &MaskPlan,
    rng: &mut Rng,
) -> (Vec<u16>, Vec<AmlmTarget>) {
    let vocab_len = vocab().len() as u64;
    let mut masked = caption.to_vec();
    let mut labels = Vec::with_capacity(plan.tokens.len());
    for &(pos, _) in &plan.tokens {
        let original = caption[pos];
        let r = rng.next_f64();
        if r < 0.8 {
            masked[pos] = ID_MSK;
        } else if r < 0.9 {
            masked[pos] =
                (RESERVED_TOKENS as u64 + rng.gen_range(vocab_len - RESERVED_TOKENS as u64)) as u16;
        }
        labels.push(AmlmTarget { position: pos, original });
    }
    (masked, labels)
}

// ── Patch transforms ────────────────────────────────────────────────────

/// 90-degree counterclockwise rotation of a square HWC block.
pub fn rotate90(pixels: &[f64]) -> Vec<f64> {
    let n = PATCH_SIZE;
    debug_assert_eq!(pixels.len(), n * n * 3);
    let mut out = vec![0.0; pixels.len()];
    for r in 0..n {
        for c in 0..n {
            for ch in 0..3 {
                out[(r * n + c) * 3 + ch] = pixels[(c * n + (n - 1 - r)) * 3 + ch];
            }
        }
    }
    out
}

/// Rotation by `quarter_turns` x 90 degrees counterclockwise.
pub fn rotate(pixels: &[f64], quarter_turns: usize) -> Vec<f64> {
    let mut out = pixels.to_vec();
    for _ in 0..quarter_turns % 4 {
        out = rotate90(&out);
    }
    out
}

/// Rotates the level-1 patch by a uniform angle; label is angle/90.
pub fn make_rotation_sample(pixels: &[f64], rng: &mut Rng) -> (Vec<f64>, usize) {
    let y_r = rng.gen_range(4) as usize;
    (rotate(pixels, y_r), y_r)
}

/// Lexicographic rank of a permutation of 0..n.
pub fn perm_rank(perm: &[usize]) -> usize {
    let n = perm.len();
    let mut rank = 0;
    for i in 0..n {
        let smaller = perm[i + 1..].iter().filter(|&&v| v < perm[i]).count();
        rank = rank * (n - i) + smaller;
    }
    rank
}

/// Inverse of [`perm_rank`].
pub fn perm_unrank(mut rank: usize, n: usize) -> Vec<usize> {
    let mut factorials = vec![1usize; n];
    for i in 1..n {
        factorials[i] = factorials[i - 1] * i;
    }
    let mut available: Vec<usize> = (0..n).collect();
    let mut perm = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = factorials[i];
        let k = rank / f;
        rank %= f;
        perm.push(available.remove(k));
    }
    perm
}

/// Shuffles the four level-2 patch contents by a uniform permutation;
/// slot i receives patch perm[i]. Label is the permutation's rank (0-23).
pub fn make_jigsaw_sample(patches: &[Vec<f64>], rng: &mut Rng) -> Result<(Vec<Vec<f64>>, usize)> {
    if patches.len() != 4 {
        return Err(KbError::Contract(format!("jigsaw wants 4 patches, got {}", patches.len())));
    }
    let y_j = rng.gen_range(24) as usize;
    let perm = perm_unrank(y_j, 4);
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&src| patches[src].clone()).collect();
    Ok((shuffled, y_j))
}

/// Replaces the victim level-3 patch with a donor patch from a different
/// product; label is the victim's row-major index (0-8).
pub fn make_camouflage_sample(
    level3: &[Vec<f64>],
    victim_index: usize,
    donor_pixels: &[f64],
    donor_product: u64,
    own_product: u64,
) -> Result<(Vec<Vec<f64>>, usize)> {
    if level3.len() != 9 {
        return Err(KbError::Contract(format!("camouflage wants 9 patches, got {}", level3.len())));
    }
    if victim_index >= 9 {
        return Err(KbError::Index(format!("camouflage victim {victim_index} out of range")));
    }
    if donor_product == own_product {
        return Err(KbError::Contract(
            "camouflage donor must come from a different product".into(),
        ));
    }
    let mut out = level3.to_vec();
    out[victim_index] = donor_pixels.to_vec();
    Ok((out, victim_index))
}

/// Channel-wise luminance: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn grey_pixels(pixels: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels.len());
    for p in pixels.chunks_exact(3) {
        let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        out.extend_from_slice(&[y, y, y]);
    }
    out
}

// ── Training examples ───────────────────────────────────────────────────

/// Input form of one patch position in the sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchInput {
    /// Encode these pixels with the patch encoder.
    Pixels(Vec<f64>),
    /// Blank-to-color mask: the feature entering the model is all zeros.
    Blank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub input: PatchInput,
    pub position5d: [f64; 5],
}

/// A masked patch to reconstruct: the original color pixels define the
/// target distribution at loss time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub patch_id: usize,
    pub original_pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskTargets {
    /// Image-text match label: 1 for a true pair, 0 for a swapped caption.
    pub y_m: u8,
    pub y_r: Option<usize>,
    pub y_j: Option<usize>,
    pub y_c: Option<usize>,
    pub amlm: Vec<AmlmTarget>,
    pub g2cm: Vec<ReconTarget>,
    pub b2cm: Vec<ReconTarget>,
}

/// Fixed sequence layout: [CLS], caption tokens, [SEP], then the 55
/// patches level-ascending row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<u16>,
    pub patches: Vec<PatchEntry>,
    /// 0 = text ('T'), 1 = image ('I'); text entries then patch entries.
    pub segments: Vec<u8>,
    pub targets: TaskTargets,
    pub plan: Option<MaskPlan>,
    pub product_id: u64,
}

impl TrainingExample {
    pub fn text_len(&self) -> usize {
        self.tokens.len()
    }

    /// Sequence position of the first patch.
    pub fn patch_start(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len() + self.patches.len()
    }
}

/// Which kaleido sub-tasks are active. AMLM and ITM (the base) always run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSet {
    pub rr: bool,
    pub jps: bool,
    pub cp: bool,
    pub g2cm: bool,
    pub b2cm: bool,
}

impl TaskSet {
    pub fn full() -> Self {
        TaskSet { rr: true, jps: true, cp: true, g2cm: true, b2cm: true }
    }

    pub fn base() -> Self {
        TaskSet { rr: false, jps: false, cp: false, g2cm: false, b2cm: false }
    }

    /// Parses ablation names: `B`, `B+I`, `B+I~IV`, `B+V`, ...
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = TaskSet::base();
        let s = s.trim();
        if s.is_empty() {
            return Err(KbError::Usage("empty task set".into()));
        }
        let to_index = |roman: &str| -> Result<usize> {
            match roman {
                "I" => Ok(0),
                "II" => Ok(1),
                "III" => Ok(2),
                "IV" => Ok(3),
                "V" => Ok(4),
                other => Err(KbError::Usage(format!("unknown sub-task '{other}'"))),
            }
        };
        let mut enable = |idx: usize| match idx {
            0 => set.rr = true,
            1 => set.jps = true,
            2 => set.cp = true,
            3 => set.g2cm = true,
            _ => set.b2cm = true,
        };
        for (i, part) in s.split('+').enumerate() {
            let part = part.trim();
            if i == 0 {
                if part != "B" {
                    return Err(KbError::Usage(format!("task set must start with B, got '{part}'")));
                }
                continue;
            }
            if let Some((from, to)) = part.split_once('~') {
                let a = to_index(from.trim())?;
                let b = to_index(to.trim())?;
                if a > b {
                    return Err(KbError::Usage(format!("bad sub-task range '{part}'")));
                }
                for k in a..=b {
                    enable(k);
                }
            } else {
                enable(to_index(part)?);
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for TaskSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let flags = [self.rr, self.jps, self.cp, self.g2cm, self.b2cm];
        let names = ["I", "II", "III", "IV", "V"];
        let mut s = String::from("B");
        for (on, name) in flags.iter().zip(names) {
            if *on {
                s.push('+');
                s.push_str(name);
            }
        }
        f.write_str(&s)
    }
}

/// Cross-product material for one example: a foreign caption for negative
/// pairs and a foreign level-3 patch for camouflage. `protected_token`
/// names a caption position that masking must leave visible; a swapped
/// caption whose single conflicting word gets masked would turn into a
/// false negative.
#[derive(Debug, Clone)]
pub struct DonorSource<'a> {
    pub caption: &'a [u16],
    pub caption_product: u64,
    pub camo_pixels: &'a [f64],
    pub camo_product: u64,
    pub protected_token: Option<usize>,
}

/// Builds one training example. Negative pairs swap in the donor caption
/// and carry only the ITM label; positive pairs run the full masking and
/// transform pipeline for the active tasks.
pub fn assemble_example(
    record: &CorpusRecord,
    patch_set: &KaleidoPatchSet,
    alignments: &AlignmentSet,
    negative: bool,
    donor: &DonorSource,
    strategy: MaskingStrategy,
    tasks: &TaskSet,
    rng: &mut Rng,
) -> Result<TrainingExample> {
    let mut patches: Vec<PatchEntry> = patch_set
        .patches
        .iter()
        .map(|p| PatchEntry { input: PatchInput::Pixels(p.pixels.clone()), position5d: p.position5d })
        .collect();

    // Negative pairs receive the same input noising as positives (token
    // masks and patch transforms), so the match head cannot read the
    // label off the input structure; they just emit no reconstruction
    // targets. Their token masking is plain random since the swapped
    // caption has no alignments to this image.
    let (caption, plan) = if negative {
        if donor.caption_product == record.product_id {
            return Err(KbError::Contract(
                "negative caption must come from a different product".into(),
            ));
        }
        let mut plan = select_masking_with(
            MaskingStrategy::Random,
            &AlignmentSet::default(),
            donor.caption.len(),
            rng,
        )?;
        if let Some(keep) = donor.protected_token {
            if let Some(k) = plan.tokens.iter().position(|&(t, _)| t == keep) {
                let unmasked: Vec<usize> = (0..donor.caption.len())
                    .filter(|t| *t != keep && !plan.tokens.iter().any(|&(p, _)| p == *t))
                    .collect();
                if unmasked.is_empty() {
                    plan.tokens.remove(k);
                } else {
                    let replacement = unmasked[rng.choose_index(unmasked.len())];
                    plan.tokens[k] = (replacement, Provenance::Random);
                    plan.tokens.sort_unstable_by_key(|&(t, _)| t);
                }
            }
        }
        (donor.caption, plan)
    } else {
        let plan = select_masking_with(strategy, alignments, record.tokens.len(), rng)?;
        (record.tokens.as_slice(), plan)
    };
    let (masked_caption, amlm) = apply_token_masking(caption, &plan, rng);

    let mut targets = if negative {
        TaskTargets { y_m: 0, ..TaskTargets::default() }
    } else {
        TaskTargets { y_m: 1, amlm, ..TaskTargets::default() }
    };

    if tasks.rr {
        let (rotated, y_r) = {
            let PatchInput::Pixels(px) = &patches[0].input else { unreachable!() };
            make_rotation_sample(px, rng)
        };
        patches[0].input = PatchInput::Pixels(rotated);
        if !negative {
            targets.y_r = Some(y_r);
        }
    }
    if tasks.jps {
        let level2: Vec<Vec<f64>> = (LEVEL_OFFSETS[1]..LEVEL_OFFSETS[2])
            .map(|i| match &patches[i].input {
                PatchInput::Pixels(px) => px.clone(),
                PatchInput::Blank => unreachable!(),
            })
            .collect();
        let (shuffled, y_j) = make_jigsaw_sample(&level2, rng)?;
        for (k, px) in shuffled.into_iter().enumerate() {
            patches[LEVEL_OFFSETS[1] + k].input = PatchInput::Pixels(px);
        }
        if !negative {
            targets.y_j = Some(y_j);
        }
    }
    if tasks.cp && !donor.camo_pixels.is_empty() {
        let victim_id = plan.level3[0].0;
        let victim_local = victim_id - LEVEL_OFFSETS[2];
        if donor.camo_product == record.product_id {
            return Err(KbError::Contract(
                "camouflage donor must come from a different product".into(),
            ));
        }
        patches[victim_id].input = PatchInput::Pixels(donor.camo_pixels.to_vec());
        if !negative {
            targets.y_c = Some(victim_local);
        }
    }
    if tasks.g2cm {
        for &(patch_id, _) in &plan.level4 {
            let PatchInput::Pixels(px) = &patches[patch_id].input else { unreachable!() };
            let original = px.clone();
            patches[patch_id].input = PatchInput::Pixels(grey_pixels(&original));
            if !negative {
                targets.g2cm.push(ReconTarget { patch_id, original_pixels: original });
            }
        }
    }
    if tasks.b2cm {
        for &(patch_id, _) in &plan.level5 {
            let PatchInput::Pixels(px) = &patches[patch_id].input else { unreachable!() };
            if !negative {
                targets.b2cm.push(ReconTarget { patch_id, original_pixels: px.clone() });
            }
            patches[patch_id].input = PatchInput::Blank;
        }
    }

    let tokens = frame_tokens(&masked_caption);
    let segments = segments_for(tokens.len(), patches.len());
    Ok(TrainingExample {
        tokens,
        patches,
        segments,
        targets,
        plan: Some(plan),
        product_id: record.product_id,
    })
}

/// An unmasked caption/image pair with no targets; used for scoring.
pub fn assemble_pair(caption: &[u16], patch_set: &KaleidoPatchSet, product_id: u64) -> TrainingExample {
    let patches: Vec<PatchEntry> = patch_set
        .patches
        .iter()
        .map(|p| PatchEntry { input: PatchInput::Pixels(p.pixels.clone()), position5d: p.position5d })
        .collect();
    let tokens = frame_tokens(caption);
    let segments = segments_for(tokens.len(), patches.len());
    TrainingExample {
        tokens,
        patches,
        segments,
        targets: TaskTargets::default(),
        plan: None,
        product_id,
    }
}

fn frame_tokens(caption: &[u16]) -> Vec<u16> {
    let mut tokens = Vec::with_capacity(caption.len() + 2);
    tokens.push(ID_CLS);
    tokens.extend_from_slice(caption);
    tokens.push(ID_SEP);
    tokens
}

fn segments_for(text_len: usize, patch_count: usize) -> Vec<u8> {
    let mut segments = vec![0u8; text_len];
    segments.extend(std::iter::repeat(1).take(patch_count));
    segments
}
