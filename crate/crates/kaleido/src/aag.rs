//! Attention-based alignment generator: derives token-patch pre-alignments
//! from per-token attention heatmaps over the object box.
//!
//! The heatmap source is pluggable. The default backend builds exact
//! heatmaps from the corpus ground-truth anchors; a file backend loads
//! externally supplied heatmaps (`KBHEAT01`) keyed to generated caption
//! tokens and maps them onto raw tokens through co-occurrence matching.
//! A token aligns with a patch when the patch attracts well above its
//! uniform share of the token's attention mass; only levels 3-5 produce
//! pairs since masking never touches levels 1-2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::CorpusRecord;
use crate::error::{KbError, Result};
use crate::kpg::{id_to_level_row_col, patch_position_features, BBox, LEVEL_OFFSETS};

/// Heatmap grid resolution over the object box.
pub const HEATMAP_GRID: usize = 8;
/// A patch must attract at least `tau * ALIGN_BOOST / n^2` of a token's
/// attention mass to align, i.e. `ALIGN_BOOST`x its uniform share scaled
/// by the threshold parameter.
pub const ALIGN_BOOST: f64 = 4.0;
/// Default threshold parameter `tau` in (0, 1].
pub const DEFAULT_TAU: f64 = 0.5;
/// Per token, per level: keep at most this many top-scoring patches.
pub const MAX_PER_LEVEL: usize = 3;

pub const HEATMAP_MAGIC: &[u8; 8] = b"KBHEAT01";

/// Attention weights of one token over the G x G grid; nonnegative, sum 1.
#[derive(Debug, Clone)]
pub struct AttentionHeatmap {
    pub token_index: usize,
    /// Row-major G x G grid.
    pub weights: Vec<f64>,
}

impl AttentionHeatmap {
    pub fn is_normalized(&self) -> bool {
        self.weights.iter().all(|&w| w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6
    }
}

/// Pre-aligned (token index, patch id) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentSet {
    /// Sorted by (token, patch id); no duplicates.
    pub pairs: Vec<(usize, usize)>,
}

impl AlignmentSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, token: usize, patch: usize) -> bool {
        self.pairs.binary_search(&(token, patch)).is_ok()
    }

    pub fn pairs_at_level(&self, level: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let range = LEVEL_OFFSETS[level - 1]..LEVEL_OFFSETS[level];
        self.pairs.iter().copied().filter(move |&(_, p)| range.contains(&p))
    }

    pub fn tokens_for_patch(&self, patch: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().filter(move |&&(_, p)| p == patch).map(|&(t, _)| t)
    }

    pub fn patches_for_token(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().filter(move |&&(t, _)| t == token).map(|&(_, p)| p)
    }
}

/// Maps an anchor rectangle from image coordinates into the bbox frame,
/// clipped to [0,1]^2. Returns None when the anchor misses the box.
fn anchor_in_bbox(anchor: &crate::data::Rect, bbox: &BBox) -> Option<(f64, f64, f64, f64)> {
    let bw = bbox.width();
    let bh = bbox.height();
    let x1 = ((anchor.x1 as f64 - bbox.x1) / bw).max(0.0);
    let x2 = ((anchor.x2 as f64 - bbox.x1) / bw).min(1.0);
    let y1 = ((anchor.y1 as f64 - bbox.y1) / bh).max(0.0);
    let y2 = ((anchor.y2 as f64 - bbox.y1) / bh).min(1.0);
    if x1 < x2 && y1 < y2 {
        Some((x1, y1, x2, y2))
    } else {
        None
    }
}

/// Ground-truth backend: each aligned token's heatmap is uniform over the
/// grid cells its anchor rectangle intersects, zero elsewhere.
pub fn heatmaps_from_ground_truth(record: &CorpusRecord, bbox: &BBox) -> Vec<AttentionHeatmap> {
    let g = HEATMAP_GRID;
    let mut out = Vec::new();
    for (token_index, anchor) in &record.alignments {
        let Some((ax1, ay1, ax2, ay2)) = anchor_in_bbox(anchor, bbox) else {
            continue;
        };
        let mut weights = vec![0.0; g * g];
        let mut hits = 0usize;
        for r in 0..g {
            for c in 0..g {
                let cx1 = c as f64 / g as f64;
                let cx2 = (c + 1) as f64 / g as f64;
                let cy1 = r as f64 / g as f64;
                let cy2 = (r + 1) as f64 / g as f64;
                let ox = (ax2.min(cx2) - ax1.max(cx1)).max(0.0);
                let oy = (ay2.min(cy2) - ay1.max(cy1)).max(0.0);
                if ox * oy > 1e-12 {
                    weights[r * g + c] = 1.0;
                    hits += 1;
                }
            }
        }
        if hits == 0 {
            continue;
        }
        let inv = 1.0 / hits as f64;
        weights.iter_mut().for_each(|w| *w *= inv);
        out.push(AttentionHeatmap { token_index: *token_index as usize, weights });
    }
    out
}

/// Greedy left-to-right exact-id matching: each generated token takes the
/// earliest unmatched raw token with the same id.
pub fn token_cooccurrence(generated: &[u16], raw: &[u16]) -> Vec<(usize, usize)> {
    let mut used = vec![false; raw.len()];
    let mut matches = Vec::new();
    for (gi, &g) in generated.iter().enumerate() {
        for (ri, &r) in raw.iter().enumerate() {
            if !used[ri] && r == g {
                used[ri] = true;
                matches.push((gi, ri));
                break;
            }
        }
    }
    matches
}

/// Fraction of the heatmap's mass attributed to the patch rectangle:
/// sum over cells of weight times the cell's area fraction inside the patch.
pub fn heatmap_patch_overlap(heatmap: &AttentionHeatmap, position5d: &[f64; 5]) -> f64 {
    let g = HEATMAP_GRID;
    let (px1, px2, py1, py2) = (position5d[0], position5d[1], position5d[2], position5d[3]);
    let cell_area = 1.0 / (g * g) as f64;
    let mut score = 0.0;
    for r in 0..g {
        for c in 0..g {
            let w = heatmap.weights[r * g + c];
            if w == 0.0 {
                continue;
            }
            let cx1 = c as f64 / g as f64;
            let cx2 = (c + 1) as f64 / g as f64;
            let cy1 = r as f64 / g as f64;
            let cy2 = (r + 1) as f64 / g as f64;
            let ox = (px2.min(cx2) - px1.max(cx1)).max(0.0);
            let oy = (py2.min(cy2) - py1.max(cy1)).max(0.0);
            score += w * (ox * oy) / cell_area;
        }
    }
    score
}

/// Per-level selection rule: keep patches whose score reaches
/// `tau * ALIGN_BOOST / n^2`, at most [`MAX_PER_LEVEL`], ties broken by
/// lower patch id.
fn select_level_patches(scores: &[(usize, f64)], level: usize, tau: f64) -> Vec<usize> {
    let n = level as f64;
    let threshold = tau * ALIGN_BOOST / (n * n);
    let mut qualified: Vec<(usize, f64)> =
        scores.iter().copied().filter(|&(_, s)| s >= threshold).collect();
    qualified.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    qualified.truncate(MAX_PER_LEVEL);
    qualified.into_iter().map(|(id, _)| id).collect()
}

/// Builds the alignment set from heatmaps. Patch geometry is analytic, so
/// only the grid levels matter; levels 1-2 never emit pairs because
/// masking does not apply to them.
pub fn build_alignments(heatmaps: &[AttentionHeatmap], tau: f64) -> Result<AlignmentSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(KbError::Contract(format!("tau must be in (0,1], got {tau}")));
    }
    let mut pairs = Vec::new();
    for h in heatmaps {
        debug_assert!(h.is_normalized());
        for level in 3..=5usize {
            let mut scores = Vec::with_capacity(level * level);
            for id in LEVEL_OFFSETS[level - 1]..LEVEL_OFFSETS[level] {
                let (l, r, c) = id_to_level_row_col(id);
                debug_assert_eq!(l, level);
                let pos = patch_position_features(level, r, c);
                scores.push((id, heatmap_patch_overlap(h, &pos)));
            }
            for id in select_level_patches(&scores, level, tau) {
                pairs.push((h.token_index, id));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(AlignmentSet { pairs })
}

/// The default pipeline path: ground-truth heatmaps, then alignments.
pub fn ground_truth_alignments(record: &CorpusRecord, bbox: &BBox, tau: f64) -> Result<AlignmentSet> {
    let heatmaps = heatmaps_from_ground_truth(record, bbox);
    build_alignments(&heatmaps, tau)
}

// ── External heatmap container ──────────────────────────────────────────

/// Heatmaps for generated caption tokens, as loaded from a `KBHEAT01` file.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedHeatmaps {
    pub grid: usize,
    pub generated_tokens: Vec<u16>,
    /// (generated token index, row-major grid weights).
    pub entries: Vec<(u16, Vec<f64>)>,
}

/// Writes a `KBHEAT01` container: magic, grid size (u16), generated token
/// count and ids (u16), entry count (u16), then per entry the generated
/// token index (u16) and grid*grid little-endian f32 weights.
pub fn write_heatmaps(h: &GeneratedHeatmaps, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(HEATMAP_MAGIC)?;
    w.write_all(&(h.grid as u16).to_le_bytes())?;
    w.write_all(&(h.generated_tokens.len() as u16).to_le_bytes())?;
    for &t in &h.generated_tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    w.write_all(&(h.entries.len() as u16).to_le_bytes())?;
    for (idx, weights) in &h.entries {
        if weights.len() != h.grid * h.grid {
            return Err(KbError::Contract("heatmap entry has wrong grid size".into()));
        }
        w.write_all(&idx.to_le_bytes())?;
        for &v in weights {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmaps(path: &Path) -> Result<GeneratedHeatmaps> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != HEATMAP_MAGIC {
        return Err(KbError::format(format!("bad heatmap magic in {}", path.display())));
    }
    let mut pos = 8usize;
    let u16_at = |pos: &mut usize| -> Result<u16> {
        if *pos + 2 > bytes.len() {
            return Err(KbError::format("truncated heatmap file"));
        }
        let v = u16::from_le_bytes(bytes[*pos..*pos + 2].try_into().unwrap());
        *pos += 2;
        Ok(v)
    };
    let grid = u16_at(&mut pos)? as usize;
    if grid == 0 || grid > 64 {
        return Err(KbError::format(format!("implausible heatmap grid {grid}")));
    }
    let n_tokens = u16_at(&mut pos)? as usize;
    let mut generated_tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        generated_tokens.push(u16_at(&mut pos)?);
    }
    let n_entries = u16_at(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let idx = u16_at(&mut pos)?;
        if idx as usize >= n_tokens {
            return Err(KbError::format(format!("heatmap entry index {idx} out of range")));
        }
        let need = grid * grid * 4;
        if pos + need > bytes.len() {
            return Err(KbError::format("truncated heatmap weights"));
        }
        let mut weights = Vec::with_capacity(grid * grid);
        for k in 0..grid * grid {
            weights.push(f32::from_le_bytes(bytes[pos + 4 * k..pos + 4 * k + 4].try_into().unwrap()) as f64);
        }
        pos += need;
        entries.push((idx, weights));
    }
    Ok(GeneratedHeatmaps { grid, generated_tokens, entries })
}

/// File backend: maps generated-token heatmaps onto the record's raw
/// caption through co-occurrence, renormalizing each grid.
pub fn heatmaps_from_file(path: &Path, record: &CorpusRecord) -> Result<Vec<AttentionHeatmap>> {
    let loaded = read_heatmaps(path)?;
    if loaded.grid != HEATMAP_GRID {
        return Err(KbError::format(format!(
            "heatmap grid {} does not match pipeline grid {HEATMAP_GRID}",
            loaded.grid
        )));
    }
    let matches = token_cooccurrence(&loaded.generated_tokens, &record.tokens);
    let mut out = Vec::new();
    for (gen_idx, weights) in &loaded.entries {
        let Some(&(_, raw_idx)) = matches.iter().find(|(g, _)| *g == *gen_idx as usize) else {
            continue;
        };
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let weights: Vec<f64> = weights.iter().map(|w| (w / sum).max(0.0)).collect();
        out.push(AttentionHeatmap { token_index: raw_idx, weights });
    }
    Ok(out)
}
