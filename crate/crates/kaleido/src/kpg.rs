//! Kaleido patch generator: foreground localization, multi-scale
//! 1x1..5x5 patch decomposition (55 patches per image), per-patch 5D
//! position features, and the small trainable patch encoder.
//!
//! Foreground extraction is a border-median color-distance threshold, which
//! is exact on the synthetic corpus. The locked object box is resampled to
//! an 80x80 working crop and each level cuts that crop into an n x n grid;
//! grid cells are resampled to fixed 16x16 blocks. Resampling integrates
//! the source over each output pixel's footprint (box filter), so mean
//! color is conserved across levels and downscales do not alias.

use crate::error::{KbError, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Edge length of every patch pixel block.
pub const PATCH_SIZE: usize = 16;
/// Working resolution of the object crop before gridding.
pub const WORK_SIZE: usize = 80;
/// Total patches per image: 1 + 4 + 9 + 16 + 25.
pub const NUM_PATCHES: usize = 55;
/// RGB distance above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.08;
/// Object box pixel dimensions snap outward to a multiple of this.
const BBOX_SNAP: usize = 60;

/// First patch id of each level (terminated by 55).
pub const LEVEL_OFFSETS: [usize; 6] = [0, 1, 5, 14, 30, 55];

/// Normalized object bounding box in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// One cell of the multi-scale grid decomposition.
#[derive(Debug, Clone)]
pub struct KaleidoPatch {
    pub patch_id: usize,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    /// 16x16x3 block in HWC order, values in [0,1].
    pub pixels: Vec<f64>,
    /// [x1, x2, y1, y2, w*h] in bbox-normalized coordinates.
    pub position5d: [f64; 5],
}

/// The 55 patches of one image, level-ascending and row-major per level.
#[derive(Debug, Clone)]
pub struct KaleidoPatchSet {
    pub patches: Vec<KaleidoPatch>,
    pub bbox: BBox,
}

impl KaleidoPatchSet {
    /// Index range of one level's patches inside `patches`.
    pub fn level_range(level: usize) -> std::ops::Range<usize> {
        LEVEL_OFFSETS[level - 1]..LEVEL_OFFSETS[level]
    }

    pub fn level(&self, level: usize) -> &[KaleidoPatch] {
        &self.patches[Self::level_range(level)]
    }
}

/// patch_id = sum of squares below `level`, plus row-major offset.
pub fn patch_id(level: usize, row: usize, col: usize) -> usize {
    debug_assert!((1..=5).contains(&level) && row < level && col < level);
    LEVEL_OFFSETS[level - 1] + row * level + col
}

/// Inverse of [`patch_id`].
pub fn id_to_level_row_col(id: usize) -> (usize, usize, usize) {
    debug_assert!(id < NUM_PATCHES);
    let level = LEVEL_OFFSETS.iter().position(|&o| o > id).unwrap();
    let off = id - LEVEL_OFFSETS[level - 1];
    (level, off / level, off % level)
}

/// [col/n, (col+1)/n, row/n, (row+1)/n, 1/n^2] for grid size n = level.
pub fn patch_position_features(level: usize, row: usize, col: usize) -> [f64; 5] {
    let n = level as f64;
    [
        col as f64 / n,
        (col + 1) as f64 / n,
        row as f64 / n,
        (row + 1) as f64 / n,
        1.0 / (n * n),
    ]
}

fn median(values: &mut [f32]) -> f64 {
    values.sort_by(f32::total_cmp);
    values[values.len() / 2] as f64
}

/// Binary foreground mask: a pixel is foreground iff its RGB distance to
/// the median border color exceeds [`FOREGROUND_THRESHOLD`].
pub fn foreground_mask(image: &[f32], height: usize, width: usize) -> Result<Vec<bool>> {
    assert_eq!(image.len(), height * width * 3);
    let mut border: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..height {
        for x in 0..width {
            if y == 0 || y == height - 1 || x == 0 || x == width - 1 {
                let i = (y * width + x) * 3;
                for c in 0..3 {
                    border[c].push(image[i + c]);
                }
            }
        }
    }
    let bg = [median(&mut border[0]), median(&mut border[1]), median(&mut border[2])];
    let mut mask = vec![false; height * width];
    let mut any = false;
    for (p, m) in image.chunks_exact(3).zip(mask.iter_mut()) {
        let d2 = (p[0] as f64 - bg[0]).powi(2)
            + (p[1] as f64 - bg[1]).powi(2)
            + (p[2] as f64 - bg[2]).powi(2);
        *m = d2.sqrt() > FOREGROUND_THRESHOLD;
        any |= *m;
    }
    if !any {
        return Err(KbError::EmptyForeground);
    }
    Ok(mask)
}

/// Snaps an inclusive pixel span outward so its length is a multiple of
/// [`BBOX_SNAP`], clamped to the image dimension.
fn snap_span(lo: usize, hi: usize, size: usize) -> (usize, usize) {
    let len = hi - lo + 1;
    let target = (len.div_ceil(BBOX_SNAP) * BBOX_SNAP).min(size);
    if target >= size {
        return (0, size - 1);
    }
    let grow = target - len.min(target);
    let mut lo2 = lo.saturating_sub(grow / 2);
    if lo2 + target > size {
        lo2 = size - target;
    }
    (lo2, lo2 + target - 1)
}

/// Tight axis-aligned foreground bounds, snapped outward so both pixel
/// dimensions divide evenly across every grid level, then normalized.
pub fn object_bbox(mask: &[bool], height: usize, width: usize) -> Result<BBox> {
    let mut x_lo = width;
    let mut x_hi = 0;
    let mut y_lo = height;
    let mut y_hi = 0;
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
    }
    if x_lo > x_hi {
        return Err(KbError::Contract("object_bbox on empty mask".into()));
    }
    let (x_lo, x_hi) = snap_span(x_lo, x_hi, width);
    let (y_lo, y_hi) = snap_span(y_lo, y_hi, height);
    Ok(BBox {
        x1: x_lo as f64 / width as f64,
        y1: y_lo as f64 / height as f64,
        x2: (x_hi + 1) as f64 / width as f64,
        y2: (y_hi + 1) as f64 / height as f64,
    })
}

/// Box-filter resample of a source region to `out_w` x `out_h`.
///
/// `region` is (x0, y0, x1, y1) in source pixel coordinates (pixel `i`
/// spans [i, i+1)). Each output pixel averages the source over its exact
/// fractional footprint, so the output mean equals the region mean.
fn resample_region(
    src: &[f64],
    src_w: usize,
    region: (f64, f64, f64, f64),
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let (rx0, ry0, rx1, ry1) = region;
    let sx = (rx1 - rx0) / out_w as f64;
    let sy = (ry1 - ry0) / out_h as f64;
    let mut out = vec![0.0; out_w * out_h * 3];
    for oy in 0..out_h {
        let y0 = ry0 + oy as f64 * sy;
        let y1 = y0 + sy;
        let py0 = y0.floor() as usize;
        let py1 = (y1.ceil() as usize).min(src_rows(src, src_w));
        for ox in 0..out_w {
            let x0 = rx0 + ox as f64 * sx;
            let x1 = x0 + sx;
            let px0 = x0.floor() as usize;
            let px1 = (x1.ceil() as usize).min(src_w);
            let mut acc = [0.0f64; 3];
            let mut area = 0.0;
            for py in py0..py1 {
                let hy = (y1.min((py + 1) as f64) - y0.max(py as f64)).max(0.0);
                if hy == 0.0 {
                    continue;
                }
                for px in px0..px1 {
                    let wx = (x1.min((px + 1) as f64) - x0.max(px as f64)).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    let w = wx * hy;
                    let i = (py * src_w + px) * 3;
                    acc[0] += src[i] * w;
                    acc[1] += src[i + 1] * w;
                    acc[2] += src[i + 2] * w;
                    area += w;
                }
            }
            let o = (oy * out_w + ox) * 3;
            if area > 0.0 {
                out[o] = acc[0] / area;
                out[o + 1] = acc[1] / area;
                out[o + 2] = acc[2] / area;
            }
        }
    }
    out
}

fn src_rows(src: &[f64], src_w: usize) -> usize {
    src.len() / (src_w * 3)
}

/// Cuts the object box into the 1x1..5x5 kaleido grids.
pub fn kaleido_split(image: &[f32], height: usize, width: usize, bbox: BBox) -> KaleidoPatchSet {
    let img: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let region = (
        bbox.x1 * width as f64,
        bbox.y1 * height as f64,
        bbox.x2 * width as f64,
        bbox.y2 * height as f64,
    );
    let crop = resample_region(&img, width, region, WORK_SIZE, WORK_SIZE);

    let mut patches = Vec::with_capacity(NUM_PATCHES);
    for level in 1..=5usize {
        let cell = WORK_SIZE as f64 / level as f64;
        for row in 0..level {
            for col in 0..level {
                let sub = (
                    col as f64 * cell,
                    row as f64 * cell,
                    (col + 1) as f64 * cell,
                    (row + 1) as f64 * cell,
                );
                let pixels = resample_region(&crop, WORK_SIZE, sub, PATCH_SIZE, PATCH_SIZE);
                patches.push(KaleidoPatch {
                    patch_id: patch_id(level, row, col),
                    level,
                    row,
                    col,
                    pixels,
                    position5d: patch_position_features(level, row, col),
                });
            }
        }
    }
    KaleidoPatchSet { patches, bbox }
}

/// Convenience: mask, bbox, and split in one call.
pub fn split_image(image: &[f32], height: usize, width: usize) -> Result<KaleidoPatchSet> {
    let mask = foreground_mask(image, height, width)?;
    let bbox = object_bbox(&mask, height, width)?;
    Ok(kaleido_split(image, height, width, bbox))
}

// ── Patch encoder ───────────────────────────────────────────────────────

/// Trainable conv encoder mapping a 16x16x3 patch to a d_img feature:
/// conv 3x3/s2 (3->8), GELU, conv 3x3/s2 (8->16), GELU, flatten, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoderParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// Flattened conv output size: 16 channels x 4 x 4.
pub const ENCODER_FLAT: usize = 16 * 4 * 4;

impl PatchEncoderParams {
    pub fn init(d_img: usize, rng: &mut Rng) -> Self {
        // scaled so feature softmax targets are informative at step one
        // instead of starting indistinguishable from uniform
        let mut p = Self::init_with_std(d_img, 0.15, rng);
        p.proj_w = Tensor::randn(vec![ENCODER_FLAT, d_img], 1.0, rng);
        p
    }

    pub fn init_with_std(d_img: usize, std: f64, rng: &mut Rng) -> Self {
        PatchEncoderParams {
            conv1_w: Tensor::randn(vec![8, 3, 3, 3], std, rng),
            conv1_b: Tensor::zeros(vec![8]),
            conv2_w: Tensor::randn(vec![16, 8, 3, 3], std, rng),
            conv2_b: Tensor::zeros(vec![16]),
            proj_w: Tensor::randn(vec![ENCODER_FLAT, d_img], std, rng),
            proj_b: Tensor::zeros(vec![d_img]),
        }
    }

    pub fn d_img(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
        ]
    }
}

/// Tape node ids of encoder parameters, in `tensors()` order.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

impl EncoderNodes {
    pub fn insert(tape: &mut Tape, params: &PatchEncoderParams) -> Self {
        EncoderNodes {
            conv1_w: tape.leaf_tensor(&params.conv1_w),
            conv1_b: tape.leaf_tensor(&params.conv1_b),
            conv2_w: tape.leaf_tensor(&params.conv2_w),
            conv2_b: tape.leaf_tensor(&params.conv2_b),
            proj_w: tape.leaf_tensor(&params.proj_w),
            proj_b: tape.leaf_tensor(&params.proj_b),
        }
    }

    pub fn ids(&self) -> [NodeId; 6] {
        [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.proj_w, self.proj_b]
    }
}

fn hwc_to_chw(pixels: &[f64]) -> Vec<f64> {
    let n = PATCH_SIZE;
    let mut out = vec![0.0; pixels.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out[c * n * n + y * n + x] = pixels[(y * n + x) * 3 + c];
            }
        }
    }
    out
}

/// Builds the encoder forward for one patch; returns a [1, d_img] node.
pub fn encode_patch(tape: &mut Tape, nodes: &EncoderNodes, pixels: &[f64]) -> Result<NodeId> {
    debug_assert_eq!(pixels.len(), PATCH_SIZE * PATCH_SIZE * 3);
    let x = tape.leaf(vec![3, PATCH_SIZE, PATCH_SIZE], hwc_to_chw(pixels))?;
    let c1 = tape.conv2d(x, nodes.conv1_w, nodes.conv1_b, 2, 1)?;
    let a1 = tape.gelu(c1);
    let c2 = tape.conv2d(a1, nodes.conv2_w, nodes.conv2_b, 2, 1)?;
    let a2 = tape.gelu(c2);
    let flat = tape.reshape(a2, vec![1, ENCODER_FLAT])?;
    let proj = tape.matmul(flat, nodes.proj_w)?;
    tape.add_row(proj, nodes.proj_b)
}

/// Writes an HWC float block as a binary PPM (P6) image file.
pub fn write_ppm(path: &std::path::Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    use std::io::Write;
    debug_assert_eq!(pixels.len(), width * height * 3);
    let mut buf = Vec::with_capacity(32 + pixels.len());
    buf.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for &v in pixels {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Runs the encoder outside any training graph and returns raw features.
/// Used for gradient-stopped reconstruction targets.
pub fn encode_patch_data(params: &PatchEncoderParams, pixels: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::insert(&mut tape, params);
    let out = encode_patch(&mut tape, &nodes, pixels).expect("encoder shapes are static");
    tape.data(out).to_vec()
}
