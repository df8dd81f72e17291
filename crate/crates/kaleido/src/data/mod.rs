//! Procedural fashion-product corpus: images, templated captions,
//! ground-truth token/region alignments, and category labels.
//!
//! Products are a deterministic function of a seed: an 8-way garment
//! category with a per-category shape template, a subcategory that tweaks
//! proportions, and three visual attributes (color, texture, decoration)
//! each tied to a spatial anchor rectangle. Captions name the category and
//! attributes through a handful of templates padded with non-visual filler
//! words, and every attribute token carries its anchor as a ground-truth
//! alignment.

mod corpus;
mod vocab;

pub use corpus::{read_corpus, write_corpus, CorpusRecord};
pub use vocab::{vocab, Vocabulary, ID_CLS, ID_MSK, ID_PAD, ID_SEP, ID_UNK, RESERVED_TOKENS};

use crate::rng::{mix, Rng};

/// Rendered image side length. Shared by the whole pipeline.
pub const IMG_SIZE: usize = 128;

/// Background color; render keeps it distinct from every garment color.
pub const BACKGROUND: [f32; 3] = [0.82, 0.82, 0.82];

pub const CATEGORIES: [&str; 8] =
    ["hoodie", "tshirt", "sweater", "jacket", "dress", "skirt", "trousers", "shorts"];

/// Three subcategories per category, indexed `category * 3 + k`.
pub const SUBCATEGORIES: [[&str; 3]; 8] = [
    ["zip", "pullover", "cropped"],
    ["crew", "vneck", "longline"],
    ["cable", "knit", "turtleneck"],
    ["bomber", "quilted", "biker"],
    ["maxi", "wrap", "shift"],
    ["mini", "pleated", "aline"],
    ["slim", "wide", "chino"],
    ["cargo", "sport", "bermuda"],
];

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("blue", [0.12, 0.25, 0.85]),
    ("green", [0.10, 0.65, 0.20]),
    ("yellow", [0.92, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.95, 0.50, 0.08]),
    ("pink", [0.95, 0.55, 0.70]),
    ("brown", [0.45, 0.28, 0.12]),
];

pub const TEXTURES: [&str; 4] = ["solid", "striped", "dotted", "checked"];

pub const DECORATIONS: [&str; 4] = ["pocket", "collar", "buttons", "zipper"];

/// Per-decoration fill colors: visually distinctive signatures.
const DECO_COLORS: [[f32; 3]; 4] = [
    [0.05, 0.05, 0.05], // pocket: near-black patch
    [0.98, 0.98, 0.98], // collar: white band
    [0.05, 0.05, 0.05], // buttons: black dots
    [0.98, 0.98, 0.98], // zipper: white line
];
const TEXTURE_DARKEN: f32 = 0.30;

/// Axis-aligned rectangle in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Rect {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= 1.0
            && self.y2 <= 1.0
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

/// Integer pixel rectangle, half-open on both axes.
#[derive(Debug, Clone, Copy)]
struct PixRect {
    x: i32,
    y: i32,
    w: i32,
    h: i32,
}

impl PixRect {
    fn to_norm(self) -> Rect {
        let s = IMG_SIZE as f32;
        Rect {
            x1: self.x as f32 / s,
            y1: self.y as f32 / s,
            x2: (self.x + self.w) as f32 / s,
            y2: (self.y + self.h) as f32 / s,
        }
    }

    fn union(self, other: PixRect) -> PixRect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let x2 = (self.x + self.w).max(other.x + other.w);
        let y2 = (self.y + self.h).max(other.y + other.h);
        PixRect { x, y, w: x2 - x, h: y2 - y }
    }
}

/// Which visual attribute an alignment anchor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrSlot {
    Color,
    Texture,
    Decoration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub slot: AttrSlot,
    /// Index into the slot's value table (COLORS / TEXTURES / DECORATIONS).
    pub value: usize,
    pub anchor: Rect,
}

/// Deterministic description of one product.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductSpec {
    pub seed: u64,
    pub category: u16,
    /// Global subcategory id: `category * 3 + k`.
    pub subcategory: u16,
    pub attributes: Vec<Attribute>,
    /// Anchor used for category/subcategory tokens: the whole object.
    pub object_anchor: Rect,
    pub(crate) dx: i32,
    pub(crate) dy: i32,
    /// Size multiplier in [1.0, 1.10], quantized for reproducibility.
    pub(crate) scale: f64,
}

impl ProductSpec {
    pub fn color(&self) -> usize {
        self.attributes.iter().find(|a| a.slot == AttrSlot::Color).unwrap().value
    }

    pub fn texture(&self) -> usize {
        self.attributes.iter().find(|a| a.slot == AttrSlot::Texture).unwrap().value
    }

    pub fn decoration(&self) -> usize {
        self.attributes.iter().find(|a| a.slot == AttrSlot::Decoration).unwrap().value
    }
}

/// Garment geometry derived from a spec: paint parts plus anchor regions.
struct Layout {
    parts: Vec<Part>,
    color_anchor: PixRect,
    texture_anchor: PixRect,
    deco_rect: PixRect,
    object: PixRect,
}

enum Part {
    Rect(PixRect),
    Disc { cx: i32, cy: i32, r: i32 },
    /// Vertical trapezoid centered at `cx`.
    Trap { cx: i32, y: i32, h: i32, top_w: i32, bot_w: i32 },
}

impl Part {
    fn extent(&self) -> PixRect {
        match *self {
            Part::Rect(r) => r,
            Part::Disc { cx, cy, r } => PixRect { x: cx - r, y: cy - r, w: 2 * r + 1, h: 2 * r + 1 },
            Part::Trap { cx, y, h, top_w, bot_w } => {
                let w = top_w.max(bot_w);
                PixRect { x: cx - w / 2, y, w, h }
            }
        }
    }
}

fn layout(spec: &ProductSpec) -> Layout {
    let s = spec.scale;
    let sc = |v: i32| -> i32 { (v as f64 * s).round() as i32 };
    let cx = 64 + spec.dx;
    let dy = spec.dy;
    let sub = (spec.subcategory % 3) as i32;

    let mut parts = Vec::new();
    // Torso rectangle: present in every category; trapezoid categories
    // use it as the logical body for anchor placement.
    let body: PixRect;

    match spec.category {
        // hoodie: torso + long sleeves + hood disc
        0 => {
            let th = sc(56 - if sub == 2 { 8 } else { 0 });
            let tw = sc(52 + if sub == 1 { 4 } else { 0 });
            body = PixRect { x: cx - tw / 2, y: 40 + dy, w: tw, h: th };
            parts.push(Part::Disc { cx, cy: 36 + dy, r: sc(16) });
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x - sc(12), y: body.y + 2, w: sc(12), h: sc(44) }));
            parts.push(Part::Rect(PixRect { x: body.x + tw, y: body.y + 2, w: sc(12), h: sc(44) }));
        }
        // tshirt: torso + short sleeves
        1 => {
            let th = sc(60 + if sub == 2 { 6 } else { 0 });
            let tw = sc(54);
            body = PixRect { x: cx - tw / 2, y: 36 + dy, w: tw, h: th };
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x - sc(15), y: body.y, w: sc(15), h: sc(20) }));
            parts.push(Part::Rect(PixRect { x: body.x + tw, y: body.y, w: sc(15), h: sc(20) }));
        }
        // sweater: wide torso + long sleeves
        2 => {
            let tw = sc(54 + if sub == 0 { 4 } else { 0 });
            let th = sc(56);
            body = PixRect { x: cx - tw / 2, y: 38 + dy, w: tw, h: th };
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x - sc(14), y: body.y + 2, w: sc(14), h: sc(48) }));
            parts.push(Part::Rect(PixRect { x: body.x + tw, y: body.y + 2, w: sc(14), h: sc(48) }));
        }
        // jacket: boxy torso + sleeves
        3 => {
            let tw = sc(56);
            let th = sc(58 - if sub == 2 { 6 } else { 0 });
            body = PixRect { x: cx - tw / 2, y: 36 + dy, w: tw, h: th };
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x - sc(14), y: body.y + 2, w: sc(14), h: sc(50) }));
            parts.push(Part::Rect(PixRect { x: body.x + tw, y: body.y + 2, w: sc(14), h: sc(50) }));
        }
        // dress: flared trapezoid + small sleeves
        4 => {
            let h = sc(76 + if sub == 0 { 6 } else { 0 });
            let top_w = sc(40);
            let bot_w = sc(74);
            let y = 28 + dy;
            parts.push(Part::Trap { cx, y, h, top_w, bot_w });
            parts.push(Part::Rect(PixRect { x: cx - top_w / 2 - sc(10), y, w: sc(10), h: sc(16) }));
            parts.push(Part::Rect(PixRect { x: cx + top_w - top_w / 2, y, w: sc(10), h: sc(16) }));
            body = PixRect { x: cx - top_w / 2, y, w: top_w, h };
        }
        // skirt: waistband + trapezoid
        5 => {
            let h = sc(62 + if sub == 0 { -8 } else { 0 });
            let top_w = sc(46);
            let bot_w = sc(84 + if sub == 1 { 6 } else { 0 });
            let y = 40 + dy;
            parts.push(Part::Rect(PixRect { x: cx - top_w / 2, y: y - sc(10), w: top_w, h: sc(10) }));
            parts.push(Part::Trap { cx, y, h, top_w, bot_w });
            body = PixRect { x: cx - top_w / 2, y, w: top_w, h };
        }
        // trousers: waist + two legs
        6 => {
            let leg_w = sc(23 + if sub == 1 { 3 } else { 0 });
            let leg_h = sc(74);
            let gap = sc(6);
            let waist_w = 2 * leg_w + gap;
            let y = 28 + dy;
            body = PixRect { x: cx - waist_w / 2, y, w: waist_w, h: sc(14) };
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x, y: y + sc(14), w: leg_w, h: leg_h }));
            parts.push(Part::Rect(PixRect {
                x: body.x + waist_w - leg_w,
                y: y + sc(14),
                w: leg_w,
                h: leg_h,
            }));
        }
        // shorts: waist + two wide legs
        _ => {
            let leg_w = sc(29);
            let leg_h = sc(54 - if sub == 1 { 8 } else { 0 });
            let gap = sc(4);
            let waist_w = 2 * leg_w + gap;
            let y = 36 + dy;
            body = PixRect { x: cx - waist_w / 2, y, w: waist_w, h: sc(16) };
            parts.push(Part::Rect(body));
            parts.push(Part::Rect(PixRect { x: body.x, y: y + sc(16), w: leg_w, h: leg_h }));
            parts.push(Part::Rect(PixRect {
                x: body.x + waist_w - leg_w,
                y: y + sc(16),
                w: leg_w,
                h: leg_h,
            }));
        }
    }

    let object = parts.iter().map(Part::extent).reduce(PixRect::union).unwrap();

    // Anchors: compact swatches inside the torso (color above, texture
    // below) so attribute attention concentrates on few kaleido patches.
    // For leg garments the torso is short, so swatches sit on the legs.
    let legwear = spec.category >= 6;
    let (swatch_base, swatch_h) = if legwear {
        let first_leg = parts[1].extent();
        (first_leg, first_leg.h / 3)
    } else {
        (body, body.h / 3)
    };
    let inset_x = swatch_base.w / 6;
    let color_anchor = PixRect {
        x: swatch_base.x + inset_x,
        y: swatch_base.y + swatch_h / 4,
        w: swatch_base.w - 2 * inset_x,
        h: swatch_h,
    };
    let texture_anchor = PixRect {
        x: swatch_base.x + inset_x,
        y: color_anchor.y + swatch_h + 2,
        w: swatch_base.w - 2 * inset_x,
        h: swatch_h,
    };

    // Decoration rectangle depends on the decoration kind. Shapes are
    // bold enough to survive resampling to 16x16 patch blocks.
    let deco = spec.decoration();
    let deco_rect = match deco {
        // pocket: patch low on the body
        0 => PixRect {
            x: body.x + body.w / 8,
            y: body.y + body.h - body.h / 3,
            w: (2 * body.w / 5).max(10),
            h: (body.h / 4).max(8),
        },
        // collar: band along the top edge
        1 => PixRect { x: body.x + body.w / 6, y: body.y, w: 2 * body.w / 3, h: 9 },
        // buttons: dotted strip down the middle
        2 => PixRect { x: body.x + body.w / 2 - 4, y: body.y + 4, w: 9, h: (4 * body.h / 5).max(16) },
        // zipper: full-height line
        _ => PixRect { x: body.x + body.w / 2 - 3, y: body.y, w: 7, h: body.h },
    };

    Layout { parts, color_anchor, texture_anchor, deco_rect, object }
}

/// Builds a product deterministically from a seed.
pub fn generate_product(seed: u64) -> ProductSpec {
    let mut rng = Rng::new(mix(seed, 0x5EED));
    let category = rng.gen_range(8) as u16;
    let subcategory = category * 3 + rng.gen_range(3) as u16;
    let color = rng.gen_range(8) as usize;
    let texture = rng.gen_range(4) as usize;
    let decoration = rng.gen_range(4) as usize;
    let dx = rng.gen_range(11) as i32 - 5;
    let dy = rng.gen_range(9) as i32 - 4;
    let scale = 1.0 + rng.gen_range(11) as f64 * 0.01;

    let mut spec = ProductSpec {
        seed,
        category,
        subcategory,
        attributes: vec![
            Attribute { slot: AttrSlot::Color, value: color, anchor: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 } },
            Attribute { slot: AttrSlot::Texture, value: texture, anchor: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 } },
            Attribute { slot: AttrSlot::Decoration, value: decoration, anchor: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 } },
        ],
        object_anchor: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 },
        dx,
        dy,
        scale,
    };
    let lay = layout(&spec);
    spec.attributes[0].anchor = lay.color_anchor.to_norm();
    spec.attributes[1].anchor = lay.texture_anchor.to_norm();
    spec.attributes[2].anchor = lay.deco_rect.to_norm();
    spec.object_anchor = lay.object.to_norm();
    debug_assert!(spec.attributes.iter().all(|a| a.anchor.is_valid()));
    spec
}

struct Canvas {
    px: Vec<f32>,
}

impl Canvas {
    fn new() -> Self {
        let mut px = vec![0.0f32; IMG_SIZE * IMG_SIZE * 3];
        for p in px.chunks_exact_mut(3) {
            p.copy_from_slice(&BACKGROUND);
        }
        Canvas { px }
    }

    #[inline]
    fn put(&mut self, x: i32, y: i32, c: [f32; 3]) {
        if x < 0 || y < 0 || x >= IMG_SIZE as i32 || y >= IMG_SIZE as i32 {
            return;
        }
        let i = (y as usize * IMG_SIZE + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn fill_rect(&mut self, r: PixRect, c: [f32; 3]) {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                self.put(x, y, c);
            }
        }
    }

    fn fill_disc(&mut self, cx: i32, cy: i32, rad: i32, c: [f32; 3]) {
        for y in cy - rad..=cy + rad {
            for x in cx - rad..=cx + rad {
                let dx = x - cx;
                let dy = y - cy;
                if dx * dx + dy * dy <= rad * rad {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn fill_trap(&mut self, cx: i32, y0: i32, h: i32, top_w: i32, bot_w: i32, c: [f32; 3]) {
        for row in 0..h {
            // integer row interpolation keeps rendering platform-independent
            let w = top_w + ((bot_w - top_w) * row) / (h - 1).max(1);
            let x0 = cx - w / 2;
            for x in x0..x0 + w {
                self.put(x, row + y0, c);
            }
        }
    }
}

/// Renders the spec to a 128x128x3 image, values in [0,1].
pub fn render_image(spec: &ProductSpec) -> Vec<f32> {
    let lay = layout(spec);
    let mut canvas = Canvas::new();
    let color = COLORS[spec.color()].1;
    for part in &lay.parts {
        match *part {
            Part::Rect(r) => canvas.fill_rect(r, color),
            Part::Disc { cx, cy, r } => canvas.fill_disc(cx, cy, r, color),
            Part::Trap { cx, y, h, top_w, bot_w } => canvas.fill_trap(cx, y, h, top_w, bot_w, color),
        }
    }

    // Texture pattern over the whole garment: repaint base-color pixels
    // inside the object extent, with the pattern phase anchored to the
    // object origin so it shifts with the garment.
    let dark = [color[0] * TEXTURE_DARKEN, color[1] * TEXTURE_DARKEN, color[2] * TEXTURE_DARKEN];
    if spec.texture() != 0 {
        let o = lay.object;
        for y in o.y..o.y + o.h {
            for x in o.x..o.x + o.w {
                if x < 0 || y < 0 || x >= IMG_SIZE as i32 || y >= IMG_SIZE as i32 {
                    continue;
                }
                let i = (y as usize * IMG_SIZE + x as usize) * 3;
                if canvas.px[i..i + 3] != color {
                    continue;
                }
                let (u, v) = ((x - o.x), (y - o.y));
                let hit = match spec.texture() {
                    1 => (v / 6) % 2 == 0,
                    2 => v % 9 < 4 && u % 9 < 4,
                    3 => ((u / 7) + (v / 7)) % 2 == 0,
                    _ => false,
                };
                if hit {
                    canvas.put(x, y, dark);
                }
            }
        }
    }

    // Decoration in a fixed dark tone.
    let d = lay.deco_rect;
    let deco_color = DECO_COLORS[spec.decoration()];
    match spec.decoration() {
        2 => {
            // buttons: dots down the strip
            let n = (d.h / 14).max(2);
            for k in 0..n {
                let cy = d.y + 4 + k * (d.h - 8) / (n - 1).max(1);
                canvas.fill_disc(d.x + d.w / 2, cy, 3, deco_color);
            }
        }
        _ => canvas.fill_rect(d, deco_color),
    }

    canvas.px
}

/// Templated caption: token ids plus (token index, anchor) alignments for
/// the category, subcategory, and attribute words.
pub fn render_caption(spec: &ProductSpec) -> (Vec<u16>, Vec<(u16, Rect)>) {
    let v = vocab();
    let mut rng = Rng::new(mix(spec.seed, 0xCA9));
    let color_word = COLORS[spec.color()].0;
    let texture_word = TEXTURES[spec.texture()];
    let deco_word = DECORATIONS[spec.decoration()];
    let cat_word = CATEGORIES[spec.category as usize];
    let sub_word = SUBCATEGORIES[spec.category as usize][(spec.subcategory % 3) as usize];
    let adj = v.filler_adjective(&mut rng);
    let adj2 = v.filler_adjective(&mut rng);
    let noun = v.filler_noun(&mut rng);
    let material = v.filler_material(&mut rng);

    let color_anchor = spec.attributes[0].anchor;
    let texture_anchor = spec.attributes[1].anchor;
    let deco_anchor = spec.attributes[2].anchor;
    let obj = spec.object_anchor;

    // Each template slot is (word, optional anchor).
    type Slot<'a> = (&'a str, Option<Rect>);
    let template: Vec<Slot> = match rng.gen_range(4) {
        0 => vec![
            ("a", None),
            (color_word, Some(color_anchor)),
            (texture_word, Some(texture_anchor)),
            (sub_word, Some(obj)),
            (cat_word, Some(obj)),
            ("with", None),
            (deco_word, Some(deco_anchor)),
        ],
        1 => vec![
            ("this", None),
            (adj, None),
            (cat_word, Some(obj)),
            ("is", None),
            (color_word, Some(color_anchor)),
            ("and", None),
            (texture_word, Some(texture_anchor)),
            ("with", None),
            (deco_word, Some(deco_anchor)),
            ("detail", None),
        ],
        2 => vec![
            (adj, None),
            (color_word, Some(color_anchor)),
            (sub_word, Some(obj)),
            (cat_word, Some(obj)),
            ("in", None),
            (texture_word, Some(texture_anchor)),
            (material, None),
            ("with", None),
            (deco_word, Some(deco_anchor)),
            ("accent", None),
        ],
        _ => vec![
            ("the", None),
            (color_word, Some(color_anchor)),
            (cat_word, Some(obj)),
            ("features", None),
            ("a", None),
            (texture_word, Some(texture_anchor)),
            ("finish", None),
            ("and", None),
            (deco_word, Some(deco_anchor)),
            ("for", None),
            (adj2, None),
            (noun, None),
        ],
    };

    let mut tokens = Vec::with_capacity(template.len());
    let mut alignments = Vec::new();
    for (i, (word, anchor)) in template.iter().enumerate() {
        tokens.push(v.id(word));
        if let Some(r) = anchor {
            alignments.push((i as u16, *r));
        }
    }
    debug_assert!(tokens.len() <= 24);
    (tokens, alignments)
}

/// Builds corpus record `index` under `global_seed`. The per-record stream
/// is `mix(global_seed, index)`, so records are independent and the whole
/// corpus can be generated in parallel.
pub fn generate_record(global_seed: u64, index: u64) -> CorpusRecord {
    let spec = generate_product(mix(global_seed, index));
    let image = render_image(&spec);
    let (tokens, alignments) = render_caption(&spec);
    CorpusRecord {
        product_id: index,
        height: IMG_SIZE as u32,
        width: IMG_SIZE as u32,
        image,
        tokens,
        alignments,
        category: spec.category,
        subcategory: spec.subcategory,
    }
}

pub fn generate_corpus(global_seed: u64, count: usize) -> Vec<CorpusRecord> {
    crate::exec::map_indexed(count, |i| generate_record(global_seed, i as u64))
}

/// Hash-based 90/10 split on product id; stable across corpora.
pub fn is_test_product(product_id: u64) -> bool {
    mix(0x5917_C0DE, product_id) % 10 == 9
}

#[cfg(test)]
mod tests;

/// The semantic content of a record: everything that identifies the
/// product apart from its incidental rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductSemantics {
    pub category: u16,
    pub subcategory: u16,
    pub color: usize,
    pub texture: usize,
    pub decoration: usize,
}

/// Recovers the semantic fields from a record's labels and caption.
/// Returns None when the caption does not name all three attributes.
pub fn record_semantics(record: &CorpusRecord) -> Option<ProductSemantics> {
    let v = vocab();
    if record.category as usize >= CATEGORIES.len()
        || record.subcategory as usize >= CATEGORIES.len() * 3
    {
        return None;
    }
    let find = |words: &[&str]| -> Option<usize> {
        record
            .tokens
            .iter()
            .find_map(|&t| words.iter().position(|w| v.id(w) == t))
    };
    let color = find(&COLORS.map(|(name, _)| name))?;
    let texture = find(&TEXTURES)?;
    let decoration = find(&DECORATIONS)?;
    Some(ProductSemantics {
        category: record.category,
        subcategory: record.subcategory,
        color,
        texture,
        decoration,
    })
}

/// A caption for the given semantics with template and fillers drawn
/// from `seed`; no image is rendered.
pub fn synthesize_caption(sem: &ProductSemantics, seed: u64) -> Vec<u16> {
    let spec = pinned_spec(sem, seed);
    render_caption(&spec).0
}

fn pinned_spec(sem: &ProductSemantics, seed: u64) -> ProductSpec {
    let mut spec = generate_product(mix(seed, 0x71E3));
    spec.category = sem.category;
    spec.subcategory = sem.subcategory;
    spec.attributes[0].value = sem.color;
    spec.attributes[1].value = sem.texture;
    spec.attributes[2].value = sem.decoration;
    let lay = layout(&spec);
    spec.attributes[0].anchor = lay.color_anchor.to_norm();
    spec.attributes[1].anchor = lay.texture_anchor.to_norm();
    spec.attributes[2].anchor = lay.deco_rect.to_norm();
    spec.object_anchor = lay.object.to_norm();
    spec.seed = mix(seed, 0x71E3);
    spec
}

/// Renders a fresh view of the same product: identical semantics, new
/// geometry jitter, new caption template and filler words. Deterministic
/// in `view_seed`. Training uses this so image-text matching cannot be
/// solved by memorizing one fixed rendering per product.
pub fn synthesize_view(record: &CorpusRecord, view_seed: u64) -> Option<CorpusRecord> {
    let sem = record_semantics(record)?;
    let spec = pinned_spec(&sem, view_seed);
    let image = render_image(&spec);
    let (tokens, alignments) = render_caption(&spec);
    Some(CorpusRecord {
        product_id: record.product_id,
        height: IMG_SIZE as u32,
        width: IMG_SIZE as u32,
        image,
        tokens,
        alignments,
        category: sem.category,
        subcategory: sem.subcategory,
    })
}

/// Caption position of the word where `flipped` departs from `sem`.
pub fn flipped_position(
    sem: &ProductSemantics,
    flipped: &ProductSemantics,
    tokens: &[u16],
) -> Option<usize> {
    let v = vocab();
    let word = if flipped.color != sem.color {
        COLORS[flipped.color].0
    } else if flipped.texture != sem.texture {
        TEXTURES[flipped.texture]
    } else if flipped.decoration != sem.decoration {
        DECORATIONS[flipped.decoration]
    } else if flipped.subcategory != sem.subcategory {
        SUBCATEGORIES[(flipped.subcategory / 3) as usize][(flipped.subcategory % 3) as usize]
    } else {
        return None;
    };
    let id = v.id(word);
    tokens.iter().position(|&t| t == id)
}
