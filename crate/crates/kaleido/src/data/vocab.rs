//! Fixed synthetic vocabulary (~200 words, no subword training).

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::rng::Rng;

pub const ID_CLS: u16 = 0;
pub const ID_SEP: u16 = 1;
pub const ID_MSK: u16 = 2;
pub const ID_PAD: u16 = 3;
pub const ID_UNK: u16 = 4;
pub const RESERVED_TOKENS: u16 = 5;

const RESERVED: [&str; 5] = ["[CLS]", "[SEP]", "[MSK]", "[PAD]", "[UNK]"];

const FUNCTION_WORDS: [&str; 12] =
    ["a", "an", "the", "this", "with", "and", "in", "is", "of", "for", "has", "features"];

const FILLER_ADJECTIVES: [&str; 28] = [
    "stylish", "classic", "modern", "casual", "cozy", "soft", "comfortable", "elegant", "trendy",
    "versatile", "timeless", "relaxed", "sporty", "chic", "refined", "durable", "lightweight",
    "breathable", "premium", "minimalist", "urban", "vintage", "contemporary", "effortless",
    "polished", "sleek", "tailored", "essential",
];

const FILLER_NOUNS: [&str; 22] = [
    "style", "look", "piece", "design", "finish", "detail", "touch", "fit", "cut", "silhouette",
    "wardrobe", "collection", "season", "staple", "comfort", "quality", "edge", "accent", "flair",
    "statement", "appeal", "wear",
];

const FILLER_MATERIALS: [&str; 10] =
    ["cotton", "wool", "denim", "linen", "silk", "jersey", "fleece", "canvas", "twill", "suede"];

const FILLER_MISC: [&str; 45] = [
    "made", "crafted", "designed", "built", "offering", "bringing", "adding", "featuring",
    "finished", "styled", "paired", "worn", "layered", "matched", "one", "two", "three", "four",
    "five", "six", "seven", "eight", "nine", "ten", "small", "medium", "large", "spring",
    "summer", "autumn", "winter", "city", "street", "beach", "office", "studio", "everyday",
    "weekend", "evening", "morning", "outdoor", "indoor", "daily", "favorite", "signature",
];

/// Bijective word/id mapping with fixed reserved ids 0-4.
pub struct Vocabulary {
    words: Vec<&'static str>,
    index: BTreeMap<&'static str, u16>,
}

impl Vocabulary {
    fn build() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        words.extend_from_slice(&RESERVED);
        words.extend(super::CATEGORIES);
        for subs in &super::SUBCATEGORIES {
            words.extend_from_slice(subs);
        }
        words.extend(super::COLORS.iter().map(|(name, _)| *name));
        words.extend(super::TEXTURES);
        words.extend(super::DECORATIONS);
        words.extend(FUNCTION_WORDS);
        words.extend(FILLER_ADJECTIVES);
        words.extend(FILLER_NOUNS);
        words.extend(FILLER_MATERIALS);
        words.extend(FILLER_MISC);

        let mut index = BTreeMap::new();
        for (i, &w) in words.iter().enumerate() {
            let prev = index.insert(w, i as u16);
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u16 {
        *self.index.get(word).unwrap_or(&ID_UNK)
    }

    pub fn word(&self, id: u16) -> &str {
        self.words.get(id as usize).copied().unwrap_or("[UNK]")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn filler_adjective(&self, rng: &mut Rng) -> &'static str {
        FILLER_ADJECTIVES[rng.choose_index(FILLER_ADJECTIVES.len())]
    }

    pub fn filler_noun(&self, rng: &mut Rng) -> &'static str {
        FILLER_NOUNS[rng.choose_index(FILLER_NOUNS.len())]
    }

    pub fn filler_material(&self, rng: &mut Rng) -> &'static str {
        FILLER_MATERIALS[rng.choose_index(FILLER_MATERIALS.len())]
    }
}

/// The fixed shared vocabulary.
pub fn vocab() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(Vocabulary::build)
}
