use super::*;
use std::collections::BTreeSet;

#[test]
fn vocabulary_reserved_ids_and_bijection() {
    let v = vocab();
    assert_eq!(v.id("[CLS]"), ID_CLS);
    assert_eq!(v.id("[SEP]"), ID_SEP);
    assert_eq!(v.id("[MSK]"), ID_MSK);
    assert_eq!(v.id("[PAD]"), ID_PAD);
    assert_eq!(v.id("[UNK]"), ID_UNK);
    // bijective over the whole table
    let mut seen = BTreeSet::new();
    for id in 0..v.len() as u16 {
        let w = v.word(id).to_string();
        assert_eq!(v.id(&w), id);
        assert!(seen.insert(w));
    }
    assert!((150..=250).contains(&v.len()), "vocab size {}", v.len());
}

#[test]
fn product_is_deterministic() {
    assert_eq!(generate_product(0), generate_product(0));
    assert_eq!(generate_product(981), generate_product(981));
}

#[test]
fn categories_roughly_uniform_over_many_seeds() {
    let mut counts = [0u32; 8];
    for seed in 0..10_000u64 {
        counts[generate_product(seed).category as usize] += 1;
    }
    let expect = 10_000.0 / 8.0;
    for (cat, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - expect).abs() / expect;
        assert!(dev < 0.30, "category {cat} count {c} deviates {dev:.2}");
    }
}

#[test]
fn distinct_seeds_give_distinct_specs() {
    let mut same = 0;
    for i in 0..1000u64 {
        let a = generate_product(2 * i + 1);
        let b = generate_product(2 * i + 2);
        if a.category == b.category
            && a.subcategory == b.subcategory
            && a.attributes == b.attributes
        {
            same += 1;
        }
    }
    assert!(same < 10, "{same}/1000 spec pairs collided");
}

#[test]
fn anchors_are_valid_and_inside_object() {
    for seed in 0..500u64 {
        let spec = generate_product(seed);
        assert!(spec.object_anchor.is_valid());
        for attr in &spec.attributes {
            assert!(attr.anchor.is_valid(), "seed {seed}: {attr:?}");
            assert!(
                attr.anchor.intersects(&spec.object_anchor),
                "seed {seed}: anchor outside object"
            );
        }
    }
}

#[test]
fn corners_are_exact_background() {
    for seed in 0..100u64 {
        let img = render_image(&generate_product(seed));
        let n = IMG_SIZE;
        for (x, y) in [(0, 0), (n - 1, 0), (0, n - 1), (n - 1, n - 1)] {
            let i = (y * n + x) * 3;
            assert_eq!(&img[i..i + 3], &BACKGROUND, "corner ({x},{y}) not background");
        }
    }
}

#[test]
fn solid_products_show_enough_of_their_color() {
    // Every category/subcategory must expose >= 20% of pixels near the
    // garment color when the texture is solid.
    let mut checked = vec![false; 24];
    for seed in 0..4000u64 {
        let spec = generate_product(seed);
        if spec.texture() != 0 {
            continue;
        }
        let slot = spec.subcategory as usize;
        if checked[slot] {
            continue;
        }
        checked[slot] = true;
        let img = render_image(&spec);
        let target = COLORS[spec.color()].1;
        let near = img
            .chunks_exact(3)
            .filter(|px| {
                let d2 = (px[0] - target[0]).powi(2)
                    + (px[1] - target[1]).powi(2)
                    + (px[2] - target[2]).powi(2);
                d2.sqrt() < 0.1
            })
            .count();
        let frac = near as f64 / (IMG_SIZE * IMG_SIZE) as f64;
        assert!(frac >= 0.20, "subcategory {slot}: only {frac:.3} of pixels near color");
    }
    assert!(checked.iter().all(|&c| c), "not all subcategories sampled");
}

#[test]
fn render_is_bit_identical() {
    let spec = generate_product(77);
    let a = render_image(&spec);
    let b = render_image(&spec);
    assert_eq!(a, b);
}

#[test]
fn caption_names_category_and_attributes_with_anchors() {
    let v = vocab();
    for seed in 0..200u64 {
        let spec = generate_product(seed);
        let (tokens, aligns) = render_caption(&spec);
        assert!(tokens.len() <= 24);
        let words: Vec<&str> = tokens.iter().map(|&t| v.word(t)).collect();
        let color_word = COLORS[spec.color()].0;
        let cat_word = CATEGORIES[spec.category as usize];
        let color_pos = words.iter().position(|&w| w == color_word).unwrap();
        let cat_pos = words.iter().position(|&w| w == cat_word).unwrap();
        // both carry a nonempty alignment rectangle
        for pos in [color_pos, cat_pos] {
            let rect = aligns.iter().find(|(i, _)| *i as usize == pos).map(|(_, r)| r);
            let rect = rect.unwrap_or_else(|| panic!("seed {seed}: no alignment at {pos}"));
            assert!(rect.area() > 0.0);
        }
        // color token's rectangle equals the spec anchor exactly
        let (_, color_rect) =
            aligns.iter().find(|(i, _)| *i as usize == color_pos).unwrap();
        assert_eq!(*color_rect, spec.attributes[0].anchor);
    }
}

#[test]
fn function_words_have_no_alignment() {
    for seed in 0..200u64 {
        let spec = generate_product(seed);
        let (tokens, aligns) = render_caption(&spec);
        let v = vocab();
        let aligned: BTreeSet<u16> = aligns.iter().map(|(i, _)| *i).collect();
        for (i, &t) in tokens.iter().enumerate() {
            let w = v.word(t);
            if ["a", "an", "the", "with", "and", "in", "is", "of", "for", "this"].contains(&w) {
                assert!(!aligned.contains(&(i as u16)), "seed {seed}: '{w}' aligned");
            }
        }
    }
}

#[test]
fn every_attribute_token_aligned_once_each() {
    for seed in 0..300u64 {
        let spec = generate_product(seed);
        let (_, aligns) = render_caption(&spec);
        let mut counts = std::collections::BTreeMap::new();
        for (i, _) in &aligns {
            *counts.entry(*i).or_insert(0u32) += 1;
        }
        assert!(counts.values().all(|&c| c == 1), "seed {seed}: duplicate alignment");
    }
}

#[test]
fn corpus_roundtrip_is_lossless() {
    let dir = std::env::temp_dir().join("kaleido_corpus_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("roundtrip.kbc");
    let records = generate_corpus(123, 100);
    write_corpus(&records, &path).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(records, back);
    // byte-identical on rewrite
    let path2 = dir.join("roundtrip2.kbc");
    write_corpus(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn empty_corpus_roundtrips() {
    let dir = std::env::temp_dir().join("kaleido_corpus_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("empty.kbc");
    write_corpus(&[], &path).unwrap();
    assert!(read_corpus(&path).unwrap().is_empty());
}

#[test]
fn flipped_magic_is_rejected() {
    let dir = std::env::temp_dir().join("kaleido_corpus_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("badmagic.kbc");
    write_corpus(&generate_corpus(5, 2), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    match read_corpus(&path) {
        Err(crate::KbError::Format { .. }) => {}
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn truncated_file_reports_record_index() {
    let dir = std::env::temp_dir().join("kaleido_corpus_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("truncated.kbc");
    write_corpus(&generate_corpus(6, 3), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match read_corpus(&path) {
        Err(crate::KbError::Format { record: Some(2), .. }) => {}
        other => panic!("expected format error at record 2, got {other:?}"),
    }
}

#[test]
fn corpus_generation_is_deterministic_and_parallel_safe() {
    let a = generate_corpus(42, 64);
    let b = generate_corpus(42, 64);
    assert_eq!(a, b);
    let seq: Vec<CorpusRecord> =
        crate::exec::map_indexed_seq(64, |i| generate_record(42, i as u64));
    assert_eq!(a, seq);
}

#[test]
fn split_is_disjoint_and_roughly_ten_percent() {
    let test_count = (0..10_000u64).filter(|&id| is_test_product(id)).count();
    assert!((800..1200).contains(&test_count), "test fraction off: {test_count}");
}
