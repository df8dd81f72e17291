use kaleido::aag::DEFAULT_TAU;
use kaleido::data::{vocab, ID_MSK};
use kaleido::model::{forward, load_checkpoint};
use kaleido::train::PreparedCorpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let params = load_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let records = kaleido::data::read_corpus(std::path::Path::new(&args[1])).unwrap();
    let corpus = PreparedCorpus::prepare(records, DEFAULT_TAU).unwrap();
    let v = vocab();
    let color_ids: Vec<u16> = kaleido::data::COLORS.iter().map(|(n, _)| v.id(n)).collect();
    let texture_ids: Vec<u16> = kaleido::data::TEXTURES.iter().map(|n| v.id(n)).collect();
    let deco_ids: Vec<u16> = kaleido::data::DECORATIONS.iter().map(|n| v.id(n)).collect();
    let h = params.config.hidden;
    let vs = params.config.vocab_size;

    for (slot, ids) in [("color", &color_ids), ("texture", &texture_ids), ("deco", &deco_ids)] {
      let color_ids = ids;
      for (name, pool) in [("test", &corpus.test_indices)] {
        let mut top1 = 0u32;
        let mut in_color_top1 = 0u32;
        let mut total = 0u32;
        for &idx in pool.iter().take(80) {
            let rec = &corpus.records[idx];
            let Some(pos) = rec.tokens.iter().position(|t| color_ids.contains(t)) else { continue };
            let truth = rec.tokens[pos];
            let mut masked = rec.tokens.clone();
            masked[pos] = ID_MSK;
            let set = corpus.split_record(idx);
            let mut ex = kaleido::agm::assemble_pair(&masked, &set, rec.product_id);
            ex.targets.y_m = 1;
            let fwd = forward(&params, &ex, None).unwrap();
            let hidden = fwd.tape.data(fwd.hidden);
            let row = &hidden[(pos + 1) * h..(pos + 2) * h];
            // amlm head logits
            let mut best = (f64::NEG_INFINITY, 0u16);
            let mut best_color = (f64::NEG_INFINITY, 0u16);
            for j in 0..vs {
                let mut acc = params.amlm_b.data()[j];
                for (k, &x) in row.iter().enumerate() {
                    acc += x * params.amlm_w.data()[k * vs + j];
                }
                if acc > best.0 { best = (acc, j as u16); }
                if color_ids.contains(&(j as u16)) && acc > best_color.0 { best_color = (acc, j as u16); }
            }
            total += 1;
            top1 += (best.1 == truth) as u32;
            in_color_top1 += (best_color.1 == truth) as u32;
        }
        println!("{slot} {name}: masked word top-1 {top1}/{total}; top-1 within slot {in_color_top1}/{total}");
      }
    }
}
