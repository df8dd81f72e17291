use kaleido::aag::DEFAULT_TAU;
use kaleido::agm::assemble_pair;
use kaleido::eval;
use kaleido::model::{itm_score, load_checkpoint};
use kaleido::train::PreparedCorpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let corpus_path = &args[1];
    let ckpt = &args[2];
    let params = load_checkpoint(std::path::Path::new(ckpt)).unwrap();
    let records = kaleido::data::read_corpus(std::path::Path::new(corpus_path)).unwrap();
    let corpus = PreparedCorpus::prepare(records, DEFAULT_TAU).unwrap();

    let acc = eval::itm_accuracy(&params, &corpus, 7).unwrap();
    println!("held-out ITM accuracy: {acc:.4}");

    // attribute discrimination: true caption vs same caption with one
    // attribute word swapped, on train vs test records
    let v = kaleido::data::vocab();
    let color_ids: Vec<u16> =
        kaleido::data::COLORS.iter().map(|(name, _)| v.id(name)).collect();
    for (name, pool) in [("train", &corpus.train_indices), ("test", &corpus.test_indices)] {
        let mut wins = 0;
        let mut total = 0;
        for &idx in pool.iter().take(60) {
            let rec = &corpus.records[idx];
            let set = corpus.split_record(idx);
            let true_score = itm_score(&params, &assemble_pair(&rec.tokens, &set, 0)).unwrap();
            // swap the color word for a different color
            let mut swapped = rec.tokens.clone();
            let mut did = false;
            for t in swapped.iter_mut() {
                if let Some(pos) = color_ids.iter().position(|c| c == t) {
                    *t = color_ids[(pos + 3) % color_ids.len()];
                    did = true;
                    break;
                }
            }
            if !did { continue; }
            let swap_score = itm_score(&params, &assemble_pair(&swapped, &set, 0)).unwrap();
            wins += (true_score > swap_score) as u32;
            total += 1;
            if total <= 3 && name == "test" {
                println!("  sample {name} true {true_score:.4} color-swapped {swap_score:.4}");
            }
        }
        println!("{name}: true caption beats color-swapped caption {wins}/{total}");
    }
}
