use kaleido::aag::DEFAULT_TAU;
use kaleido::agm::assemble_pair;
use kaleido::data::vocab;
use kaleido::model::{forward, load_checkpoint};
use kaleido::train::PreparedCorpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let params = load_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let records = kaleido::data::read_corpus(std::path::Path::new(&args[1])).unwrap();
    let corpus = PreparedCorpus::prepare(records, DEFAULT_TAU).unwrap();
    let v = vocab();
    let color_ids: Vec<u16> = kaleido::data::COLORS.iter().map(|(n, _)| v.id(n)).collect();
    let h = params.config.hidden;

    let mut rel_moves = Vec::new();
    for &idx in corpus.test_indices.iter().take(20) {
        let rec = &corpus.records[idx];
        let Some(pos) = rec.tokens.iter().position(|t| color_ids.contains(t)) else { continue };
        let set = corpus.split_record(idx);
        let cls_of = |tokens: &[u16]| -> Vec<f64> {
            let ex = assemble_pair(tokens, &set, rec.product_id);
            let fwd = forward(&params, &ex, None).unwrap();
            fwd.tape.data(fwd.hidden)[..h].to_vec()
        };
        let base = cls_of(&rec.tokens);
        let mut swapped = rec.tokens.clone();
        let cur = color_ids.iter().position(|&c| c == swapped[pos]).unwrap();
        swapped[pos] = color_ids[(cur + 4) % 8];
        let moved = cls_of(&swapped);
        let norm: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        let delta: f64 = base.iter().zip(&moved).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        rel_moves.push(delta / norm);
    }
    let mean: f64 = rel_moves.iter().sum::<f64>() / rel_moves.len() as f64;
    println!("[CLS] relative movement under color-word swap: mean {mean:.4} over {} records", rel_moves.len());
    // reference: movement under swapping the whole caption for another product's
    let mut cross_moves = Vec::new();
    for w in corpus.test_indices.windows(2).take(10) {
        let (a, b) = (w[0], w[1]);
        let set = corpus.split_record(a);
        let cls_of = |tokens: &[u16]| -> Vec<f64> {
            let ex = assemble_pair(tokens, &set, 0);
            let fwd = forward(&params, &ex, None).unwrap();
            fwd.tape.data(fwd.hidden)[..h].to_vec()
        };
        let base = cls_of(&corpus.records[a].tokens);
        let other = cls_of(&corpus.records[b].tokens);
        let norm: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        let delta: f64 =
            base.iter().zip(&other).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        cross_moves.push(delta / norm);
    }
    let mean2: f64 = cross_moves.iter().sum::<f64>() / cross_moves.len() as f64;
    println!("[CLS] relative movement under full caption swap: mean {mean2:.4}");
}
