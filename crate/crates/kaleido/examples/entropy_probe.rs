fn main() {
    let mut rng = kaleido::rng::Rng::new(7);
    let params = kaleido::kpg::PatchEncoderParams::init(64, &mut rng);
    let rec = kaleido::data::generate_record(20, 3);
    let set = kaleido::kpg::split_image(&rec.image, 128, 128).unwrap();
    for id in [0usize, 14, 30, 40, 54] {
        let feats = kaleido::kpg::encode_patch_data(&params, &set.patches[id].pixels);
        let mx = feats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = feats.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let spread = feats.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - feats.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("patch {id:2}: feature spread {spread:.3}, target entropy {entropy:.3} (uniform would be {:.3})", 64.0f64.ln());
    }
}
