//! Pairwise divergences between models trained on related repertoires.

use tcrgpt::analysis::divergence_matrix;
use tcrgpt::lm::{train, TrainRunConfig};
use tcrgpt::model::{init, ModelConfig};
use tcrgpt::seqcore::Repertoire;
use tcrgpt::synthetic::MarkovSource;

fn main() -> tcrgpt::Result<()> {
    let model = ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 64, max_len: 12, ..Default::default() };
    let cfg = TrainRunConfig { epochs: 3, max_len: 12, learning_rate: 3e-3, ..Default::default() };

    let base = MarkovSource::cyclic4();
    let mut shifted = base.clone();
    shifted.initial = vec![0.1, 0.1, 0.4, 0.4];
    let mut reversed = base.clone();
    for row in reversed.transition.chunks_mut(4) {
        row.reverse();
    }

    let sources = [("base", &base), ("base2", &base), ("shifted", &shifted), ("reversed", &reversed)];
    let mut labels = Vec::new();
    let mut params = Vec::new();
    let mut evals: Vec<Repertoire> = Vec::new();
    for (i, (name, src)) in sources.iter().enumerate() {
        let corpus = src.repertoire(name, 2_000, 10 + i as u64);
        params.push(train(&corpus, &cfg, init(model, i as u64)?)?.0);
        evals.push(src.repertoire(name, 500, 100 + i as u64));
        labels.push(name.to_string());
    }

    let m = divergence_matrix(&labels, &params, &evals)?;
    print!("{:>10}", "");
    for l in &labels {
        print!("{l:>10}");
    }
    println!();
    for i in 0..m.n() {
        print!("{:>10}", labels[i]);
        for j in 0..m.n() {
            print!("{:>10.4}", m.get(i, j));
        }
        println!();
    }
    Ok(())
}
