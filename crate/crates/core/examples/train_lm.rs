//! Trains a small model on a synthetic Markov repertoire and saves it.
//!
//! cargo run --release --example train_lm -- [out.tcrg]

use tcrgpt::lm::{corpus_nll_per_token, train_with, TrainRunConfig};
use tcrgpt::model::{init, save_checkpoint, ModelConfig};
use tcrgpt::synthetic::MarkovSource;

fn main() -> tcrgpt::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "markov.tcrg".into());
    let source = MarkovSource::cyclic4();
    let corpus = source.repertoire("train", 4_000, 1);
    let held = source.repertoire("held", 1_000, 2);

    let model = ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 64, max_len: 12, ..Default::default() };
    let cfg = TrainRunConfig { epochs: 3, max_len: 12, learning_rate: 3e-3, ..Default::default() };
    let (params, trace) = train_with(&corpus, &cfg, init(model, 0)?, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:>5}  nll/token {loss:.4}");
        }
    })?;

    println!("steps: {}", trace.len());
    println!("held-out nll/token: {:.4}", corpus_nll_per_token(&params, &held)?);
    save_checkpoint(&params, &out)?;
    println!("saved {out}");
    Ok(())
}
