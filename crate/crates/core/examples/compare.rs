//! Inferred versus true probabilities on a synthetic source with a known
//! distribution.

use tcrgpt::analysis::{concordance, model_vs_data_divergence, pearson};
use tcrgpt::lm::{log_probs, train, TrainRunConfig};
use tcrgpt::model::{init, ModelConfig};
use tcrgpt::synthetic::MarkovSource;

fn main() -> tcrgpt::Result<()> {
    let source = MarkovSource::cyclic4();
    let corpus = source.repertoire("train", 5_000, 1);
    let test = source.repertoire("test", 2_000, 2);
    let model = ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 64, max_len: 12, ..Default::default() };
    let cfg = TrainRunConfig { epochs: 4, max_len: 12, learning_rate: 3e-3, ..Default::default() };
    let (params, _) = train(&corpus, &cfg, init(model, 0)?)?;

    let support: Vec<_> = source.support().into_iter().filter(|s| s.1 >= 1e-6).collect();
    let seqs: Vec<_> = support.iter().map(|s| s.0.clone()).collect();
    let inferred = log_probs(&params, &seqs)?;
    let truth: Vec<f64> = support.iter().map(|s| s.1.ln()).collect();
    println!("pearson vs truth ({} seqs): {:.4}", seqs.len(), pearson(&inferred, &truth)?);

    let c = concordance(&params, &test, 2)?;
    println!("pearson vs test frequencies: {:.4}", c.pearson_log10);
    println!("d_js model vs test: {:.4}", model_vs_data_divergence(&params, &test)?);
    Ok(())
}
