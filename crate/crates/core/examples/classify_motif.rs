//! Cross-validated classifier on hidden features: positives carry a
//! planted 3-mer.

use tcrgpt::classify::{extract_features, kfold_cv, ClassifierConfig};
use tcrgpt::lm::{train, TrainRunConfig};
use tcrgpt::model::{init, ModelConfig};
use tcrgpt::seqcore::Repertoire;
use tcrgpt::synthetic::motif_task;

fn main() -> tcrgpt::Result<()> {
    let task = motif_task(300, "SSR", 10, 14, 1)?;
    let model = ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 64, max_len: 16, ..Default::default() };
    let positives = Repertoire::from_sequences("pos", task.iter().filter(|t| t.1).map(|t| t.0.clone()));
    let cfg = TrainRunConfig { epochs: 5, max_len: 16, learning_rate: 3e-3, ..Default::default() };
    let (params, _) = train(&positives, &cfg, init(model, 0)?)?;

    let seqs: Vec<_> = task.iter().map(|t| t.0.clone()).collect();
    let labels: Vec<bool> = task.iter().map(|t| t.1).collect();
    let features = extract_features(&params, &seqs)?;
    println!("feature width {}", features[0].values.len());

    let cls = ClassifierConfig { hidden1: 64, hidden2: 16, epochs: 20, ..Default::default() };
    let report = kfold_cv(&features, &labels, 5, &cls)?;
    for (i, a) in report.fold_aucs.iter().enumerate() {
        println!("fold {i}: auc {a:.4}");
    }
    println!("mean {:.4} ± {:.4}", report.mean_auc, report.std_auc);
    Ok(())
}
