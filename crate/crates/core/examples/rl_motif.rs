//! PPO fine-tuning toward sequences that contain the peptide's central
//! 3-mer.

use tcrgpt::lm::{train, TrainRunConfig};
use tcrgpt::model::{init, ModelConfig};
use tcrgpt::rl::{CriticParams, MotifReward, Peptide, PpoConfig, PpoTrainer};
use tcrgpt::synthetic::MarkovSource;

fn main() -> tcrgpt::Result<()> {
    let corpus = MarkovSource::cyclic4().repertoire("train", 2_000, 1);
    let model = ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 64, max_len: 12, ..Default::default() };
    let cfg = TrainRunConfig { epochs: 3, max_len: 12, learning_rate: 3e-3, ..Default::default() };
    let (actor, _) = train(&corpus, &cfg, init(model, 0)?)?;

    let peptide = Peptide::new("GILGGGVFT")?;
    let reward = MotifReward::from_peptide(&peptide, 3)?;
    let ppo = PpoConfig {
        iterations: 30,
        batch_size: 128,
        minibatch_size: 64,
        actor_lr: 1e-3,
        eval_samples: 500,
        max_len: 12,
        ..Default::default()
    };
    let critic = CriticParams::from_actor(&actor, 0);
    let mut trainer = PpoTrainer::new(actor, critic, ppo)?;
    let before = trainer.evaluate(&reward, &peptide, 1_000, 99)?;
    trainer.run(&reward, &peptide, |r| {
        println!(
            "iter {:>3}  binding {:.3}  reward {:.3}  clipped {:.3}  critic {:.4}",
            r.iteration, r.binding_pct, r.mean_reward, r.clip_fraction, r.critic_loss
        )
    })?;
    let after = trainer.evaluate(&reward, &peptide, 1_000, 99)?;
    println!("binding before {before:.3}, after {after:.3}");
    Ok(())
}
