//! Exact probabilities over a restricted alphabet; the total plus the mass
//! beyond the length cap is one.

use tcrgpt::lm::enumerate_probabilities;
use tcrgpt::model::{init, ModelConfig};

fn main() -> tcrgpt::Result<()> {
    let params = init(ModelConfig { max_len: 10, ..Default::default() }, 11)?;
    let e = enumerate_probabilities(&params, &['A', 'C', 'G'], 6)?;

    let mut top = e.log_probs.clone();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (seq, lp) in top.iter().take(5) {
        println!("{:>8}  {:.3e}", if seq.is_empty() { "<empty>" } else { seq.as_str() }, lp.exp());
    }
    println!("sequences:        {}", e.log_probs.len());
    let listed: f64 = e.log_probs.iter().map(|(_, lp)| lp.exp()).sum();
    println!("enumerated mass:  {listed:.9}");
    println!("truncation mass:  {:.9}", e.truncation_mass);
    println!("sum:              {:.12}", e.total());
    Ok(())
}
