//! Trains a small target model on response tokens and prints its loss curve.

use padrec::datagen::{Dataset, GenConfig};
use padrec::target::{TargetConfig, TargetModel};
use padrec::trainer::{train_target, TargetTrainConfig};

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 100, n_users: 200, ..GenConfig::default() })?;
    let config = TargetConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, ..TargetConfig::small(ds.vocab.size()) };
    let mut target = TargetModel::init(config, 0)?;
    println!("{} parameters, uniform loss would be {:.3}", target.param_count(), (ds.vocab.size() as f64).ln());
    let report = train_target(&mut target, &ds, &TargetTrainConfig { epochs: 3, ..TargetTrainConfig::default() })?;
    print!("{}", report.to_csv());
    Ok(())
}
