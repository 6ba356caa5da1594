//! Benchmarks AR against speculative decoding over a depth sweep and writes
//! the CSV report and chart into a temporary directory.

use padrec::bench::{depth_sweep, plot, write_report, BenchConfig};
use padrec::datagen::{Dataset, GenConfig};
use padrec::draft::{AblationMode, DraftModel};
use padrec::target::{TargetConfig, TargetModel};
use padrec::trainer::{collect_features, train_draft, train_target, DraftTrainConfig, TargetTrainConfig, UnrollConfig};

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 100, n_users: 300, ..GenConfig::default() })?;
    let config = TargetConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, ..TargetConfig::small(ds.vocab.size()) };
    let mut target = TargetModel::init(config, 0)?;
    train_target(&mut target, &ds, &TargetTrainConfig { epochs: 3, ..TargetTrainConfig::default() })?;
    let bank = collect_features(&target, &ds, &ds.splits.train)?;
    let mut draft = DraftModel::for_target(&target.config, &ds.vocab, 6, AblationMode::Full, 0)?;
    let cfg = DraftTrainConfig { epochs: 1, val_users: 0, unroll: UnrollConfig { depth_train: 6, ..UnrollConfig::default() }, ..DraftTrainConfig::default() };
    train_draft(&mut draft, &target, &ds, &bank, &cfg)?;

    let bench = BenchConfig { max_users: Some(10), ..BenchConfig::default() };
    let report = depth_sweep(&ds, &target, &draft, &[1, 2, 4, 6], &bench)?;
    let dir = std::env::temp_dir().join("padrec-example-report");
    std::fs::create_dir_all(&dir)?;
    write_report(&report, &dir.join("sweep.csv"))?;
    let charts = plot(&report, &dir)?;
    print!("{}", report.to_csv());
    println!("wrote {} and {} chart(s)", dir.join("sweep.csv").display(), charts.len());
    Ok(())
}
