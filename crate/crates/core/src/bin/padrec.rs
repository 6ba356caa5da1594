use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use padrec::bench::{depth_sweep, plot, read_report, run_benchmark, write_report, BenchConfig, GridPoint};
use padrec::datagen::{Dataset, GenConfig, SequenceConfig};
use padrec::draft::{AblationMode, DraftModel};
use padrec::target::{TargetConfig, TargetModel};
use padrec::trainer::{collect_features, train_draft, train_target, DraftTrainConfig, TargetTrainConfig, UnrollConfig};
use padrec::Result;

#[derive(Parser)]
#[command(name = "padrec", version, about = "Speculative decoding for semantic-ID recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Small,
    Large,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, user sequences and splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        codebook: usize,
        #[arg(long, default_value_t = 16)]
        ctx_words: usize,
    },
    /// Train the target model on response tokens.
    TrainTarget {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "small")]
        size: Size,
    },
    /// Train the draft model against a frozen target.
    TrainDraft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        depth_train: usize,
        #[arg(long, default_value_t = 8)]
        topk_aux: usize,
        #[arg(long, default_value_t = 1.0)]
        aux_weight: f64,
        #[arg(long, default_value = "full")]
        ablation: AblationMode,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Compare autoregressive and speculative decoding on the test split.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 10)]
        width: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Leave wall-clock columns empty so the report is reproducible.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        max_users: Option<usize>,
    },
    /// Benchmark greedy decoding over several speculation depths.
    SweepDepth {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10,12")]
        depths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        max_users: Option<usize>,
    },
    /// Render charts from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seed, items, users, k, codebook, ctx_words } => {
            let cfg = GenConfig { seed, n_items: items, n_users: users, levels: k, codebook, n_ctx: ctx_words, sequences: SequenceConfig::default() };
            let ds = Dataset::generate(&cfg)?;
            ds.write(&out)?;
            eprintln!("wrote {} users over {} items to {}", ds.users.len(), ds.catalog.len(), out.display());
        }
        Command::TrainTarget { data, out, epochs, lr, batch, seed, size } => {
            let ds = Dataset::read(&data)?;
            let config = match size {
                Size::Small => TargetConfig::small(ds.vocab.size()),
                Size::Large => TargetConfig::large(ds.vocab.size()),
            };
            let mut model = TargetModel::init(config, seed)?;
            let report = train_target(&mut model, &ds, &TargetTrainConfig { epochs, lr, batch, seed })?;
            model.save(&out)?;
            fs::write(log_path(&out), report.to_csv())?;
            if let Some(last) = report.epochs.last() {
                eprintln!("validation loss {:.4} -> {:.4}", report.init_val_loss, last.val_loss);
            }
        }
        Command::TrainDraft { data, target, out, depth_train, topk_aux, aux_weight, ablation, lr, seed, epochs, batch } => {
            let ds = Dataset::read(&data)?;
            let target = TargetModel::load(&target)?;
            let mut draft = DraftModel::for_target(&target.config, &ds.vocab, depth_train, ablation, seed)?;
            let mut users = ds.splits.train.clone();
            users.extend(&ds.splits.valid);
            let bank = collect_features(&target, &ds, &users)?;
            let cfg = DraftTrainConfig {
                epochs,
                lr,
                batch,
                unroll: UnrollConfig { depth_train, topk_aux, aux_weight },
                seed,
                ..DraftTrainConfig::default()
            };
            let report = train_draft(&mut draft, &target, &ds, &bank, &cfg)?;
            draft.save(&out)?;
            fs::write(log_path(&out), report.to_csv())?;
            if let Some(last) = report.epochs.last() {
                eprintln!("validation tau {:.3} -> {:.3}", report.init_val_tau, last.val_tau);
            }
        }
        Command::Bench { data, target, draft, depth, width, temperature, seeds, out, no_timing, max_users } => {
            let ds = Dataset::read(&data)?;
            let target = TargetModel::load(&target)?;
            let draft = DraftModel::load(&draft, &ds.vocab)?;
            let cfg = BenchConfig {
                grid: vec![GridPoint { temperature, depth, width }],
                seeds,
                timing: !no_timing,
                max_users,
                ..BenchConfig::default()
            };
            let report = run_benchmark(&ds, &target, &draft, &cfg)?;
            write_report(&report, &out)?;
            for r in report.sd_rows() {
                eprintln!("seed {}: tau {:.3} speedup {:.3}", r.seed, r.tau, r.speedup);
            }
        }
        Command::SweepDepth { data, target, draft, depths, out, no_timing, max_users } => {
            let ds = Dataset::read(&data)?;
            let target = TargetModel::load(&target)?;
            let draft = DraftModel::load(&draft, &ds.vocab)?;
            let cfg = BenchConfig { timing: !no_timing, max_users, ..BenchConfig::default() };
            let report = depth_sweep(&ds, &target, &draft, &depths, &cfg)?;
            fs::create_dir_all(&out)?;
            write_report(&report, &out.join("sweep.csv"))?;
            plot(&report, &out)?;
            for r in report.sd_rows() {
                eprintln!("depth {}: tau {:.3} speedup {:.3}", r.depth, r.tau, r.speedup);
            }
        }
        Command::Plot { report, out } => {
            for p in plot(&read_report(&report)?, &out)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
