//! Small end-to-end runs of the library: data, both trainers, decoding and
//! the benchmark report.

use std::sync::OnceLock;

use padrec::bench::{run_benchmark, BenchConfig, BenchReport, GridPoint};
use padrec::datagen::{Dataset, GenConfig};
use padrec::draft::{AblationMode, DraftModel};
use padrec::numkit::Rng;
use padrec::specdec::{run_session, SessionConfig};
use padrec::target::{TargetConfig, TargetModel};
use padrec::trainer::{
    collect_features, train_draft, train_target, DraftReport, DraftTrainConfig, TargetReport, TargetTrainConfig, UnrollConfig,
};
use padrec::Error;

const DEPTH: usize = 3;

struct Fixture {
    ds: Dataset,
    target: TargetModel,
    target_log: TargetReport,
    draft: DraftModel,
    draft_log: DraftReport,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = Dataset::generate(&GenConfig { n_items: 80, n_users: 160, seed: 11, ..GenConfig::default() }).unwrap();
        let config = TargetConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_len: 256, vocab_size: ds.vocab.size() };
        let mut target = TargetModel::init(config, 0).unwrap();
        let target_log = train_target(&mut target, &ds, &TargetTrainConfig { epochs: 3, lr: 3e-3, batch: 8, seed: 0 }).unwrap();
        let bank = collect_features(&target, &ds, &ds.splits.train).unwrap();
        let mut draft = DraftModel::for_target(&target.config, &ds.vocab, DEPTH, AblationMode::Full, 0).unwrap();
        let cfg = DraftTrainConfig {
            epochs: 2,
            lr: 3e-3,
            unroll: UnrollConfig { depth_train: DEPTH, ..UnrollConfig::default() },
            val_users: 16,
            ..DraftTrainConfig::default()
        };
        let draft_log = train_draft(&mut draft, &target, &ds, &bank, &cfg).unwrap();
        Fixture { ds, target, target_log, draft, draft_log }
    })
}

fn bench(temperature: f32, width: usize) -> BenchReport {
    let f = fixture();
    let cfg = BenchConfig {
        grid: vec![GridPoint { temperature, depth: DEPTH, width }],
        seeds: vec![5],
        max_new: 40,
        warmups: 0,
        timing: false,
        max_users: Some(12),
    };
    run_benchmark(&f.ds, &f.target, &f.draft, &cfg).unwrap()
}

#[test]
fn training_improves_both_models() {
    let f = fixture();
    let last = f.target_log.epochs.last().unwrap();
    assert!(last.val_loss < f.target_log.init_val_loss, "{} -> {}", f.target_log.init_val_loss, last.val_loss);
    let tau = f.draft_log.epochs.last().unwrap().val_tau;
    assert!(tau > f.draft_log.init_val_tau, "{} -> {tau}", f.draft_log.init_val_tau);
}

#[test]
fn greedy_report_matches_autoregressive_quality() {
    let report = bench(0.0, 4);
    let [ar, sd] = &report.rows[..] else { panic!("expected two rows") };
    assert!(ar.is_ar() && !sd.is_ar());
    assert_eq!((ar.recall, ar.ndcg, ar.flag_rate), (sd.recall, sd.ndcg, sd.flag_rate));
    assert_eq!(ar.committed, sd.committed);
    assert!(sd.tau >= 1.0 && sd.tau <= (DEPTH + 1) as f64);
}

#[test]
fn report_tau_is_the_mean_of_session_tau() {
    let f = fixture();
    let report = bench(0.7, 3);
    let sd = report.sd_rows().next().unwrap();
    let session = SessionConfig { depth: DEPTH, width: 3, temperature: 0.7, max_new: 40 };
    let taus: Vec<f64> = f.ds.splits.test[..12]
        .iter()
        .map(|&u| {
            let mut rng = Rng::new(5).fork(u as u64);
            run_session(&f.target, &f.draft, f.ds.stream(u).prompt(), &session, &mut rng).unwrap().tau()
        })
        .collect();
    assert!(taus.iter().all(|&t| (1.0..=(DEPTH + 1) as f64).contains(&t)));
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    assert!((sd.tau - mean).abs() < 1e-12, "{} vs {mean}", sd.tau);
}

#[test]
fn untimed_reports_repeat_exactly() {
    assert_eq!(bench(0.7, 2).to_csv(), bench(0.7, 2).to_csv());
}

#[test]
fn depth_beyond_the_table_is_rejected() {
    let f = fixture();
    let cfg = BenchConfig { grid: vec![GridPoint { temperature: 0.0, depth: DEPTH + 1, width: 2 }], ..BenchConfig::default() };
    assert!(matches!(run_benchmark(&f.ds, &f.target, &f.draft, &cfg), Err(Error::Config(_))));
    let session = SessionConfig { depth: DEPTH + 1, width: 2, temperature: 0.0, max_new: 5 };
    let err = run_session(&f.target, &f.draft, f.ds.stream(0).prompt(), &session, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
