use std::fmt::Write as _;

use crate::datagen::Dataset;
use crate::draft::{DraftModel, DraftVars};
use crate::error::{bail, Result};
use crate::numkit::{adam_step, AdamConfig, AdamState, Rng, Tape};
use crate::specdec::{run_session, SessionConfig};
use crate::target::TargetModel;
use crate::tokenspace::TokenStream;

use super::features::{BankEntry, FeatureBank};
use super::unroll::{draft_unrolled_loss, UnrollConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub unroll: UnrollConfig,
    pub seed: u64,
    /// Validation users scored after every epoch; 0 skips validation.
    pub val_users: usize,
    pub val_max_new: usize,
}

impl Default for DraftTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-3,
            batch: 8,
            unroll: UnrollConfig::default(),
            seed: 0,
            val_users: 40,
            val_max_new: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftEpoch {
    pub epoch: usize,
    pub step: u64,
    /// Mean loss per stream.
    pub loss: f64,
    pub loss_per_depth: Vec<f64>,
    pub val_tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftReport {
    pub init_val_tau: f64,
    pub epochs: Vec<DraftEpoch>,
}

impl DraftReport {
    pub fn to_csv(&self) -> String {
        let depth = self.epochs.first().map_or(0, |e| e.loss_per_depth.len());
        let mut s = String::from("epoch,step,loss");
        for j in 1..=depth {
            let _ = write!(s, ",loss_depth_{j}");
        }
        s.push_str(",val_tau\n");
        for e in &self.epochs {
            let _ = write!(s, "{},{},{:.6}", e.epoch, e.step, e.loss);
            for l in &e.loss_per_depth {
                let _ = write!(s, ",{l:.6}");
            }
            let _ = writeln!(s, ",{:.4}", e.val_tau);
        }
        s
    }
}

/// Mean τ over validation prompts with greedy tree decoding at depth 6 and
/// width 10 (depth clipped to the draft's depth table).
pub fn validation_tau(target: &TargetModel, draft: &DraftModel, ds: &Dataset, users: usize, max_new: usize) -> Result<f64> {
    let users: Vec<usize> = ds.splits.valid.iter().take(users).copied().collect();
    if users.is_empty() {
        return Ok(0.0);
    }
    let cfg = SessionConfig { depth: 6.min(draft.config.depth_rows), width: 10, temperature: 0.0, max_new };
    let mut rng = Rng::new(0);
    let mut sum = 0.0;
    for &u in &users {
        let s = ds.stream(u);
        sum += run_session(target, draft, s.prompt(), &cfg, &mut rng)?.tau();
    }
    Ok(sum / users.len() as f64)
}

/// One optimizer step on a batch; returns the summed loss and per-depth sums.
pub fn draft_step(
    draft: &mut DraftModel,
    target: &TargetModel,
    batch: &[(&TokenStream, &BankEntry)],
    unroll: &UnrollConfig,
    adam: &mut AdamState,
    opt: &AdamConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let emb = tape.leaf(&target.tok_emb, false);
    let vars = DraftVars::register(&mut tape, draft, true);
    let out = draft_unrolled_loss(&mut tape, draft, &vars, emb, batch, unroll)?;
    let loss = tape.scale(out.loss, 1.0 / batch.len() as f64);
    tape.backward(loss)?;
    if tape.grad(emb).is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
        bail!(Invariant, "frozen embedding received a gradient");
    }
    let grads = vars.grads(&tape, draft)?;
    let gs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
    adam_step(&mut draft.params_mut(), &gs, adam, opt)?;
    Ok((tape.scalar(out.loss), out.per_depth))
}

/// Trains the draft against a frozen target with the unrolled loss.
pub fn train_draft(
    draft: &mut DraftModel,
    target: &TargetModel,
    ds: &Dataset,
    bank: &FeatureBank,
    cfg: &DraftTrainConfig,
) -> Result<DraftReport> {
    if ds.splits.train.is_empty() || cfg.batch == 0 {
        bail!(Argument, "nothing to train on");
    }
    let init_val_tau = validation_tau(target, draft, ds, cfg.val_users, cfg.val_max_new)?;
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new();
    let rng = Rng::new(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order = ds.splits.train.clone();
        rng.fork(epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut per_depth = vec![0.0; cfg.unroll.depth_train];
        for chunk in order.chunks(cfg.batch) {
            let batch = chunk.iter().map(|&u| Ok((ds.stream(u), bank.get(u)?))).collect::<Result<Vec<_>>>()?;
            let (l, pd) = draft_step(draft, target, &batch, &cfg.unroll, &mut adam, &opt)?;
            if !l.is_finite() {
                bail!(Invariant, "non-finite draft loss at epoch {epoch}, step {}", adam.step());
            }
            sum += l;
            per_depth.iter_mut().zip(pd).for_each(|(a, b)| *a += b);
        }
        let n = order.len() as f64;
        let val_tau = validation_tau(target, draft, ds, cfg.val_users, cfg.val_max_new)?;
        epochs.push(DraftEpoch {
            epoch,
            step: adam.step(),
            loss: sum / n,
            loss_per_depth: per_depth.into_iter().map(|l| l / n).collect(),
            val_tau,
        });
    }
    Ok(DraftReport { init_val_tau, epochs })
}
