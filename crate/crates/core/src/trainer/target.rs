use crate::datagen::Dataset;
use crate::error::{bail, Result};
use crate::numkit::{adam_step, AdamConfig, AdamState, Rng, Tape};
use crate::target::{TargetModel, TargetVars};
use crate::tokenspace::{TokenId, TokenStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 1e-3, batch: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEpoch {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss per response token over the epoch.
    pub loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub init_val_loss: f64,
    pub epochs: Vec<TargetEpoch>,
}

impl TargetReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,val_loss\n");
        out.push_str(&format!("0,0,,{:.6}\n", self.init_val_loss));
        for e in &self.epochs {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", e.epoch, e.step, e.loss, e.val_loss));
        }
        out
    }
}

/// `(row, next token)` pairs of the positions whose next token is a response
/// token. Prompt positions never appear.
pub fn response_rows(stream: &TokenStream) -> impl Iterator<Item = (usize, TokenId)> + '_ {
    (stream.t0 - 1..stream.len() - 1).map(|p| (p, stream.tokens[p + 1]))
}

/// Mean next-token cross-entropy over the response tokens of `streams`.
pub fn response_loss(model: &TargetModel, streams: &[&TokenStream]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut lsm = vec![0.0; model.config.vocab_size];
    for s in streams {
        let out = &model.forward_train(&[&s.tokens])?[0];
        for (p, y) in response_rows(s) {
            crate::numkit::kernels::log_softmax_f64(out.logits.row(p), &mut lsm);
            total -= lsm[y.index()];
            count += 1;
        }
    }
    if count == 0 {
        bail!(Argument, "no response tokens to score");
    }
    Ok(total / count as f64)
}

fn batch_step(model: &mut TargetModel, streams: &[&TokenStream], adam: &mut AdamState, opt: &AdamConfig) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars = TargetVars::register(&mut tape, model, true);
    let toks: Vec<&[TokenId]> = streams.iter().map(|s| s.tokens.as_slice()).collect();
    let f = vars.features(&mut tape, &model.config, &toks)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut base = 0;
    for s in streams {
        for (p, y) in response_rows(s) {
            rows.push(base + p);
            labels.push(y.index());
        }
        base += s.len();
    }
    let n = rows.len();
    let fr = tape.gather(f, rows)?;
    let logits = vars.head(&mut tape, fr)?;
    let ce = tape.hard_cross_entropy(logits, (0..n).collect(), labels)?;
    let total = tape.sum(ce);
    let loss = tape.scale(total, 1.0 / n as f64);
    tape.backward(loss)?;
    let grads: Vec<_> = vars.all().into_iter().map(|v| tape.grad_tensor(v)).collect();
    let gs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
    adam_step(&mut model.params_mut(), &gs, adam, opt)?;
    Ok((tape.scalar(total), n))
}

/// Minimizes response-token cross-entropy on the training split.
pub fn train_target(model: &mut TargetModel, ds: &Dataset, cfg: &TargetTrainConfig) -> Result<TargetReport> {
    if ds.splits.train.is_empty() || cfg.batch == 0 {
        bail!(Argument, "nothing to train on");
    }
    let valid: Vec<&TokenStream> = ds.splits.valid.iter().map(|&u| ds.stream(u)).collect();
    let init_val_loss = response_loss(model, &valid)?;
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new();
    let rng = Rng::new(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order = ds.splits.train.clone();
        rng.fork(epoch as u64).shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let streams: Vec<&TokenStream> = chunk.iter().map(|&u| ds.stream(u)).collect();
            let (l, n) = batch_step(model, &streams, &mut adam, &opt)?;
            if !l.is_finite() {
                bail!(Invariant, "non-finite target loss at epoch {epoch}, step {}", adam.step());
            }
            sum += l;
            count += n;
        }
        let val_loss = response_loss(model, &valid)?;
        epochs.push(TargetEpoch { epoch, step: adam.step(), loss: sum / count as f64, val_loss });
    }
    Ok(TargetReport { init_val_loss, epochs })
}
