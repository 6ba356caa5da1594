use std::collections::BTreeMap;

use crate::datagen::Dataset;
use crate::error::{bail, Result};
use crate::numkit::{softmax_rows, Tensor};
use crate::target::TargetModel;

/// Frozen-target outputs for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    /// Feature at every position; committed draft context is built from
    /// these, so prompt positions are kept as well.
    pub features: Tensor,
    /// Logits at positions `t0 − 1 ..= len − 2`, the contexts that predict
    /// response tokens.
    pub logits: Tensor,
    pub t0: usize,
}

impl BankEntry {
    /// Teacher distributions at temperature 1, one row per logits row.
    pub fn teacher_probs(&self) -> Tensor {
        softmax_rows(&self.logits, 1.0)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Teacher features and logits keyed by user id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    entries: BTreeMap<usize, BankEntry>,
}

impl FeatureBank {
    pub fn get(&self, user: usize) -> Result<&BankEntry> {
        match self.entries.get(&user) {
            Some(e) => Ok(e),
            None => bail!(Argument, "feature bank has no entry for user {user}"),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs the frozen target once over each listed user's stream.
pub fn collect_features(target: &TargetModel, ds: &Dataset, users: &[usize]) -> Result<FeatureBank> {
    let mut entries = BTreeMap::new();
    for &u in users {
        let s = ds.stream(u);
        let out = target.forward_train(&[&s.tokens])?.pop().expect("one stream");
        out.features.check_finite("teacher features")?;
        let rows: Vec<&[f32]> = (s.t0 - 1..s.len() - 1).map(|p| out.logits.row(p)).collect();
        entries.insert(u, BankEntry { features: out.features, logits: Tensor::from_rows(&rows), t0: s.t0 });
    }
    Ok(FeatureBank { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::fixtures;

    #[test]
    fn bank_matches_training_forward_and_repeats() {
        let ds = fixtures::corpus();
        let m = fixtures::target(&ds);
        let users = [0, 5, 9];
        let bank = collect_features(&m, &ds, &users).unwrap();
        assert_eq!(bank.len(), 3);
        for &u in &users {
            let s = ds.stream(u);
            let e = bank.get(u).unwrap();
            let out = &m.forward_train(&[&s.tokens]).unwrap()[0];
            assert!(e.features.bit_eq(&out.features));
            assert_eq!(e.logits.rows(), s.len() - s.t0);
            assert_eq!(e.logits.row(0), out.logits.row(s.t0 - 1));
        }
        assert_eq!(collect_features(&m, &ds, &users).unwrap(), bank);
        assert!(bank.get(1).is_err());
    }

    #[test]
    fn teacher_rows_are_distributions() {
        let ds = fixtures::corpus();
        let m = fixtures::target(&ds);
        let bank = collect_features(&m, &ds, &[2]).unwrap();
        let p = bank.get(2).unwrap().teacher_probs();
        for r in 0..p.rows() {
            let sum: f64 = p.row(r).iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
