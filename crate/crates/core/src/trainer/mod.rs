//! Target training, teacher feature collection and unrolled draft training.

mod draft;
mod features;
mod target;
pub mod unroll;

pub use draft::{draft_step, train_draft, validation_tau, DraftEpoch, DraftReport, DraftTrainConfig};
pub use features::{collect_features, BankEntry, FeatureBank};
pub use target::{response_loss, response_rows, train_target, TargetEpoch, TargetReport, TargetTrainConfig};
pub use unroll::{draft_unrolled_loss, plan_unroll, UnrollConfig};

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::datagen::{Dataset, GenConfig};
    use crate::target::{TargetConfig, TargetModel};

    pub fn corpus() -> Dataset {
        Dataset::generate(&GenConfig { n_items: 60, n_users: 80, seed: 3, ..GenConfig::default() }).unwrap()
    }

    pub fn target(ds: &Dataset) -> TargetModel {
        let cfg = TargetConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 256, vocab_size: ds.vocab.size() };
        TargetModel::init(cfg, 1).unwrap()
    }
}
