//! Trains a small target and draft, then decodes one prompt both ways and
//! prints the per-round acceptance.

use padrec::datagen::{Dataset, GenConfig};
use padrec::draft::{AblationMode, DraftModel};
use padrec::numkit::Rng;
use padrec::specdec::Session;
use padrec::target::{TargetConfig, TargetModel};
use padrec::tokenspace::TokenId;
use padrec::trainer::{collect_features, train_draft, train_target, DraftTrainConfig, TargetTrainConfig, UnrollConfig};

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 100, n_users: 300, ..GenConfig::default() })?;
    let config = TargetConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, ..TargetConfig::small(ds.vocab.size()) };
    let mut target = TargetModel::init(config, 0)?;
    train_target(&mut target, &ds, &TargetTrainConfig { epochs: 3, ..TargetTrainConfig::default() })?;
    let bank = collect_features(&target, &ds, &ds.splits.train)?;
    let mut draft = DraftModel::for_target(&target.config, &ds.vocab, 4, AblationMode::Full, 0)?;
    let cfg = DraftTrainConfig {
        epochs: 2,
        val_users: 0,
        unroll: UnrollConfig { depth_train: 4, ..UnrollConfig::default() },
        ..DraftTrainConfig::default()
    };
    train_draft(&mut draft, &target, &ds, &bank, &cfg)?;

    let prompt = ds.stream(ds.splits.test[0]).prompt();
    let ar = target.generate_ar(prompt, 60, 0.0, &mut Rng::new(0))?;
    let mut session = Session::start(&target, &draft, prompt)?;
    let mut rng = Rng::new(0);
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut rounds = 0;
    while tokens.len() < 60 && tokens.last() != Some(&TokenId::EOS) {
        let (committed, stats) = session.round(4, 10, 0.0, &mut rng)?;
        rounds += 1;
        println!("round {rounds}: tree of {} nodes, {} drafted tokens accepted", stats.tree_size, stats.accepted);
        tokens.extend(committed);
    }
    tokens.truncate(ar.tokens.len());
    println!("{} tokens in {rounds} rounds vs {} target calls autoregressively", tokens.len(), ar.calls);
    println!("outputs identical: {}", tokens == ar.tokens);
    Ok(())
}
