//! Prints the replacement plan for a short stream and the per-depth loss of
//! an untrained draft.

use padrec::datagen::{Dataset, GenConfig};
use padrec::draft::{AblationMode, DraftModel, DraftVars};
use padrec::numkit::Tape;
use padrec::target::{TargetConfig, TargetModel};
use padrec::trainer::unroll::Provenance;
use padrec::trainer::{collect_features, draft_unrolled_loss, plan_unroll, UnrollConfig};

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 50, n_users: 20, ..GenConfig::default() })?;
    let config = TargetConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, ..TargetConfig::small(ds.vocab.size()) };
    let target = TargetModel::init(config, 0)?;
    let s = ds.stream(0);

    let plan = plan_unroll(s.len(), s.t0, 3)?;
    for pass in &plan.passes {
        let q = pass.queries.iter().find(|q| q.lossed).expect("response query");
        let sources: Vec<String> = q
            .window
            .iter()
            .chain(std::iter::once(&q.query))
            .map(|r| match r.feature {
                Provenance::Teacher { position } => format!("teacher f{position}"),
                Provenance::Draft { pass, position } => format!("pass {pass} f{position}"),
                Provenance::Zero => "zero".into(),
            })
            .collect();
        println!(
            "pass {}: query at {} sees teacher rows 0..{} then [{}]",
            pass.depth,
            q.position,
            q.teacher_keys,
            sources.join(", ")
        );
    }

    let bank = collect_features(&target, &ds, &[0])?;
    let draft = DraftModel::for_target(&target.config, &ds.vocab, 3, AblationMode::Full, 0)?;
    let mut tape = Tape::new();
    let emb = tape.leaf(&target.tok_emb, false);
    let vars = DraftVars::register(&mut tape, &draft, true);
    let out = draft_unrolled_loss(&mut tape, &draft, &vars, emb, &[(s, bank.get(0)?)], &UnrollConfig { depth_train: 3, ..UnrollConfig::default() })?;
    let per_token: Vec<String> = out.per_depth.iter().map(|l| format!("{:.3}", l / (s.len() - s.t0) as f64)).collect();
    println!("total loss {:.3}, per depth per token {}", tape.scalar(out.loss), per_token.join(" "));
    Ok(())
}
