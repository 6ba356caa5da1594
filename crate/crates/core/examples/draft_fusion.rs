//! Shows how slot and depth embeddings change the draft's fused input, and
//! what each ablation switches off.

use padrec::datagen::{Dataset, GenConfig};
use padrec::draft::{AblationMode, DraftModel};
use padrec::numkit::Rng;
use padrec::target::{TargetConfig, TargetModel};

fn norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 50, n_users: 20, ..GenConfig::default() })?;
    let target = TargetModel::init(TargetConfig::small(ds.vocab.size()), 0)?;
    let s = ds.stream(0);
    let token = s.tokens[s.t0];
    let e = target.tok_emb.row(token.index());
    let mut rng = Rng::new(1);
    let f_prev: Vec<f32> = (0..target.config.d_model).map(|_| rng.normal() as f32).collect();
    println!("token {} has slot {:?}", token.0, s.labels[s.t0]);

    for mode in [AblationMode::Full, AblationMode::NoIpe, AblationMode::NoSpe, AblationMode::NoSpeGate, AblationMode::Baseline] {
        let mut draft = DraftModel::for_target(&target.config, &ds.vocab, 6, mode, 0)?;
        // untrained gates sit at 0.5; nudge them so the differences are visible
        draft.g_item_raw.data_mut()[0] = 1.0;
        draft.step_w.data_mut().iter_mut().for_each(|w| *w = 0.05);
        let by_depth: Vec<String> = (1..=6)
            .map(|j| {
                let f = draft.fuse_input(e, &f_prev, s.labels[s.t0], Some(j)).expect("valid depth");
                format!("{:.4}", norm(&f.fused) - norm(&f.z))
            })
            .collect();
        let f = draft.fuse_input(e, &f_prev, s.labels[s.t0], Some(1))?;
        let item_gate = if mode.uses_ipe() { format!("{:.3}", draft.g_item()) } else { "off".into() };
        let step_gate = if mode.uses_spe() { format!("{:.3}", f.g_step) } else { "off".into() };
        println!("{:<12} item gate {item_gate:<5}  step gate {step_gate:<5}  |fused|-|proj| by depth: {}", mode.name(), by_depth.join(" "));
    }
    Ok(())
}
