//! At initialization the prompter's output projections are zero, so the
//! injected prompts are exact zeros and the assembled model reproduces the
//! frozen visible-only backbone bit for bit. One optimizer step breaks the
//! identity — the prompts switch on.
//!
//! ```text
//! cargo run --example zero_init_identity
//! ```

use ivtune::config::ModelConfig;
use ivtune::data::{collate, Dataset, DatasetSpec};
use ivtune::model::IvModel;
use ivtune::optim::Optimizer;
use ivtune::tape::BnMode;
use ivtune::train::train_step;

fn main() -> ivtune::Result<()> {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 16;
    cfg.depth = 3;
    cfg.width = 32;
    let data = Dataset::generate(&DatasetSpec {
        n_train: 16,
        n_val: 0,
        image_size: 16,
        ..DatasetSpec::reference()
    })?;

    let mut model = IvModel::build(&cfg)?;
    let mut identical = 0usize;
    let mut total = 0usize;
    for chunk in data.train.chunks(4) {
        let refs: Vec<_> = chunk.iter().collect();
        let (vis, ir, _) = collate(&refs);
        let full = model.forward(&vis, Some(&ir), BnMode::Train)?;
        let baseline = model.forward_visible_baseline(&vis)?;
        total += full.numel();
        identical += full
            .data()
            .iter()
            .zip(baseline.data())
            .filter(|(a, b)| a.to_bits() == b.to_bits())
            .count();
    }
    println!("at init: {identical}/{total} logits bitwise identical to the visible-only baseline");
    assert_eq!(identical, total);

    // One step on real data moves the projections off zero.
    let refs: Vec<_> = data.train.iter().take(4).collect();
    let (vis, ir, labels) = collate(&refs);
    let mut opt = Optimizer::new(ivtune::config::OptimizerKind::Sgd, 1e-2, 0.0);
    train_step(&mut model, &mut opt, &vis, &ir, &labels)?;
    let full = model.forward(&vis, Some(&ir), BnMode::Train)?;
    let baseline = model.forward_visible_baseline(&vis)?;
    let diff = full
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("after one optimizer step: max |full − baseline| = {diff:.3e} (prompts active)");
    assert!(diff > 0.0);
    Ok(())
}
