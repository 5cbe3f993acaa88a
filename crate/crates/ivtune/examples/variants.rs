//! Complementary learning in miniature: when the visible stream carries no
//! label information, the visible-only variant stays at chance while the
//! standard variant learns the task through the infrared prompts.
//!
//! ```text
//! cargo run --example variants
//! ```

use ivtune::config::{RunConfig, Variant};
use ivtune::data::{Dataset, DatasetSpec};
use ivtune::model::{IvModel, TrainRegime};
use ivtune::train::train;

fn main() -> ivtune::Result<()> {
    let data = Dataset::generate(&DatasetSpec {
        n_train: 128,
        n_val: 64,
        ambiguity: 1.0,
        ..DatasetSpec::reference()
    })?;

    println!("variant     val accuracy  val mIoU");
    for (label, variant, regime) in [
        ("vis_only", Variant::VisOnly, TrainRegime::Petl),
        ("uni_fusion", Variant::UniFusion, TrainRegime::Petl),
        ("standard", Variant::Standard, TrainRegime::Petl),
        ("frozen", Variant::Standard, TrainRegime::HeadOnly),
    ] {
        let mut cfg = RunConfig::toy();
        cfg.model.variant = variant;
        cfg.train.epochs = 12;
        let mut model = IvModel::build(&cfg.model)?;
        model.apply_regime(regime);
        let (log, _) = train(&mut model, &data, &cfg.train)?;
        let m = log.final_val().unwrap();
        println!("{label:<11} {:>12.4} {:>9.4}", m.accuracy, m.miou);
    }
    println!("\n(labels depend only on the infrared channel here)");
    Ok(())
}
