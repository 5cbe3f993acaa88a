//! Layer-wise PCA explained-variance diagnostic: how concentrated is the
//! token feature space at each depth, and what does brief full fine-tuning
//! do to it compared to frozen-backbone prompt tuning?
//!
//! ```text
//! cargo run --example pca_layers
//! ```

use ivtune::analysis::{pca_csv, pca_layer_report, DEFAULT_PCA_COMPONENTS, PROBE_SAMPLES};
use ivtune::config::RunConfig;
use ivtune::data::{Dataset, DatasetSpec};
use ivtune::model::{IvModel, TrainRegime};
use ivtune::train::train;

fn main() -> ivtune::Result<()> {
    let data = Dataset::generate(&DatasetSpec {
        n_train: 128,
        n_val: 32,
        ..DatasetSpec::reference()
    })?;
    let probe: Vec<_> = data.val.iter().take(PROBE_SAMPLES).cloned().collect();

    let mut cfg = RunConfig::toy();
    cfg.train.epochs = 10;

    println!("top-1 explained-variance ratio per layer (probe batch of {PROBE_SAMPLES}):\n");
    println!("{:<22} {}", "model", "layer 1 .. L");
    for (label, regime) in [
        ("untrained", None),
        ("prompt-tuned (frozen)", Some(TrainRegime::Petl)),
        ("fully fine-tuned", Some(TrainRegime::FullFineTune)),
    ] {
        let mut model = IvModel::build(&cfg.model)?;
        if let Some(regime) = regime {
            model.apply_regime(regime);
            train(&mut model, &data, &cfg.train)?;
        }
        let report = pca_layer_report(&mut model, &probe, DEFAULT_PCA_COMPONENTS)?;
        let tops: Vec<String> =
            report.per_layer.iter().map(|l| format!("{:.3}", l[0])).collect();
        println!("{label:<22} {}", tops.join("  "));
        if label == "fully fine-tuned" {
            let out = std::path::Path::new("target/example-out/pca");
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("pca_fft.csv"), pca_csv(&report))?;
        }
    }
    println!("\nhigher top-1 ratio = more of the feature variance in one direction");
    Ok(())
}
