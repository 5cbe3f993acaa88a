//! Sweep the per-layer block's latent dimension on a small run and report
//! final validation accuracy per setting.
//!
//! ```text
//! cargo run --example latent_sweep
//! ```

use ivtune::config::RunConfig;
use ivtune::data::{Dataset, DatasetSpec};
use ivtune::model::IvModel;
use ivtune::train::train;

fn main() -> ivtune::Result<()> {
    let data = Dataset::generate(&DatasetSpec {
        n_train: 96,
        n_val: 32,
        ..DatasetSpec::reference()
    })?;

    println!("d_beta  trainable-params  val accuracy  val loss");
    for d_beta in [4usize, 8, 16, 32] {
        let mut cfg = RunConfig::toy();
        cfg.model.d_beta = d_beta;
        cfg.train.epochs = 8;
        let report = ivtune::analysis::param_report(&cfg.model)?;
        let mut model = IvModel::build(&cfg.model)?;
        let (log, _) = train(&mut model, &data, &cfg.train)?;
        let m = log.final_val().unwrap();
        println!(
            "{d_beta:>6}  {:>16}  {:>12.4}  {:>8.4}",
            report.trainable_backbone_side, m.accuracy, m.loss
        );
    }
    Ok(())
}
