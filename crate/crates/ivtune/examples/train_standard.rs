//! Train the standard variant on a small synthetic benchmark, then save the
//! checkpoint and verify the reloaded model evaluates identically.
//!
//! ```text
//! cargo run --example train_standard
//! ```

use ivtune::checkpoint::{load_checkpoint, save_checkpoint};
use ivtune::config::RunConfig;
use ivtune::data::{Dataset, DatasetSpec};
use ivtune::model::IvModel;
use ivtune::train::{evaluate, train};
use std::path::Path;

fn main() -> ivtune::Result<()> {
    let data = Dataset::generate(&DatasetSpec {
        n_train: 128,
        n_val: 32,
        ..DatasetSpec::reference()
    })?;

    let mut cfg = RunConfig::toy();
    cfg.train.epochs = 10;
    let mut model = IvModel::build(&cfg.model)?;
    let (log, optimizer) = train(&mut model, &data, &cfg.train)?;
    println!("epoch  split  loss     accuracy  miou");
    for r in &log.records {
        println!(
            "{:>5}  {:<5}  {:<7.4}  {:<8.4}  {:<6.4}",
            r.epoch, r.split, r.metrics.loss, r.metrics.accuracy, r.metrics.miou
        );
    }

    let out = Path::new("target/example-out/train_standard");
    std::fs::create_dir_all(out)?;
    let ck = out.join("checkpoint.ivtn");
    save_checkpoint(&model, Some(&optimizer), &ck)?;
    std::fs::write(out.join("metrics.csv"), log.to_csv())?;

    let (mut reloaded, _) = load_checkpoint(&ck)?;
    let before = evaluate(&mut model, &data.val, cfg.train.batch_size)?;
    let after = evaluate(&mut reloaded, &data.val, cfg.train.batch_size)?;
    println!("\ncheckpoint written to {}", ck.display());
    println!("val accuracy before/after reload: {:.6} / {:.6}", before.accuracy, after.accuracy);
    assert_eq!(before, after);
    Ok(())
}
