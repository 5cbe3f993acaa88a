//! Parameter accounting: how small is the trainable set next to the frozen
//! backbone, at toy scale and at a large-encoder geometry (counts only,
//! nothing allocated).
//!
//! ```text
//! cargo run --example param_budget
//! ```

use ivtune::analysis::{param_report, params_csv};
use ivtune::config::ModelConfig;

fn main() -> ivtune::Result<()> {
    for (label, cfg) in [
        ("toy geometry", ModelConfig::toy()),
        ("large-encoder geometry (L=24, C=1024)", ModelConfig::vit_large_geometry()),
    ] {
        let report = param_report(&cfg)?;
        println!("── {label} ──");
        println!("{:<18} {:>12}  trainable", "group", "count");
        for g in &report.groups {
            println!("{:<18} {:>12}  {}", g.group, g.count, g.trainable);
        }
        println!(
            "trainable backbone-side: {}  frozen backbone: {}",
            report.trainable_backbone_side, report.frozen_backbone
        );
        println!(
            "ratio = {:.5}  ({:.2}% of the frozen backbone)\n",
            report.ratio,
            report.ratio * 100.0
        );
    }

    let out = std::path::Path::new("target/example-out/params");
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("params.csv"), params_csv(&param_report(&ModelConfig::toy())?))?;
    println!("toy-geometry CSV written to {}", out.join("params.csv").display());
    Ok(())
}
