//! Command-line front end: dataset generation, training (with variant and
//! sweep support) and the analysis reports. All logic lives in the library;
//! this binary only parses flags, wires files and prints summaries.

use clap::{Args, Parser, Subcommand};
use ivtune::analysis::{
    max_bands, mean_radial_energy, param_report, params_csv, pca_csv, pca_layer_report,
    spectrum_csv, DEFAULT_BANDS, DEFAULT_PCA_COMPONENTS, PROBE_SAMPLES,
};
use ivtune::checkpoint::{load_checkpoint, save_checkpoint};
use ivtune::config::{ModelConfig, RunConfig, Variant};
use ivtune::data::{gen_dataset, Dataset, DatasetSpec};
use ivtune::error::{Error, Result};
use ivtune::model::{IvModel, TrainRegime};
use ivtune::train::train;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ivtune", about = "Frozen-backbone infrared-visible adaptation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned infrared-visible dataset directory.
    GenData(GenDataArgs),
    /// Train a model variant on a generated dataset.
    Train(TrainArgs),
    /// Emit analysis reports (CSV) for a checkpoint, dataset or config.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Validation samples (default: n / 4).
    #[arg(long)]
    n_val: Option<usize>,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// 1.0: visible carries no label information; 0.0: fully revealing.
    #[arg(long, default_value_t = 1.0)]
    ambiguity: f64,
    /// Patch size recorded in the manifest (labels are per patch).
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; defaults to the built-in toy recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// standard | vis_only | uni_fusion | fft | frozen
    #[arg(long)]
    variant: Option<String>,
    /// Sweep one model field over a value list, e.g. `d_beta=4,8,16,32`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration (used when no checkpoint supplies one).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer-wise PCA explained-variance report (needs checkpoint + data).
    #[arg(long)]
    pca: bool,
    /// Radial frequency-band energy of the dataset (needs data).
    #[arg(long)]
    spectrum: bool,
    /// Parameter-count report from configuration arithmetic.
    #[arg(long)]
    params: bool,
    /// Radial bands for --spectrum (default: 16, clamped to the image's
    /// radius resolution).
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        seed: args.seed,
        n_train: args.n,
        n_val: args.n_val.unwrap_or(args.n / 4),
        image_size: args.size,
        classes: args.classes,
        ambiguity: args.ambiguity,
        patch_size: args.patch,
    };
    let ds = gen_dataset(&spec, &args.out)?;
    println!(
        "wrote {} train + {} val samples ({}x{}, {} classes, ambiguity {}) to {}",
        ds.train.len(),
        ds.val.len(),
        spec.image_size,
        spec.image_size,
        spec.classes,
        spec.ambiguity,
        args.out.display()
    );
    Ok(())
}

/// Map a CLI variant string onto (architecture, training regime).
fn parse_train_variant(s: &str, base: Variant) -> Result<(Variant, TrainRegime)> {
    match s {
        "fft" => Ok((base, TrainRegime::FullFineTune)),
        "frozen" => Ok((base, TrainRegime::HeadOnly)),
        other => Ok((Variant::parse(other)?, TrainRegime::Petl)),
    }
}

fn check_compat(cfg: &ModelConfig, spec: &DatasetSpec) -> Result<()> {
    if cfg.image_size != spec.image_size
        || cfg.patch_size != spec.patch_size
        || cfg.num_classes != spec.classes
    {
        return Err(Error::Config(format!(
            "model geometry ({}px/p{}/{} classes) does not match dataset ({}px/p{}/{} classes)",
            cfg.image_size,
            cfg.patch_size,
            cfg.num_classes,
            spec.image_size,
            spec.patch_size,
            spec.classes
        )));
    }
    Ok(())
}

fn run_one_training(run_cfg: &RunConfig, regime: TrainRegime, dataset: &Dataset, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    run_cfg.save(&out.join("config.toml"))?;
    let mut model = IvModel::build(&run_cfg.model)?;
    model.apply_regime(regime);
    let (log, optimizer) = train(&mut model, dataset, &run_cfg.train)?;
    std::fs::write(out.join("metrics.csv"), log.to_csv())?;
    save_checkpoint(&model, Some(&optimizer), &out.join("checkpoint.ivtn"))?;
    match log.final_val() {
        Some(m) => println!(
            "{}: final val loss {:.4}, accuracy {:.4}, mIoU {:.4}",
            out.display(),
            m.loss,
            m.accuracy,
            m.miou
        ),
        None => println!("{}: checkpoint written (no epochs ran)", out.display()),
    }
    Ok(())
}

fn set_sweep_field(cfg: &mut ModelConfig, key: &str, value: usize) -> Result<()> {
    match key {
        "d_alpha" => cfg.d_alpha = value,
        "d_beta" => cfg.d_beta = value,
        "split_ratio_inv" => cfg.split_ratio_inv = value,
        "depth" => cfg.depth = value,
        "width" => cfg.width = value,
        other => return Err(Error::Config(format!("unknown sweep field `{other}`"))),
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run_cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    let regime = match &args.variant {
        Some(s) => {
            let (variant, regime) = parse_train_variant(s, run_cfg.model.variant)?;
            run_cfg.model.variant = variant;
            regime
        }
        None => TrainRegime::Petl,
    };
    let dataset = Dataset::load(&args.data)?;
    check_compat(&run_cfg.model, &dataset.spec)?;

    match &args.sweep {
        None => run_one_training(&run_cfg, regime, &dataset, &args.out),
        Some(sweep) => {
            let (key, values) = sweep
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad sweep spec `{sweep}`")))?;
            let values: Vec<usize> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad sweep value `{v}`")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::Config("empty sweep".into()));
            }
            std::fs::create_dir_all(&args.out)?;
            let mut summary = String::from("# schema: sweep.v1\nfield,value,loss,accuracy,miou\n");
            for v in values {
                let mut cfg = run_cfg.clone();
                set_sweep_field(&mut cfg.model, key.trim(), v)?;
                cfg.validate()?;
                let sub = args.out.join(format!("sweep_{}_{}", key.trim(), v));
                run_one_training(&cfg, regime, &dataset, &sub)?;
                let log = std::fs::read_to_string(sub.join("metrics.csv"))?;
                let last_val = log
                    .lines()
                    .rev()
                    .find(|l| l.split(',').nth(1) == Some("val"))
                    .ok_or_else(|| Error::Config("sweep run produced no val metrics".into()))?;
                let mut fields = last_val.split(',');
                let _epoch = fields.next();
                let _split = fields.next();
                let rest: Vec<&str> = fields.collect();
                summary.push_str(&format!("{},{},{}\n", key.trim(), v, rest.join(",")));
            }
            std::fs::write(args.out.join("sweep.csv"), summary)?;
            println!("sweep summary written to {}", args.out.join("sweep.csv").display());
            Ok(())
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    if !(args.pca || args.spectrum || args.params) {
        return Err(Error::Config(
            "nothing to do: pass at least one of --pca, --spectrum, --params".into(),
        ));
    }
    std::fs::create_dir_all(&args.out)?;

    // Model source: checkpoint wins; otherwise config file; otherwise the
    // built-in toy geometry. A config alongside a checkpoint must agree.
    let file_cfg = match &args.config {
        Some(path) => Some(RunConfig::load(path)?.model),
        None => None,
    };
    let mut model = None;
    if let Some(ck) = &args.checkpoint {
        let (m, _) = load_checkpoint(ck)?;
        if let Some(expect) = &file_cfg {
            if *expect != m.config {
                return Err(Error::CheckpointMismatch(
                    "checkpoint configuration differs from --config".into(),
                ));
            }
        }
        model = Some(m);
    }
    let cfg = match (&model, &file_cfg) {
        (Some(m), _) => m.config.clone(),
        (None, Some(c)) => c.clone(),
        (None, None) => ModelConfig::toy(),
    };

    if args.params {
        let report = param_report(&cfg)?;
        std::fs::write(args.out.join("params.csv"), params_csv(&report))?;
        println!(
            "params: trainable backbone-side {} / frozen backbone {} = ratio {:.5} (head: {})",
            report.trainable_backbone_side, report.frozen_backbone, report.ratio, report.head
        );
    }

    if args.spectrum {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--spectrum needs --data".into()))?;
        let ds = Dataset::load(data)?;
        let split = if ds.train.is_empty() { &ds.val } else { &ds.train };
        let sz = ds.spec.image_size;
        let bands = args.bands.unwrap_or_else(|| DEFAULT_BANDS.min(max_bands(sz, sz)));
        let ir = mean_radial_energy(split.iter().map(|s| &s.ir), bands)?;
        let vis = mean_radial_energy(split.iter().map(|s| &s.vis), bands)?;
        std::fs::write(args.out.join("spectrum_ir.csv"), spectrum_csv(&ir))?;
        std::fs::write(args.out.join("spectrum_vis.csv"), spectrum_csv(&vis))?;
        println!(
            "spectrum: band-0 mean energy IR {:.4} vs VIS {:.4}",
            ir.energies[0], vis.energies[0]
        );
    }

    if args.pca {
        let mut model = model
            .ok_or_else(|| Error::Config("--pca needs --checkpoint".into()))?;
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--pca needs --data".into()))?;
        let ds = Dataset::load(data)?;
        check_compat(&model.config, &ds.spec)?;
        let split = if ds.val.is_empty() { &ds.train } else { &ds.val };
        let probe: Vec<_> = split.iter().take(PROBE_SAMPLES).cloned().collect();
        let report = pca_layer_report(&mut model, &probe, DEFAULT_PCA_COMPONENTS)?;
        std::fs::write(args.out.join("pca.csv"), pca_csv(&report))?;
        let last = report.per_layer.last().unwrap();
        println!("pca: final-layer top-1 explained variance {:.4}", last[0]);
    }

    Ok(())
}
