//! End-to-end checks of the `ivtune` binary: flag contracts, exit codes,
//! determinism of the produced files, and the analyze reports.

use std::path::Path;
use std::process::{Command, Output};

fn ivtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivtune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"
[model]
image_size = 16
patch_size = 4
depth = 2
width = 16
heads = 2
mlp_ratio = 2.0
num_classes = 2
d_alpha = 4
d_beta = 4
split_ratio_inv = 4
variant = "standard"
seed = 1

[train]
optimizer = "sgd"
lr = 0.001
weight_decay = 0.01
epochs = 2
batch_size = 4
seed = 0
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn gen_tiny_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = ivtune(&[
        "gen-data",
        "--seed", "3",
        "--n", "16",
        "--n-val", "8",
        "--size", "16",
        "--classes", "2",
        "--ambiguity", "0.5",
        "--patch", "4",
        "--out", data.to_str().unwrap(),
    ]);
    assert_ok(&out);
    data
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = gen_tiny_data(tmp.path());
    let d2 = tmp.path().join("data2");
    let out = ivtune(&[
        "gen-data", "--seed", "3", "--n", "16", "--n-val", "8", "--size", "16",
        "--classes", "2", "--ambiguity", "0.5", "--patch", "4",
        "--out", d2.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for name in ["manifest.txt", "train.ivtn", "val.ivtn"] {
        assert_eq!(read(&d1.join(name)), read(&d2.join(name)), "{name} differs");
    }
    let manifest = String::from_utf8(read(&d1.join("manifest.txt"))).unwrap();
    assert!(manifest.contains("n_train=16"));
    assert!(manifest.contains("patch_size=4"));
}

#[test]
fn gen_data_rejects_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ivtune(&[
        "gen-data", "--n", "0", "--out", tmp.path().join("d").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
    assert!(stderr.contains("empty dataset"));
}

#[test]
fn train_twice_produces_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path());
    for run in ["run1", "run2"] {
        let out = ivtune(&[
            "train",
            "--data", data.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(),
            "--out", tmp.path().join(run).to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    for name in ["metrics.csv", "checkpoint.ivtn", "config.toml"] {
        assert_eq!(
            read(&tmp.path().join("run1").join(name)),
            read(&tmp.path().join("run2").join(name)),
            "{name} differs between same-seed runs"
        );
    }
    let metrics = String::from_utf8(read(&tmp.path().join("run1/metrics.csv"))).unwrap();
    assert!(metrics.starts_with("# schema: metrics.v1\nepoch,split,loss,accuracy,miou\n"));
    assert_eq!(metrics.lines().count(), 2 + 2 * 2, "2 epochs x 2 splits");
}

#[test]
fn train_variant_flags_control_the_trainable_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path());
    for (variant, expect_ir_embed) in [("frozen", true), ("fft", true), ("vis_only", false)] {
        let outdir = tmp.path().join(variant);
        let out = ivtune(&[
            "train",
            "--data", data.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(),
            "--variant", variant,
            "--out", outdir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        let (model, _) = ivtune::checkpoint::load_checkpoint(&outdir.join("checkpoint.ivtn")).unwrap();
        assert_eq!(model.store.by_name("embed.ir.weight").is_some(), expect_ir_embed);
        let (train, _) = model.partition_params();
        match variant {
            "frozen" => {
                let names: Vec<_> = train.iter().map(|p| p.name.as_str()).collect();
                assert_eq!(names, ["head.weight", "head.bias"]);
            }
            "fft" => assert_eq!(train.len(), model.store.len()),
            _ => {}
        }
    }
}

#[test]
fn train_rejects_unknown_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let out = ivtune(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--variant", "bogus",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}

#[test]
fn analyze_writes_all_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    assert_ok(&ivtune(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]));
    let analysis = tmp.path().join("analysis");
    let out = ivtune(&[
        "analyze",
        "--checkpoint", run.join("checkpoint.ivtn").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--pca", "--spectrum", "--params",
        "--out", analysis.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let pca = String::from_utf8(read(&analysis.join("pca.csv"))).unwrap();
    assert!(pca.starts_with("# schema: pca.v1\nlayer,rank_index,ratio\n"));
    // 2 layers x 5 ranks.
    assert_eq!(pca.lines().count(), 2 + 10);

    let spectrum = String::from_utf8(read(&analysis.join("spectrum_ir.csv"))).unwrap();
    assert!(spectrum.starts_with("# schema: spectrum.v1\nband_lo,band_hi,energy\n"));
    assert!(analysis.join("spectrum_vis.csv").exists());

    let params = String::from_utf8(read(&analysis.join("params.csv"))).unwrap();
    assert!(params.starts_with("# schema: params.v1\ngroup,count,trainable\n"));
    assert!(params.contains("mp_beta_total"));
}

#[test]
fn analyze_pca_on_untrained_model_is_well_defined() {
    // Build an untrained checkpoint directly, then run --pca on it.
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg = ivtune::config::RunConfig::load(&tiny_config(tmp.path())).unwrap();
    let model = ivtune::model::IvModel::build(&cfg.model).unwrap();
    let ck = tmp.path().join("untrained.ivtn");
    ivtune::checkpoint::save_checkpoint(&model, None, &ck).unwrap();

    let analysis = tmp.path().join("analysis");
    let out = ivtune(&[
        "analyze",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--pca",
        "--out", analysis.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let pca = String::from_utf8(read(&analysis.join("pca.csv"))).unwrap();
    // Every layer has k well-defined, finite ratios in (0, 1].
    let mut rows = 0;
    for line in pca.lines().skip(2) {
        let ratio: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(ratio.is_finite() && ratio >= 0.0 && ratio <= 1.0);
        rows += 1;
    }
    assert_eq!(rows, 10);
}

#[test]
fn analyze_requires_a_task() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ivtune(&["analyze", "--out", tmp.path().join("a").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to do"));
}

#[test]
fn sweep_produces_per_value_runs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = ivtune(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--sweep", "d_beta=2,4",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for v in ["2", "4"] {
        let sub = out_dir.join(format!("sweep_d_beta_{v}"));
        assert!(sub.join("checkpoint.ivtn").exists());
        assert!(sub.join("metrics.csv").exists());
        assert!(sub.join("config.toml").exists());
    }
    let summary = String::from_utf8(read(&out_dir.join("sweep.csv"))).unwrap();
    assert!(summary.starts_with("# schema: sweep.v1\n"));
    assert_eq!(summary.lines().count(), 2 + 2);
}

#[test]
fn checkpoint_config_mismatch_is_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(tmp.path());
    let cfg_path = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    assert_ok(&ivtune(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]));
    // A config that differs from the checkpoint's embedded one.
    let other = tmp.path().join("other.toml");
    let text = std::fs::read_to_string(&cfg_path).unwrap().replace("d_beta = 4", "d_beta = 8");
    std::fs::write(&other, text).unwrap();
    let out = ivtune(&[
        "analyze",
        "--checkpoint", run.join("checkpoint.ivtn").to_str().unwrap(),
        "--config", other.to_str().unwrap(),
        "--params",
        "--out", tmp.path().join("a").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs"));
}
