//! Synthetic aligned infrared-visible benchmark.
//!
//! Each sample is a smooth thermal scene: Gaussian blobs, blurred until the
//! infrared channel is dominated by low frequencies. Per-patch labels come
//! from thresholding the infrared patch mean, so the infrared channel fully
//! determines the task. The visible channels carry high-frequency texture
//! (noise plus stripes); an `ambiguity` knob controls how much label
//! information leaks into them — at 1.0 the visible stream is generated
//! from an independent random stream and carries none.
//!
//! Generation is deterministic: every sample derives its own RNG from the
//! dataset seed and sample index, and images are quantized to `f32` before
//! labeling so in-memory data and on-disk data agree exactly.

use crate::container::{load_container, save_container};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

/// Generation parameters; written to the dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub classes: usize,
    pub ambiguity: f64,
    pub patch_size: usize,
}

impl DatasetSpec {
    /// The reference benchmark: visible carries no label information.
    pub fn reference() -> Self {
        DatasetSpec {
            seed: 0,
            n_train: 512,
            n_val: 128,
            image_size: 32,
            classes: 2,
            ambiguity: 1.0,
            patch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if self.classes < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Dataset(format!("ambiguity {} outside [0,1]", self.ambiguity)));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Dataset(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// One aligned pair plus per-patch labels.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// [3, S, S] in [0,1], f32-quantized.
    pub vis: Tensor,
    /// [1, S, S] in [0,1], f32-quantized.
    pub ir: Tensor,
    /// One class per patch, row-major over the patch grid.
    pub labels: Vec<usize>,
}

/// In-memory dataset with a disjoint, seed-stable train/val split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

fn mix_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Separable Gaussian blur with kernel radius `radius`.
fn blur(field: &mut [f64], s: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let sigma = radius as f64 / 2.0;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut total = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let w = (-0.5 * d * d / (sigma * sigma)).exp();
        kernel.push(w);
        total += w;
    }
    for w in kernel.iter_mut() {
        *w /= total;
    }
    // Horizontal pass, clamped borders.
    let mut tmp = vec![0.0; field.len()];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for (i, w) in kernel.iter().enumerate() {
                let xi = (x as isize + i as isize - radius as isize).clamp(0, s as isize - 1);
                acc += w * field[y * s + xi as usize];
            }
            tmp[y * s + x] = acc;
        }
    }
    // Vertical pass.
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for (i, w) in kernel.iter().enumerate() {
                let yi = (y as isize + i as isize - radius as isize).clamp(0, s as isize - 1);
                acc += w * tmp[yi as usize * s + x];
            }
            field[y * s + x] = acc;
        }
    }
}

fn gen_sample(spec: &DatasetSpec, index: u64) -> SyntheticSample {
    let s = spec.image_size;
    let k = spec.classes;
    let mut ir_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index, 1));
    let mut vis_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index, 2));

    // Thermal blob field, blurred, min-max normalized to [0,1].
    let mut field;
    loop {
        field = vec![0.0f64; s * s];
        let blobs = 3 + ir_rng.gen_range(0..4);
        for _ in 0..blobs {
            let cx = ir_rng.gen_range(0.0..s as f64);
            let cy = ir_rng.gen_range(0.0..s as f64);
            let sigma = ir_rng.gen_range(s as f64 / 6.0..s as f64 / 3.0);
            let amp = ir_rng.gen_range(0.6..1.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    field[y * s + x] += amp * (-0.5 * d2 / (sigma * sigma)).exp();
                }
            }
        }
        blur(&mut field, s, (s / 8).max(1));
        let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo >= 1e-3 {
            // Logistic contrast stretch: pushes values away from the class
            // threshold so patch labels have a crisp margin while the field
            // stays smooth.
            for v in field.iter_mut() {
                let x = (*v - lo) / (hi - lo);
                *v = 1.0 / (1.0 + (-8.0 * (x - 0.5)).exp());
            }
            break;
        }
    }
    let ir = Tensor::new(vec![1, s, s], field).unwrap().to_dtype(DType::F32);

    // Labels from the quantized infrared patch means, so stored data and
    // labels are exactly consistent.
    let p = spec.patch_size;
    let g = s / p;
    let mut labels = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut acc = 0.0;
            for py in 0..p {
                for px in 0..p {
                    acc += ir.data()[(gy * p + py) * s + gx * p + px];
                }
            }
            let mean = acc / (p * p) as f64;
            labels.push(((mean * k as f64) as usize).min(k - 1));
        }
    }

    // Visible: per-channel high-frequency texture, independent of the
    // thermal field, plus an optional label leak.
    let leak = 1.0 - spec.ambiguity;
    let mut vis = vec![0.0f64; 3 * s * s];
    for c in 0..3 {
        let freq = vis_rng.gen_range(5.0..11.0);
        let phase = vis_rng.gen_range(0.0..std::f64::consts::TAU);
        let orient = vis_rng.gen_range(0..3);
        for y in 0..s {
            for x in 0..s {
                let t = match orient {
                    0 => x as f64,
                    1 => y as f64,
                    _ => x as f64 + y as f64,
                };
                let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * freq * t / s as f64 + phase).sin();
                let noise: f64 = vis_rng.gen_range(0.0..1.0);
                let mut v = 0.5 * noise + 0.5 * stripe;
                if leak > 0.0 {
                    let label = labels[(y / p) * g + x / p];
                    let classval = label as f64 / (k - 1) as f64;
                    v += 0.6 * leak * (classval - 0.5);
                }
                vis[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let vis = Tensor::new(vec![3, s, s], vis).unwrap().to_dtype(DType::F32);

    SyntheticSample { vis, ir, labels }
}

impl Dataset {
    /// Generate the full dataset in memory. Train and val samples use
    /// disjoint index ranges of the same seeded stream.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let train = (0..spec.n_train).map(|i| gen_sample(spec, i as u64)).collect();
        let val = (0..spec.n_val)
            .map(|i| gen_sample(spec, (spec.n_train + i) as u64))
            .collect();
        Ok(Dataset { spec: spec.clone(), train, val })
    }

    /// Write manifest plus one container per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = format!(
            "format=1\nseed={}\nn_train={}\nn_val={}\nimage_size={}\nclasses={}\nambiguity={}\npatch_size={}\n",
            self.spec.seed,
            self.spec.n_train,
            self.spec.n_val,
            self.spec.image_size,
            self.spec.classes,
            self.spec.ambiguity,
            self.spec.patch_size
        );
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            let mut entries = Vec::with_capacity(split.len() * 3);
            for (i, sample) in split.iter().enumerate() {
                entries.push((format!("sample{i:05}.vis"), sample.vis.clone()));
                entries.push((format!("sample{i:05}.ir"), sample.ir.clone()));
                let labels: Vec<f64> = sample.labels.iter().map(|&l| l as f64).collect();
                entries.push((
                    format!("sample{i:05}.labels"),
                    Tensor::new(vec![labels.len()], labels)?.to_dtype(DType::F32),
                ));
            }
            save_container(&dir.join(format!("{name}.ivtn")), &entries)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::Dataset(format!("cannot read manifest: {e}")))?;
        let mut kv = HashMap::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("bad manifest line `{line}`")))?;
            kv.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| {
            kv.get(key)
                .ok_or_else(|| Error::Dataset(format!("manifest missing `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Dataset(format!("bad manifest value for `{key}`")))
        };
        if get("format")?.as_str() != "1" {
            return Err(Error::Dataset("unknown dataset format".into()));
        }
        let spec = DatasetSpec {
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Dataset("bad manifest value for `seed`".into()))?,
            n_train: parse_usize("n_train")?,
            n_val: parse_usize("n_val")?,
            image_size: parse_usize("image_size")?,
            classes: parse_usize("classes")?,
            ambiguity: get("ambiguity")?
                .parse()
                .map_err(|_| Error::Dataset("bad manifest value for `ambiguity`".into()))?,
            patch_size: parse_usize("patch_size")?,
        };
        spec.validate()?;
        let load_split = |name: &str, count: usize| -> Result<Vec<SyntheticSample>> {
            let entries = load_container(&dir.join(format!("{name}.ivtn")))?;
            let map: HashMap<String, Tensor> = entries.into_iter().collect();
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                let vis = map
                    .get(&format!("sample{i:05}.vis"))
                    .ok_or_else(|| Error::Dataset(format!("{name} split missing sample {i}")))?;
                let ir = map
                    .get(&format!("sample{i:05}.ir"))
                    .ok_or_else(|| Error::Dataset(format!("{name} split missing sample {i}")))?;
                let labels = map
                    .get(&format!("sample{i:05}.labels"))
                    .ok_or_else(|| Error::Dataset(format!("{name} split missing sample {i}")))?;
                let s = spec.image_size;
                if vis.shape() != [3, s, s] || ir.shape() != [1, s, s] {
                    return Err(Error::Dataset(format!("{name} sample {i} has wrong shape")));
                }
                let labels: Vec<usize> = labels
                    .data()
                    .iter()
                    .map(|&v| {
                        if v.fract() == 0.0 && v >= 0.0 && (v as usize) < spec.classes {
                            Ok(v as usize)
                        } else {
                            Err(Error::Dataset(format!("{name} sample {i}: bad label {v}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                if labels.len() != spec.tokens() {
                    return Err(Error::Dataset(format!("{name} sample {i}: wrong label count")));
                }
                out.push(SyntheticSample { vis: vis.clone(), ir: ir.clone(), labels });
            }
            if map.len() != count * 3 {
                return Err(Error::Dataset(format!("{name} split has stray entries")));
            }
            Ok(out)
        };
        Ok(Dataset {
            train: load_split("train", spec.n_train)?,
            val: load_split("val", spec.n_val)?,
            spec,
        })
    }
}

/// Generate and write a dataset directory in one step.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(spec)?;
    ds.save(out_dir)?;
    Ok(ds)
}

/// Stack samples into batch tensors plus a flat label vector.
pub fn collate(samples: &[&SyntheticSample]) -> (Tensor, Tensor, Vec<usize>) {
    assert!(!samples.is_empty());
    let s = samples[0].ir.shape()[1];
    let b = samples.len();
    let mut vis = Vec::with_capacity(b * 3 * s * s);
    let mut ir = Vec::with_capacity(b * s * s);
    let mut labels = Vec::new();
    for sample in samples {
        vis.extend_from_slice(sample.vis.data());
        ir.extend_from_slice(sample.ir.data());
        labels.extend_from_slice(&sample.labels);
    }
    (
        Tensor::new(vec![b, 3, s, s], vis).unwrap(),
        Tensor::new(vec![b, 1, s, s], ir).unwrap(),
        labels,
    )
}

/// Accuracy of a one-vs-all ridge-regression probe on flattened patch
/// pixels of one modality. Fits on `train`, scores on `eval`.
pub fn linear_probe_accuracy(
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    patch_size: usize,
    classes: usize,
    use_visible: bool,
) -> f64 {
    let feat_of = |sample: &SyntheticSample, idx: usize| -> Vec<f64> {
        let img = if use_visible { &sample.vis } else { &sample.ir };
        let ch = img.shape()[0];
        let s = img.shape()[1];
        let g = s / patch_size;
        let (gy, gx) = (idx / g, idx % g);
        let mut out = Vec::with_capacity(ch * patch_size * patch_size + 1);
        for c in 0..ch {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    out.push(img.data()[(c * s + gy * patch_size + py) * s + gx * patch_size + px]);
                }
            }
        }
        out.push(1.0); // bias feature
        out
    };
    let nfeat = {
        let ch = if use_visible { 3 } else { 1 };
        ch * patch_size * patch_size + 1
    };
    // Normal equations, accumulated once over all patches.
    let mut xtx = vec![0.0f64; nfeat * nfeat];
    let mut xty = vec![0.0f64; nfeat * classes];
    for sample in train {
        for (idx, &label) in sample.labels.iter().enumerate() {
            let f = feat_of(sample, idx);
            for i in 0..nfeat {
                for j in 0..nfeat {
                    xtx[i * nfeat + j] += f[i] * f[j];
                }
                xty[i * classes + label] += f[i];
            }
        }
    }
    let ridge = 1e-3;
    for i in 0..nfeat {
        xtx[i * nfeat + i] += ridge;
    }
    let weights = solve_multi(&mut xtx, &mut xty, nfeat, classes);
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in eval {
        for (idx, &label) in sample.labels.iter().enumerate() {
            let f = feat_of(sample, idx);
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..classes {
                let score: f64 = (0..nfeat).map(|i| f[i] * weights[i * classes + k]).sum();
                if score > best.1 {
                    best = (k, score);
                }
            }
            if best.0 == label {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Gaussian elimination with partial pivoting for A·W = B where B has
/// `cols` right-hand sides. Consumes both inputs; returns W.
fn solve_multi(a: &mut [f64], b: &mut [f64], n: usize, cols: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..cols {
                b.swap(col * cols + j, pivot * cols + j);
            }
        }
        let diag = a[col * n + col];
        if diag.abs() < 1e-30 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..cols {
                b[row * cols + j] -= f * b[col * cols + j];
            }
        }
    }
    let mut w = vec![0.0; n * cols];
    for col in (0..n).rev() {
        for k in 0..cols {
            let mut acc = b[col * cols + k];
            for j in col + 1..n {
                acc -= a[col * n + j] * w[j * cols + k];
            }
            let diag = a[col * n + col];
            w[col * cols + k] = if diag.abs() < 1e-30 { 0.0 } else { acc / diag };
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(ambiguity: f64) -> DatasetSpec {
        DatasetSpec {
            seed: 7,
            n_train: 24,
            n_val: 8,
            image_size: 32,
            classes: 2,
            ambiguity,
            patch_size: 4,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(1.0);
        let a = Dataset::generate(&spec).unwrap();
        let b = Dataset::generate(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.vis.data(), y.vis.data());
            assert_eq!(x.ir.data(), y.ir.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn save_produces_byte_identical_directories() {
        let spec = small_spec(0.5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_dataset(&spec, d1.path()).unwrap();
        gen_dataset(&spec, d2.path()).unwrap();
        for name in ["manifest.txt", "train.ivtn", "val.ivtn"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let spec = small_spec(0.25);
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&spec, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.train.len(), ds.train.len());
        for (x, y) in ds.train.iter().zip(&back.train) {
            assert_eq!(x.vis.data(), y.vis.data());
            assert_eq!(x.ir.data(), y.ir.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let ds = Dataset::generate(&small_spec(0.0)).unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            assert!(s.vis.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.ir.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.labels.iter().all(|&l| l < 2));
        }
    }

    #[test]
    fn ir_threshold_recovers_labels_exactly() {
        // Labels are defined as thresholded IR patch means of the stored
        // (quantized) image, so recomputing them must be exact.
        let ds = Dataset::generate(&small_spec(0.0)).unwrap();
        let spec = &ds.spec;
        let (s, p, k) = (spec.image_size, spec.patch_size, spec.classes);
        let g = s / p;
        for sample in &ds.train {
            for gy in 0..g {
                for gx in 0..g {
                    let mut acc = 0.0;
                    for py in 0..p {
                        for px in 0..p {
                            acc += sample.ir.data()[(gy * p + py) * s + gx * p + px];
                        }
                    }
                    let mean = acc / (p * p) as f64;
                    let want = ((mean * k as f64) as usize).min(k - 1);
                    assert_eq!(sample.labels[gy * g + gx], want);
                }
            }
        }
    }

    #[test]
    fn both_classes_appear() {
        let ds = Dataset::generate(&small_spec(1.0)).unwrap();
        let mut counts = [0usize; 2];
        for s in &ds.train {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        assert!(counts[0] > 0 && counts[1] > 0, "counts = {counts:?}");
    }

    #[test]
    fn visible_probe_recovers_labels_only_without_ambiguity() {
        let mut spec = small_spec(0.0);
        spec.n_train = 64;
        spec.n_val = 32;
        let revealing = Dataset::generate(&spec).unwrap();
        let acc_revealing =
            linear_probe_accuracy(&revealing.train, &revealing.val, spec.patch_size, 2, true);
        assert!(acc_revealing > 0.95, "revealing probe accuracy {acc_revealing}");

        spec.ambiguity = 1.0;
        let blind = Dataset::generate(&spec).unwrap();
        let acc_blind = linear_probe_accuracy(&blind.train, &blind.val, spec.patch_size, 2, true);
        assert!(
            (acc_blind - 0.5).abs() <= 0.06,
            "blind probe accuracy {acc_blind} should be near chance"
        );
    }

    #[test]
    fn zero_train_count_is_an_error() {
        let mut spec = small_spec(1.0);
        spec.n_train = 0;
        assert!(matches!(Dataset::generate(&spec), Err(Error::Dataset(msg)) if msg.contains("empty")));
    }

    #[test]
    fn collate_shapes() {
        let ds = Dataset::generate(&small_spec(1.0)).unwrap();
        let batch: Vec<&SyntheticSample> = ds.train.iter().take(4).collect();
        let (vis, ir, labels) = collate(&batch);
        assert_eq!(vis.shape(), &[4, 3, 32, 32]);
        assert_eq!(ir.shape(), &[4, 1, 32, 32]);
        assert_eq!(labels.len(), 4 * 64);
    }
}
