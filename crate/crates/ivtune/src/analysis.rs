//! Feature-space diagnostics and parameter accounting.
//!
//! Two measurements drive the method's design and are reproduced here at
//! desk scale: the explained-variance ratio of the top principal
//! components of each layer's token features (how low-rank the feature
//! space has become), and the distribution of Fourier magnitude over
//! radial frequency bands (where an image's energy lives). Parameter
//! accounting is pure configuration arithmetic and never allocates.

use crate::config::{ModelConfig, Variant};
use crate::data::{collate, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::IvModel;
use crate::tape::BnMode;
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const DEFAULT_PCA_COMPONENTS: usize = 5;
pub const DEFAULT_BANDS: usize = 16;
pub const PROBE_SAMPLES: usize = 8;

// ── PCA explained variance ───────────────────────────────────────────────

/// Top-k explained-variance ratios per encoder layer (layer outputs z_l,
/// 1-based in the CSV).
#[derive(Clone, Debug)]
pub struct PcaReport {
    pub per_layer: Vec<Vec<f64>>,
}

/// Eigenvalues of a symmetric n×n matrix by the cyclic Jacobi method,
/// sorted descending. Dense and simple; fine for the widths used here.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    if n == 1 {
        return vec![a[0]];
    }
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-15 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Explained-variance ratios of the top `k` principal components of
/// `tokens` ([M, C], M >= 2). Population covariance (divide by M); the
/// ratios are eigenvalues over the trace. All-identical tokens are a
/// degenerate input.
pub fn pca_explained_variance(tokens: &Tensor, k: usize) -> Result<Vec<f64>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Shape {
            op: "pca",
            detail: format!("want [M>=2, C], got {s:?}"),
        });
    }
    let (m, c) = (s[0], s[1]);
    let data = tokens.data();
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut cov = vec![0.0; c * c];
    for row in data.chunks_exact(c) {
        for i in 0..c {
            let xi = row[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= m as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    if trace <= 0.0 || !trace.is_finite() {
        return Err(Error::Degenerate {
            op: "pca",
            detail: "zero total variance (all tokens identical)".into(),
        });
    }
    let eig = symmetric_eigenvalues(&cov, c);
    Ok(eig.iter().take(k.min(c)).map(|&l| (l / trace).max(0.0)).collect())
}

/// Run a probe batch through the model, pool each layer's tokens over
/// batch and positions, and report top-k explained-variance ratios per
/// layer. Batch norm uses running statistics when they exist (trained
/// models) and batch statistics otherwise.
pub fn pca_layer_report(model: &mut IvModel, probe: &[SyntheticSample], k: usize) -> Result<PcaReport> {
    if probe.is_empty() {
        return Err(Error::Dataset("empty probe batch".into()));
    }
    let refs: Vec<&SyntheticSample> = probe.iter().collect();
    let (vis, ir, _) = collate(&refs);
    let mode = if model.bn_states().iter().all(|(_, s)| s.initialized) {
        BnMode::Eval
    } else {
        BnMode::Train
    };
    let (_, captures) = model.forward_all(&vis, Some(&ir), mode)?;
    let mut per_layer = Vec::with_capacity(captures.len());
    for z in captures {
        let s = z.shape().to_vec(); // [B, N, C]
        let pooled = z.reshaped(vec![s[0] * s[1], s[2]])?;
        per_layer.push(pca_explained_variance(&pooled, k)?);
    }
    Ok(PcaReport { per_layer })
}

pub fn pca_csv(report: &PcaReport) -> String {
    let mut out = String::from("# schema: pca.v1\nlayer,rank_index,ratio\n");
    for (l, ratios) in report.per_layer.iter().enumerate() {
        for (i, r) in ratios.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", l + 1, i + 1, r));
        }
    }
    out
}

// ── radial frequency-band energy ─────────────────────────────────────────

/// Normalized Fourier-magnitude share per radial band. Band b collects
/// frequencies whose normalized radius (DC at the center, the farthest
/// corner at 1) falls in [b/B, (b+1)/B); the last band is closed at 1.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub energies: Vec<f64>,
    /// (lo, hi) normalized-radius edges per band.
    pub edges: Vec<(f64, f64)>,
}

fn fft2d_magnitude(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut grid: Vec<Complex<f64>> = map.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    // Column pass via transpose, FFT over rows, transpose back.
    let mut t: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = grid[y * w + x];
        }
    }
    for col in t.chunks_exact_mut(h) {
        col_fft.process(col);
    }
    let mut mag = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            mag[y * w + x] = t[x * h + y].norm();
        }
    }
    mag
}

/// Largest meaningful band count for an image: bands narrower than one
/// pixel of radius cannot receive energy.
pub fn max_bands(h: usize, w: usize) -> usize {
    let (cy, cx) = (h / 2, w / 2);
    let corner = corner_distance(h, w, cy, cx);
    corner.floor() as usize + 1
}

fn corner_distance(h: usize, w: usize, cy: usize, cx: usize) -> f64 {
    let mut best = 0.0f64;
    for &y in &[0usize, h - 1] {
        for &x in &[0usize, w - 1] {
            let d = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt();
            best = best.max(d);
        }
    }
    best
}

/// Radial band energies of one [H, W] map (sum of |F| per band after
/// shifting DC to the center, normalized to sum 1).
pub fn radial_energy(map: &Tensor, bands: usize) -> Result<SpectrumReport> {
    let s = map.shape();
    if s.len() != 2 || s[0] < 2 || s[1] < 2 {
        return Err(Error::Shape {
            op: "radial_energy",
            detail: format!("want [H>=2, W>=2], got {s:?}"),
        });
    }
    radial_energy_channels(std::slice::from_ref(map), bands)
}

/// Multi-channel form: per-channel magnitudes are averaged before banding.
pub fn radial_energy_channels(channels: &[Tensor], bands: usize) -> Result<SpectrumReport> {
    let s = channels
        .first()
        .ok_or_else(|| Error::Shape { op: "radial_energy", detail: "no channels".into() })?
        .shape()
        .to_vec();
    let (h, w) = (s[0], s[1]);
    if bands < 1 {
        return Err(Error::Config("band count must be >= 1".into()));
    }
    if bands > max_bands(h, w) {
        return Err(Error::Config(format!(
            "{bands} bands exceed the radius resolution of a {h}x{w} image (max {})",
            max_bands(h, w)
        )));
    }
    let mut mag = vec![0.0; h * w];
    for ch in channels {
        if ch.shape() != s {
            return Err(Error::Shape {
                op: "radial_energy",
                detail: "channel shapes differ".into(),
            });
        }
        for (acc, v) in mag.iter_mut().zip(fft2d_magnitude(ch.data(), h, w)) {
            *acc += v;
        }
    }
    for v in mag.iter_mut() {
        *v /= channels.len() as f64;
    }
    // fftshift: DC moves to (h/2, w/2).
    let (cy, cx) = (h / 2, w / 2);
    let corner = corner_distance(h, w, cy, cx);
    let mut energies = vec![0.0; bands];
    for y in 0..h {
        for x in 0..w {
            // Shifted coordinates back to unshifted spectrum indices.
            let sy = (y + h - cy) % h;
            let sx = (x + w - cx) % w;
            let r = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() / corner;
            let band = ((r * bands as f64) as usize).min(bands - 1);
            energies[band] += mag[sy * w + sx];
        }
    }
    let total: f64 = energies.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate {
            op: "radial_energy",
            detail: "zero spectrum (all-zero input)".into(),
        });
    }
    for v in energies.iter_mut() {
        *v /= total;
    }
    let edges = (0..bands)
        .map(|b| (b as f64 / bands as f64, (b + 1) as f64 / bands as f64))
        .collect();
    Ok(SpectrumReport { energies, edges })
}

/// Mean per-band energies over a set of images (each normalized first).
pub fn mean_radial_energy<'a>(
    images: impl Iterator<Item = &'a Tensor>,
    bands: usize,
) -> Result<SpectrumReport> {
    let mut acc: Option<Vec<f64>> = None;
    let mut edges = Vec::new();
    let mut count = 0usize;
    for img in images {
        let s = img.shape();
        // Accept [H,W] or [ch,H,W].
        let report = if s.len() == 2 {
            radial_energy(img, bands)?
        } else if s.len() == 3 {
            let (ch, h, w) = (s[0], s[1], s[2]);
            let mut planes = Vec::with_capacity(ch);
            for c in 0..ch {
                planes.push(Tensor::new(
                    vec![h, w],
                    img.data()[c * h * w..(c + 1) * h * w].to_vec(),
                )?);
            }
            radial_energy_channels(&planes, bands)?
        } else {
            return Err(Error::Shape {
                op: "radial_energy",
                detail: format!("want [H,W] or [ch,H,W], got {s:?}"),
            });
        };
        edges = report.edges.clone();
        match &mut acc {
            None => acc = Some(report.energies),
            Some(acc) => {
                for (a, e) in acc.iter_mut().zip(&report.energies) {
                    *a += e;
                }
            }
        }
        count += 1;
    }
    let mut energies = acc.ok_or_else(|| Error::Dataset("no images".into()))?;
    for v in energies.iter_mut() {
        *v /= count as f64;
    }
    Ok(SpectrumReport { energies, edges })
}

pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut out = String::from("# schema: spectrum.v1\nband_lo,band_hi,energy\n");
    for ((lo, hi), e) in report.edges.iter().zip(&report.energies) {
        out.push_str(&format!("{lo},{hi},{e}\n"));
    }
    out
}

// ── operator spectrum shift ──────────────────────────────────────────────

/// Operators whose effect on the radial spectrum can be measured.
pub enum SpectrumOperator {
    /// Single 3×3 kernel, zero padding, applied per image.
    Conv3x3(Tensor),
    /// Dense linear map on the flattened image ([H·W, H·W]).
    LinearProjection(Tensor),
}

impl SpectrumOperator {
    pub fn seeded_conv(rng: &mut impl rand::Rng) -> Self {
        SpectrumOperator::Conv3x3(Tensor::uniform(vec![3, 3], -0.5, 0.5, rng))
    }

    pub fn identity_conv() -> Self {
        let mut k = Tensor::zeros(vec![3, 3]);
        k.data_mut()[4] = 1.0;
        SpectrumOperator::Conv3x3(k)
    }

    pub fn identity_projection(h: usize, w: usize) -> Self {
        let n = h * w;
        let eye = Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        SpectrumOperator::LinearProjection(eye)
    }

    pub fn seeded_projection(h: usize, w: usize, rng: &mut impl rand::Rng) -> Self {
        let n = h * w;
        let scale = 1.0 / (n as f64).sqrt();
        SpectrumOperator::LinearProjection(Tensor::uniform(vec![n, n], -scale, scale, rng))
    }

    fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let s = img.shape();
        let (h, w) = (s[0], s[1]);
        match self {
            SpectrumOperator::Conv3x3(k) => {
                let kd = k.data();
                let src = img.data();
                let mut out = vec![0.0; h * w];
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0;
                        for dy in -1..=1isize {
                            let yy = y + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx in -1..=1isize {
                                let xx = x + dx;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += kd[((dy + 1) * 3 + dx + 1) as usize]
                                    * src[yy as usize * w + xx as usize];
                            }
                        }
                        out[(y * w as isize + x) as usize] = acc;
                    }
                }
                Tensor::new(vec![h, w], out)
            }
            SpectrumOperator::LinearProjection(m) => {
                let n = h * w;
                if m.shape() != [n, n] {
                    return Err(Error::Shape {
                        op: "operator_spectrum_shift",
                        detail: format!("projection {:?} vs image {h}x{w}", m.shape()),
                    });
                }
                let md = m.data();
                let src = img.data();
                let mut out = vec![0.0; n];
                for (row, o) in md.chunks_exact(n).zip(out.iter_mut()) {
                    *o = row.iter().zip(src).map(|(a, b)| a * b).sum();
                }
                Tensor::new(vec![h, w], out)
            }
        }
    }
}

/// Per-band mean energy before and after applying an operator to each
/// image. Purely descriptive; no direction is asserted.
pub struct ShiftReport {
    pub before: SpectrumReport,
    pub after: SpectrumReport,
}

pub fn operator_spectrum_shift(
    images: &[Tensor],
    op: &SpectrumOperator,
    bands: usize,
) -> Result<ShiftReport> {
    if images.is_empty() {
        return Err(Error::Dataset("no images".into()));
    }
    let before = mean_radial_energy(images.iter(), bands)?;
    let transformed: Vec<Tensor> = images.iter().map(|img| op.apply(img)).collect::<Result<_>>()?;
    let after = mean_radial_energy(transformed.iter(), bands)?;
    Ok(ShiftReport { before, after })
}

// ── parameter accounting ─────────────────────────────────────────────────

/// A named group of parameters with its size and optimization status.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCount {
    pub group: String,
    pub count: usize,
    pub trainable: bool,
}

/// Exact parameter counts per group, from configuration arithmetic alone.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub groups: Vec<GroupCount>,
    /// τ^ir + entry block + all per-layer blocks (decoder excluded).
    pub trainable_backbone_side: usize,
    /// Visible embedding + all encoder layers.
    pub frozen_backbone: usize,
    pub head: usize,
    pub ratio: f64,
}

fn hybrid_op_count(d: usize, k: usize) -> usize {
    (9 * k + k) + (d * d + d) + 2 * d + (d * d + d)
}

fn mp_block_count(c: usize, d: usize, k: usize, with_s4: bool) -> usize {
    let sft = 4 * c + 4 * c;
    let down = 2 * (c * d + d);
    let up = if with_s4 { 2 * (d * c + c) } else { d * c + c };
    sft + down + hybrid_op_count(d, k) + up
}

pub fn param_report(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let c = cfg.width;
    let p = cfg.patch_size;
    let n = cfg.num_tokens();
    let l = cfg.depth;
    let hidden = cfg.ffn_hidden();

    let vis_embed = c * (3 * p * p) + c + n * c;
    let ir_embed = if cfg.variant == Variant::VisOnly { 0 } else { c * (p * p) + c + n * c };
    let mp_alpha = mp_block_count(c, cfg.d_alpha, cfg.split_channels(cfg.d_alpha), false);
    let beta_with_s4 = cfg.variant != Variant::UniFusion;
    let mp_beta_layer = mp_block_count(c, cfg.d_beta, cfg.split_channels(cfg.d_beta), beta_with_s4);
    let attn = 4 * (c * c) + 4 * c + 2 * c;
    let ffn = hidden * c + hidden + c * hidden + c + 2 * c;
    // Encoder layers plus the final norm.
    let backbone_layers = l * (attn + ffn) + 2 * c;
    let head = cfg.num_classes * c + cfg.num_classes;

    let trainable_backbone_side = ir_embed + mp_alpha + l * mp_beta_layer;
    let frozen_backbone = vis_embed + backbone_layers;

    let mut groups = vec![
        GroupCount { group: "vis_embed".into(), count: vis_embed, trainable: false },
    ];
    if ir_embed > 0 {
        groups.push(GroupCount { group: "ir_embed".into(), count: ir_embed, trainable: true });
    }
    groups.push(GroupCount { group: "mp_alpha".into(), count: mp_alpha, trainable: true });
    groups.push(GroupCount {
        group: "mp_beta_total".into(),
        count: l * mp_beta_layer,
        trainable: true,
    });
    groups.push(GroupCount { group: "backbone_layers".into(), count: backbone_layers, trainable: false });
    groups.push(GroupCount { group: "head".into(), count: head, trainable: true });

    Ok(ParamReport {
        groups,
        trainable_backbone_side,
        frozen_backbone,
        head,
        ratio: trainable_backbone_side as f64 / frozen_backbone as f64,
    })
}

pub fn params_csv(report: &ParamReport) -> String {
    let mut out = String::from("# schema: params.v1\ngroup,count,trainable\n");
    for g in &report.groups {
        out.push_str(&format!("{},{},{}\n", g.group, g.count, g.trainable));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pca_rank_one_data() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = pca_explained_variance(&t, 2).unwrap();
        assert_relative_eq!(r[0], 1.0, max_relative = 1e-12);
        assert!(r[1].abs() < 1e-12);
    }

    #[test]
    fn pca_hand_computed_ratios() {
        // Tokens {(2,0),(-2,0),(0,1),(0,-1)}: covariance diag(2, 0.5),
        // ratios 0.8 and 0.2.
        let t = Tensor::new(vec![4, 2], vec![2.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let r = pca_explained_variance(&t, 2).unwrap();
        assert_relative_eq!(r[0], 0.8, max_relative = 1e-12);
        assert_relative_eq!(r[1], 0.2, max_relative = 1e-12);
    }

    #[test]
    fn pca_isotropic_gaussian_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(vec![10000, 2], |_| {
            use rand_distr::{Distribution, StandardNormal};
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let r = pca_explained_variance(&t, 2).unwrap();
        assert!((r[0] - 0.5).abs() < 0.05, "top ratio {}", r[0]);
        assert!((r[1] - 0.5).abs() < 0.05);
    }

    #[test]
    fn pca_degenerate_input_errors() {
        let t = Tensor::full(vec![5, 3], 2.0);
        assert!(matches!(
            pca_explained_variance(&t, 2),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn pca_invariant_to_permutation_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 40;
        let c = 4;
        let base = Tensor::uniform(vec![m, c], -1.0, 1.0, &mut rng);
        let r0 = pca_explained_variance(&base, 3).unwrap();

        // Permute token rows.
        let mut rows: Vec<&[f64]> = base.data().chunks_exact(c).collect();
        rows.reverse();
        rows.swap(3, 17);
        let permuted =
            Tensor::new(vec![m, c], rows.into_iter().flatten().copied().collect()).unwrap();
        let r1 = pca_explained_variance(&permuted, 3).unwrap();
        for (a, b) in r0.iter().zip(&r1) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }

        // Add a constant vector to every token: centering removes it.
        let shifted = Tensor::from_fn(vec![m, c], |i| base.data()[i] + [10.0, -3.0, 7.5, 0.25][i % c]);
        let r2 = pca_explained_variance(&shifted, 3).unwrap();
        for (a, b) in r0.iter().zip(&r2) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn jacobi_matches_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let eig = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert_relative_eq!(eig[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(eig[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_image_is_pure_dc() {
        let img = Tensor::full(vec![8, 8], 0.7);
        let r = radial_energy(&img, 4).unwrap();
        assert_relative_eq!(r.energies[0], 1.0, max_relative = 1e-12);
        for b in 1..4 {
            assert!(r.energies[b].abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = rng.gen_range(4..20usize);
            let w = rng.gen_range(4..20usize);
            let img = Tensor::uniform(vec![h, w], 0.0, 1.0, &mut rng);
            let bands = rng.gen_range(1..=max_bands(h, w));
            let r = radial_energy(&img, bands).unwrap();
            let total: f64 = r.energies.iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn nyquist_cosine_lands_in_its_band() {
        // cos(pi x): alternating columns, frequency w/2 along x. Normalized
        // radius = (w/2) / corner. Verify against a naive O(N^2) DFT oracle.
        let (h, w) = (8usize, 8usize);
        let img = Tensor::from_fn(vec![h, w], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let bands = 4;
        let got = radial_energy(&img, bands).unwrap();

        // Oracle: naive DFT magnitudes, same banding.
        let mut mag = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        re += img.data()[y * w + x] * ang.cos();
                        im += img.data()[y * w + x] * ang.sin();
                    }
                }
                mag[u * w + v] = (re * re + im * im).sqrt();
            }
        }
        let (cy, cx) = (h / 2, w / 2);
        let corner = ((cy as f64).powi(2) + (cx as f64).powi(2)).sqrt();
        let mut want = vec![0.0; bands];
        for y in 0..h {
            for x in 0..w {
                let sy = (y + h - cy) % h;
                let sx = (x + w - cx) % w;
                let r = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt()
                    / corner;
                let band = ((r * bands as f64) as usize).min(bands - 1);
                want[band] += mag[sy * w + sx];
            }
        }
        let total: f64 = want.iter().sum();
        for v in want.iter_mut() {
            *v /= total;
        }
        for (a, b) in got.energies.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        // The Nyquist frequency along one axis has normalized radius
        // (w/2)/corner = 4/5.657 ≈ 0.707: band 2 of 4.
        assert!(got.energies[2] > 0.9, "energies = {:?}", got.energies);
    }

    #[test]
    fn scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(vec![12, 12], 0.0, 1.0, &mut rng);
        let scaled = Tensor::from_fn(vec![12, 12], |i| img.data()[i] * 37.5);
        let a = radial_energy(&img, 6).unwrap();
        let b = radial_energy(&scaled, 6).unwrap();
        for (x, y) in a.energies.iter().zip(&b.energies) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_image_is_degenerate() {
        let img = Tensor::zeros(vec![8, 8]);
        assert!(matches!(radial_energy(&img, 4), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn too_many_bands_error() {
        let img = Tensor::full(vec![4, 4], 1.0);
        assert!(radial_energy(&img, 100).is_err());
    }

    #[test]
    fn identity_operators_leave_spectrum_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images: Vec<Tensor> =
            (0..3).map(|_| Tensor::uniform(vec![8, 8], 0.0, 1.0, &mut rng)).collect();
        for op in [SpectrumOperator::identity_conv(), SpectrumOperator::identity_projection(8, 8)] {
            let shift = operator_spectrum_shift(&images, &op, 4).unwrap();
            for (a, b) in shift.before.energies.iter().zip(&shift.after.energies) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_operator_is_degenerate() {
        let images = vec![Tensor::full(vec![8, 8], 0.5)];
        let op = SpectrumOperator::Conv3x3(Tensor::zeros(vec![3, 3]));
        assert!(matches!(
            operator_spectrum_shift(&images, &op, 4),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn param_report_monotone_in_latent_dim() {
        let mut cfg = ModelConfig::toy();
        let mut last = 0;
        for d in [1usize, 2, 4, 8, 16, 32] {
            cfg.d_beta = d;
            let r = param_report(&cfg).unwrap();
            let beta = r.groups.iter().find(|g| g.group == "mp_beta_total").unwrap().count;
            assert!(beta > last, "d_beta={d}");
            last = beta;
        }
    }

    #[test]
    fn vit_large_geometry_is_parameter_efficient() {
        let r = param_report(&ModelConfig::vit_large_geometry()).unwrap();
        assert!(r.ratio < 0.03, "ratio = {}", r.ratio);
        // Order-of-magnitude sanity for the frozen side (~300M).
        assert!(r.frozen_backbone > 250_000_000 && r.frozen_backbone < 350_000_000);
    }

    #[test]
    fn report_counts_match_an_allocated_model() {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 16;
        cfg.depth = 2;
        cfg.width = 16;
        cfg.heads = 2;
        cfg.d_alpha = 4;
        cfg.d_beta = 8;
        let report = param_report(&cfg).unwrap();
        let model = IvModel::build(&cfg).unwrap();
        let (train, frozen) = model.partition_params();
        let train_total: usize = train.iter().map(|p| p.tensor.numel()).sum();
        let frozen_total: usize = frozen.iter().map(|p| p.tensor.numel()).sum();
        assert_eq!(report.trainable_backbone_side + report.head, train_total);
        assert_eq!(report.frozen_backbone, frozen_total);
    }
}
