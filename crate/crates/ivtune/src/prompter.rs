//! Modality-aware prompter blocks.
//!
//! A block normalizes and recalibrates the visible and prompt token streams
//! channel-wise (Simple Feature Transform), projects both into a small
//! latent space, enhances only the visible latent with a hybrid
//! convolutional operation, and fuses the two paths back to token width.
//! The infrared path deliberately never passes through a convolution.
//!
//! Two fusion rules exist: the entry rule adds the latents and applies a
//! single up-projection, while the per-layer rule up-projects each modality
//! separately before adding. Up-projections start at zero, so a freshly
//! built block emits exactly zero prompts and the assembled model's forward
//! coincides with the frozen visible-only backbone at initialization.

use crate::backbone::INIT_STD;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{BnMode, BnState, Tape, Var, BN_EPS, LN_EPS};
use crate::tensor::Tensor;
use rand::Rng;

/// Simple Feature Transform parameters: per-stream layer-norm affines plus
/// learnable channel scale/shift on top.
#[derive(Clone, Debug)]
pub struct SftParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub omega1: ParamId,
    pub phi1: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub omega2: ParamId,
    pub phi2: ParamId,
}

impl SftParams {
    pub fn build(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        let ones = |store: &mut ParamStore, name: String| {
            store.insert(name, Tensor::full(vec![c], 1.0), true)
        };
        let zeros = |store: &mut ParamStore, name: String| {
            store.insert(name, Tensor::zeros(vec![c]), true)
        };
        SftParams {
            ln1_gamma: ones(store, format!("{prefix}.ln1.gamma")),
            ln1_beta: zeros(store, format!("{prefix}.ln1.beta")),
            omega1: ones(store, format!("{prefix}.omega1")),
            phi1: zeros(store, format!("{prefix}.phi1")),
            ln2_gamma: ones(store, format!("{prefix}.ln2.gamma")),
            ln2_beta: zeros(store, format!("{prefix}.ln2.beta")),
            omega2: ones(store, format!("{prefix}.omega2")),
            phi2: zeros(store, format!("{prefix}.phi2")),
        }
    }

    /// (LN1(z_vis)⊙ω1 + φ1, LN2(z_p)⊙ω2 + φ2)
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z_vis: Var,
        z_p: Var,
    ) -> Result<(Var, Var)> {
        if tape.value(z_vis).shape() != tape.value(z_p).shape() {
            return Err(crate::error::Error::Shape {
                op: "sft",
                detail: format!(
                    "visible stream {:?} vs prompt stream {:?}",
                    tape.value(z_vis).shape(),
                    tape.value(z_p).shape()
                ),
            });
        }
        let v = tape.layer_norm(z_vis, bind.var(self.ln1_gamma), bind.var(self.ln1_beta), LN_EPS)?;
        let v = tape.mul(v, bind.var(self.omega1))?;
        let v = tape.add(v, bind.var(self.phi1))?;
        let p = tape.layer_norm(z_p, bind.var(self.ln2_gamma), bind.var(self.ln2_beta), LN_EPS)?;
        let p = tape.mul(p, bind.var(self.omega2))?;
        let p = tape.add(p, bind.var(self.phi2))?;
        Ok((v, p))
    }
}

/// Hybrid operation over latent feature maps: depthwise 3×3 convolution
/// with a residual on the first ceil(d/r) channels, the rest passed
/// through, then a 1×1 conv → batch-norm → relu → 1×1 conv stack.
#[derive(Clone, Debug)]
pub struct HybridOpParams {
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub pw1_weight: ParamId,
    pub pw1_bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub pw2_weight: ParamId,
    pub pw2_bias: ParamId,
    pub bn_state: BnState,
    /// Latent width d.
    pub latent: usize,
    /// Convolved channel count k = ceil(d/r).
    pub split: usize,
}

impl HybridOpParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        latent: usize,
        split: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dw_kernel = store.insert(
            format!("{prefix}.dw.kernel"),
            Tensor::trunc_normal(vec![split, 3, 3], INIT_STD, rng),
            true,
        );
        let dw_bias = store.insert(format!("{prefix}.dw.bias"), Tensor::zeros(vec![split]), true);
        let pw1_weight = store.insert(
            format!("{prefix}.pw1.weight"),
            Tensor::trunc_normal(vec![latent, latent], INIT_STD, rng),
            true,
        );
        let pw1_bias = store.insert(format!("{prefix}.pw1.bias"), Tensor::zeros(vec![latent]), true);
        let bn_gamma =
            store.insert(format!("{prefix}.bn.gamma"), Tensor::full(vec![latent], 1.0), true);
        let bn_beta = store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(vec![latent]), true);
        let pw2_weight = store.insert(
            format!("{prefix}.pw2.weight"),
            Tensor::trunc_normal(vec![latent, latent], INIT_STD, rng),
            true,
        );
        let pw2_bias = store.insert(format!("{prefix}.pw2.bias"), Tensor::zeros(vec![latent]), true);
        HybridOpParams {
            dw_kernel,
            dw_bias,
            pw1_weight,
            pw1_bias,
            bn_gamma,
            bn_beta,
            pw2_weight,
            pw2_bias,
            bn_state: BnState::new(latent),
            latent,
            split,
        }
    }

    /// Latent token stream [B,N,d] in, same shape out; N must equal gh·gw.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        latent_tokens: Var,
        gh: usize,
        gw: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let maps = tape.tokens_to_map(latent_tokens, gh, gw)?;
        let d = self.latent;
        let k = self.split;
        let mixed = if k < d {
            let sel = tape.slice_channels(maps, 0, k)?;
            let rest = tape.slice_channels(maps, k, d)?;
            let conv = tape.depthwise_conv3x3(sel, bind.var(self.dw_kernel), bind.var(self.dw_bias))?;
            let res = tape.add(conv, sel)?;
            tape.concat_channels(res, rest)?
        } else {
            let conv =
                tape.depthwise_conv3x3(maps, bind.var(self.dw_kernel), bind.var(self.dw_bias))?;
            tape.add(conv, maps)?
        };
        let h = tape.pointwise_conv1x1(mixed, bind.var(self.pw1_weight), bind.var(self.pw1_bias))?;
        let h = tape.batch_norm(
            h,
            bind.var(self.bn_gamma),
            bind.var(self.bn_beta),
            &mut self.bn_state,
            mode,
            BN_EPS,
        )?;
        let h = tape.relu(h)?;
        let h = tape.pointwise_conv1x1(h, bind.var(self.pw2_weight), bind.var(self.pw2_bias))?;
        tape.map_to_tokens(h)
    }
}

/// One prompter block. `s4` is present only for blocks using the per-layer
/// fusion rule.
#[derive(Clone, Debug)]
pub struct MpBlockParams {
    pub sft: SftParams,
    pub s1_weight: ParamId,
    pub s1_bias: ParamId,
    pub s2_weight: ParamId,
    pub s2_bias: ParamId,
    pub ho: HybridOpParams,
    pub s3_weight: ParamId,
    pub s3_bias: ParamId,
    pub s4_weight: Option<ParamId>,
    pub s4_bias: Option<ParamId>,
    pub latent: usize,
}

impl MpBlockParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        latent: usize,
        with_s4: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let c = cfg.width;
        let sft = SftParams::build(store, &format!("{prefix}.sft"), c);
        let s1_weight = store.insert(
            format!("{prefix}.s1.weight"),
            Tensor::trunc_normal(vec![latent, c], INIT_STD, rng),
            true,
        );
        let s1_bias = store.insert(format!("{prefix}.s1.bias"), Tensor::zeros(vec![latent]), true);
        let s2_weight = store.insert(
            format!("{prefix}.s2.weight"),
            Tensor::trunc_normal(vec![latent, c], INIT_STD, rng),
            true,
        );
        let s2_bias = store.insert(format!("{prefix}.s2.bias"), Tensor::zeros(vec![latent]), true);
        let ho = HybridOpParams::build(
            store,
            &format!("{prefix}.ho"),
            latent,
            cfg.split_channels(latent),
            rng,
        );
        // Zero-initialized up-projections: a fresh block emits zero prompts.
        let s3_weight =
            store.insert(format!("{prefix}.s3.weight"), Tensor::zeros(vec![c, latent]), true);
        let s3_bias = store.insert(format!("{prefix}.s3.bias"), Tensor::zeros(vec![c]), true);
        let (s4_weight, s4_bias) = if with_s4 {
            (
                Some(store.insert(format!("{prefix}.s4.weight"), Tensor::zeros(vec![c, latent]), true)),
                Some(store.insert(format!("{prefix}.s4.bias"), Tensor::zeros(vec![c]), true)),
            )
        } else {
            (None, None)
        };
        MpBlockParams {
            sft,
            s1_weight,
            s1_bias,
            s2_weight,
            s2_bias,
            ho,
            s3_weight,
            s3_bias,
            s4_weight,
            s4_bias,
            latent,
        }
    }

    fn latents(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        z_vis: Var,
        z_p: Var,
        gh: usize,
        gw: usize,
        mode: BnMode,
    ) -> Result<(Var, Var)> {
        let (v, p) = self.sft.forward(tape, bind, z_vis, z_p)?;
        let m_vis = tape.linear(v, bind.var(self.s1_weight), Some(bind.var(self.s1_bias)))?;
        let m_p = tape.linear(p, bind.var(self.s2_weight), Some(bind.var(self.s2_bias)))?;
        // Hybrid operation on the visible latent only; the infrared latent
        // passes through untouched.
        let m_vis_e = self.ho.forward(tape, bind, m_vis, gh, gw, mode)?;
        Ok((m_vis_e, m_p))
    }

    /// Entry fusion: P = s3(HO(s1(sft_vis)) + s2(sft_p)).
    pub fn forward_alpha(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        z_vis: Var,
        z_p: Var,
        gh: usize,
        gw: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let (m_vis_e, m_p) = self.latents(tape, bind, z_vis, z_p, gh, gw, mode)?;
        let fused = tape.add(m_vis_e, m_p)?;
        tape.linear(fused, bind.var(self.s3_weight), Some(bind.var(self.s3_bias)))
    }

    /// Per-layer fusion: P = s3(HO(s1(sft_vis))) + s4(s2(sft_p)).
    pub fn forward_beta(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        z_vis: Var,
        z_p: Var,
        gh: usize,
        gw: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let (s4w, s4b) = match (self.s4_weight, self.s4_bias) {
            (Some(w), Some(b)) => (w, b),
            _ => {
                return Err(crate::error::Error::Config(
                    "per-layer fusion requires an s4 projection".into(),
                ))
            }
        };
        let (m_vis_e, m_p) = self.latents(tape, bind, z_vis, z_p, gh, gw, mode)?;
        let vis_up = tape.linear(m_vis_e, bind.var(self.s3_weight), Some(bind.var(self.s3_bias)))?;
        let p_up = tape.linear(m_p, bind.var(s4w), Some(bind.var(s4b)))?;
        tape.add(vis_up, p_up)
    }
}
