//! Full model assembly: frozen encoder, prompt-stream propagation, and the
//! trainable/frozen parameter partition.
//!
//! Per encoder layer the prompt stream contributes twice through one shared
//! prompter block: once after the attention stage and once after the
//! feed-forward stage. The layer computes
//! `z_l = ffn(attn(z) + P_l1) + P_l2`, and the prompt input for the next
//! layer is the initial prompt plus the layer output.

use crate::backbone::{AttnParams, FfnParams, HeadParams, PatchEmbedParams};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::params::{partition, Binding, ParamStore, Parameter};
use crate::prompter::MpBlockParams;
use crate::tape::{BnMode, BnState, Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training regime applied on top of the architecture: the default trains
/// exactly the prompter-side set, `FullFineTune` unfreezes everything, and
/// `HeadOnly` trains just the decode head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainRegime {
    Petl,
    FullFineTune,
    HeadOnly,
}

/// One encoder layer: frozen attention/FFN stages plus one shared prompter
/// block invoked after each stage.
pub struct LayerParams {
    pub attn: AttnParams,
    pub ffn: FfnParams,
    pub mp: MpBlockParams,
}

/// The assembled model.
pub struct IvModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed_vis: PatchEmbedParams,
    /// Absent in the visible-only variant.
    pub embed_ir: Option<PatchEmbedParams>,
    pub mp_alpha: MpBlockParams,
    pub layers: Vec<LayerParams>,
    /// Final encoder norm (frozen, standard pre-norm ViT closing layer).
    pub final_ln_gamma: crate::params::ParamId,
    pub final_ln_beta: crate::params::ParamId,
    pub head: HeadParams,
}

/// Forward outputs: final logits plus each layer's token output z_l.
pub struct ForwardOutput {
    pub logits: Var,
    pub layer_outputs: Vec<Var>,
}

impl IvModel {
    /// Construct a model with seeded initialization. The backbone and the
    /// visible patch embedding are frozen; the infrared patch embedding,
    /// every prompter block and the decode head are trainable.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();

        let embed_vis = PatchEmbedParams::build(&mut store, "embed.vis", config, 3, false, &mut rng);
        let embed_ir = match config.variant {
            Variant::VisOnly => None,
            // The infrared embedding trains from scratch: stronger content
            // scale, no positional noise at start.
            _ => Some(PatchEmbedParams::build_with(
                &mut store,
                "embed.ir",
                config,
                1,
                true,
                crate::backbone::IR_EMBED_INIT_STD,
                0.0,
                &mut rng,
            )),
        };
        let mp_alpha =
            MpBlockParams::build(&mut store, "mp_alpha", config, config.d_alpha, false, &mut rng);
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let attn = AttnParams::build(&mut store, &format!("layers.{l}.attn"), config, false, &mut rng);
            let ffn = FfnParams::build(&mut store, &format!("layers.{l}.ffn"), config, false, &mut rng);
            // Uni-fusion layers use the entry fusion rule (no s4).
            let with_s4 = config.variant != Variant::UniFusion;
            let mp = MpBlockParams::build(
                &mut store,
                &format!("layers.{l}.mp"),
                config,
                config.d_beta,
                with_s4,
                &mut rng,
            );
            layers.push(LayerParams { attn, ffn, mp });
        }
        let final_ln_gamma =
            store.insert("final_ln.gamma", Tensor::full(vec![config.width], 1.0), false);
        let final_ln_beta = store.insert("final_ln.beta", Tensor::zeros(vec![config.width]), false);
        let head = HeadParams::build(&mut store, "head", config, &mut rng);

        Ok(IvModel {
            config: config.clone(),
            store,
            embed_vis,
            embed_ir,
            mp_alpha,
            layers,
            final_ln_gamma,
            final_ln_beta,
            head,
        })
    }

    fn check_image(&self, t: &Tensor, channels: usize, what: &'static str) -> Result<()> {
        let s = t.shape();
        let sz = self.config.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != sz || s[3] != sz {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("{what} image must be [B,{channels},{sz},{sz}], got {s:?}"),
            });
        }
        Ok(())
    }

    /// Forward pass on an existing tape. `ir` is required unless the
    /// variant is visible-only, where it is ignored entirely.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        vis: Var,
        ir: Option<Var>,
        mode: BnMode,
    ) -> Result<ForwardOutput> {
        let cfg = self.config.clone();
        let g = cfg.grid();
        let z0 = self.embed_vis.forward(tape, bind, vis, cfg.patch_size)?;

        let z_p = match (&self.embed_ir, cfg.variant) {
            (_, Variant::VisOnly) => {
                let b = tape.value(z0).shape()[0];
                tape.constant(Tensor::zeros(vec![b, cfg.num_tokens(), cfg.width]))?
            }
            (Some(embed_ir), _) => {
                let ir = ir.ok_or_else(|| Error::Config("variant requires an infrared input".into()))?;
                embed_ir.forward(tape, bind, ir, cfg.patch_size)?
            }
            (None, _) => unreachable!("non-vis_only variants always build an infrared embedding"),
        };

        let p0 = self.mp_alpha.forward_alpha(tape, bind, z0, z_p, g, g, mode)?;
        let mut prompt_in = p0;
        // The initial prompt also enters the backbone stream directly
        // (prompts integrate by element-wise addition); exact zero at
        // initialization, so the frozen visible-only identity holds.
        let mut z = tape.add(z0, p0)?;
        let mut layer_outputs = Vec::with_capacity(cfg.depth);
        for layer in &mut self.layers {
            let a = layer.attn.forward(tape, bind, z)?;
            let p1 = match cfg.variant {
                Variant::UniFusion => layer.mp.forward_alpha(tape, bind, a, prompt_in, g, g, mode)?,
                _ => layer.mp.forward_beta(tape, bind, a, prompt_in, g, g, mode)?,
            };
            let af = tape.add(a, p1)?;
            let b = layer.ffn.forward(tape, bind, af)?;
            let p2 = match cfg.variant {
                Variant::UniFusion => layer.mp.forward_alpha(tape, bind, b, prompt_in, g, g, mode)?,
                _ => layer.mp.forward_beta(tape, bind, b, prompt_in, g, g, mode)?,
            };
            z = tape.add(b, p2)?;
            layer_outputs.push(z);
            prompt_in = propagate_prompt(tape, p0, z)?;
        }
        let zn = tape.layer_norm(
            z,
            bind.var(self.final_ln_gamma),
            bind.var(self.final_ln_beta),
            crate::tape::LN_EPS,
        )?;
        let logits = self.head.forward(tape, bind, zn)?;
        Ok(ForwardOutput { logits, layer_outputs })
    }

    /// Convenience forward over plain tensors; returns logits [B,N,K].
    pub fn forward(&mut self, vis: &Tensor, ir: Option<&Tensor>, mode: BnMode) -> Result<Tensor> {
        Ok(self.forward_all(vis, ir, mode)?.0)
    }

    /// Forward returning logits and every layer output (for diagnostics).
    pub fn forward_all(
        &mut self,
        vis: &Tensor,
        ir: Option<&Tensor>,
        mode: BnMode,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_image(vis, 3, "visible")?;
        if let Some(ir) = ir {
            if self.config.variant != Variant::VisOnly {
                self.check_image(ir, 1, "infrared")?;
            }
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape)?;
        let vis_v = tape.constant(vis.clone())?;
        let ir_v = match ir {
            Some(t) => Some(tape.constant(t.clone())?),
            None => None,
        };
        let out = self.forward_on(&mut tape, &bind, vis_v, ir_v, mode)?;
        let logits = tape.value(out.logits).clone();
        let captures = out.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((logits, captures))
    }

    /// Vanilla frozen visible-only forward: patch embedding, L pre-norm
    /// encoder layers without any prompt injection, decode head.
    pub fn forward_visible_baseline(&self, vis: &Tensor) -> Result<Tensor> {
        self.check_image(vis, 3, "visible")?;
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape)?;
        let vis_v = tape.constant(vis.clone())?;
        let mut z = self.embed_vis.forward(&mut tape, &bind, vis_v, self.config.patch_size)?;
        for layer in &self.layers {
            let a = layer.attn.forward(&mut tape, &bind, z)?;
            z = layer.ffn.forward(&mut tape, &bind, a)?;
        }
        let zn = tape.layer_norm(
            z,
            bind.var(self.final_ln_gamma),
            bind.var(self.final_ln_beta),
            crate::tape::LN_EPS,
        )?;
        let logits = self.head.forward(&mut tape, &bind, zn)?;
        Ok(tape.value(logits).clone())
    }

    /// Disjoint, exhaustive split into (trainable, frozen) parameters.
    pub fn partition_params(&self) -> (Vec<&Parameter>, Vec<&Parameter>) {
        partition(&self.store)
    }

    /// Name prefixes of the trainable groups, in a fixed order: the
    /// infrared embedding (when present), the entry block, each layer's
    /// shared block, and the head.
    pub fn trainable_group_prefixes(&self) -> Vec<String> {
        let mut groups = Vec::new();
        if self.embed_ir.is_some() {
            groups.push("embed.ir".to_string());
        }
        groups.push("mp_alpha".to_string());
        for l in 0..self.config.depth {
            groups.push(format!("layers.{l}.mp"));
        }
        groups.push("head".to_string());
        groups
    }

    /// Flip trainable flags for a training regime. The architecture is
    /// untouched; checkpoints record the resulting flags.
    pub fn apply_regime(&mut self, regime: TrainRegime) {
        match regime {
            TrainRegime::Petl => {}
            TrainRegime::FullFineTune => self.store.set_all_trainable(true),
            TrainRegime::HeadOnly => {
                self.store.set_all_trainable(false);
                for p in self.store.iter_mut() {
                    if p.name.starts_with("head.") {
                        p.trainable = true;
                    }
                }
            }
        }
    }

    /// Batch-norm running statistics, named, in deterministic order.
    pub fn bn_states(&self) -> Vec<(String, &BnState)> {
        let mut out = vec![("mp_alpha.ho.bn".to_string(), &self.mp_alpha.ho.bn_state)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.mp.ho.bn"), &layer.mp.ho.bn_state));
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState)> {
        let mut out = vec![("mp_alpha.ho.bn".to_string(), &mut self.mp_alpha.ho.bn_state)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.mp.ho.bn"), &mut layer.mp.ho.bn_state));
        }
        out
    }
}

/// Prompt input for the next layer: the initial prompt plus this layer's
/// output, keeping the infrared prior present at every depth.
pub fn propagate_prompt(tape: &mut Tape, p0: Var, z_l: Var) -> Result<Var> {
    tape.add(p0, z_l)
}
