//! Verify the reverse-mode gradients of every primitive and of the full
//! prompter blocks against central finite differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use ivtune::config::ModelConfig;
use ivtune::gradcheck::finite_diff_check_multi;
use ivtune::params::{Binding, ParamStore};
use ivtune::prompter::MpBlockParams;
use ivtune::tape::BnMode;
use ivtune::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ivtune::Result<()> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    println!("{:<28} {:>12} {:>8}", "function", "max rel err", "coords");

    // A few representative primitives.
    let x = Tensor::uniform(vec![2, 5], 0.2, 1.5, &mut rng);
    let g = Tensor::uniform(vec![5], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(vec![5], -0.5, 0.5, &mut rng);
    let r = finite_diff_check_multi(&[x, g, b], h, |tape, v| {
        let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })?;
    println!("{:<28} {:>12.3e} {:>8}", "layer_norm", r.max_rel_err, r.checked);

    let x = Tensor::uniform(vec![2, 3, 4, 4], 0.3, 1.0, &mut rng);
    let k = Tensor::uniform(vec![3, 3, 3], -0.5, 0.5, &mut rng);
    let bias = Tensor::uniform(vec![3], -0.5, 0.5, &mut rng);
    let r = finite_diff_check_multi(&[x, k, bias], h, |tape, v| {
        let y = tape.depthwise_conv3x3(v[0], v[1], v[2])?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })?;
    println!("{:<28} {:>12.3e} {:>8}", "depthwise_conv3x3", r.max_rel_err, r.checked);

    // A fixed weighting keeps the loss honestly dependent on x; a plain
    // square loss is invariant under train-mode standardization.
    let x = Tensor::uniform(vec![2, 4, 3, 3], 0.3, 1.0, &mut rng);
    let g = Tensor::uniform(vec![4], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(vec![4], -0.5, 0.5, &mut rng);
    let w = Tensor::uniform(vec![2, 4, 3, 3], 0.5, 1.5, &mut rng);
    let r = finite_diff_check_multi(&[x, g, b, w], h, |tape, v| {
        let mut state = ivtune::tape::BnState::new(4);
        let y = tape.batch_norm(v[0], v[1], v[2], &mut state, BnMode::Train, 1e-5)?;
        let weighted = tape.mul(y, v[3])?;
        tape.sum(weighted)
    })?;
    println!("{:<28} {:>12.3e} {:>8}", "batch_norm (train)", r.max_rel_err, r.checked);

    // Full prompter block, both fusion rules, all parameters and inputs.
    for (name, with_s4) in [("entry fusion block", false), ("per-layer fusion block", true)] {
        let mut cfg = ModelConfig::toy();
        cfg.width = 6;
        cfg.split_ratio_inv = 2;
        let mut store = ParamStore::new();
        let mut block_rng = ChaCha8Rng::seed_from_u64(7);
        let block = MpBlockParams::build(&mut store, "mp", &cfg, 4, with_s4, &mut block_rng);
        // Zero-initialized projections hide half the paths; give them mass.
        for nm in ["mp.s3.weight", "mp.s4.weight"] {
            if let Some(p) = store.by_name_mut(nm) {
                let shape = p.tensor.shape().to_vec();
                p.tensor = Tensor::uniform(shape, -0.3, 0.3, &mut block_rng);
            }
        }
        let leaves: Vec<Tensor> = {
            let mut v = vec![
                Tensor::uniform(vec![2, 4, 6], 0.3, 1.2, &mut rng),
                Tensor::uniform(vec![2, 4, 6], 0.3, 1.2, &mut rng),
            ];
            v.extend(store.iter().map(|p| p.tensor.clone()));
            v
        };
        let r = finite_diff_check_multi(&leaves, h, |tape, vars| {
            // The harness owns every leaf: inputs first, then the block's
            // parameters in store order.
            let bind = Binding::from_vars(vars[2..].to_vec());
            let mut block = block.clone();
            let out = if with_s4 {
                block.forward_beta(tape, &bind, vars[0], vars[1], 2, 2, BnMode::Train)?
            } else {
                block.forward_alpha(tape, &bind, vars[0], vars[1], 2, 2, BnMode::Train)?
            };
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        })?;
        println!("{:<28} {:>12.3e} {:>8}", name, r.max_rel_err, r.checked);
    }

    println!("\nall gradients verified against central differences (h = {h:.0e})");
    Ok(())
}
