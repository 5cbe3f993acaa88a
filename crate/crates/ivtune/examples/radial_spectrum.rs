//! Radial frequency-band energy: where the energy of each modality lives,
//! and how a 3×3 convolution versus a global linear projection reshapes an
//! infrared image's spectrum.
//!
//! ```text
//! cargo run --example radial_spectrum
//! ```

use ivtune::analysis::{mean_radial_energy, operator_spectrum_shift, SpectrumOperator};
use ivtune::data::{Dataset, DatasetSpec};
use ivtune::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ivtune::Result<()> {
    let data = Dataset::generate(&DatasetSpec {
        n_train: 64,
        n_val: 0,
        ..DatasetSpec::reference()
    })?;
    let bands = 8;

    let ir = mean_radial_energy(data.train.iter().map(|s| &s.ir), bands)?;
    let vis = mean_radial_energy(data.train.iter().map(|s| &s.vis), bands)?;
    println!("mean radial energy over {} images:", data.train.len());
    println!("band   radius      infrared  visible");
    for b in 0..bands {
        let (lo, hi) = ir.edges[b];
        println!(
            "{b:>4}   [{lo:.2},{hi:.2})  {:>8.4}  {:>7.4}",
            ir.energies[b], vis.energies[b]
        );
    }

    // How operators move infrared energy between bands. Purely
    // descriptive: kernels here are random, not trained.
    let s = data.spec.image_size;
    let images: Vec<Tensor> = data
        .train
        .iter()
        .take(32)
        .map(|sample| Tensor::new(vec![s, s], sample.ir.data().to_vec()))
        .collect::<ivtune::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (label, op) in [
        ("random 3x3 conv", SpectrumOperator::seeded_conv(&mut rng)),
        ("random linear projection", SpectrumOperator::seeded_projection(s, s, &mut rng)),
        ("identity conv", SpectrumOperator::identity_conv()),
    ] {
        let shift = operator_spectrum_shift(&images, &op, bands)?;
        println!("\ninfrared spectrum under {label}:");
        println!("band   before    after");
        for b in 0..bands {
            println!("{b:>4}  {:>8.4}  {:>7.4}", shift.before.energies[b], shift.after.energies[b]);
        }
    }
    Ok(())
}
