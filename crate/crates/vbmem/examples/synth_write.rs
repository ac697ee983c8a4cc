//! Writes a synthetic episode into memory and prints the bound breakdown.

use rand::SeedableRng;
use vbmem::elbo::elbo_closed_form;
use vbmem::engine::{write_episode, InferenceConfig};
use vbmem::episode::{generate_synthetic_episode, SynthConfig};
use vbmem::model::{ModelSpec, Variant};

fn main() -> vbmem::Result<()> {
    let cfg = SynthConfig {
        timesteps: 16,
        memory_rows: 8,
        code_dim: 12,
        ..Default::default()
    };
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    let (episode, truth) = generate_synthetic_episode(&cfg, &mut rng)?;
    let spec = ModelSpec::new(
        Variant::GaussianAddress,
        8,
        12,
        1,
        1,
        1.0,
        truth.prior_mean.clone(),
        nalgebra::DMatrix::identity(8, 8),
        None,
        None,
    )?;
    let result = write_episode(&spec, episode.codes(), &InferenceConfig::default())?;
    let bound = elbo_closed_form(&spec, episode.codes(), &result, None)?;
    println!(
        "elbo {:.3} (memory divergence {:.3})",
        bound.total, bound.memory_kl
    );
    Ok(())
}
