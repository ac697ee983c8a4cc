//! Generation from a written memory: direct ancestral sampling and the
//! iterative read loop, both operating in latent space with pluggable
//! decoder/encoder hooks. Inference never consults the decoder; it only
//! maps finished codes to observation payloads.

use nalgebra::DVector;
use rand::Rng;

use crate::dist::standard_normal_vector;
use crate::engine::{
    update_categorical_address, update_gaussian_address, update_mixture_assignment, ClusterView,
    GaussianAddressOp,
};
use crate::episode::CodePosterior;
use crate::error::{Error, Result};
use crate::model::{MemoryState, ModelSpec, Variant};

/// Observation payload produced by a decoder hook. The identity decoder
/// returns the code itself.
pub type Observation = Vec<f64>;

/// Maps a finished code vector to an observation payload.
pub trait DecoderHook {
    fn decode(&mut self, code: &DVector<f64>) -> Observation;
}

/// Identity decoder: the observation is the code.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityDecoder;

impl DecoderHook for IdentityDecoder {
    fn decode(&mut self, code: &DVector<f64>) -> Observation {
        code.iter().copied().collect()
    }
}

/// Maps an observation back to a code posterior for the iterative reader.
pub trait EncoderHook {
    fn encode(&mut self, observation: &Observation) -> Result<CodePosterior>;
}

/// Identity encoder: wraps the observation as a zero-variance code.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityEncoder;

impl EncoderHook for IdentityEncoder {
    fn encode(&mut self, observation: &Observation) -> Result<CodePosterior> {
        CodePosterior::observed(DVector::from_vec(observation.clone()))
    }
}

fn validate_memory(spec: &ModelSpec, memory: &MemoryState) -> Result<()> {
    if memory.variant() != spec.variant() {
        return Err(Error::invalid(format!(
            "generation: memory state is {}, spec is {}",
            memory.variant().as_str(),
            spec.variant().as_str()
        )));
    }
    if memory.partitions() != spec.partitions() || memory.clusters() != spec.clusters() {
        return Err(Error::invalid("generation: cluster table shape mismatch"));
    }
    let sole = memory.cluster(0, 0);
    if sole.memory.rows() != spec.memory_rows() || sole.memory.cols() != spec.block_dim() {
        return Err(Error::invalid("generation: memory matrix shape mismatch"));
    }
    Ok(())
}

/// Samples one code ancestrally: episode-level latents from their
/// posterior, addresses from the generative prior (the tree variant draws
/// its hard assignments from the recorded pseudocount distribution), then
/// the code from its conditional.
fn sample_code_from_prior_addresses<R: Rng + ?Sized>(
    spec: &ModelSpec,
    memory: &MemoryState,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let sigma = spec.sigma_z2().sqrt();
    match spec.variant() {
        Variant::GaussianAddress | Variant::MeanShifted => {
            let cluster = memory.cluster(0, 0);
            let m = cluster.memory.sample(rng);
            let w = standard_normal_vector(rng, spec.memory_rows());
            let mut mean = m.transpose() * w;
            if let Some(loc) = &cluster.location {
                mean += loc.sample(rng);
            }
            Ok(&mean + standard_normal_vector(rng, spec.code_dim()) * sigma)
        }
        Variant::CategoricalAddress => {
            let m = memory.cluster(0, 0).memory.sample(rng);
            let row = rng.random_range(0..spec.memory_rows());
            let mean = m.row(row).transpose();
            Ok(&mean + standard_normal_vector(rng, spec.code_dim()) * sigma)
        }
        Variant::Mixture => {
            let h = rng.random_range(0..spec.clusters());
            let cluster = memory.cluster(0, h);
            let m = cluster.memory.sample(rng);
            let b = cluster
                .location
                .as_ref()
                .expect("mixture clusters carry locations")
                .sample(rng);
            let w = standard_normal_vector(rng, spec.memory_rows());
            let mean = m.transpose() * w + b;
            Ok(&mean + standard_normal_vector(rng, spec.code_dim()) * sigma)
        }
        Variant::Tree => {
            let table = memory.pseudocounts().ok_or_else(|| {
                Error::invalid("generation: tree variant requires a pseudocount table")
            })?;
            if table.is_empty() {
                return Err(Error::invalid(
                    "generation: tree pseudocount table is empty",
                ));
            }
            let path = table.sample_path(rng)?;
            let width = spec.block_dim();
            let mut code = DVector::zeros(spec.code_dim());
            for (g, h) in path.iter().enumerate() {
                let cluster = memory.cluster(g, *h as usize);
                let m = cluster.memory.sample(rng);
                let b = cluster
                    .location
                    .as_ref()
                    .expect("tree clusters carry locations")
                    .sample(rng);
                let w = standard_normal_vector(rng, spec.memory_rows());
                let mean = m.transpose() * w + b;
                let block = &mean + standard_normal_vector(rng, width) * sigma;
                code.rows_mut(g * width, width).copy_from(&block);
            }
            Ok(code)
        }
    }
}

/// Draws `n` observations directly from the written memory.
pub fn generate_direct<R: Rng + ?Sized, D: DecoderHook>(
    spec: &ModelSpec,
    memory: &MemoryState,
    n: usize,
    rng: &mut R,
    decoder: &mut D,
) -> Result<Vec<Observation>> {
    validate_memory(spec, memory)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let code = sample_code_from_prior_addresses(spec, memory, rng)?;
        out.push(decoder.decode(&code));
    }
    Ok(out)
}

/// One iteration of the read loop: infer the addressing factors for the
/// encoded sample against the frozen memory posterior, then resample
/// everything downstream.
fn read_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    memory: &MemoryState,
    code: &CodePosterior,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if code.dim() != spec.code_dim() {
        return Err(Error::invalid(format!(
            "iterative read: encoded code has dimension {}, expected {}",
            code.dim(),
            spec.code_dim()
        )));
    }
    let sigma = spec.sigma_z2().sqrt();
    match spec.variant() {
        Variant::GaussianAddress | Variant::MeanShifted => {
            let cluster = memory.cluster(0, 0);
            let target = match &cluster.location {
                Some(loc) => code.with_mean(code.mean() - loc.mean()),
                None => code.clone(),
            };
            let q_w = update_gaussian_address(&target, &cluster.memory, spec.sigma_z2())?;
            let m = cluster.memory.sample(rng);
            let w = q_w.sample(rng);
            let mut mean = m.transpose() * w;
            if let Some(loc) = &cluster.location {
                mean += loc.sample(rng);
            }
            Ok(&mean + standard_normal_vector(rng, spec.code_dim()) * sigma)
        }
        Variant::CategoricalAddress => {
            let cluster = memory.cluster(0, 0);
            let theta = update_categorical_address(code, &cluster.memory, spec.sigma_z2())?;
            let row = theta.sample_index(rng);
            let m = cluster.memory.sample(rng);
            let mean = m.row(row).transpose();
            Ok(&mean + standard_normal_vector(rng, spec.code_dim()) * sigma)
        }
        Variant::Mixture | Variant::Tree => {
            let partitions = spec.partitions();
            let width = spec.block_dim();
            let mut out = DVector::zeros(spec.code_dim());
            for g in 0..partitions {
                let block_code = code.block(g, partitions);
                let mut conditionals = Vec::with_capacity(spec.clusters());
                for h in 0..spec.clusters() {
                    let cluster = memory.cluster(g, h);
                    let loc_mean = cluster
                        .location
                        .as_ref()
                        .expect("mixture clusters carry locations")
                        .mean();
                    let op = GaussianAddressOp::new(&cluster.memory, spec.sigma_z2())?;
                    conditionals.push(op.posterior(&(block_code.mean() - loc_mean))?);
                }
                let views: Vec<ClusterView<'_>> = (0..spec.clusters())
                    .map(|h| {
                        let cluster = memory.cluster(g, h);
                        ClusterView {
                            memory: &cluster.memory,
                            location: cluster.location.as_ref().expect("location present"),
                            weight_conditional: &conditionals[h],
                        }
                    })
                    .collect();
                let assignment =
                    update_mixture_assignment(&block_code, &views, spec.sigma_z2())?;
                let h = assignment.sample_index(rng);
                let cluster = memory.cluster(g, h);
                let m = cluster.memory.sample(rng);
                let b = cluster
                    .location
                    .as_ref()
                    .expect("location present")
                    .sample(rng);
                let w = conditionals[h].sample(rng);
                let mean = m.transpose() * w + b;
                let block = &mean + standard_normal_vector(rng, width) * sigma;
                out.rows_mut(g * width, width).copy_from(&block);
            }
            Ok(out)
        }
    }
}

/// Iterative reading: initialize by generating from memory, then repeat
/// encode → address inference → resample for `steps` iterations, recording
/// each decoded observation.
pub fn generate_iterative<R: Rng + ?Sized, D: DecoderHook, E: EncoderHook>(
    spec: &ModelSpec,
    memory: &MemoryState,
    steps: usize,
    rng: &mut R,
    decoder: &mut D,
    encoder: &mut E,
) -> Result<Vec<Observation>> {
    if steps == 0 {
        return Err(Error::invalid("generate_iterative: steps must be >= 1"));
    }
    validate_memory(spec, memory)?;
    let initial = sample_code_from_prior_addresses(spec, memory, rng)?;
    let mut observation = decoder.decode(&initial);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let code = encoder.encode(&observation)?;
        let next = read_step(spec, memory, &code, rng)?;
        observation = decoder.decode(&next);
        out.push(observation.clone());
    }
    Ok(out)
}

/// Strategy marker for memory resizing. The variational updates have no
/// parametric dependency on the cluster count, so resizing is a fresh
/// write under the new spec; no state migrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeStrategy {
    #[default]
    Rewrite,
}

/// Validates that `to` differs from `from` only in its cluster count and
/// returns it; writing an episode under the returned spec is the whole
/// resize operation.
pub fn resize_memory(
    from: &ModelSpec,
    to: &ModelSpec,
    _strategy: ResizeStrategy,
) -> Result<ModelSpec> {
    if from.variant() != to.variant() {
        return Err(Error::invalid(format!(
            "resize_memory: variant changed ({} to {})",
            from.variant().as_str(),
            to.variant().as_str()
        )));
    }
    if from.memory_rows() != to.memory_rows() {
        return Err(Error::invalid("resize_memory: K must match"));
    }
    if from.code_dim() != to.code_dim() {
        return Err(Error::invalid("resize_memory: C must match"));
    }
    if from.partitions() != to.partitions() {
        return Err(Error::invalid("resize_memory: G must match"));
    }
    if from.sigma_z2() != to.sigma_z2() {
        return Err(Error::invalid("resize_memory: sigma_z2 must match"));
    }
    if from.prior_mean() != to.prior_mean() || from.prior_row_cov() != to.prior_row_cov() {
        return Err(Error::invalid("resize_memory: memory prior must match"));
    }
    if from.loc_prior_mean() != to.loc_prior_mean() || from.loc_prior_cov() != to.loc_prior_cov()
    {
        return Err(Error::invalid("resize_memory: location prior must match"));
    }
    Ok(to.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{FullGaussian, MatrixNormal};
    use crate::model::{ClusterPosterior, MemoryState, ModelSpec, PseudocountTable, Variant};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    struct CountingDecoder {
        calls: usize,
    }

    impl DecoderHook for CountingDecoder {
        fn decode(&mut self, code: &DVector<f64>) -> Observation {
            self.calls += 1;
            code.iter().copied().collect()
        }
    }

    #[test]
    fn direct_samples_have_code_dimension_and_are_seeded() {
        let spec = ModelSpec::with_defaults(Variant::Mixture, 2, 4, 3, 1, 1.0).unwrap();
        let (memory, _) = crate::model::build_priors(&spec).unwrap();
        let mut decoder = CountingDecoder { calls: 0 };
        let a = generate_direct(
            &spec,
            &memory,
            5,
            &mut ChaCha12Rng::seed_from_u64(4),
            &mut decoder,
        )
        .unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|s| s.len() == 4));
        assert_eq!(decoder.calls, 5);
        let b = generate_direct(
            &spec,
            &memory,
            5,
            &mut ChaCha12Rng::seed_from_u64(4),
            &mut IdentityDecoder,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prior_memory_sample_moments_match_analytic_values() {
        // Posterior equal to the prior (zero mean, identity row covariance)
        // with unit noise: each coordinate has mean 0 and variance K + 1.
        let k = 3;
        let c = 2;
        let spec = ModelSpec::with_defaults(Variant::GaussianAddress, k, c, 1, 1, 1.0).unwrap();
        let (memory, _) = crate::model::build_priors(&spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let samples = generate_direct(&spec, &memory, 100_000, &mut rng, &mut IdentityDecoder)
            .unwrap();
        let n = samples.len() as f64;
        for coord in 0..c {
            let mean: f64 = samples.iter().map(|s| s[coord]).sum::<f64>() / n;
            let var: f64 =
                samples.iter().map(|s| (s[coord] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expected = (k + 1) as f64;
            // Per-coordinate standard error of the mean.
            let se = (expected / n).sqrt();
            assert!(mean.abs() <= 4.0 * se, "mean {mean} vs se {se}");
            assert!(
                (var - expected).abs() / expected < 0.05,
                "variance {var} vs {expected}"
            );
        }
    }

    #[test]
    fn tree_direct_generation_follows_pseudocount_frequencies() {
        // Two well-separated clusters; the observation sign identifies the
        // sampled assignment.
        let spec = ModelSpec::with_defaults(Variant::Tree, 1, 1, 2, 1, 1e-6).unwrap();
        let tiny = DMatrix::identity(1, 1) * 1e-10;
        let cluster = |loc: f64| ClusterPosterior {
            memory: MatrixNormal::new(DMatrix::zeros(1, 1), tiny.clone()).unwrap(),
            location: Some(
                FullGaussian::new(nalgebra::DVector::from_vec(vec![loc]), tiny.clone()).unwrap(),
            ),
        };
        let mut table = PseudocountTable::new(2, 1);
        for _ in 0..3 {
            table.record(&[0]).unwrap();
        }
        table.record(&[1]).unwrap();
        let memory = MemoryState::new(
            Variant::Tree,
            vec![vec![cluster(100.0), cluster(-100.0)]],
            Some(table),
        )
        .unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 100_000;
        let samples =
            generate_direct(&spec, &memory, n, &mut rng, &mut IdentityDecoder).unwrap();
        let positive = samples.iter().filter(|s| s[0] > 0.0).count() as f64 / n as f64;
        // Laplace-smoothed root distribution: (3+1)/(4+2) = 2/3.
        let expected = 2.0 / 3.0;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (positive - expected).abs() <= 4.0 * se,
            "frequency {positive} vs {expected}"
        );
    }

    #[test]
    fn tree_generation_requires_pseudocounts() {
        let spec = ModelSpec::with_defaults(Variant::Tree, 1, 2, 2, 2, 1.0).unwrap();
        let (memory, _) = crate::model::build_priors(&spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(generate_direct(&spec, &memory, 1, &mut rng, &mut IdentityDecoder).is_err());
    }

    #[test]
    fn iterative_read_contracts_to_the_cluster_location() {
        // Near-deterministic single-cluster memory with zero mean: the
        // read map sends any code to the cluster location.
        let target = 0.75;
        let spec = ModelSpec::new(
            Variant::Mixture,
            1,
            1,
            1,
            1,
            1e-10,
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1) * 1e-10,
            Some(nalgebra::DVector::from_vec(vec![target])),
            Some(DMatrix::identity(1, 1) * 1e-10),
        )
        .unwrap();
        let tiny = DMatrix::identity(1, 1) * 1e-10;
        let memory = MemoryState::new(
            Variant::Mixture,
            vec![vec![ClusterPosterior {
                memory: MatrixNormal::new(DMatrix::zeros(1, 1), tiny.clone()).unwrap(),
                location: Some(
                    FullGaussian::new(nalgebra::DVector::from_vec(vec![target]), tiny).unwrap(),
                ),
            }]],
            None,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let chain = generate_iterative(
            &spec,
            &memory,
            20,
            &mut rng,
            &mut IdentityDecoder,
            &mut IdentityEncoder,
        )
        .unwrap();
        assert_eq!(chain.len(), 20);
        let last = chain.last().unwrap()[0];
        assert!((last - target).abs() < 1e-3, "last {last} vs {target}");
    }

    #[test]
    fn iterative_read_single_step_and_determinism() {
        let spec = ModelSpec::with_defaults(Variant::GaussianAddress, 2, 3, 1, 1, 1.0).unwrap();
        let (memory, _) = crate::model::build_priors(&spec).unwrap();
        let run = |seed| {
            generate_iterative(
                &spec,
                &memory,
                1,
                &mut ChaCha12Rng::seed_from_u64(seed),
                &mut IdentityDecoder,
                &mut IdentityEncoder,
            )
            .unwrap()
        };
        let a = run(5);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 3);
        assert_eq!(a, run(5));
        assert_ne!(a, run(6));
    }

    #[test]
    fn resize_accepts_cluster_growth_and_rejects_shape_changes() {
        let small = ModelSpec::with_defaults(Variant::Mixture, 6, 10, 10, 1, 1.0).unwrap();
        let large = ModelSpec::with_defaults(Variant::Mixture, 6, 10, 100, 1, 1.0).unwrap();
        let accepted = resize_memory(&small, &large, ResizeStrategy::Rewrite).unwrap();
        assert_eq!(accepted.clusters(), 100);

        let narrower = ModelSpec::with_defaults(Variant::Mixture, 6, 5, 100, 1, 1.0).unwrap();
        assert!(resize_memory(&small, &narrower, ResizeStrategy::Rewrite).is_err());
        let other_k = ModelSpec::with_defaults(Variant::Mixture, 5, 10, 100, 1, 1.0).unwrap();
        assert!(resize_memory(&small, &other_k, ResizeStrategy::Rewrite).is_err());
    }
}
