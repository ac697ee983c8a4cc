//! Least-squares memory-writing baselines evaluated on the same bound as
//! the coordinate-ascent writer: an online non-iterative pass and a batched
//! iterative rewrite. Both set each address to the regularized
//! least-squares point solution against the current posterior mean memory,
//! so neither accounts for memory uncertainty when addressing.

use nalgebra::DMatrix;
use rand::Rng;

use crate::dist::{chol_solve_mat, chol_solve_vec, cholesky_lower, symmetrize_checked, FullGaussian, MatrixNormal};
use crate::elbo::elbo_with_state;
use crate::engine::{update_memory, InferenceResult};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::model::{build_priors, AddressPosterior, ModelSpec, Variant};

/// Which least-squares writer to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// One pass over the episode in timestep order; each write conditions
    /// on the memory produced by the previous one.
    OnlineNonIterative,
    /// Re-estimates all addresses against the current memory mean, then
    /// rewrites memory from the original prior; repeated `iterations` times.
    BatchedIterative { iterations: usize },
}

/// Regularized least-squares address against the posterior mean memory:
/// mean `(R Rᵀ + I_K)⁻¹ R μ_z`, covariance set to that same inverse.
fn least_squares_address(mem: &MatrixNormal, code_mean: &nalgebra::DVector<f64>) -> Result<FullGaussian> {
    let k = mem.rows();
    let gram = symmetrize_checked(
        &(mem.mean() * mem.mean().transpose() + DMatrix::identity(k, k)),
        "least-squares gram",
    )?;
    let chol = cholesky_lower(&gram, "least-squares gram")?;
    let cov = symmetrize_checked(
        &chol_solve_mat(&chol, &DMatrix::identity(k, k)),
        "least-squares covariance",
    )?;
    let mean = chol_solve_vec(&chol, &(mem.mean() * code_mean));
    FullGaussian::new(mean, cov)
}

/// Writes an episode with the requested least-squares baseline and returns
/// the same result shape as the coordinate-ascent writer, so both are
/// scored by the identical closed-form bound. The bound trace holds one
/// entry per write (online: the bound of the episode prefix written so
/// far) or per iteration (batched).
pub fn baseline_write<R: Rng + ?Sized>(
    spec: &ModelSpec,
    episode: &Episode,
    kind: &BaselineKind,
    _rng: &mut R,
) -> Result<InferenceResult> {
    if spec.variant() != Variant::GaussianAddress {
        return Err(Error::invalid(format!(
            "baseline_write: only the gaussian-address variant is supported, got {}",
            spec.variant().as_str()
        )));
    }
    if episode.code_dim() != spec.code_dim() {
        return Err(Error::invalid(format!(
            "baseline_write: episode code dimension {} does not match spec C = {}",
            episode.code_dim(),
            spec.code_dim()
        )));
    }
    if let BaselineKind::BatchedIterative { iterations } = kind {
        if *iterations == 0 {
            return Err(Error::invalid("baseline_write: iterations must be >= 1"));
        }
    }

    let codes = episode.codes();
    let (mut state, _) = build_priors(spec)?;
    let prior = spec.memory_prior()?;
    let mut trace = Vec::new();

    match kind {
        BaselineKind::OnlineNonIterative => {
            let mut addresses: Vec<AddressPosterior> = Vec::with_capacity(codes.len());
            trace.push(elbo_with_state(spec, &[], &state, &[], None)?.total);
            for (t, code) in codes.iter().enumerate() {
                let address =
                    least_squares_address(&state.cluster(0, 0).memory, code.mean())?;
                addresses.push(AddressPosterior::Gaussian(address));
                // Single-timestep conjugate write, with the running
                // posterior standing in as the prior.
                let current = state.cluster(0, 0).memory.clone();
                state.cluster_mut(0, 0).memory = update_memory(
                    &codes[t..=t],
                    &addresses[t..=t],
                    &current,
                    spec.sigma_z2(),
                    None,
                )?;
                trace.push(
                    elbo_with_state(spec, &codes[..=t], &state, &addresses[..=t], None)?.total,
                );
            }
            Ok(InferenceResult {
                memory: state,
                addresses,
                elbo_trace: trace,
            })
        }
        BaselineKind::BatchedIterative { iterations } => {
            let mut addresses: Vec<AddressPosterior> = codes
                .iter()
                .map(|code| {
                    least_squares_address(&state.cluster(0, 0).memory, code.mean())
                        .map(AddressPosterior::Gaussian)
                })
                .collect::<Result<Vec<_>>>()?;
            trace.push(elbo_with_state(spec, codes, &state, &addresses, None)?.total);
            for _ in 0..*iterations {
                addresses = codes
                    .iter()
                    .map(|code| {
                        least_squares_address(&state.cluster(0, 0).memory, code.mean())
                            .map(AddressPosterior::Gaussian)
                    })
                    .collect::<Result<Vec<_>>>()?;
                state.cluster_mut(0, 0).memory =
                    update_memory(codes, &addresses, &prior, spec.sigma_z2(), None)?;
                trace.push(elbo_with_state(spec, codes, &state, &addresses, None)?.total);
            }
            Ok(InferenceResult {
                memory: state,
                addresses,
                elbo_trace: trace,
            })
        }
    }
}
