//! Coordinate-ascent variational inference: the closed-form block updates,
//! data-dependent initialization, sweep scheduling, and convergence control.
//!
//! Every update sets one variational factor to its exact optimum given the
//! others, so a full sweep can never decrease the bound. Within a sweep the
//! order is: weight conditionals, then cluster assignments, then locations,
//! then memory matrices; partitions of the tree variant are independent and
//! processed one after another.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    chol_solve_mat, chol_solve_vec, cholesky_lower, standard_normal_matrix, symmetrize_checked,
    FullGaussian, MatrixNormal, OneHotCategorical, QuadraticMoments,
};
use crate::elbo;
use crate::episode::CodePosterior;
use crate::error::{Error, Result};
use crate::model::{
    build_priors, matrix_to_rows, rows_to_matrix, AddressPosterior, MemoryState, MixtureAddress,
    ModelSpec, PseudocountTable, Variant,
};

/// How the memory posterior is initialized before the first sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Copy the prior.
    #[serde(rename = "prior")]
    Prior,
    /// Perturb the prior mean with i.i.d. `N(0, 0.1²)` entries.
    #[serde(rename = "random")]
    Random,
    /// Seed cluster locations with k-means++ centers; memory stays at the
    /// prior.
    #[serde(rename = "data")]
    DataDependent,
}

/// Inference run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Number of full coordinate-ascent sweeps.
    pub sweeps: usize,
    pub init_mode: InitMode,
    pub rng_seed: u64,
    /// Record the bound before the first sweep and after every sweep.
    pub elbo_trace: bool,
    /// Optional early stop on relative bound change; `None` runs all sweeps.
    pub early_stop_rel_tol: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sweeps: 10,
            init_mode: InitMode::Prior,
            rng_seed: 0,
            elbo_trace: true,
            early_stop_rel_tol: None,
        }
    }
}

/// Output of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub memory: MemoryState,
    pub addresses: Vec<AddressPosterior>,
    /// Bound values: one entry before the first sweep, one after each sweep
    /// (empty when tracing is disabled).
    pub elbo_trace: Vec<f64>,
}

impl InferenceResult {
    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }
}

/// Precomputed pieces of the Gaussian weight update for one memory
/// distribution: precision `I_K + σ⁻²(R Rᵀ + C U)`, its Cholesky factor,
/// and the shared posterior covariance.
pub(crate) struct GaussianAddressOp {
    chol: DMatrix<f64>,
    cov: DMatrix<f64>,
    map: DMatrix<f64>, // σ⁻² R
}

impl GaussianAddressOp {
    pub(crate) fn new(mem: &MatrixNormal, sigma_z2: f64) -> Result<Self> {
        if sigma_z2 <= 0.0 || sigma_z2.is_nan() {
            return Err(Error::invalid("update: sigma_z2 must be positive"));
        }
        let k = mem.rows();
        let c = mem.cols() as f64;
        let inv_s = 1.0 / sigma_z2;
        let precision = DMatrix::identity(k, k)
            + (mem.mean() * mem.mean().transpose() + mem.row_cov() * c) * inv_s;
        let precision = symmetrize_checked(&precision, "weight precision")?;
        let chol = cholesky_lower(&precision, "weight precision")?;
        let cov = symmetrize_checked(
            &chol_solve_mat(&chol, &DMatrix::identity(k, k)),
            "weight covariance",
        )?;
        Ok(Self {
            chol,
            cov,
            map: mem.mean() * inv_s,
        })
    }

    pub(crate) fn posterior(&self, target: &DVector<f64>) -> Result<FullGaussian> {
        let mean = chol_solve_vec(&self.chol, &(&self.map * target));
        FullGaussian::new(mean, self.cov.clone())
    }
}

/// Optimal Gaussian weight posterior for one code against one memory
/// distribution. The covariance depends only on the memory parameters, the
/// code width, and the noise variance, not on the code itself.
pub fn update_gaussian_address(
    code: &CodePosterior,
    mem: &MatrixNormal,
    sigma_z2: f64,
) -> Result<FullGaussian> {
    if code.dim() != mem.cols() {
        return Err(Error::invalid(format!(
            "update_gaussian_address: code dimension {} does not match memory columns {}",
            code.dim(),
            mem.cols()
        )));
    }
    GaussianAddressOp::new(mem, sigma_z2)?.posterior(code.mean())
}

/// Optimal one-hot weight posterior: softmax of
/// `σ⁻² [ −½ diag(R Rᵀ + C U) + R μ_z ]`.
pub fn update_categorical_address(
    code: &CodePosterior,
    mem: &MatrixNormal,
    sigma_z2: f64,
) -> Result<OneHotCategorical> {
    if code.dim() != mem.cols() {
        return Err(Error::invalid(format!(
            "update_categorical_address: code dimension {} does not match memory columns {}",
            code.dim(),
            mem.cols()
        )));
    }
    if sigma_z2 <= 0.0 || sigma_z2.is_nan() {
        return Err(Error::invalid("update: sigma_z2 must be positive"));
    }
    let c = mem.cols() as f64;
    let inv_s = 1.0 / sigma_z2;
    let second = mem.mean() * mem.mean().transpose() + mem.row_cov() * c;
    let logits = (mem.mean() * code.mean() - 0.5 * second.diagonal()) * inv_s;
    OneHotCategorical::from_logits(&logits)
}

/// Mean vector and second-moment matrix of an address factor. Structured
/// (mixture/tree) addresses must be decomposed into their per-cluster
/// conditionals before reaching the conjugate updates.
fn address_moments(address: &AddressPosterior) -> Result<(&DVector<f64>, DMatrix<f64>)> {
    match address {
        AddressPosterior::Gaussian(g) => Ok((g.mean(), g.second_moment())),
        AddressPosterior::Categorical(c) => Ok((c.mean(), c.second_moment())),
        other => Err(Error::invalid(format!(
            "address moments: expected a flat gaussian or categorical factor, got {}",
            other.variant_name()
        ))),
    }
}

fn check_weights(len: usize, responsibilities: Option<&[f64]>) -> Result<()> {
    if let Some(w) = responsibilities {
        if w.len() != len {
            return Err(Error::invalid(format!(
                "responsibilities: length {} does not match {len} timesteps",
                w.len()
            )));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("responsibilities: entries must lie in [0, 1]"));
        }
    }
    Ok(())
}

/// Conjugate memory update from (optionally weighted) per-timestep address
/// moments:
///
/// `U ← (U₀⁻¹ + σ⁻² Σ_t ω_t E[w wᵀ])⁻¹`,
/// `R ← U (U₀⁻¹ R₀ + σ⁻² Σ_t ω_t E[w] μ_zᵀ)`.
pub fn update_memory(
    codes: &[CodePosterior],
    addresses: &[AddressPosterior],
    prior: &MatrixNormal,
    sigma_z2: f64,
    responsibilities: Option<&[f64]>,
) -> Result<MatrixNormal> {
    if codes.len() != addresses.len() {
        return Err(Error::invalid(format!(
            "update_memory: {} codes but {} addresses",
            codes.len(),
            addresses.len()
        )));
    }
    check_weights(codes.len(), responsibilities)?;
    if sigma_z2 <= 0.0 || sigma_z2.is_nan() {
        return Err(Error::invalid("update: sigma_z2 must be positive"));
    }
    if codes.is_empty() {
        return Ok(prior.clone());
    }

    let k = prior.rows();
    let inv_s = 1.0 / sigma_z2;
    let prior_precision = chol_solve_mat(prior.row_chol(), &DMatrix::identity(k, k));
    let mut precision = prior_precision.clone();
    let mut rhs = &prior_precision * prior.mean();

    for (t, (code, address)) in codes.iter().zip(addresses.iter()).enumerate() {
        if code.dim() != prior.cols() {
            return Err(Error::invalid(format!(
                "update_memory: code {t} has dimension {}, expected {}",
                code.dim(),
                prior.cols()
            )));
        }
        let (mean, second) = address_moments(address)?;
        if mean.len() != k {
            return Err(Error::invalid(format!(
                "update_memory: address {t} has dimension {}, expected {k}",
                mean.len()
            )));
        }
        let factor = inv_s * responsibilities.map_or(1.0, |w| w[t]);
        precision += second * factor;
        rhs += (mean * code.mean().transpose()) * factor;
    }

    let precision = symmetrize_checked(&precision, "memory precision")?;
    let chol = cholesky_lower(&precision, "memory precision")?;
    let row_cov = symmetrize_checked(
        &chol_solve_mat(&chol, &DMatrix::identity(k, k)),
        "memory row covariance",
    )?;
    let mean = chol_solve_mat(&chol, &rhs);
    MatrixNormal::new(mean, row_cov)
}

/// Conjugate location update from (optionally weighted) residuals
/// `μ_z − Rᵀ μ_w`:
///
/// `Σ_b ← (Σ_b0⁻¹ + σ⁻² (Σ_t ω_t) I)⁻¹`,
/// `μ_b ← Σ_b (Σ_b0⁻¹ μ_b0 + σ⁻² Σ_t ω_t (μ_z − Rᵀ μ_w))`.
pub fn update_bias(
    codes: &[CodePosterior],
    addresses: &[AddressPosterior],
    mem: &MatrixNormal,
    prior: &FullGaussian,
    sigma_z2: f64,
    responsibilities: Option<&[f64]>,
) -> Result<FullGaussian> {
    if codes.len() != addresses.len() {
        return Err(Error::invalid(format!(
            "update_bias: {} codes but {} addresses",
            codes.len(),
            addresses.len()
        )));
    }
    check_weights(codes.len(), responsibilities)?;
    if sigma_z2 <= 0.0 || sigma_z2.is_nan() {
        return Err(Error::invalid("update: sigma_z2 must be positive"));
    }
    if codes.is_empty() {
        return Ok(prior.clone());
    }

    let c = prior.dim();
    if mem.cols() != c {
        return Err(Error::invalid(
            "update_bias: memory columns do not match the location dimension",
        ));
    }
    let inv_s = 1.0 / sigma_z2;
    let prior_precision = chol_solve_mat(prior.chol(), &DMatrix::identity(c, c));
    let mut eta = &prior_precision * prior.mean();
    let mut total_weight = 0.0;

    for (t, (code, address)) in codes.iter().zip(addresses.iter()).enumerate() {
        if code.dim() != c {
            return Err(Error::invalid(format!(
                "update_bias: code {t} has dimension {}, expected {c}",
                code.dim()
            )));
        }
        let w_mean = match address {
            AddressPosterior::Gaussian(g) => g.mean(),
            other => {
                return Err(Error::invalid(format!(
                    "update_bias: expected gaussian weight factors, got {}",
                    other.variant_name()
                )))
            }
        };
        let weight = responsibilities.map_or(1.0, |w| w[t]);
        total_weight += weight;
        eta += (code.mean() - mem.mean().transpose() * w_mean) * (inv_s * weight);
    }

    let precision = &prior_precision + DMatrix::identity(c, c) * (inv_s * total_weight);
    let precision = symmetrize_checked(&precision, "location precision")?;
    let chol = cholesky_lower(&precision, "location precision")?;
    let cov = symmetrize_checked(
        &chol_solve_mat(&chol, &DMatrix::identity(c, c)),
        "location covariance",
    )?;
    let mean = chol_solve_vec(&chol, &eta);
    FullGaussian::new(mean, cov)
}

/// One cluster's current posteriors, as consumed by the assignment update.
#[derive(Debug, Clone, Copy)]
pub struct ClusterView<'a> {
    pub memory: &'a MatrixNormal,
    pub location: &'a FullGaussian,
    pub weight_conditional: &'a FullGaussian,
}

/// Optimal cluster-assignment distribution given freshly updated weight
/// conditionals. Per cluster the logit is
///
/// `−½σ⁻²[E[wᵀ(R Rᵀ + C U)w] + ‖μ_b‖² + tr Σ_b] + σ⁻² μ_wᵀ R (μ_z − μ_b)
///  + σ⁻² μ_bᵀ μ_z + ½ logdet Σ_w − ½[‖μ_w‖² + tr Σ_w]`.
pub fn update_mixture_assignment(
    code: &CodePosterior,
    clusters: &[ClusterView<'_>],
    sigma_z2: f64,
) -> Result<OneHotCategorical> {
    if clusters.is_empty() {
        return Err(Error::invalid("update_mixture_assignment: no clusters"));
    }
    if sigma_z2 <= 0.0 || sigma_z2.is_nan() {
        return Err(Error::invalid("update: sigma_z2 must be positive"));
    }
    let inv_s = 1.0 / sigma_z2;
    let mut logits = DVector::zeros(clusters.len());
    for (h, cluster) in clusters.iter().enumerate() {
        let mem = cluster.memory;
        let loc = cluster.location;
        let w = cluster.weight_conditional;
        if code.dim() != mem.cols() || loc.dim() != mem.cols() || w.dim() != mem.rows() {
            return Err(Error::invalid(format!(
                "update_mixture_assignment: dimension mismatch at cluster {h}"
            )));
        }
        let c = mem.cols() as f64;
        let second = mem.mean() * mem.mean().transpose() + mem.row_cov() * c;
        let expected_quad = crate::dist::expect_quadratic_form(w, &second)?;
        let loc_sq = loc.mean().norm_squared() + loc.cov().trace();
        let cross = w.mean().dot(&(mem.mean() * (code.mean() - loc.mean())));
        let loc_code = loc.mean().dot(code.mean());
        let w_sq = w.mean().norm_squared() + w.cov().trace();
        logits[h] = -0.5 * inv_s * (expected_quad + loc_sq) + inv_s * cross + inv_s * loc_code
            + 0.5 * w.log_det_cov()
            - 0.5 * w_sq;
    }
    OneHotCategorical::from_logits(&logits)
}

/// k-means++ seeding over code means: the first center is uniform, each
/// next is drawn with probability proportional to the squared distance to
/// the nearest chosen center (cumulative-sum inversion; an all-zero total
/// falls back to a uniform draw).
pub fn kmeanspp_init<R: Rng + ?Sized>(
    codes: &[CodePosterior],
    centers: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if centers == 0 {
        return Err(Error::invalid("kmeanspp_init: need at least one center"));
    }
    if centers > codes.len() {
        return Err(Error::invalid(format!(
            "kmeanspp_init: {} centers requested from {} codes",
            centers,
            codes.len()
        )));
    }
    let first = rng.random_range(0..codes.len());
    let mut chosen = vec![codes[first].mean().clone()];
    let mut dist2: Vec<f64> = codes
        .iter()
        .map(|c| (c.mean() - &chosen[0]).norm_squared())
        .collect();

    while chosen.len() < centers {
        let total: f64 = dist2.iter().sum();
        let idx = if total > 0.0 && total.is_finite() {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = dist2.len() - 1;
            for (i, d) in dist2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..codes.len())
        };
        let center = codes[idx].mean().clone();
        for (d, code) in dist2.iter_mut().zip(codes.iter()) {
            let cand = (code.mean() - &center).norm_squared();
            if cand < *d {
                *d = cand;
            }
        }
        chosen.push(center);
    }
    Ok(chosen)
}

fn validate_episode_codes(spec: &ModelSpec, codes: &[CodePosterior]) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::invalid("write_episode: episode must have T >= 1"));
    }
    for (t, code) in codes.iter().enumerate() {
        if code.dim() != spec.code_dim() {
            return Err(Error::NonUniformCodeDim {
                expected: spec.code_dim(),
                found: code.dim(),
                timestep: t,
            });
        }
    }
    let observed = codes[0].is_observed();
    if codes.iter().any(|c| c.is_observed() != observed) {
        return Err(Error::invalid(
            "write_episode: observed mode is all-or-nothing within an episode",
        ));
    }
    Ok(())
}

fn init_memory<R: Rng + ?Sized>(
    spec: &ModelSpec,
    codes: &[CodePosterior],
    mode: InitMode,
    prior: &MemoryState,
    rng: &mut R,
) -> Result<MemoryState> {
    let mut memory = prior.clone();
    match mode {
        InitMode::Prior => {}
        InitMode::Random => {
            for g in 0..memory.partitions() {
                for h in 0..memory.clusters() {
                    let noise =
                        standard_normal_matrix(rng, spec.memory_rows(), spec.block_dim()) * 0.1;
                    let mean = spec.prior_mean() + noise;
                    memory.cluster_mut(g, h).memory =
                        MatrixNormal::new(mean, spec.prior_row_cov().clone())?;
                }
            }
        }
        InitMode::DataDependent => {
            if spec.variant().has_location() {
                let cov = spec
                    .loc_prior_cov()
                    .cloned()
                    .expect("location variants carry a location prior");
                for g in 0..memory.partitions() {
                    let sliced: Vec<CodePosterior> = codes
                        .iter()
                        .map(|c| c.block(g, spec.partitions()))
                        .collect();
                    let centers = kmeanspp_init(&sliced, spec.clusters(), rng)?;
                    for (h, center) in centers.into_iter().enumerate() {
                        memory.cluster_mut(g, h).location =
                            Some(FullGaussian::new(center, cov.clone())?);
                    }
                }
            }
        }
    }
    Ok(memory)
}

/// Runs initialization followed by `sweeps` full coordinate-ascent sweeps
/// and returns the posterior state, per-timestep addresses, and the bound
/// trace. For the tree variant, hard-assignment pseudocounts are tallied
/// after the final sweep by taking the argmax of each assignment factor.
pub fn write_episode(
    spec: &ModelSpec,
    codes: &[CodePosterior],
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    if cfg.sweeps == 0 {
        return Err(Error::invalid("write_episode: sweeps must be >= 1"));
    }
    validate_episode_codes(spec, codes)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);

    let (prior_memory, address_prior) = build_priors(spec)?;
    let memory_prior = spec.memory_prior()?;
    let location_prior = spec.location_prior()?;

    let mut memory = init_memory(spec, codes, cfg.init_mode, &prior_memory, &mut rng)?;
    let mut addresses = vec![address_prior; codes.len()];

    let trace_enabled = cfg.elbo_trace || cfg.early_stop_rel_tol.is_some();
    let mut trace = Vec::new();
    if trace_enabled {
        trace.push(elbo::elbo_with_state(spec, codes, &memory, &addresses, None)?.total);
    }

    for _ in 0..cfg.sweeps {
        run_sweep(spec, codes, &mut memory, &mut addresses, &memory_prior, &location_prior)?;
        if trace_enabled {
            let value = elbo::elbo_with_state(spec, codes, &memory, &addresses, None)?.total;
            let previous = *trace.last().expect("trace has the pre-sweep entry");
            trace.push(value);
            if let Some(tol) = cfg.early_stop_rel_tol {
                if (value - previous).abs() <= tol * previous.abs().max(1.0) {
                    break;
                }
            }
        }
    }

    if spec.variant() == Variant::Tree {
        let mut table = PseudocountTable::new(spec.clusters(), spec.partitions());
        for address in &addresses {
            let AddressPosterior::Tree(blocks) = address else {
                unreachable!("tree episodes hold tree addresses");
            };
            let path: Vec<u32> = blocks
                .iter()
                .map(|b| b.assignment.argmax() as u32)
                .collect();
            table.record(&path)?;
        }
        memory.set_pseudocounts(table);
    }

    if !cfg.elbo_trace {
        trace.clear();
    }
    Ok(InferenceResult {
        memory,
        addresses,
        elbo_trace: trace,
    })
}

fn run_sweep(
    spec: &ModelSpec,
    codes: &[CodePosterior],
    memory: &mut MemoryState,
    addresses: &mut [AddressPosterior],
    memory_prior: &MatrixNormal,
    location_prior: &Option<FullGaussian>,
) -> Result<()> {
    match spec.variant() {
        Variant::GaussianAddress => {
            for (address, code) in addresses.iter_mut().zip(codes.iter()) {
                *address = AddressPosterior::Gaussian(update_gaussian_address(
                    code,
                    &memory.sole_cluster().memory,
                    spec.sigma_z2(),
                )?);
            }
            memory.cluster_mut(0, 0).memory =
                update_memory(codes, addresses, memory_prior, spec.sigma_z2(), None)?;
        }
        Variant::CategoricalAddress => {
            for (address, code) in addresses.iter_mut().zip(codes.iter()) {
                *address = AddressPosterior::Categorical(update_categorical_address(
                    code,
                    &memory.sole_cluster().memory,
                    spec.sigma_z2(),
                )?);
            }
            memory.cluster_mut(0, 0).memory =
                update_memory(codes, addresses, memory_prior, spec.sigma_z2(), None)?;
        }
        Variant::MeanShifted => {
            let loc_prior = location_prior.as_ref().expect("mean-shifted has a location prior");
            let loc_mean = memory
                .sole_cluster()
                .location
                .as_ref()
                .expect("mean-shifted state has a location")
                .mean()
                .clone();
            for (address, code) in addresses.iter_mut().zip(codes.iter()) {
                let shifted = code.with_mean(code.mean() - &loc_mean);
                *address = AddressPosterior::Gaussian(update_gaussian_address(
                    &shifted,
                    &memory.sole_cluster().memory,
                    spec.sigma_z2(),
                )?);
            }
            let location = update_bias(
                codes,
                addresses,
                &memory.sole_cluster().memory,
                loc_prior,
                spec.sigma_z2(),
                None,
            )?;
            let shifted: Vec<CodePosterior> = codes
                .iter()
                .map(|c| c.with_mean(c.mean() - location.mean()))
                .collect();
            let cluster = memory.cluster_mut(0, 0);
            cluster.memory =
                update_memory(&shifted, addresses, memory_prior, spec.sigma_z2(), None)?;
            cluster.location = Some(location);
        }
        Variant::Mixture | Variant::Tree => {
            let partitions = spec.partitions();
            for g in 0..partitions {
                let block_codes: Vec<CodePosterior> =
                    codes.iter().map(|c| c.block(g, partitions)).collect();
                sweep_mixture_block(
                    spec,
                    g,
                    &block_codes,
                    memory,
                    addresses,
                    memory_prior,
                    location_prior.as_ref().expect("mixture variants have a location prior"),
                )?;
            }
        }
    }
    Ok(())
}

fn block_address_mut(address: &mut AddressPosterior, g: usize) -> &mut MixtureAddress {
    match address {
        AddressPosterior::Mixture(m) => m,
        AddressPosterior::Tree(blocks) => &mut blocks[g],
        _ => unreachable!("mixture sweep over non-mixture addresses"),
    }
}

/// One coordinate-ascent sweep over a single mixture block (the whole code
/// for the mixture variant, one partition for the tree variant).
fn sweep_mixture_block(
    spec: &ModelSpec,
    g: usize,
    block_codes: &[CodePosterior],
    memory: &mut MemoryState,
    addresses: &mut [AddressPosterior],
    memory_prior: &MatrixNormal,
    location_prior: &FullGaussian,
) -> Result<()> {
    let clusters = spec.clusters();
    let sigma_z2 = spec.sigma_z2();

    // Weight conditionals against each cluster's current memory/location.
    for h in 0..clusters {
        let cluster = memory.cluster(g, h);
        let loc_mean = cluster
            .location
            .as_ref()
            .expect("mixture clusters carry locations")
            .mean()
            .clone();
        let op = GaussianAddressOp::new(&cluster.memory, sigma_z2)?;
        for (address, code) in addresses.iter_mut().zip(block_codes.iter()) {
            let block = block_address_mut(address, g);
            block.conditionals[h] = op.posterior(&(code.mean() - &loc_mean))?;
        }
    }

    // Assignments, consuming the fresh conditionals.
    for (address, code) in addresses.iter_mut().zip(block_codes.iter()) {
        let block = block_address_mut(address, g);
        let views: Vec<ClusterView<'_>> = (0..clusters)
            .map(|h| {
                let cluster = memory.cluster(g, h);
                ClusterView {
                    memory: &cluster.memory,
                    location: cluster.location.as_ref().expect("location present"),
                    weight_conditional: &block.conditionals[h],
                }
            })
            .collect();
        block.assignment = update_mixture_assignment(code, &views, sigma_z2)?;
    }

    // Locations, then memory matrices, per cluster.
    for h in 0..clusters {
        let responsibilities: Vec<f64> = addresses
            .iter_mut()
            .map(|a| block_address_mut(a, g).assignment.probs()[h])
            .collect();
        let conditionals: Vec<AddressPosterior> = addresses
            .iter_mut()
            .map(|a| AddressPosterior::Gaussian(block_address_mut(a, g).conditionals[h].clone()))
            .collect();

        let location = update_bias(
            block_codes,
            &conditionals,
            &memory.cluster(g, h).memory,
            location_prior,
            sigma_z2,
            Some(&responsibilities),
        )?;
        let shifted: Vec<CodePosterior> = block_codes
            .iter()
            .map(|c| c.with_mean(c.mean() - location.mean()))
            .collect();
        let new_memory = update_memory(
            &shifted,
            &conditionals,
            memory_prior,
            sigma_z2,
            Some(&responsibilities),
        )?;

        let cluster = memory.cluster_mut(g, h);
        cluster.location = Some(location);
        cluster.memory = new_memory;
    }
    Ok(())
}

// --- JSON ---

#[derive(Serialize, Deserialize)]
struct FullGaussianJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl FullGaussianJson {
    fn from(g: &FullGaussian) -> Self {
        Self {
            mean: g.mean().iter().copied().collect(),
            cov: matrix_to_rows(g.cov()),
        }
    }

    fn build(&self) -> Result<FullGaussian> {
        FullGaussian::new(
            DVector::from_vec(self.mean.clone()),
            rows_to_matrix(&self.cov, "cov")?,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterJson {
    mean: Vec<Vec<f64>>,
    row_cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<FullGaussianJson>,
}

#[derive(Serialize, Deserialize)]
struct PseudocountsJson {
    clusters: usize,
    levels: Vec<BTreeMap<String, Vec<u64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum AddressJson {
    #[serde(rename = "gaussian")]
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    #[serde(rename = "categorical")]
    Categorical { probs: Vec<f64> },
    #[serde(rename = "mixture")]
    Mixture {
        assign: Vec<f64>,
        conditionals: Vec<FullGaussianJson>,
    },
    #[serde(rename = "tree")]
    Tree { blocks: Vec<MixtureBlockJson> },
}

#[derive(Serialize, Deserialize)]
struct MixtureBlockJson {
    assign: Vec<f64>,
    conditionals: Vec<FullGaussianJson>,
}

#[derive(Serialize, Deserialize)]
struct ResultJson {
    spec: serde_json::Value,
    memory: MemoryJson,
    addresses: Vec<AddressJson>,
    elbo_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MemoryJson {
    variant: Variant,
    blocks: Vec<Vec<ClusterJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudocounts: Option<PseudocountsJson>,
}

fn mixture_block_to_json(block: &MixtureAddress) -> MixtureBlockJson {
    MixtureBlockJson {
        assign: block.assignment.probs().iter().copied().collect(),
        conditionals: block.conditionals.iter().map(FullGaussianJson::from).collect(),
    }
}

fn mixture_block_from_json(block: &MixtureBlockJson) -> Result<MixtureAddress> {
    MixtureAddress::new(
        OneHotCategorical::new(DVector::from_vec(block.assign.clone()))?,
        block
            .conditionals
            .iter()
            .map(FullGaussianJson::build)
            .collect::<Result<Vec<_>>>()?,
    )
}

fn prefix_key(prefix: &[u32]) -> String {
    prefix
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_prefix(key: &str) -> Result<Vec<u32>> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|p| {
            p.parse::<u32>()
                .map_err(|_| Error::schema(format!("pseudocounts: bad prefix key {key:?}")))
        })
        .collect()
}

/// Serializes an inference result (with its spec, so the document is
/// self-describing) to JSON.
pub fn inference_result_to_json(spec: &ModelSpec, result: &InferenceResult) -> Result<String> {
    let spec_value: serde_json::Value =
        serde_json::from_str(&crate::model::model_spec_to_json(spec)?)?;
    let memory = MemoryJson {
        variant: result.memory.variant(),
        blocks: result
            .memory
            .blocks()
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|cluster| ClusterJson {
                        mean: matrix_to_rows(cluster.memory.mean()),
                        row_cov: matrix_to_rows(cluster.memory.row_cov()),
                        location: cluster.location.as_ref().map(FullGaussianJson::from),
                    })
                    .collect()
            })
            .collect(),
        pseudocounts: result.memory.pseudocounts().map(|table| PseudocountsJson {
            clusters: table.clusters(),
            levels: table
                .levels()
                .iter()
                .map(|level| {
                    level
                        .iter()
                        .map(|(prefix, counts)| (prefix_key(prefix), counts.clone()))
                        .collect()
                })
                .collect(),
        }),
    };
    let addresses = result
        .addresses
        .iter()
        .map(|address| match address {
            AddressPosterior::Gaussian(gauss) => AddressJson::Gaussian {
                mean: gauss.mean().iter().copied().collect(),
                cov: matrix_to_rows(gauss.cov()),
            },
            AddressPosterior::Categorical(cat) => AddressJson::Categorical {
                probs: cat.probs().iter().copied().collect(),
            },
            AddressPosterior::Mixture(block) => {
                let b = mixture_block_to_json(block);
                AddressJson::Mixture {
                    assign: b.assign,
                    conditionals: b.conditionals,
                }
            }
            AddressPosterior::Tree(blocks) => AddressJson::Tree {
                blocks: blocks.iter().map(mixture_block_to_json).collect(),
            },
        })
        .collect();
    let doc = ResultJson {
        spec: spec_value,
        memory,
        addresses,
        elbo_trace: result.elbo_trace.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses a JSON document produced by [`inference_result_to_json`].
pub fn inference_result_from_json(json: &str) -> Result<(ModelSpec, InferenceResult)> {
    let doc: ResultJson =
        serde_json::from_str(json).map_err(|e| Error::schema(format!("result JSON: {e}")))?;
    let spec = crate::model::model_spec_from_json(&serde_json::to_string(&doc.spec)?)?;

    let blocks = doc
        .memory
        .blocks
        .iter()
        .map(|block| {
            block
                .iter()
                .map(|cluster| {
                    Ok(crate::model::ClusterPosterior {
                        memory: MatrixNormal::new(
                            rows_to_matrix(&cluster.mean, "memory mean")?,
                            rows_to_matrix(&cluster.row_cov, "memory row_cov")?,
                        )?,
                        location: cluster
                            .location
                            .as_ref()
                            .map(FullGaussianJson::build)
                            .transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let pseudocounts = doc
        .memory
        .pseudocounts
        .as_ref()
        .map(|table| -> Result<PseudocountTable> {
            let mut out = PseudocountTable::new(table.clusters, table.levels.len());
            for (g, level) in table.levels.iter().enumerate() {
                for (key, counts) in level {
                    let prefix = parse_prefix(key)?;
                    if counts.len() != table.clusters {
                        return Err(Error::schema("pseudocounts: bad count row length"));
                    }
                    out.insert_level_counts(g, prefix, counts.clone())?;
                }
            }
            Ok(out)
        })
        .transpose()?;

    let memory = MemoryState::new(doc.memory.variant, blocks, pseudocounts)?;

    let addresses = doc
        .addresses
        .iter()
        .map(|address| -> Result<AddressPosterior> {
            Ok(match address {
                AddressJson::Gaussian { mean, cov } => {
                    AddressPosterior::Gaussian(FullGaussian::new(
                        DVector::from_vec(mean.clone()),
                        rows_to_matrix(cov, "address cov")?,
                    )?)
                }
                AddressJson::Categorical { probs } => AddressPosterior::Categorical(
                    OneHotCategorical::new(DVector::from_vec(probs.clone()))?,
                ),
                AddressJson::Mixture {
                    assign,
                    conditionals,
                } => AddressPosterior::Mixture(mixture_block_from_json(&MixtureBlockJson {
                    assign: assign.clone(),
                    conditionals: conditionals
                        .iter()
                        .map(|c| FullGaussianJson {
                            mean: c.mean.clone(),
                            cov: c.cov.clone(),
                        })
                        .collect(),
                })?),
                AddressJson::Tree { blocks } => AddressPosterior::Tree(
                    blocks
                        .iter()
                        .map(mixture_block_from_json)
                        .collect::<Result<Vec<_>>>()?,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        spec,
        InferenceResult {
            memory,
            addresses,
            elbo_trace: doc.elbo_trace,
        },
    ))
}
