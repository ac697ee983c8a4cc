//! Self-check suites behind the `check` CLI subcommand. Each suite runs a
//! battery of seeded property checks and reports a machine-readable
//! pass/fail breakdown.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    kl_full_gaussian, kl_matrix_normal, reparam_sample_matrix_normal, standard_normal_matrix,
    standard_normal_vector, FullGaussian, MatrixNormal,
};
use crate::elbo::{elbo_closed_form, elbo_monte_carlo, elbo_with_state};
use crate::engine::{write_episode, InferenceConfig, InferenceResult, InitMode};
use crate::episode::CodePosterior;
use crate::error::{Error, Result};
use crate::model::{reduce_mixture_to_mean_shifted, AddressPosterior, ModelSpec, Variant};

pub const SUITES: &[&str] = &[
    "kl",
    "reparam",
    "monotone",
    "stationarity",
    "reduction",
    "mc-elbo",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckItem>,
}

impl CheckReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            passed: true,
            checks: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(CheckItem {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Runs one named suite.
pub fn run_suite(suite: &str, seed: u64) -> Result<CheckReport> {
    match suite {
        "kl" => Ok(check_kl(seed)),
        "reparam" => Ok(check_reparam(seed)),
        "monotone" => check_monotone(seed),
        "stationarity" => check_stationarity(seed),
        "reduction" => check_reduction(seed),
        "mc-elbo" => check_mc_elbo(seed),
        other => Err(Error::invalid(format!(
            "unknown check suite {other:?}; expected one of {SUITES:?}"
        ))),
    }
}

pub(crate) fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = standard_normal_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.view_mut((i * b.nrows(), j * b.ncols()), (b.nrows(), b.ncols()))
                .copy_from(&(b * a[(i, j)]));
        }
    }
    out
}

fn check_kl(seed: u64) -> CheckReport {
    let mut report = CheckReport::new("kl");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Scalar closed form.
    let p = MatrixNormal::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
    let q = MatrixNormal::new(DMatrix::from_element(1, 1, 1.0), DMatrix::identity(1, 1)).unwrap();
    let scalar = kl_matrix_normal(&q, &p).unwrap();
    report.push(
        "scalar-closed-form",
        (scalar - 0.5).abs() < 1e-12,
        format!("KL = {scalar}, expected 0.5"),
    );

    for trial in 0..10 {
        let k = rng.random_range(1..=4usize);
        let c = rng.random_range(1..=4usize);
        let q = MatrixNormal::new(standard_normal_matrix(&mut rng, k, c), random_spd(&mut rng, k))
            .unwrap();
        let p = MatrixNormal::new(standard_normal_matrix(&mut rng, k, c), random_spd(&mut rng, k))
            .unwrap();

        let direct = kl_matrix_normal(&q, &p).unwrap();
        let self_kl = kl_matrix_normal(&q, &q).unwrap();

        // Vectorized route: multivariate Gaussian over the column-stacked
        // matrix with covariance I_C ⊗ U.
        let qv = FullGaussian::new(
            DVector::from_column_slice(q.mean().as_slice()),
            kron(&DMatrix::identity(c, c), q.row_cov()),
        )
        .unwrap();
        let pv = FullGaussian::new(
            DVector::from_column_slice(p.mean().as_slice()),
            kron(&DMatrix::identity(c, c), p.row_cov()),
        )
        .unwrap();
        let vectorized = kl_full_gaussian(&qv, &pv).unwrap();

        let ok = (direct - vectorized).abs() <= 1e-10 && direct >= -1e-10 && self_kl.abs() <= 1e-10;
        report.push(
            format!("matrix-normal-vs-vectorized-{trial}"),
            ok,
            format!("direct {direct} vs vectorized {vectorized}, self {self_kl}"),
        );
    }
    report
}

fn check_reparam(seed: u64) -> CheckReport {
    let mut report = CheckReport::new("reparam");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let k = 3;
    let c = 2;
    let d = MatrixNormal::new(standard_normal_matrix(&mut rng, k, c), random_spd(&mut rng, k))
        .unwrap();

    let zero = reparam_sample_matrix_normal(&d, &DMatrix::zeros(k, c)).unwrap();
    report.push(
        "zero-noise-returns-mean",
        zero == *d.mean(),
        "output with zero noise must equal the mean",
    );

    let n = 100_000usize;
    let dim = k * c;
    let mut mean_acc = DVector::<f64>::zeros(dim);
    let mut outer_acc = DMatrix::<f64>::zeros(dim, dim);
    for _ in 0..n {
        let sample = d.sample(&mut rng);
        let v = DVector::from_column_slice(sample.as_slice());
        mean_acc += &v;
        outer_acc += &v * v.transpose();
    }
    let emp_mean = mean_acc / n as f64;
    let emp_cov = outer_acc / n as f64 - &emp_mean * emp_mean.transpose();
    let expected = kron(&DMatrix::identity(c, c), d.row_cov());
    let cov_err = (&emp_cov - &expected).norm() / expected.norm();
    report.push(
        "sample-covariance-kronecker",
        cov_err < 0.05,
        format!("relative Frobenius error {cov_err:.4}"),
    );

    let true_mean = DVector::from_column_slice(d.mean().as_slice());
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        let se = (expected[(i, i)] / n as f64).sqrt();
        worst = worst.max((emp_mean[i] - true_mean[i]).abs() / se);
    }
    report.push(
        "sample-mean",
        worst <= 4.0,
        format!("worst mean deviation {worst:.2} standard errors"),
    );
    report
}

pub(crate) fn random_codes<R: Rng + ?Sized>(
    rng: &mut R,
    timesteps: usize,
    code_dim: usize,
    observed: bool,
) -> Vec<CodePosterior> {
    (0..timesteps)
        .map(|_| {
            let mean = standard_normal_vector(rng, code_dim) * 1.5;
            if observed {
                CodePosterior::observed(mean).unwrap()
            } else {
                let var = DVector::from_fn(code_dim, |_, _| 0.2 + 1.3 * rng.random::<f64>());
                CodePosterior::new(mean, var).unwrap()
            }
        })
        .collect()
}

pub(crate) fn random_spec<R: Rng + ?Sized>(rng: &mut R, variant: Variant) -> ModelSpec {
    let k = rng.random_range(1..=4usize);
    let g = match variant {
        Variant::Tree => rng.random_range(1..=2usize),
        _ => 1,
    };
    let block = rng.random_range(1..=3usize);
    let c = block * g;
    let h = match variant {
        Variant::Mixture | Variant::Tree => rng.random_range(1..=3usize),
        _ => 1,
    };
    let sigma_z2 = 0.5 + rng.random::<f64>();
    let prior_mean = standard_normal_matrix(rng, k, block);
    let prior_row_cov = random_spd(rng, k);
    let (loc_mean, loc_cov) = match variant {
        Variant::MeanShifted | Variant::Mixture => (
            Some(standard_normal_vector(rng, block)),
            Some(random_spd(rng, block)),
        ),
        _ => (None, None),
    };
    ModelSpec::new(
        variant, k, c, h, g, sigma_z2, prior_mean, prior_row_cov, loc_mean, loc_cov,
    )
    .expect("random spec is valid")
}

const ALL_VARIANTS: [Variant; 5] = [
    Variant::GaussianAddress,
    Variant::CategoricalAddress,
    Variant::MeanShifted,
    Variant::Mixture,
    Variant::Tree,
];

fn check_monotone(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("monotone");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for variant in ALL_VARIANTS {
        let mut worst = f64::INFINITY;
        let mut ok = true;
        for trial in 0..10 {
            let spec = random_spec(&mut rng, variant);
            let timesteps = rng.random_range(1..=12usize);
            let observed = rng.random::<f64>() < 0.5;
            let codes = random_codes(&mut rng, timesteps, spec.code_dim(), observed);
            let init = match trial % 3 {
                0 => InitMode::Prior,
                1 => InitMode::Random,
                _ => InitMode::DataDependent,
            };
            let init = if init == InitMode::DataDependent && spec.clusters() > timesteps {
                InitMode::Prior
            } else {
                init
            };
            let result = write_episode(
                &spec,
                &codes,
                &InferenceConfig {
                    sweeps: 5,
                    init_mode: init,
                    rng_seed: rng.random(),
                    elbo_trace: true,
                    early_stop_rel_tol: None,
                },
            )?;
            for pair in result.elbo_trace.windows(2) {
                let slack = (1e-8 * pair[0].abs()).max(1e-12);
                worst = worst.min(pair[1] - pair[0]);
                if pair[1] < pair[0] - slack {
                    ok = false;
                }
            }
        }
        report.push(
            format!("monotone-{}", variant.as_str()),
            ok,
            format!("smallest per-sweep improvement {worst:.3e}"),
        );
    }
    Ok(report)
}

/// All variational coordinates of a gaussian-address result, exposed for
/// finite differencing: weight means, weight covariance Cholesky factors,
/// the memory mean, and the memory row-covariance Cholesky factor.
pub(crate) fn perturbed_elbo(
    spec: &ModelSpec,
    codes: &[CodePosterior],
    result: &InferenceResult,
    block: usize,
    index: usize,
    delta: f64,
) -> Result<f64> {
    let mut addresses = result.addresses.clone();
    let mut memory = result.memory.clone();
    let k = spec.memory_rows();
    let lower: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (0..=i).map(move |j| (i, j)))
        .collect();

    let t_count = codes.len();
    if block < t_count {
        // Weight mean coordinates.
        let AddressPosterior::Gaussian(g) = &addresses[block] else {
            return Err(Error::invalid("perturbed_elbo: expected gaussian addresses"));
        };
        let mut mean = g.mean().clone();
        mean[index] += delta;
        addresses[block] = AddressPosterior::Gaussian(FullGaussian::new(mean, g.cov().clone())?);
    } else if block < 2 * t_count {
        // Weight covariance Cholesky coordinates.
        let t = block - t_count;
        let AddressPosterior::Gaussian(g) = &addresses[t] else {
            return Err(Error::invalid("perturbed_elbo: expected gaussian addresses"));
        };
        let mut l = g.chol().clone();
        let (i, j) = lower[index];
        l[(i, j)] += delta;
        let cov = &l * l.transpose();
        addresses[t] = AddressPosterior::Gaussian(FullGaussian::new(g.mean().clone(), cov)?);
    } else if block == 2 * t_count {
        // Memory mean coordinates (column-major).
        let cluster = memory.cluster(0, 0);
        let mut mean = cluster.memory.mean().clone();
        mean[index] += delta;
        let row_cov = cluster.memory.row_cov().clone();
        memory.cluster_mut(0, 0).memory = MatrixNormal::new(mean, row_cov)?;
    } else {
        // Memory row-covariance Cholesky coordinates.
        let cluster = memory.cluster(0, 0);
        let mut l = cluster.memory.row_chol().clone();
        let (i, j) = lower[index];
        l[(i, j)] += delta;
        let row_cov = &l * l.transpose();
        let mean = cluster.memory.mean().clone();
        memory.cluster_mut(0, 0).memory = MatrixNormal::new(mean, row_cov)?;
    }
    Ok(elbo_with_state(spec, codes, &memory, &addresses, None)?.total)
}

/// Central-difference gradient of the bound over every variational
/// coordinate of a gaussian-address result; returns the max-norm.
pub(crate) fn stationarity_gradient_max(
    spec: &ModelSpec,
    codes: &[CodePosterior],
    result: &InferenceResult,
) -> Result<f64> {
    let k = spec.memory_rows();
    let lower_count = k * (k + 1) / 2;
    let t_count = codes.len();
    let step = 1e-5;
    let mut max_abs: f64 = 0.0;
    for block in 0..(2 * t_count + 2) {
        let coords = if block < t_count {
            k
        } else if block < 2 * t_count {
            lower_count
        } else if block == 2 * t_count {
            k * spec.code_dim()
        } else {
            lower_count
        };
        for index in 0..coords {
            let up = perturbed_elbo(spec, codes, result, block, index, step)?;
            let down = perturbed_elbo(spec, codes, result, block, index, -step)?;
            max_abs = max_abs.max(((up - down) / (2.0 * step)).abs());
        }
    }
    Ok(max_abs)
}

fn check_stationarity(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("stationarity");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    for (name, k, c, t) in [("1x1", 1usize, 1usize, 2usize), ("2x3", 2, 3, 3)] {
        let spec = ModelSpec::with_defaults(Variant::GaussianAddress, k, c, 1, 1, 1.0)?;
        let codes = random_codes(&mut rng, t, c, true);
        let result = write_episode(
            &spec,
            &codes,
            &InferenceConfig {
                sweeps: 200,
                init_mode: InitMode::Prior,
                rng_seed: 0,
                elbo_trace: false,
                early_stop_rel_tol: None,
            },
        )?;
        let grad = stationarity_gradient_max(&spec, &codes, &result)?;
        report.push(
            format!("stationary-{name}"),
            grad < 1e-4,
            format!("max |dL/dparam| = {grad:.3e}"),
        );
    }
    Ok(report)
}

fn max_param_gap(a: &InferenceResult, b: &InferenceResult) -> f64 {
    let mut gap: f64 = 0.0;
    for (ba, bb) in a.memory.blocks().iter().zip(b.memory.blocks().iter()) {
        for (ca, cb) in ba.iter().zip(bb.iter()) {
            gap = gap.max((ca.memory.mean() - cb.memory.mean()).abs().max());
            gap = gap.max((ca.memory.row_cov() - cb.memory.row_cov()).abs().max());
            if let (Some(la), Some(lb)) = (&ca.location, &cb.location) {
                gap = gap.max((la.mean() - lb.mean()).abs().max());
                gap = gap.max((la.cov() - lb.cov()).abs().max());
            }
        }
    }
    gap
}

fn flatten_mixture_gap(a: &AddressPosterior, b: &AddressPosterior) -> f64 {
    use AddressPosterior::*;
    let mut gap: f64 = 0.0;
    match (a, b) {
        (Gaussian(ga), Gaussian(gb)) => {
            gap = gap.max((ga.mean() - gb.mean()).abs().max());
            gap = gap.max((ga.cov() - gb.cov()).abs().max());
        }
        (Mixture(ma), Gaussian(gb)) => {
            // One-cluster mixture against a flat gaussian factor.
            gap = gap.max((ma.assignment.probs()[0] - 1.0).abs());
            gap = gap.max((ma.conditionals[0].mean() - gb.mean()).abs().max());
            gap = gap.max((ma.conditionals[0].cov() - gb.cov()).abs().max());
        }
        (Tree(blocks), Mixture(mb)) if blocks.len() == 1 => {
            let ma = &blocks[0];
            gap = gap.max((ma.assignment.probs() - mb.assignment.probs()).abs().max());
            for (ca, cb) in ma.conditionals.iter().zip(mb.conditionals.iter()) {
                gap = gap.max((ca.mean() - cb.mean()).abs().max());
                gap = gap.max((ca.cov() - cb.cov()).abs().max());
            }
        }
        _ => gap = f64::INFINITY,
    }
    gap
}

fn check_reduction(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("reduction");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    for trial in 0..5 {
        // One-cluster mixture against the mean-shifted model.
        let mut spec = random_spec(&mut rng, Variant::Mixture);
        while spec.clusters() != 1 {
            spec = random_spec(&mut rng, Variant::Mixture);
        }
        let reduced = reduce_mixture_to_mean_shifted(&spec)?;
        let codes = random_codes(&mut rng, 6, spec.code_dim(), trial % 2 == 0);
        let cfg = InferenceConfig {
            sweeps: 3,
            init_mode: InitMode::Prior,
            rng_seed: 11,
            elbo_trace: true,
            early_stop_rel_tol: None,
        };
        let mix = write_episode(&spec, &codes, &cfg)?;
        let shifted = write_episode(&reduced, &codes, &cfg)?;
        let mut gap = max_param_gap(&mix, &shifted);
        for (a, b) in mix.addresses.iter().zip(shifted.addresses.iter()) {
            gap = gap.max(flatten_mixture_gap(a, b));
        }
        report.push(
            format!("mixture-vs-mean-shifted-{trial}"),
            gap <= 1e-10,
            format!("max parameter gap {gap:.3e}"),
        );
    }

    for trial in 0..5 {
        // One-partition tree against the mixture model.
        let mix_spec = random_spec(&mut rng, Variant::Mixture);
        let tree_spec = ModelSpec::new(
            Variant::Tree,
            mix_spec.memory_rows(),
            mix_spec.code_dim(),
            mix_spec.clusters(),
            1,
            mix_spec.sigma_z2(),
            mix_spec.prior_mean().clone(),
            mix_spec.prior_row_cov().clone(),
            None,
            None,
        )?;
        // The tree pins its location prior to the standard normal, so run
        // the mixture with the same pinned prior.
        let mix_spec = ModelSpec::new(
            Variant::Mixture,
            mix_spec.memory_rows(),
            mix_spec.code_dim(),
            mix_spec.clusters(),
            1,
            mix_spec.sigma_z2(),
            mix_spec.prior_mean().clone(),
            mix_spec.prior_row_cov().clone(),
            Some(DVector::zeros(mix_spec.code_dim())),
            Some(DMatrix::identity(mix_spec.code_dim(), mix_spec.code_dim())),
        )?;
        let codes = random_codes(&mut rng, 6, mix_spec.code_dim(), trial % 2 == 1);
        let cfg = InferenceConfig {
            sweeps: 3,
            init_mode: InitMode::Prior,
            rng_seed: 17,
            elbo_trace: true,
            early_stop_rel_tol: None,
        };
        let tree = write_episode(&tree_spec, &codes, &cfg)?;
        let mix = write_episode(&mix_spec, &codes, &cfg)?;
        let mut gap = max_param_gap(&tree, &mix);
        for (a, b) in tree.addresses.iter().zip(mix.addresses.iter()) {
            gap = gap.max(flatten_mixture_gap(a, b));
        }
        report.push(
            format!("tree-vs-mixture-{trial}"),
            gap <= 1e-10,
            format!("max parameter gap {gap:.3e}"),
        );
    }
    Ok(report)
}

fn check_mc_elbo(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("mc-elbo");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for variant in ALL_VARIANTS {
        for trial in 0..2 {
            let spec = random_spec(&mut rng, variant);
            let observed = trial == 1;
            let codes = random_codes(&mut rng, 4, spec.code_dim(), observed);
            let result = write_episode(
                &spec,
                &codes,
                &InferenceConfig {
                    sweeps: 2,
                    init_mode: InitMode::Random,
                    rng_seed: rng.random(),
                    elbo_trace: false,
                    early_stop_rel_tol: None,
                },
            )?;
            let exact = elbo_closed_form(&spec, &codes, &result, None)?.total;
            let (mc, se) = elbo_monte_carlo(&spec, &codes, &result, 20_000, &mut rng)?;
            let tol = 3.0 * se + 1e-10 * (1.0 + exact.abs());
            report.push(
                format!("mc-{}-{trial}", variant.as_str()),
                (exact - mc).abs() <= tol,
                format!("closed {exact:.6} vs mc {mc:.6} (se {se:.2e})"),
            );
        }
    }
    Ok(report)
}
