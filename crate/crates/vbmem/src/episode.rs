//! Episode data model, the synthetic linear-Gaussian episode generator,
//! and JSON (de)serialization.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{standard_normal_matrix, standard_normal_vector, MatrixNormal};
use crate::error::{Error, Result};

/// Diagonal-Gaussian variational distribution over one perceptual code.
/// Supplied externally by a recognition model, or as a zero-variance
/// wrapper of an observed code.
#[derive(Debug, Clone, PartialEq)]
pub struct CodePosterior {
    mean: DVector<f64>,
    var: DVector<f64>,
}

impl CodePosterior {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("CodePosterior: empty mean"));
        }
        if var.len() != mean.len() {
            return Err(Error::invalid(format!(
                "CodePosterior: var has length {}, mean has length {}",
                var.len(),
                mean.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || var.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("CodePosterior: non-finite entries"));
        }
        for (i, v) in var.iter().enumerate() {
            if *v < 0.0 {
                return Err(Error::NegativeVariance {
                    coord: i,
                    value: *v,
                });
            }
        }
        Ok(Self { mean, var })
    }

    /// Observed code: a point mass (all variances exactly zero).
    pub fn observed(mean: DVector<f64>) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn var(&self) -> &DVector<f64> {
        &self.var
    }

    pub fn is_observed(&self) -> bool {
        self.var.iter().all(|v| *v == 0.0)
    }

    /// Contiguous coordinate block `b` of `blocks` equally sized blocks.
    pub(crate) fn block(&self, b: usize, blocks: usize) -> CodePosterior {
        let width = self.dim() / blocks;
        CodePosterior {
            mean: self.mean.rows(b * width, width).into_owned(),
            var: self.var.rows(b * width, width).into_owned(),
        }
    }

    /// Same variances, shifted mean. Used where the conditional code mean
    /// subtracts a location estimate before an update.
    pub(crate) fn with_mean(&self, mean: DVector<f64>) -> CodePosterior {
        CodePosterior {
            mean,
            var: self.var.clone(),
        }
    }
}

/// An ordered group of codes sharing one set of episode-level latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    codes: Vec<CodePosterior>,
    observed: bool,
    provenance: String,
}

impl Episode {
    pub fn new(codes: Vec<CodePosterior>, provenance: impl Into<String>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::invalid("Episode: must contain at least one code"));
        }
        let dim = codes[0].dim();
        for (t, code) in codes.iter().enumerate() {
            if code.dim() != dim {
                return Err(Error::NonUniformCodeDim {
                    expected: dim,
                    found: code.dim(),
                    timestep: t,
                });
            }
        }
        let observed = codes[0].is_observed();
        if codes.iter().any(|c| c.is_observed() != observed) {
            return Err(Error::invalid(
                "Episode: observed mode is all-or-nothing across timesteps",
            ));
        }
        Ok(Self {
            codes,
            observed,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_dim(&self) -> usize {
        self.codes[0].dim()
    }

    pub fn codes(&self) -> &[CodePosterior] {
        &self.codes
    }

    pub fn observed(&self) -> bool {
        self.observed
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// Configuration for the synthetic linear-Gaussian episode generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Episode length T.
    pub timesteps: usize,
    /// Memory rows K.
    pub memory_rows: usize,
    /// Code dimension C.
    pub code_dim: usize,
    /// Observation noise variance.
    pub sigma_z2: f64,
    /// Standard deviation of the random prior-mean entries.
    pub prior_mean_scale: f64,
    /// Seed used by callers to build the generator RNG.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            timesteps: 32,
            memory_rows: 32,
            code_dim: 50,
            sigma_z2: 1.0,
            prior_mean_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.memory_rows == 0 || self.code_dim == 0 {
            return Err(Error::invalid("SynthConfig: dimensions must be positive"));
        }
        if self.sigma_z2 <= 0.0 || self.sigma_z2.is_nan() {
            return Err(Error::invalid("SynthConfig: sigma_z2 must be positive"));
        }
        if self.prior_mean_scale < 0.0 || self.prior_mean_scale.is_nan() {
            return Err(Error::invalid(
                "SynthConfig: prior_mean_scale must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Sampled latents behind a synthetic episode, kept for diagnostics and so
/// inference can be run against the generating prior.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// The randomly drawn prior mean the episode was generated under.
    pub prior_mean: DMatrix<f64>,
    /// The memory matrix sampled once for the episode.
    pub memory: DMatrix<f64>,
    /// Per-timestep addressing weights.
    pub weights: Vec<DVector<f64>>,
}

/// Ancestral sampling from the linear-Gaussian model: the prior mean gets
/// i.i.d. `N(0, prior_mean_scale²)` entries and unit row covariance, the
/// memory matrix is drawn once, then per timestep `w_t ~ N(0, I_K)` and
/// `z_t ~ N(Mᵀ w_t, sigma_z2 I_C)`. The episode is returned in observed
/// mode (zero variances).
pub fn generate_synthetic_episode<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Episode, GroundTruth)> {
    cfg.validate()?;
    let k = cfg.memory_rows;
    let c = cfg.code_dim;

    let prior_mean = standard_normal_matrix(rng, k, c) * cfg.prior_mean_scale;
    let prior = MatrixNormal::new(prior_mean.clone(), DMatrix::identity(k, k))?;
    let memory = prior.sample(rng);

    let noise_sd = cfg.sigma_z2.sqrt();
    let mut codes = Vec::with_capacity(cfg.timesteps);
    let mut weights = Vec::with_capacity(cfg.timesteps);
    for _ in 0..cfg.timesteps {
        let w = standard_normal_vector(rng, k);
        let z = memory.transpose() * &w + standard_normal_vector(rng, c) * noise_sd;
        codes.push(CodePosterior::observed(z)?);
        weights.push(w);
    }

    let episode = Episode::new(codes, "synthetic-linear-gaussian")?;
    Ok((
        episode,
        GroundTruth {
            prior_mean,
            memory,
            weights,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct CodeJson {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeJson {
    observed: bool,
    codes: Vec<CodeJson>,
    provenance: String,
}

pub fn episode_to_json(episode: &Episode) -> Result<String> {
    let doc = EpisodeJson {
        observed: episode.observed,
        codes: episode
            .codes
            .iter()
            .map(|c| CodeJson {
                mean: c.mean.iter().copied().collect(),
                var: c.var.iter().copied().collect(),
            })
            .collect(),
        provenance: episode.provenance.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn episode_from_json(json: &str) -> Result<Episode> {
    let doc: EpisodeJson =
        serde_json::from_str(json).map_err(|e| Error::schema(format!("episode JSON: {e}")))?;
    if doc.codes.is_empty() {
        return Err(Error::schema("episode JSON: \"codes\" must be non-empty"));
    }
    let codes = doc
        .codes
        .into_iter()
        .map(|c| CodePosterior::new(DVector::from_vec(c.mean), DVector::from_vec(c.var)))
        .collect::<Result<Vec<_>>>()?;
    let episode = Episode::new(codes, doc.provenance)?;
    if episode.observed != doc.observed {
        return Err(Error::schema(format!(
            "episode JSON: \"observed\" flag is {}, but code variances say {}",
            doc.observed, episode.observed
        )));
    }
    Ok(episode)
}

pub fn save_episode(episode: &Episode, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, episode_to_json(episode)?)?;
    Ok(())
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let text = fs::read_to_string(path)?;
    episode_from_json(&text)
}
