//! Synthetic inference benchmark: per episode, the coordinate-ascent writer
//! and both least-squares baselines run on identical data and are scored by
//! the same closed-form bound. Episodes run on a worker pool but are
//! reported in episode order, so the output does not depend on scheduling.

use std::io::Write as IoWrite;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_write, BaselineKind};
use crate::engine::{write_episode, InferenceConfig, InitMode};
use crate::episode::{generate_synthetic_episode, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};

pub const CSV_HEADER: &str = "episode_id,algorithm,iters,elbo,elbo_per_frame,wall_ms,seed";

/// One (episode, algorithm) measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub episode_id: u64,
    pub algorithm: String,
    pub iters: usize,
    pub elbo: f64,
    pub elbo_per_frame: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

/// Distribution of per-episode bound differences against one baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapSummary {
    pub baseline: String,
    pub episodes: usize,
    /// Fraction of episodes where the coordinate-ascent bound is at least
    /// the baseline bound.
    pub win_ratio: f64,
    pub median_gap: f64,
    pub min_gap: f64,
    pub max_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub vs_online: GapSummary,
    pub vs_batched: GapSummary,
}

/// Benchmark configuration (CLI flags map onto this).
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub episodes: u64,
    pub timesteps: usize,
    pub memory_rows: usize,
    pub code_dim: usize,
    pub sigma_z2: f64,
    pub sweeps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the default pool.
    pub jobs: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            episodes: 64,
            timesteps: 32,
            memory_rows: 32,
            code_dim: 50,
            sigma_z2: 1.0,
            sweeps: 50,
            seed: 0,
            jobs: None,
        }
    }
}

/// Splitmix-style per-episode seed derivation.
pub fn episode_seed(base: u64, episode_id: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(episode_id.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct EpisodeOutcome {
    records: [BenchRecord; 3],
    gap_online: f64,
    gap_batched: f64,
}

fn run_one_episode(cfg: &BenchConfig, episode_id: u64) -> Result<EpisodeOutcome> {
    let seed = episode_seed(cfg.seed, episode_id);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let synth = SynthConfig {
        timesteps: cfg.timesteps,
        memory_rows: cfg.memory_rows,
        code_dim: cfg.code_dim,
        sigma_z2: cfg.sigma_z2,
        prior_mean_scale: 1.0,
        seed,
    };
    let (episode, truth) = generate_synthetic_episode(&synth, &mut rng)?;
    // Inference runs against the generating prior, including the randomly
    // drawn prior mean.
    let spec = ModelSpec::new(
        Variant::GaussianAddress,
        cfg.memory_rows,
        cfg.code_dim,
        1,
        1,
        cfg.sigma_z2,
        truth.prior_mean.clone(),
        nalgebra::DMatrix::identity(cfg.memory_rows, cfg.memory_rows),
        None,
        None,
    )?;

    let frames = cfg.timesteps as f64;
    let record = |algorithm: &str, iters: usize, elbo: f64, wall_ms: f64| BenchRecord {
        episode_id,
        algorithm: algorithm.to_string(),
        iters,
        elbo,
        elbo_per_frame: elbo / frames,
        wall_ms,
        seed,
    };

    let started = Instant::now();
    let mfvb = write_episode(
        &spec,
        episode.codes(),
        &InferenceConfig {
            sweeps: cfg.sweeps,
            init_mode: InitMode::Prior,
            rng_seed: seed,
            elbo_trace: true,
            early_stop_rel_tol: None,
        },
    )?;
    let mfvb_ms = started.elapsed().as_secs_f64() * 1e3;
    let mfvb_elbo = mfvb.final_elbo().expect("trace enabled");

    let started = Instant::now();
    let online = baseline_write(&spec, &episode, &BaselineKind::OnlineNonIterative, &mut rng)?;
    let online_ms = started.elapsed().as_secs_f64() * 1e3;
    let online_elbo = online.final_elbo().expect("baseline records a trace");

    let started = Instant::now();
    let batched = baseline_write(
        &spec,
        &episode,
        &BaselineKind::BatchedIterative {
            iterations: cfg.sweeps,
        },
        &mut rng,
    )?;
    let batched_ms = started.elapsed().as_secs_f64() * 1e3;
    let batched_elbo = batched.final_elbo().expect("baseline records a trace");

    Ok(EpisodeOutcome {
        records: [
            record("mfvb", cfg.sweeps, mfvb_elbo, mfvb_ms),
            record("dkm_online", 1, online_elbo, online_ms),
            record("dkm_batched", cfg.sweeps, batched_elbo, batched_ms),
        ],
        gap_online: mfvb_elbo - online_elbo,
        gap_batched: mfvb_elbo - batched_elbo,
    })
}

fn summarize(baseline: &str, gaps: &[f64]) -> GapSummary {
    let mut sorted = gaps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    GapSummary {
        baseline: baseline.to_string(),
        episodes: n,
        win_ratio: gaps.iter().filter(|g| **g >= 0.0).count() as f64 / n as f64,
        median_gap: median,
        min_gap: sorted[0],
        max_gap: sorted[n - 1],
    }
}

/// Runs the full benchmark and returns per-algorithm records in episode
/// order plus the gap summary.
pub fn run_synth_bench(cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, BenchSummary)> {
    if cfg.episodes == 0 {
        return Err(Error::invalid("bench: need at least one episode"));
    }
    let outcomes: Vec<EpisodeOutcome> = match cfg.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("bench: thread pool: {e}")))?;
            pool.install(|| {
                (0..cfg.episodes)
                    .into_par_iter()
                    .map(|id| run_one_episode(cfg, id))
                    .collect::<Result<Vec<_>>>()
            })?
        }
        None => (0..cfg.episodes)
            .into_par_iter()
            .map(|id| run_one_episode(cfg, id))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut records = Vec::with_capacity(outcomes.len() * 3);
    let mut gaps_online = Vec::with_capacity(outcomes.len());
    let mut gaps_batched = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        records.extend(outcome.records);
        gaps_online.push(outcome.gap_online);
        gaps_batched.push(outcome.gap_batched);
    }
    let summary = BenchSummary {
        vs_online: summarize("dkm_online", &gaps_online),
        vs_batched: summarize("dkm_batched", &gaps_batched),
    };
    Ok((records, summary))
}

/// Writes the stable CSV schema: the exact header, one row per
/// (episode, algorithm), then one `summary` row per baseline whose columns
/// are `summary,<baseline>,<episodes>,<win_ratio>,<median_gap>,<min_gap>,<max_gap>`.
pub fn write_csv<W: IoWrite>(
    out: &mut W,
    records: &[BenchRecord],
    summary: &BenchSummary,
) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{:.3},{}",
            r.episode_id, r.algorithm, r.iters, r.elbo, r.elbo_per_frame, r.wall_ms, r.seed
        )?;
    }
    for gaps in [&summary.vs_online, &summary.vs_batched] {
        writeln!(
            out,
            "summary,{},{},{},{},{},{}",
            gaps.baseline, gaps.episodes, gaps.win_ratio, gaps.median_gap, gaps.min_gap, gaps.max_gap
        )?;
    }
    Ok(())
}
