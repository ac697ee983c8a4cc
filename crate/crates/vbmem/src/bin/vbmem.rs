//! Command-line harness: synthetic benchmark, inference runs, generation
//! from a written memory, and self-check suites.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use vbmem::bench::{run_synth_bench, write_csv, BenchConfig};
use vbmem::engine::{
    inference_result_from_json, inference_result_to_json, write_episode, InferenceConfig, InitMode,
};
use vbmem::episode::{generate_synthetic_episode, load_episode, save_episode, SynthConfig};
use vbmem::model::{model_spec_from_json, ModelSpec, Variant};
use vbmem::readout::{generate_direct, generate_iterative, IdentityDecoder, IdentityEncoder};
use vbmem::verify::run_suite;

#[derive(Parser)]
#[command(name = "vbmem", version, about = "Variational Bayesian episodic memory models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gaussian,
    Categorical,
    #[value(name = "mean-shifted")]
    MeanShifted,
    Mixture,
    Tree,
}

impl From<ModelArg> for Variant {
    fn from(value: ModelArg) -> Self {
        match value {
            ModelArg::Gaussian => Variant::GaussianAddress,
            ModelArg::Categorical => Variant::CategoricalAddress,
            ModelArg::MeanShifted => Variant::MeanShifted,
            ModelArg::Mixture => Variant::Mixture,
            ModelArg::Tree => Variant::Tree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Prior,
    Random,
    Data,
}

impl From<InitArg> for InitMode {
    fn from(value: InitArg) -> Self {
        match value {
            InitArg::Prior => InitMode::Prior,
            InitArg::Random => InitMode::Random,
            InitArg::Data => InitMode::DataDependent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenerateMode {
    Direct,
    Iterative,
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed; falls back to the VBM_SEED environment variable.
    #[arg(long, env = "VBM_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic linear-Gaussian benchmark and write a CSV.
    SynthBench {
        #[arg(long, default_value_t = 64)]
        episodes: u64,
        #[arg(long, default_value_t = 32)]
        timesteps: usize,
        /// Memory rows K.
        #[arg(long, default_value_t = 32)]
        k: usize,
        /// Code dimension C.
        #[arg(long, default_value_t = 50)]
        c: usize,
        /// Observation noise variance.
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 50)]
        sweeps: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (defaults to the logical core count).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Sample one synthetic episode and write it as episode JSON.
    SynthEpisode {
        /// Optional SynthConfig JSON file; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        timesteps: Option<usize>,
        /// Memory rows K.
        #[arg(long)]
        k: Option<usize>,
        /// Code dimension C.
        #[arg(long)]
        c: Option<usize>,
        /// Observation noise variance.
        #[arg(long)]
        sigma2: Option<f64>,
        /// Standard deviation of the random prior-mean entries.
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
        /// Output episode JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional path for the generating model spec JSON.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Write one episode into memory and save the posterior JSON.
    Infer {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Episode JSON path.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 50)]
        sweeps: usize,
        #[arg(long, value_enum, default_value_t = InitArg::Prior)]
        init: InitArg,
        /// Optional model-spec JSON; explicit flags override its scalars.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Memory rows K (overrides the spec file).
        #[arg(long)]
        k: Option<usize>,
        /// Cluster count H (overrides the spec file).
        #[arg(long)]
        h: Option<usize>,
        /// Partition count G (overrides the spec file).
        #[arg(long)]
        g: Option<usize>,
        /// Observation noise variance (overrides the spec file).
        #[arg(long)]
        sigma2: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
        /// Output posterior JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample observations from a saved posterior.
    Generate {
        /// Posterior JSON written by `infer`.
        #[arg(long)]
        posterior: PathBuf,
        /// Number of samples (iterative mode: chain steps).
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, value_enum, default_value_t = GenerateMode::Direct)]
        mode: GenerateMode,
        #[command(flatten)]
        seed: SeedArg,
        /// Output samples JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named verification suite; exits nonzero on failure.
    Check {
        /// One of: kl, reparam, monotone, stationarity, reduction, mc-elbo.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn build_infer_spec(
    model: ModelArg,
    code_dim: usize,
    spec_path: Option<&PathBuf>,
    k: Option<usize>,
    h: Option<usize>,
    g: Option<usize>,
    sigma2: Option<f64>,
) -> vbmem::Result<ModelSpec> {
    let variant: Variant = model.into();
    let file_spec = spec_path
        .map(|p| -> vbmem::Result<ModelSpec> { model_spec_from_json(&fs::read_to_string(p)?) })
        .transpose()?;

    // Precedence: built-in defaults < spec file < explicit flags. The code
    // dimension always comes from the episode.
    let base = file_spec.as_ref();
    let k = k.or(base.map(|s| s.memory_rows())).unwrap_or(32);
    let h = h
        .or(base.map(|s| s.clusters()))
        .unwrap_or(match variant {
            Variant::Mixture | Variant::Tree => 4,
            _ => 1,
        });
    let g = g
        .or(base.map(|s| s.partitions()))
        .unwrap_or(if variant == Variant::Tree { 2 } else { 1 });
    let sigma2 = sigma2.or(base.map(|s| s.sigma_z2())).unwrap_or(1.0);

    // Keep the file's priors only when they still fit the resolved shape.
    if let Some(s) = base {
        if s.variant() == variant
            && s.memory_rows() == k
            && s.code_dim() == code_dim
            && s.clusters() == h
            && s.partitions() == g
        {
            return ModelSpec::new(
                variant,
                k,
                code_dim,
                h,
                g,
                sigma2,
                s.prior_mean().clone(),
                s.prior_row_cov().clone(),
                s.loc_prior_mean().cloned(),
                s.loc_prior_cov().cloned(),
            );
        }
    }
    ModelSpec::with_defaults(variant, k, code_dim, h, g, sigma2)
}

fn run() -> vbmem::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthBench {
            episodes,
            timesteps,
            k,
            c,
            sigma2,
            sweeps,
            seed,
            out,
            jobs,
        } => {
            let cfg = BenchConfig {
                episodes,
                timesteps,
                memory_rows: k,
                code_dim: c,
                sigma_z2: sigma2,
                sweeps,
                seed: seed.seed,
                jobs,
            };
            let (records, summary) = run_synth_bench(&cfg)?;
            let mut buffer = Vec::new();
            write_csv(&mut buffer, &records, &summary)?;
            fs::write(&out, &buffer)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(true)
        }
        Command::SynthEpisode {
            config,
            timesteps,
            k,
            c,
            sigma2,
            scale,
            seed,
            out,
            spec_out,
        } => {
            // Precedence: built-in defaults < config file < explicit flags.
            let base: SynthConfig = config
                .map(|p| -> vbmem::Result<SynthConfig> {
                    serde_json::from_str(&fs::read_to_string(p)?)
                        .map_err(|e| vbmem::Error::Schema(format!("synth config JSON: {e}")))
                })
                .transpose()?
                .unwrap_or_default();
            let cfg = SynthConfig {
                timesteps: timesteps.unwrap_or(base.timesteps),
                memory_rows: k.unwrap_or(base.memory_rows),
                code_dim: c.unwrap_or(base.code_dim),
                sigma_z2: sigma2.unwrap_or(base.sigma_z2),
                prior_mean_scale: scale.unwrap_or(base.prior_mean_scale),
                seed: seed.seed,
            };
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let (episode, truth) = generate_synthetic_episode(&cfg, &mut rng)?;
            save_episode(&episode, &out)?;
            if let Some(spec_path) = spec_out {
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
                fs::write(&spec_path, vbmem::model::model_spec_to_json(&spec)?)?;
            }
            eprintln!(
                "wrote a T={} episode (C={}) to {}",
                episode.len(),
                episode.code_dim(),
                out.display()
            );
            Ok(true)
        }
        Command::Infer {
            model,
            episode,
            sweeps,
            init,
            spec,
            k,
            h,
            g,
            sigma2,
            seed,
            out,
        } => {
            let episode = load_episode(&episode)?;
            let spec = build_infer_spec(model, episode.code_dim(), spec.as_ref(), k, h, g, sigma2)?;
            let cfg = InferenceConfig {
                sweeps,
                init_mode: init.into(),
                rng_seed: seed.seed,
                elbo_trace: true,
                early_stop_rel_tol: None,
            };
            let result = write_episode(&spec, episode.codes(), &cfg)?;
            fs::write(&out, inference_result_to_json(&spec, &result)?)?;
            if let Some(elbo) = result.final_elbo() {
                eprintln!(
                    "final elbo {elbo:.6} ({:.6} per frame) after {} sweeps",
                    elbo / episode.len() as f64,
                    result.elbo_trace.len().saturating_sub(1)
                );
            }
            Ok(true)
        }
        Command::Generate {
            posterior,
            n,
            mode,
            seed,
            out,
        } => {
            let (spec, result) = inference_result_from_json(&fs::read_to_string(&posterior)?)?;
            let mut rng = ChaCha12Rng::seed_from_u64(seed.seed);
            let mut decoder = IdentityDecoder;
            let samples = match mode {
                GenerateMode::Direct => {
                    generate_direct(&spec, &result.memory, n, &mut rng, &mut decoder)?
                }
                GenerateMode::Iterative => {
                    let mut encoder = IdentityEncoder;
                    generate_iterative(&spec, &result.memory, n, &mut rng, &mut decoder, &mut encoder)?
                }
            };
            fs::write(&out, serde_json::to_string_pretty(&samples)?)?;
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
            Ok(true)
        }
        Command::Check { suite, seed } => {
            let report = run_suite(&suite, seed.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
