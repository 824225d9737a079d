//! Command-line driver: corpus synthesis, staged pipeline runs, purity
//! reports, and artifact inspection.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 missing dependency,
//! 3 numeric failure. Log verbosity comes from the `PSEUDOTOPIC_LOG`
//! environment variable (error/warn/info/debug), default `info`.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};

use pseudotopic::corpus::files;
use pseudotopic::corpus::Manifest;
use pseudotopic::pipeline::{self, PipelineConfig, StageRange};
use pseudotopic::{encoder, lda, quantizer, Error, Result};

#[derive(Parser)]
#[command(
    name = "pseudotopic",
    version,
    about = "Discrete speech units, topic labels, and a topic-supervised masked-prediction encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by the config's `[synth]` section.
    Synth {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the `[synth]` seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run pipeline stages against the configured corpus and workdir.
    Run {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Inclusive stage range `A..B`, a single stage, or open-ended
        /// (`..assign0`, `extract..`).
        #[arg(long, default_value = "features..report")]
        stages: String,
        /// Override the global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the workdir path.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Print the purity/accuracy tables (runs the report stage if stale).
    Report {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the workdir path.
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Also print conventional (topic-major) purity for comparison.
        #[arg(long)]
        conventional: bool,
    },
    /// Describe an artifact file (features, codebook, topic model,
    /// checkpoint, or any of the text formats).
    Inspect { artifact: PathBuf },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PSEUDOTOPIC_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };

    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    workdir: Option<&PathBuf>,
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(workdir) = workdir {
        cfg.paths.workdir = workdir.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed } => {
            let mut cfg = load_config(&config, None, None)?;
            if let Some(seed) = seed {
                match cfg.synth.as_mut() {
                    Some(spec) => spec.seed = seed,
                    None => return Err(Error::Config("config has no [synth] section".into())),
                }
            }
            let count = pipeline::synth_to_disk(&cfg)?;
            println!(
                "wrote {count} utterances to {} (manifest {})",
                cfg.paths.corpus_dir.display(),
                cfg.paths.manifest.display()
            );
            Ok(())
        }
        Command::Run {
            config,
            stages,
            seed,
            workdir,
        } => {
            let cfg = load_config(&config, seed, workdir.as_ref())?;
            let range = StageRange::parse(&stages)?;
            let info = pipeline::run(&cfg, range)?;
            for stage in &info.skipped {
                println!("{stage}: up to date");
            }
            for stage in &info.executed {
                println!("{stage}: done");
            }
            Ok(())
        }
        Command::Report {
            config,
            seed,
            workdir,
            conventional,
        } => {
            let cfg = load_config(&config, seed, workdir.as_ref())?;
            pipeline::run(&cfg, StageRange::parse("report")?)?;
            if conventional {
                // Recompute with the transposed column on top; files on disk
                // keep the default layout.
                let manifest = Manifest::load(&cfg.paths.manifest)?;
                let data = pipeline::compute_report(&cfg, &cfg.paths.workdir, &manifest)?;
                print!("{}", data.to_table(true));
            } else {
                let text = std::fs::read_to_string(cfg.paths.workdir.join("report/report.txt"))?;
                print!("{text}");
            }
            Ok(())
        }
        Command::Inspect { artifact } => inspect(&artifact),
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dependency(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() >= 8 {
        match &bytes[0..8] {
            m if m == files::FEATURE_MAGIC => {
                let mat = files::read_features(path)?;
                println!(
                    "feature file: {} frames x {} dims (f32)",
                    mat.rows(),
                    mat.cols()
                );
                return Ok(());
            }
            m if m == files::CODEBOOK_MAGIC => {
                let cb = quantizer::read_codebook(path)?;
                println!(
                    "codebook: {} units x {} dims, space {:?}, seed {}",
                    cb.units(),
                    cb.dims(),
                    cb.space,
                    cb.seed
                );
                return Ok(());
            }
            m if m == files::LDA_MAGIC => {
                let model = lda::read_lda_model(path)?;
                println!(
                    "topic model: K={} over {} tokens, alpha {}, seed {}",
                    model.num_topics,
                    model.vocab_size(),
                    model.alpha,
                    model.seed
                );
                return Ok(());
            }
            m if m == files::ENCODER_MAGIC => {
                let params = encoder::read_checkpoint(path)?;
                let cfg = &params.cfg;
                let total: usize = params
                    .tensor_names()
                    .iter()
                    .map(|n| params.tensor(n).unwrap().data().len())
                    .sum();
                println!(
                    "encoder checkpoint: {} -> dim {} x {} layers ({} heads, ff {}), U={}, K'={}, rho {}, {total} scalars",
                    cfg.input_dim,
                    cfg.model_dim,
                    cfg.layers,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.vocab_size,
                    cfg.num_topics,
                    cfg.rho
                );
                return Ok(());
            }
            _ => {}
        }
    }
    match std::str::from_utf8(&bytes) {
        Ok(text) => {
            println!(
                "text artifact: {} lines, {} bytes",
                text.lines().count(),
                bytes.len()
            );
            Ok(())
        }
        Err(_) => Err(Error::Unsupported(format!(
            "{}: unrecognized binary format",
            path.display()
        ))),
    }
}
