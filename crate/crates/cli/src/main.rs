use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bmdg::bmdg::{self as method, inference};
use bmdg::eval::{project_2d, Direction, Protocol, RetrievalResult};
use bmdg::miverify::run_verification;
use bmdg::synthdata::{generate_dataset, load_manifest, DatasetSpec, Modality};
use bmdg::{Error, TrainConfig};
use clap::{Parser, Subcommand};

mod plot;

const METRICS_HELP: &str = "\
Artifacts written under --out:
  resolved-config.toml   every effective setting; pass it back with --config to reproduce the run
  metrics.csv            one row per optimizer step:
                           epoch,step_t,ce,cc,lc,hc,c,vc,p,eq,total
                         ce = identity cross-entropy summed over real and intermediate embeddings
                         cc = center-cluster loss between each modality and its intermediate
                         lc, hc = low-level and high-level prototype contrastive losses
                         c = prototype compactness, vc = mask overlap, p = part identity loss
                         eq = mask equivariance, total = weighted objective
  mmd.csv                epoch,mmd: center distance between modality embeddings
  epoch-NNNN.safetensors periodic checkpoints; final.safetensors at the end";

#[derive(Parser)]
#[command(name = "bmdg", version, about = "Cross-modal person re-identification with part prototypes and intermediate domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic visible/infrared dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// TOML dataset spec; flags below override its values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    #[command(after_help = METRICS_HELP)]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cross-modal retrieval metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["v2i", "i2v"])]
        direction: String,
        #[arg(long, value_parser = ["single", "multi"], default_value = "multi")]
        protocol: String,
        /// Seed of the single-shot gallery draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append the result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check the mutual-information bounds on random discrete distributions.
    VerifyMi {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embedding projection, modality-gap curve and mask grids.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training output directory holding mmd.csv.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Images per modality shown in the mask grid.
        #[arg(long, default_value_t = 4)]
        masks: usize,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let usage = error.chain().any(|cause| {
            matches!(
                cause.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Spec(_))
            )
        });
        Failure {
            code: if usage { 2 } else { 1 },
            error,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData {
            out,
            spec,
            identities,
            images,
            noise,
            seed,
        } => gen_data(&out, spec.as_deref(), identities, images, noise, seed)?,
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(config.as_deref(), &data, &out, resume.as_deref())?,
        Command::Eval {
            checkpoint,
            data,
            direction,
            protocol,
            seed,
            csv,
        } => eval(&checkpoint, &data, &direction, &protocol, seed, csv.as_deref())?,
        Command::VerifyMi { trials, seed } => verify_mi(trials, seed)?,
        Command::Plot {
            checkpoint,
            data,
            out,
            run,
            masks,
        } => plot_cmd(&checkpoint, &data, &out, run.as_deref(), masks)?,
    }
    Ok(())
}

fn gen_data(
    out: &Path,
    spec: Option<&Path>,
    identities: Option<usize>,
    images: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
) -> std::result::Result<(), Failure> {
    let mut s = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetSpec::from_toml_str(&text).context("dataset spec")?
        }
        None => DatasetSpec::default(),
    };
    if let Some(v) = identities {
        s.num_identities = v;
    }
    if let Some(v) = images {
        s.images_per_identity_per_modality = v;
    }
    if let Some(v) = noise {
        s.noise_level = v;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
    s.validate().context("dataset spec")?;
    let manifest = generate_dataset(&s, out).context("generating dataset")?;
    println!(
        "wrote {} images to {} (manifest {})",
        manifest.entries.len(),
        out.display(),
        manifest.manifest_path.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> std::result::Result<(), Failure> {
    let outcome = match resume {
        Some(ckpt) => {
            if config.is_some() {
                log::warn!("--config is ignored when resuming; the checkpoint carries its config");
            }
            let dataset = load_manifest(data).with_context(|| format!("loading {}", data.display()))?;
            method::resume(ckpt, &dataset, out).context("resuming training")?
        }
        None => {
            let cfg = match config {
                Some(p) => TrainConfig::from_file(p).with_context(|| format!("config {}", p.display()))?,
                None => TrainConfig::default(),
            };
            println!("config (resolved):\n{}", cfg.resolved().to_toml_string());
            let dataset = load_manifest(data).with_context(|| format!("loading {}", data.display()))?;
            method::train(&cfg, &dataset, out).context("training")?
        }
    };
    println!(
        "trained {} epochs; last epoch {}\ncheckpoint {}",
        outcome.epochs_run,
        outcome.last_epoch,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    direction: &str,
    protocol: &str,
    seed: u64,
    csv: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let direction: Direction = direction.parse().context("direction")?;
    let protocol: Protocol = protocol.parse().context("protocol")?;
    let (model, _) = method::load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_manifest(data).with_context(|| format!("loading {}", data.display()))?;
    let r = inference::evaluate_model(&model, &dataset, direction, protocol, seed).context("evaluation")?;
    println!("{}", RetrievalResult::CSV_HEADER);
    println!("{}", r.csv_row());
    println!("{r}");
    if let Some(path) = csv {
        append_row(path, RetrievalResult::CSV_HEADER, &r.csv_row())?;
    }
    Ok(())
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

fn verify_mi(trials: usize, seed: u64) -> std::result::Result<(), Failure> {
    let summary = run_verification(trials, seed).context("verification")?;
    println!("{summary}");
    if summary.passed() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("mutual-information verification failed").into())
    }
}

fn plot_cmd(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    run: Option<&Path>,
    masks: usize,
) -> std::result::Result<(), Failure> {
    let (model, _) = method::load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_manifest(data).with_context(|| format!("loading {}", data.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let v = inference::embed_modality(&model, &dataset, Modality::Visible).context("embedding")?;
    let i = inference::embed_modality(&model, &dataset, Modality::Infrared).context("embedding")?;
    let mut all = v.features.clone();
    all.extend(i.features.iter().cloned());
    let proj = project_2d(&all).context("projection")?;
    let mut rows = Vec::with_capacity(all.len());
    let mut csv = String::from("index,identity,modality,x,y\n");
    for (n, (idx, label, modality)) in v
        .indices
        .iter()
        .zip(&v.labels)
        .map(|(a, b)| (a, b, "V"))
        .chain(i.indices.iter().zip(&i.labels).map(|(a, b)| (a, b, "I")))
        .enumerate()
    {
        let [x, y] = proj.coords[n];
        csv.push_str(&format!("{idx},{label},{modality},{x},{y}\n"));
        rows.push((*label, modality == "V", x, y));
    }
    let csv_path = out.join("projection.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    plot::scatter(&rows, &out.join("projection.png"))?;

    if let Some(run) = run {
        let mmd_path = run.join("mmd.csv");
        let text = fs::read_to_string(&mmd_path).with_context(|| format!("reading {}", mmd_path.display()))?;
        let points: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let (e, m) = l.split_once(',')?;
                Some((e.parse().ok()?, m.parse().ok()?))
            })
            .collect();
        plot::curve(&points, &out.join("mmd.png"))?;
    }

    if masks > 0 {
        let mut picks = Vec::new();
        for m in [Modality::Visible, Modality::Infrared] {
            picks.extend(dataset.modality_indices(m).into_iter().step_by(7).take(masks));
        }
        let (h, w, values) = inference::mask_values(&model, &dataset, &picks).context("mask scores")?;
        plot::mask_grid(&dataset, &picks, h, w, model.config.num_prototypes, &values, &out.join("masks.png"))?;
    }
    println!("wrote plots to {}", out.display());
    Ok(())
}
