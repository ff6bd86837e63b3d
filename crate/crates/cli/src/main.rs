//! `tmclass`: generate data, train, evaluate and inspect from one config file.
//!
//! Exit codes: 0 success, 1 usage or other error, 2 configuration error,
//! 3 data or I/O error, 4 numeric failure.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tmclass::checkpoint::Checkpoint;
use tmclass::config::ExperimentConfig;
use tmclass::data::{generate_synthetic, read_dataset, split, write_dataset, FeatureDataset};
use tmclass::estimator::{Estimator, Model};
use tmclass::evaluation::{dump_trajectory, evaluate, sweep_csv, sweep_steps};
use tmclass::sampler::format_sig9;
use tmclass::taxonomy::{ClassTaxonomy, CodebookManifest, TaxonomyCodebook};
use tmclass::training::{TrainLoop, TrainState};
use tmclass::{Error, ErrorKind, Result};

const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Parser)]
#[command(
    name = "tmclass",
    version,
    about = "Classification by transporting features to label codewords"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. `--set train.total_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write train/validation/test splits.
    GenData,
    /// Train the estimator, writing metrics and checkpoints.
    Train {
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy, per-class precision/recall and confusion matrix.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Accuracy for each configured number of sampler steps.
    SweepSteps {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the sampling trajectory of one record plus the panel rows.
    DumpTrajectory {
        #[arg(long, default_value = "test")]
        split: String,
        /// Record index within the split.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
    /// Print the codebook manifest for a list of labels.
    EncodeTaxonomy {
        /// Comma-separated class labels, in index order.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<String>,
        #[arg(long)]
        dim: usize,
        /// Also write the codewords as CSV, one row per class.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Print a dataset's header and per-class counts.
    InspectDataset { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_split(cfg: &ExperimentConfig, name: &str) -> Result<FeatureDataset> {
    if !SPLITS.contains(&name) {
        return Err(Error::InvalidArgument(format!(
            "unknown split {name:?}; expected one of {SPLITS:?}"
        )));
    }
    read_dataset(cfg.paths.split_file(name))
}

fn load_model(cfg: &ExperimentConfig) -> Result<Model> {
    let ck = Checkpoint::load(cfg.paths.checkpoint())?;
    if ck.config != cfg.estimator {
        log::warn!(
            "checkpoint estimator config differs from the config file; using the checkpoint's"
        );
    }
    Model::new(Estimator::new(ck.config)?, ck.params)
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.data.synthetic)?;
    let parts = split(&data, cfg.data.split, cfg.data.split_seed)?;
    let dir = &cfg.paths.data_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    cfg.echo_to(dir)?;
    for (name, part) in SPLITS.iter().zip(&parts) {
        let path = cfg.paths.split_file(name);
        write_dataset(part, &path)?;
        println!("{}: {} records", path.display(), part.len());
    }
    println!(
        "class-mean separation {:.2}x within-class std",
        cfg.data.synthetic.separation_ratio()?
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let validation = load_split(cfg, "validation")?;
    let codebook = train.codebook()?;
    let estimator = Estimator::new(cfg.estimator.clone())?;
    let out = &cfg.paths.output_dir;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    cfg.echo_to(out)?;
    let ck_path = cfg.paths.checkpoint();
    let state = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != cfg.estimator {
            return Err(Error::Config(
                "checkpoint estimator config differs from [estimator]".into(),
            ));
        }
        TrainState::from_checkpoint(ck)?
    } else {
        TrainState::fresh(&estimator, cfg.train.seed)
    };
    let metrics_path = out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let val = (!validation.is_empty()).then_some((&validation, cfg.sampler_config()));
    let (state, log) = TrainLoop {
        estimator: &estimator,
        codebook: &codebook,
        schedule: cfg.schedule,
        config: &cfg.train,
        validation: val,
        metrics: Some(&mut metrics),
        checkpoint: Some(&ck_path),
    }
    .run(&train, state)?;
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    if let Some(last) = log.last() {
        println!("step {}  loss {:.6}", last.step, last.loss);
    }
    if let Some(acc) = log.iter().rev().find_map(|m| m.val_accuracy) {
        println!("last validation accuracy {acc:.4}");
    }
    println!("checkpoint {} (step {})", ck_path.display(), state.step);
    Ok(())
}

fn eval(cfg: &ExperimentConfig, split_name: &str) -> Result<()> {
    let data = load_split(cfg, split_name)?;
    let model = load_model(cfg)?;
    let report = evaluate(&data, &model, &data.codebook()?, &cfg.sampler_config())?;
    let out = &cfg.paths.output_dir;
    cfg.echo_to(out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join(format!("eval_{split_name}.json")), &json)?;
    write_text(
        &out.join(format!("confusion_{split_name}.csv")),
        &report.confusion_csv(),
    )?;
    print!("{}", report.to_text());
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, split_name: &str) -> Result<()> {
    let data = load_split(cfg, split_name)?;
    let model = load_model(cfg)?;
    let rows = sweep_steps(
        &data,
        &model,
        &data.codebook()?,
        &cfg.sampler_config(),
        &cfg.sampler.sweep,
    )?;
    let out = &cfg.paths.output_dir;
    cfg.echo_to(out)?;
    let csv = sweep_csv(&rows);
    write_text(&out.join(format!("sweep_{split_name}.csv")), &csv)?;
    println!("{:>6}  accuracy", "N");
    for r in &rows {
        println!("{:>6}  {:.4}", r.num_steps, r.accuracy);
    }
    Ok(())
}

fn dump(cfg: &ExperimentConfig, split_name: &str, index: usize) -> Result<()> {
    let data = load_split(cfg, split_name)?;
    let record = data.records().get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "record {index} out of range; split has {}",
            data.len()
        ))
    })?;
    let model = load_model(cfg)?;
    let codebook = data.codebook()?;
    let result = dump_trajectory(
        record,
        &model,
        &codebook,
        &cfg.sampler_config(),
        &cfg.sampler.panel_times,
    )?;
    let dir = cfg
        .paths
        .output_dir
        .join(format!("trajectory_{split_name}_{index}"));
    result.write(&dir)?;
    cfg.echo_to(&cfg.paths.output_dir)?;
    let label = |i: usize| codebook.labels()[i].clone();
    println!(
        "record {index}: label {}, predicted {}",
        record.label.map_or("-".to_string(), |l| label(l as usize)),
        label(result.predicted)
    );
    for p in &result.panels {
        let t = result.trajectory.entries[p.index].0;
        match p.cosine {
            Some(c) => println!("t = {t:.4}  cosine to x0 {c:.4}"),
            None => println!("t = {t:.4}"),
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn encode_taxonomy(labels: &[String], dim: usize, codebook_path: Option<&Path>) -> Result<()> {
    let taxonomy = ClassTaxonomy::new(labels.iter().map(|l| l.trim().to_string()))?;
    let codebook = TaxonomyCodebook::build(&taxonomy, dim)?;
    let manifest: CodebookManifest = codebook.manifest();
    println!("{}", manifest.to_json());
    if let Some(path) = codebook_path {
        let mut w = create(path)?;
        for (label, row) in codebook.labels().iter().zip(codebook.codewords().rows()) {
            let cells: Vec<String> = row.iter().map(|v| format_sig9(*v)).collect();
            writeln!(w, "{label},{}", cells.join(",")).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::InspectDataset { path } = &cli.command {
        print!("{}", read_dataset(path)?.summary());
        return Ok(());
    }
    if let Command::EncodeTaxonomy {
        labels,
        dim,
        codebook,
    } = &cli.command
    {
        return encode_taxonomy(labels, *dim, codebook.as_deref());
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { resume } => train(&cfg, resume),
        Command::Eval { split } => eval(&cfg, &split),
        Command::SweepSteps { split } => sweep(&cfg, &split),
        Command::DumpTrajectory { split, record } => dump(&cfg, &split, record),
        Command::InspectDataset { .. } | Command::EncodeTaxonomy { .. } => {
            unreachable!("handled above")
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
