//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataio::{load_trials, read_feature_stack, FeatureSource, FeatureStack, FileSource, Manifest};
use crate::diffcore::Real;
use crate::encoder::{fit_layers, Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, embed_all, score_trials, write_scores};
use crate::model::{Model, ModelConfig};
use crate::train::{train, Checkpoint, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "graphpool", version, about = "Graph pooling of frame-level speaker features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and AAM head; writes checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Score a trial list and report the equal error rate.
    Evaluate(EvaluateArgs),
    /// Pool feature files into vectors.
    Pool(PoolArgs),
    /// Dump attention adjacency matrices as CSV.
    InspectAdjacency(AdjacencyArgs),
    /// Dump normalized layer weights as CSV.
    InspectWeights(WeightsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint; its configuration is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Drop the readout gate branch.
    #[arg(long)]
    pub thin: bool,
    /// Use a single averaged layer instead of learned layer weights.
    #[arg(long)]
    pub no_layer_weighting: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest covering every utterance in the trial list.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trial list, `<0|1> <enroll> <test>` per line.
    #[arg(long)]
    pub trials: PathBuf,
    /// Directory for scores.csv and eer.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Pooling kind (mean, max, mean_std, quantile, first, middle, last,
    /// random) or `gnn` with --checkpoint.
    #[arg(long)]
    pub kind: EncoderKind,
    /// Single feature file; output is one value per line.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub features: Option<PathBuf>,
    /// Manifest; output is `utt,v1,v2,...` per utterance.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained model for `--kind gnn`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for random frame selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AdjacencyArgs {
    /// Trained model; without it a model is initialized from --config and
    /// --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Single feature file; matrix goes to --out or stdout.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub features: Option<PathBuf>,
    /// Manifest; writes `<utt>.csv` per utterance under --out.
    #[arg(long, requires = "out")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub thin: bool,
    #[arg(long)]
    pub no_layer_weighting: bool,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Pool(a) => cmd_pool(a, stdout),
        Command::InspectAdjacency(a) => cmd_adjacency(a, stdout),
        Command::InspectWeights(a) => cmd_weights(a, stdout),
    }
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    config.model.thin |= a.thin;
    if a.no_layer_weighting {
        config.model.use_layer_weighting = false;
    }
    config.validate()?;
    let resume = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let manifest = Manifest::load(&a.manifest)?;
    let outcome = train(
        &manifest,
        &FileSource,
        &config,
        &TrainOptions {
            out: Some(a.out.clone()),
            workers: a.workers,
            resume,
            stop_at: None,
        },
    )?;
    let last = outcome.metrics.last();
    let _ = writeln!(
        stdout,
        "steps={} loss={} out={}",
        outcome.last.step,
        last.map_or(f64::NAN, |r| r.loss),
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let trials = load_trials(&a.trials, &manifest)?;
    let embeddings = match ck.config.train.precision {
        32 => embed_all(&manifest, &FileSource, &ck.encoder::<f32>()?, a.workers)?,
        _ => embed_all(&manifest, &FileSource, &ck.encoder::<f64>()?, a.workers)?,
    };
    let scored = score_trials(&embeddings, &trials)?;
    let eer = compute_eer(&scored)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_scores(&scored, dir.join("scores.csv"))?;
        let p = dir.join("eer.txt");
        fs::write(&p, format!("{eer}\n")).map_err(|e| Error::io(&p, e))?;
    }
    let _ = writeln!(stdout, "{eer}");
    Ok(())
}

fn pool_encoder<T: Real>(a: &PoolArgs) -> Result<Encoder<T>> {
    match a.kind {
        EncoderKind::Pooling(k) => Ok(Encoder::Pooling(k.with_seed(a.seed))),
        EncoderKind::Graph => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Usage("--kind gnn needs --checkpoint".into()))?;
            Checkpoint::load(path)?.encoder()
        }
    }
}

fn cmd_pool(a: PoolArgs, stdout: &mut dyn Write) -> Result<()> {
    let encoder = pool_encoder::<f64>(&a)?;
    let text = match (&a.features, &a.manifest) {
        (Some(f), _) => {
            let v = encoder.embed(&read_feature_stack(f)?)?;
            v.iter().map(|x| format!("{x}\n")).collect::<String>()
        }
        (None, Some(m)) => {
            let manifest = Manifest::load(m)?;
            let all = embed_all(&manifest, &FileSource, &encoder, a.workers)?;
            let mut s = String::new();
            for e in manifest.entries() {
                let _ = write!(s, "{}", e.utt);
                for x in &all[&e.utt] {
                    let _ = write!(s, ",{x}");
                }
                s.push('\n');
            }
            s
        }
        (None, None) => return Err(Error::Usage("give --features or --manifest".into())),
    };
    emit(a.out.as_deref(), &text, stdout)
}

fn matrix_csv<T: Real>(m: &ndarray::Array2<T>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn adjacency_model(a: &AdjacencyArgs, first: &FeatureStack) -> Result<Model<f64>> {
    if let Some(p) = &a.checkpoint {
        return match Checkpoint::load(p)?.encoder::<f64>()? {
            Encoder::Graph(m) => Ok(m),
            Encoder::Pooling(k) => Err(Error::Usage(format!(
                "checkpoint holds `{k}` pooling, which has no adjacency"
            ))),
        };
    }
    let mut model = match &a.config {
        Some(_) => load_config(a.config.as_deref())?.model,
        None => ModelConfig {
            feature_dim: first.dim(),
            layers: first.layers(),
            use_layer_weighting: first.layers() > 1,
            ..ModelConfig::default()
        },
    };
    model.thin |= a.thin;
    if a.no_layer_weighting {
        model.use_layer_weighting = false;
    }
    Model::new(model, a.seed)
}

fn cmd_adjacency(a: AdjacencyArgs, stdout: &mut dyn Write) -> Result<()> {
    match (&a.features, &a.manifest) {
        (Some(f), _) => {
            let stack = read_feature_stack(f)?;
            let model = adjacency_model(&a, &stack)?;
            let adj = model.adjacency(&fit_layers(&stack, model.config.input_layers())?)?;
            emit(a.out.as_deref(), &matrix_csv(&adj), stdout)
        }
        (None, Some(m)) => {
            let manifest = Manifest::load(m)?;
            let dir = a.out.as_deref().expect("clap requires --out");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut model = None;
            for e in manifest.entries() {
                let stack = FileSource.load(e)?;
                if model.is_none() {
                    model = Some(adjacency_model(&a, &stack)?);
                }
                let m = model.as_ref().expect("set above");
                let adj = m
                    .adjacency(&fit_layers(&stack, m.config.input_layers())?)
                    .map_err(|err| Error::for_utterance(&e.utt, err))?;
                emit(Some(&dir.join(format!("{}.csv", e.utt))), &matrix_csv(&adj), stdout)?;
            }
            Ok(())
        }
        (None, None) => Err(Error::Usage("give --features or --manifest".into())),
    }
}

fn cmd_weights(a: WeightsArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = match Checkpoint::load(&a.checkpoint)?.encoder::<f64>()? {
        Encoder::Graph(m) => m,
        Encoder::Pooling(k) => {
            return Err(Error::Usage(format!("checkpoint holds `{k}` pooling, which has no layer weights")))
        }
    };
    let weights = model
        .params
        .normalized_layer_weights()
        .ok_or_else(|| Error::Usage("model was trained without layer weighting".into()))?;
    let mut s = String::from("layer,weight\n");
    for (i, w) in weights.iter().enumerate() {
        let _ = writeln!(s, "{},{w}", i + 1);
    }
    emit(a.out.as_deref(), &s, stdout)
}
