use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cberl::augment::{generate_samples, train_gan, GanState};
use cberl::checkpoint;
use cberl::corpus::{
    class_histogram, load_corpus, synthesize_corpus, write_corpus, Corpus, Dialogue,
    ImbalanceSpec, Manifest, SpeakerId,
};
use cberl::fusion::{train_fusion, FusionModel};
use cberl::graph::{apply_mask, build_graph, Window};
use cberl::harness::experiment::SEED_ENV;
use cberl::harness::studies::{ablation_csv, gamma_csv, DEFAULT_GAMMAS};
use cberl::harness::{
    ablation_grid, augmentation_study, export_embeddings, gamma_sweep, run_experiment,
    CorpusSource, ExperimentConfig, TrainedClassifier,
};
use cberl::io::write_atomic;

const GAN_KIND: &str = "augmenter";
const FUSION_KIND: &str = "fusion";

#[derive(Parser)]
#[command(name = "cberl", version, about = "Imbalance-aware multimodal emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or summarize corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train the GAN augmenter or draw samples from it.
    #[command(subcommand)]
    Augment(AugmentCmd),
    /// Train the fusion encoder or encode a corpus with it.
    #[command(subcommand)]
    Fusion(FusionCmd),
    /// Inspect conversation graphs.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Fit the full classifier or predict with it.
    #[command(subcommand)]
    Classify(ClassifyCmd),
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all sixteen toggle combinations.
    Ablate(StudyArgs),
    /// Run one experiment per focal exponent.
    SweepGamma {
        #[command(flatten)]
        study: StudyArgs,
        /// Comma-separated exponents.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Compare runs with and without synthetic samples.
    StudyAug(StudyArgs),
    /// Copy the test embeddings of a finished run.
    ExportEmb {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StudyArgs {
    /// Experiment config; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Write a synthetic corpus from an imbalance spec (JSON or TOML).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the class histogram of a corpus directory.
    Stats { dir: PathBuf },
}

#[derive(Subcommand)]
enum AugmentCmd {
    /// Train the GAN on a corpus directory and save a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw per-class synthetic utterances into a corpus directory.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON array of per-class counts, inline or as a file path.
        #[arg(long)]
        counts: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FusionCmd {
    /// Train the fusion encoder and save a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one fused latent code per utterance as JSON lines.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Dump one dialogue's graph and mask as JSON.
    Inspect {
        #[arg(long)]
        corpus: PathBuf,
        /// Dialogue position in the corpus.
        #[arg(long, default_value_t = 0)]
        dialogue: usize,
        #[arg(long, default_value_t = 4)]
        past: usize,
        #[arg(long, default_value_t = 4)]
        future: usize,
        #[arg(long, default_value_t = 0.0)]
        mask_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ClassifyCmd {
    /// Train the full pipeline on a corpus and save the classifier.
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one prediction per utterance as JSON lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Checkpointed augmenter: the GAN plus the corpus header it was trained on.
#[derive(Serialize, Deserialize)]
struct Augmenter {
    manifest: Manifest,
    state: GanState,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::desk(0),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn seed_from_env(default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v} is not a u64")),
        Err(_) => Ok(default),
    }
}

fn read_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn read_spec(path: &Path) -> Result<ImbalanceSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)?,
        _ => serde_json::from_str(&text)?,
    })
}

fn parse_counts(arg: &str) -> Result<Vec<usize>> {
    if let Ok(v) = serde_json::from_str(arg) {
        return Ok(v);
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("counts {arg:?} is neither JSON nor a file"))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<usize> {
    let mut buf = String::new();
    let mut n = 0;
    for r in rows {
        buf.push_str(&serde_json::to_string(&r)?);
        buf.push('\n');
        n += 1;
    }
    write_atomic(path, buf.as_bytes())?;
    Ok(n)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Synth { spec, out } => {
            let mut spec = read_spec(&spec)?;
            spec.seed = seed_from_env(spec.seed)?;
            let corpus = synthesize_corpus(&spec)?;
            write_corpus(&corpus, &out)?;
            log::info!("wrote {} utterances to {}", corpus.num_utterances(), out.display());
            print_json(&class_histogram(&corpus))
        }
        CorpusCmd::Stats { dir } => {
            let corpus = read_corpus(&dir)?;
            print_json(&json!({
                "dialogues": corpus.dialogues.len(),
                "histogram": class_histogram(&corpus),
            }))
        }
    }
}

fn augment_cmd(cmd: AugmentCmd) -> Result<()> {
    match cmd {
        AugmentCmd::Train { corpus, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&corpus)?;
            let state = train_gan(&corpus, &cfg.gan, cfg.seed)?;
            let ckpt = Augmenter {
                manifest: corpus.manifest(),
                state,
            };
            checkpoint::save(&out, GAN_KIND, &ckpt)?;
            log::info!("saved augmenter to {}", out.display());
            Ok(())
        }
        AugmentCmd::Generate { ckpt, counts, out } => {
            let aug: Augmenter = checkpoint::load(&ckpt, GAN_KIND)?;
            let counts = parse_counts(&counts)?;
            let seed = seed_from_env(0)?;
            let samples = generate_samples(&aug.state, &counts, seed)?;
            let dialogues = samples
                .into_iter()
                .enumerate()
                .map(|(i, mut u)| {
                    u.id = i as u64;
                    u.speaker = SpeakerId(0);
                    Dialogue {
                        id: i as u64,
                        session: None,
                        utterances: vec![u],
                    }
                })
                .collect();
            let corpus = Corpus {
                num_classes: aug.manifest.num_classes,
                class_names: aug.manifest.class_names.clone(),
                dims: aug.manifest.dims(),
                dialogues,
            };
            write_corpus(&corpus, &out)?;
            print_json(&class_histogram(&corpus))
        }
    }
}

fn fusion_cmd(cmd: FusionCmd) -> Result<()> {
    match cmd {
        FusionCmd::Train { corpus, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&corpus)?;
            let model = train_fusion(&corpus, &cfg.fusion, cfg.seed)?;
            checkpoint::save(&out, FUSION_KIND, &model)?;
            log::info!("saved fusion model to {}", out.display());
            Ok(())
        }
        FusionCmd::Encode { ckpt, corpus, out } => {
            let model: FusionModel = checkpoint::load(&ckpt, FUSION_KIND)?;
            let corpus = read_corpus(&corpus)?;
            let z = model.fuse_matrix(&corpus.feature_matrix())?;
            let rows = corpus.utterances().zip(z.rows()).map(|(u, row)| {
                json!({ "id": u.id, "label": u.label, "latent": row.to_vec() })
            });
            let n = write_jsonl(&out, rows)?;
            log::info!("encoded {n} utterances");
            Ok(())
        }
    }
}

fn graph_cmd(cmd: GraphCmd) -> Result<()> {
    let GraphCmd::Inspect {
        corpus,
        dialogue,
        past,
        future,
        mask_rate,
        seed,
        out,
    } = cmd;
    let corpus = read_corpus(&corpus)?;
    let Some(d) = corpus.dialogues.get(dialogue) else {
        bail!("dialogue {dialogue} out of range (corpus has {})", corpus.dialogues.len());
    };
    let speakers: Vec<SpeakerId> = d.utterances.iter().map(|u| u.speaker).collect();
    let graph = build_graph(&speakers, Window { past, future })?;
    let mask = apply_mask(graph.num_nodes, mask_rate, seed)?;
    let nodes: Vec<_> = d
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| json!({ "index": i, "id": u.id, "speaker": u.speaker.0, "label": u.label }))
        .collect();
    let dump = json!({
        "dialogue": d.id,
        "window": graph.window,
        "nodes": nodes,
        "edges": graph.edges,
        "mask": mask.masked,
    });
    match out {
        Some(path) => write_atomic(&path, &serde_json::to_vec_pretty(&dump)?)?,
        None => print_json(&dump)?,
    }
    Ok(())
}

fn classify_cmd(cmd: ClassifyCmd) -> Result<()> {
    match cmd {
        ClassifyCmd::Fit { corpus, out, config } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.corpus = CorpusSource::Path { dir: corpus };
            let run = run_experiment(&cfg)?;
            checkpoint::save(&out, TrainedClassifier::CHECKPOINT_KIND, &run.classifier())?;
            print_json(&run.report)
        }
        ClassifyCmd::Predict { ckpt, corpus, out } => {
            let clf: TrainedClassifier = checkpoint::load(&ckpt, TrainedClassifier::CHECKPOINT_KIND)?;
            let corpus = read_corpus(&corpus)?;
            let records = clf.predict(&corpus)?;
            let n = write_jsonl(
                &out,
                records
                    .iter()
                    .map(|r| json!({ "id": r.id, "label": r.label, "predicted": r.predicted })),
            )?;
            log::info!("wrote {n} predictions to {}", out.display());
            Ok(())
        }
    }
}

fn study_config(args: &StudyArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(c) => corpus_cmd(c),
        Command::Augment(c) => augment_cmd(c),
        Command::Fusion(c) => fusion_cmd(c),
        Command::Graph(c) => graph_cmd(c),
        Command::Classify(c) => classify_cmd(c),
        Command::Run { config, out } => {
            let mut cfg = load_config(Some(&config))?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            print_json(&run_experiment(&cfg)?.report)
        }
        Command::Ablate(args) => {
            let rows = ablation_grid(&study_config(&args)?)?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
        Command::SweepGamma { study, gammas } => {
            let gammas = gammas.unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
            let rows = gamma_sweep(&study_config(&study)?, &gammas)?;
            print!("{}", gamma_csv(&rows));
            Ok(())
        }
        Command::StudyAug(args) => print_json(&augmentation_study(&study_config(&args)?)?),
        Command::ExportEmb { run, out } => {
            let n = export_embeddings(&run, &out)?;
            log::info!("exported {n} embeddings to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
