use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    counts_for_classes, generate_samples, scale_counts, train_gan, GanConfig,
    IEMOCAP_AUGMENT_COUNTS, IEMOCAP_UTTERANCES, MELD_AUGMENT_COUNTS, MELD_UTTERANCES,
};
use crate::classify::{boost_fit, BoostEnsemble, Hyperparams};
use crate::context::ContextConfig;
use crate::corpus::{
    class_histogram, load_corpus, split, synthesize_corpus, Corpus, ImbalanceSpec, SplitPolicy,
    Utterance,
};
use crate::error::{Error, Result, StageContext};
use crate::fusion::{train_fusion, FusionConfig};
use crate::graph::GnnConfig;
use crate::harness::metrics::{compute_metrics, MetricsReport, RunMetadata};
use crate::harness::pipeline::{train_joint, EpochLog, JointModel, TrainOptions};
use crate::harness::{plot, seed_for};
use crate::io::write_atomic;

pub const SEED_ENV: &str = "CBERL_SEED";
/// Synthetic utterances get ids from here upward.
pub const SYNTHETIC_ID_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub augmentation: bool,
    pub feature_fusion: bool,
    pub gamma_factor: bool,
    pub graph_mask: bool,
    pub adaboost: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            augmentation: on,
            feature_fusion: on,
            gamma_factor: on,
            graph_mask: on,
            adaboost: on,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic(ImbalanceSpec),
    Path { dir: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self::Synthetic(ImbalanceSpec::meld_like(0))
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            Self::Synthetic(spec) => synthesize_corpus(spec),
            Self::Path { dir } => load_corpus(dir),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Focal,
    CrossEntropy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: CorpusSource,
    pub split: SplitPolicy,
    pub hyper: Hyperparams,
    pub toggles: Toggles,
    pub loss: LossKind,
    pub context: ContextConfig,
    pub fusion: FusionConfig,
    pub gnn: GnnConfig,
    pub gan: GanConfig,
    /// Synthetic samples per class; scaled from the reference tables when unset.
    pub augment_counts: Option<Vec<usize>>,
    pub head_hidden: usize,
    pub fine_tune_fusion: bool,
    /// Classes at or below this share of the corpus count as minority classes.
    pub minority_threshold: f64,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "cberl".into(),
            corpus: CorpusSource::default(),
            split: SplitPolicy::default(),
            hyper: Hyperparams {
                lr: 3e-3,
                batch_size: 8,
                ..Hyperparams::default()
            },
            toggles: Toggles::default(),
            loss: LossKind::Focal,
            context: ContextConfig::default(),
            fusion: FusionConfig {
                epochs: 60,
                ..FusionConfig::default()
            },
            gnn: GnnConfig::default(),
            gan: GanConfig::default(),
            augment_counts: None,
            head_hidden: 32,
            fine_tune_fusion: true,
            minority_threshold: 0.03,
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Long-tail desk preset: the corpus and the model share `seed`.
    pub fn desk(seed: u64) -> Self {
        Self {
            corpus: CorpusSource::Synthetic(ImbalanceSpec::meld_like(seed)),
            seed,
            ..Self::default()
        }
    }

    /// Applies `CBERL_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("{SEED_ENV}={v} is not a u64")))?;
        }
        Ok(())
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.loss == LossKind::CrossEntropy || !self.toggles.gamma_factor {
            0.0
        } else {
            self.hyper.gamma
        }
    }

    pub fn effective_mask_rate(&self) -> f64 {
        if self.toggles.graph_mask {
            self.hyper.mask_rate
        } else {
            0.0
        }
    }

    /// SHA-256 over the JSON config, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string())),
            _ => Ok(serde_json::from_str(&text)?),
        }
    }
}

/// One test utterance in the embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub label: usize,
    pub predicted: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub loss_curve: Vec<EpochLog>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub synthetic_counts: Vec<usize>,
    pub model: JointModel,
    pub ensemble: Option<BoostEnsemble>,
}

impl RunOutput {
    pub fn classifier(&self) -> TrainedClassifier {
        TrainedClassifier {
            config: self.config.clone(),
            model: self.model.clone(),
            ensemble: self.ensemble.clone(),
        }
    }
}

/// The deployable part of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub config: ExperimentConfig,
    pub model: JointModel,
    pub ensemble: Option<BoostEnsemble>,
}

impl TrainedClassifier {
    pub const CHECKPOINT_KIND: &'static str = "classifier";

    /// Embeds every utterance of `corpus` and labels it with the ensemble, or
    /// with the softmax head when no ensemble was fitted.
    pub fn predict(&self, corpus: &Corpus) -> Result<Vec<EmbeddingRecord>> {
        let ev = self.model.evaluate(corpus)?;
        let predictions = match &self.ensemble {
            Some(ens) => ens.predict(&ev.embeddings)?.0,
            None => ev.predictions.clone(),
        };
        Ok(ev
            .ids
            .iter()
            .zip(&ev.labels)
            .zip(&predictions)
            .zip(ev.embeddings.rows())
            .map(|(((&id, &label), &predicted), row)| EmbeddingRecord {
                id,
                label,
                predicted,
                embedding: row.to_vec(),
            })
            .collect())
    }
}

/// Per-class synthetic counts for `corpus`.
pub fn synthetic_counts(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<usize>> {
    if let Some(counts) = &cfg.augment_counts {
        if counts.len() != corpus.num_classes {
            return Err(Error::InvalidSpec(format!(
                "augment_counts has {} entries for {} classes",
                counts.len(),
                corpus.num_classes
            )));
        }
        return Ok(counts.clone());
    }
    let (table, reference): (&[(&str, usize)], usize) = if corpus.num_classes == 6 {
        (&IEMOCAP_AUGMENT_COUNTS, IEMOCAP_UTTERANCES)
    } else {
        (&MELD_AUGMENT_COUNTS, MELD_UTTERANCES)
    };
    let base = counts_for_classes(table, &corpus.class_names);
    Ok(scale_counts(&base, corpus.num_utterances() as f64 / reference as f64))
}

/// Inserts each synthetic utterance into a random dialogue at a random
/// position, spoken by one of that dialogue's speakers.
pub fn insert_synthetic(train: &Corpus, synthetic: Vec<Utterance>, seed: u64) -> Corpus {
    let mut dialogues = train.dialogues.clone();
    if dialogues.is_empty() {
        return train.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, mut u) in synthetic.into_iter().enumerate() {
        let d = &mut dialogues[rng.random_range(0..train.dialogues.len())];
        let speakers: Vec<_> = d.speakers().into_iter().collect();
        u.speaker = speakers[rng.random_range(0..speakers.len())];
        u.id = SYNTHETIC_ID_BASE + k as u64;
        let at = rng.random_range(0..=d.utterances.len());
        d.utterances.insert(at, u);
    }
    train.with_dialogues(dialogues)
}

pub fn minority_classes(corpus: &Corpus, threshold: f64) -> Vec<usize> {
    let hist = class_histogram(corpus);
    (0..corpus.num_classes)
        .filter(|&c| hist.proportions[c] <= threshold)
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    cfg.hyper.validate().stage("config")?;
    let seed = cfg.seed;
    let corpus = cfg.corpus.load().stage("corpus")?;
    let parts = split(&corpus, &cfg.split).stage("corpus")?;
    let minority = minority_classes(&corpus, cfg.minority_threshold);

    let mut counts = vec![0; corpus.num_classes];
    let train = if cfg.toggles.augmentation {
        counts = synthetic_counts(cfg, &corpus).stage("augment")?;
        log::info!("generating {counts:?} synthetic utterances");
        let gan = train_gan(&parts.train, &cfg.gan, seed_for(seed, &[1])).stage("augment")?;
        let samples = generate_samples(&gan, &counts, seed_for(seed, &[2])).stage("augment")?;
        insert_synthetic(&parts.train, samples, seed_for(seed, &[3]))
    } else {
        parts.train.clone()
    };

    let fusion = if cfg.toggles.feature_fusion {
        Some(train_fusion(&train, &cfg.fusion, seed_for(seed, &[4])).stage("fusion")?)
    } else {
        None
    };
    let mut model = JointModel::new(
        fusion,
        cfg.context.input_mode,
        cfg.context.hidden,
        &cfg.gnn,
        cfg.head_hidden,
        corpus.num_classes,
        corpus.dims.total(),
        seed_for(seed, &[5]),
    );
    let opts = TrainOptions {
        hyper: cfg.hyper.clone(),
        gamma: cfg.effective_gamma(),
        mask_rate: cfg.effective_mask_rate(),
        fine_tune_fusion: cfg.fine_tune_fusion,
    };
    let loss_curve = train_joint(&mut model, &train, &parts.val, &opts, seed_for(seed, &[6]))
        .stage("train")?;

    let test = model.evaluate(&parts.test).stage("evaluate")?;
    let (predictions, ensemble) = if cfg.toggles.adaboost {
        let fit = model.evaluate(&train).stage("classify")?;
        let ens = boost_fit(
            &fit.embeddings,
            &fit.labels,
            corpus.num_classes,
            cfg.hyper.boost_rounds,
            cfg.hyper.tree_depth,
            |_| {},
        )
        .stage("classify")?;
        (ens.predict(&test.embeddings).stage("classify")?.0, Some(ens))
    } else {
        (test.predictions.clone(), None)
    };

    log::info!("seed {seed}: trained {} epochs", loss_curve.len());
    let mut report = compute_metrics(&test.labels, &predictions, corpus.num_classes)
        .stage("evaluate")?
        .with_class_names(&corpus.class_names)
        .with_minority(minority);
    report.metadata = RunMetadata {
        config_hash: cfg.hash(),
        seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let embeddings = test
        .ids
        .iter()
        .zip(&test.labels)
        .zip(&predictions)
        .zip(test.embeddings.rows())
        .map(|(((&id, &label), &predicted), row)| EmbeddingRecord {
            id,
            label,
            predicted,
            embedding: row.to_vec(),
        })
        .collect();
    let out = RunOutput {
        config: cfg.clone(),
        report,
        loss_curve,
        embeddings,
        synthetic_counts: counts,
        model,
        ensemble,
    };
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, &out).stage("artifacts")?;
    }
    Ok(out)
}

pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(METRICS_FILE), &serde_json::to_vec_pretty(&out.report)?)?;
    write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&out.config)?)?;
    write_atomic(&dir.join("confusion.csv"), out.report.confusion_csv().as_bytes())?;
    let names: Vec<String> = out.report.per_class.iter().map(|m| m.name.clone()).collect();
    let svg = plot::heatmap_svg("Confusion matrix", &out.report.confusion, &names);
    write_atomic(&dir.join("confusion.svg"), svg.as_bytes())?;
    let mut lines = String::new();
    for rec in &out.embeddings {
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(EMBEDDINGS_FILE), lines.as_bytes())?;
    let mut curve = String::from("epoch,loss,recon,focal,val_waf1\n");
    for e in &out.loss_curve {
        curve.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.loss, e.recon, e.focal, e.val_waf1
        ));
    }
    write_atomic(&dir.join("loss_curve.csv"), curve.as_bytes())?;
    Ok(())
}
