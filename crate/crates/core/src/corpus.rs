//! Multimodal conversation corpora: data model, JSON-lines storage, a seeded
//! long-tail generator and dialogue-level splitting.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub modality: Modality,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(modality: Modality, values: Vec<f64>) -> Self {
        Self { modality, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerId(pub u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: u64,
    pub speaker: SpeakerId,
    pub text: FeatureVector,
    pub audio: FeatureVector,
    pub visual: FeatureVector,
    pub label: usize,
    /// Produced by the augmenter rather than observed.
    #[serde(default)]
    pub synthetic: bool,
}

impl Utterance {
    /// `[text, audio, visual]` concatenated.
    pub fn concat_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.text.dim() + self.audio.dim() + self.visual.dim());
        out.extend_from_slice(&self.text.values);
        out.extend_from_slice(&self.audio.values);
        out.extend_from_slice(&self.visual.values);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: u64,
    /// Recording session, used by session-based splits.
    pub session: Option<u32>,
    /// Temporal order.
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn speakers(&self) -> BTreeSet<SpeakerId> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Per-modality feature widths `(d_w, d_a, d_v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl Dims {
    /// Widths used by the extracted features in the original setting.
    pub const FULL: Dims = Dims {
        text: 100,
        audio: 100,
        visual: 512,
    };
    /// Small widths for fast runs.
    pub const DESK: Dims = Dims {
        text: 16,
        audio: 16,
        visual: 32,
    };

    pub fn total(&self) -> usize {
        self.text + self.audio + self.visual
    }

    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::DESK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub dims: Dims,
}

impl Corpus {
    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.dialogues.iter().flat_map(|d| d.utterances.iter())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances().map(|u| u.label).collect()
    }

    /// One row per utterance, columns `[text, audio, visual]`.
    pub fn feature_matrix(&self) -> Matrix {
        let n = self.num_utterances();
        let d = self.dims.total();
        let flat: Vec<f64> = self.utterances().flat_map(|u| u.concat_features()).collect();
        Matrix::from_shape_vec((n, d), flat).expect("uniform dims")
    }

    /// Same metadata, different dialogues.
    pub fn with_dialogues(&self, dialogues: Vec<Dialogue>) -> Corpus {
        Corpus {
            dialogues,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            dims: self.dims,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            d_w: self.dims.text,
            d_a: self.dims.audio,
            d_v: self.dims.visual,
        }
    }

    /// Checks labels, dimensions, finiteness and non-empty dialogues.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::InvalidSpec(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        for d in &self.dialogues {
            if d.is_empty() {
                return Err(Error::InvalidSpec(format!("dialogue {} is empty", d.id)));
            }
            for u in &d.utterances {
                check_utterance(u, &self.dims, self.num_classes)?;
            }
        }
        Ok(())
    }
}

fn check_utterance(u: &Utterance, dims: &Dims, num_classes: usize) -> Result<()> {
    for fv in [&u.text, &u.audio, &u.visual] {
        let expected = dims.of(fv.modality);
        if fv.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: fv.dim(),
            });
        }
        if fv.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "utterance {} has non-finite {:?} features",
                u.id, fv.modality
            )));
        }
    }
    if u.label >= num_classes {
        return Err(Error::UnknownLabel {
            label: u.label,
            num_classes,
        });
    }
    Ok(())
}

/// Header describing a corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub d_w: usize,
    pub d_a: usize,
    pub d_v: usize,
}

impl Manifest {
    pub fn dims(&self) -> Dims {
        Dims {
            text: self.d_w,
            audio: self.d_a,
            visual: self.d_v,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    dialogue: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    session: Option<u32>,
    utterance: u64,
    speaker: u32,
    label: usize,
    #[serde(default)]
    synthetic: bool,
    text: Vec<f64>,
    audio: Vec<f64>,
    visual: Vec<f64>,
}

/// Writes `manifest.json` and `utterances.jsonl` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    crate::io::write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&corpus.manifest())?.as_bytes(),
    )?;
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        for d in &corpus.dialogues {
            for u in &d.utterances {
                let rec = Record {
                    dialogue: d.id,
                    session: d.session,
                    utterance: u.id,
                    speaker: u.speaker.0,
                    label: u.label,
                    synthetic: u.synthetic,
                    text: u.text.values.clone(),
                    audio: u.audio.values.clone(),
                    visual: u.visual.values.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    crate::io::write_atomic(&dir.join(UTTERANCES_FILE), &buf)
}

/// Reads a corpus directory written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = serde_json::from_reader(File::open(&manifest_path)?)?;
    load_corpus_with(&dir.join(UTTERANCES_FILE), &manifest)
}

/// Reads a JSON-lines utterance file against an explicit manifest.
pub fn load_corpus_with(path: &Path, manifest: &Manifest) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::InvalidSpec(
            "manifest class_names length differs from num_classes".into(),
        ));
    }
    let dims = manifest.dims();
    let mut dialogues: Vec<Dialogue> = Vec::new();
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let utt = Utterance {
            id: rec.utterance,
            speaker: SpeakerId(rec.speaker),
            text: FeatureVector::new(Modality::Text, rec.text),
            audio: FeatureVector::new(Modality::Audio, rec.audio),
            visual: FeatureVector::new(Modality::Visual, rec.visual),
            label: rec.label,
            synthetic: rec.synthetic,
        };
        check_utterance(&utt, &dims, manifest.num_classes)?;
        match dialogues.last_mut() {
            Some(d) if d.id == rec.dialogue => d.utterances.push(utt),
            _ => dialogues.push(Dialogue {
                id: rec.dialogue,
                session: rec.session,
                utterances: vec![utt],
            }),
        }
    }
    let corpus = Corpus {
        dialogues,
        num_classes: manifest.num_classes,
        class_names: manifest.class_names.clone(),
        dims,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Recipe for a seeded synthetic corpus with a controlled label distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub class_names: Vec<String>,
    pub class_proportions: Vec<f64>,
    pub num_dialogues: usize,
    /// Inclusive range.
    pub utterances_per_dialogue: (usize, usize),
    /// Inclusive range.
    pub speakers_per_dialogue: (usize, usize),
    /// Approximate pairwise distance between class means within a modality.
    pub class_separation: f64,
    pub noise_scale: f64,
    #[serde(default)]
    pub dims: Dims,
    /// Requires at least one class at or below 5% prevalence.
    #[serde(default)]
    pub long_tail: bool,
    /// Dialogues are assigned round-robin to sessions `1..=sessions`.
    #[serde(default = "default_sessions")]
    pub sessions: u32,
    pub seed: u64,
}

fn default_sessions() -> u32 {
    5
}

/// Approximate MELD label shares, with fear at 1.91% and disgust at 2.61%.
pub const MELD_CLASSES: [(&str, f64); 7] = [
    ("neutral", 0.4814),
    ("joy", 0.1744),
    ("surprise", 0.1200),
    ("anger", 0.1110),
    ("sadness", 0.0680),
    ("disgust", 0.0261),
    ("fear", 0.0191),
];

/// Approximate IEMOCAP label shares.
pub const IEMOCAP_CLASSES: [(&str, f64); 6] = [
    ("happy", 0.0970),
    ("sad", 0.1650),
    ("neutral", 0.2310),
    ("angry", 0.1430),
    ("excited", 0.1370),
    ("frustrated", 0.2270),
];

impl ImbalanceSpec {
    /// Seven-class long-tail corpus shaped like MELD, about 1500 utterances.
    pub fn meld_like(seed: u64) -> Self {
        Self {
            class_names: MELD_CLASSES.iter().map(|(n, _)| n.to_string()).collect(),
            class_proportions: MELD_CLASSES.iter().map(|(_, p)| *p).collect(),
            num_dialogues: 125,
            utterances_per_dialogue: (8, 16),
            speakers_per_dialogue: (2, 3),
            class_separation: 3.0,
            noise_scale: 1.0,
            dims: Dims::DESK,
            long_tail: true,
            sessions: 5,
            seed,
        }
    }

    pub fn iemocap_like(seed: u64) -> Self {
        Self {
            class_names: IEMOCAP_CLASSES.iter().map(|(n, _)| n.to_string()).collect(),
            class_proportions: IEMOCAP_CLASSES.iter().map(|(_, p)| *p).collect(),
            num_dialogues: 60,
            utterances_per_dialogue: (15, 35),
            speakers_per_dialogue: (2, 2),
            class_separation: 3.0,
            noise_scale: 1.0,
            dims: Dims::DESK,
            long_tail: false,
            sessions: 5,
            seed,
        }
    }

    /// Two well-separated classes, used by small checks.
    pub fn separable_pair(seed: u64) -> Self {
        Self {
            class_names: vec!["a".into(), "b".into()],
            class_proportions: vec![0.5, 0.5],
            num_dialogues: 40,
            utterances_per_dialogue: (6, 10),
            speakers_per_dialogue: (2, 2),
            class_separation: 6.0,
            noise_scale: 1.0,
            dims: Dims::DESK,
            long_tail: false,
            sessions: 5,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.class_proportions.is_empty() {
            return bad("no classes".into());
        }
        if self.class_names.len() != self.class_proportions.len() {
            return bad("class_names and class_proportions differ in length".into());
        }
        if self.class_proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("proportions must be finite and nonnegative".into());
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("proportions sum to {sum}"));
        }
        if self.long_tail && !self.class_proportions.iter().any(|&p| p <= 0.05) {
            return bad("long-tail mode needs a class at or below 5%".into());
        }
        let (umin, umax) = self.utterances_per_dialogue;
        let (smin, smax) = self.speakers_per_dialogue;
        if self.num_dialogues == 0 || umin == 0 || umin > umax || smin == 0 || smin > smax {
            return bad("dialogue, utterance and speaker ranges must be nonempty".into());
        }
        if !(self.class_separation >= 0.0) || !(self.noise_scale > 0.0) {
            return bad("class_separation must be >= 0 and noise_scale > 0".into());
        }
        if self.dims.text == 0 || self.dims.audio == 0 || self.dims.visual == 0 {
            return bad("feature dims must be positive".into());
        }
        if self.sessions == 0 {
            return bad("sessions must be positive".into());
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `proportions * total`; each count is within
/// one of its exact share and the counts sum to `total`.
pub fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Class-conditional Gaussian features: each modality draws its own random
/// mean direction per class, scaled so that class means sit roughly
/// `class_separation` apart.
pub fn synthesize_corpus(spec: &ImbalanceSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes();
    let dims = spec.dims;
    let radius = spec.class_separation / std::f64::consts::SQRT_2;

    let means: Vec<[Vec<f64>; 3]> = (0..c)
        .map(|_| {
            [dims.text, dims.audio, dims.visual].map(|d| random_direction(d, &mut rng, radius))
        })
        .collect();

    let (umin, umax) = spec.utterances_per_dialogue;
    let lengths: Vec<usize> = (0..spec.num_dialogues)
        .map(|_| rng.random_range(umin..=umax))
        .collect();
    let total: usize = lengths.iter().sum();
    let counts = apportion(&spec.class_proportions, total);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    labels.shuffle(&mut rng);

    let mut next_label = labels.into_iter();
    let mut next_id = 0u64;
    let (smin, smax) = spec.speakers_per_dialogue;
    let mut dialogues = Vec::with_capacity(spec.num_dialogues);
    for (d, &len) in lengths.iter().enumerate() {
        let n_speakers = rng.random_range(smin..=smax) as u32;
        let mut utterances = Vec::with_capacity(len);
        for t in 0..len {
            let speaker = if t < n_speakers as usize {
                SpeakerId(t as u32)
            } else {
                SpeakerId(rng.random_range(0..n_speakers))
            };
            let label = next_label.next().expect("label count matches total");
            let [mt, ma, mv] = &means[label];
            let mut draw = |mean: &[f64]| -> Vec<f64> {
                mean.iter()
                    .map(|m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let text = draw(mt);
            let audio = draw(ma);
            let visual = draw(mv);
            utterances.push(Utterance {
                id: next_id,
                speaker,
                text: FeatureVector::new(Modality::Text, text),
                audio: FeatureVector::new(Modality::Audio, audio),
                visual: FeatureVector::new(Modality::Visual, visual),
                label,
                synthetic: false,
            });
            next_id += 1;
        }
        dialogues.push(Dialogue {
            id: d as u64,
            session: Some(1 + (d as u32 * spec.sessions) / spec.num_dialogues as u32),
            utterances,
        });
    }
    Ok(Corpus {
        dialogues,
        num_classes: c,
        class_names: spec.class_names.clone(),
        dims,
    })
}

fn random_direction(d: usize, rng: &mut ChaCha8Rng, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * radius / norm).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    pub total: usize,
}

pub fn class_histogram(corpus: &Corpus) -> ClassHistogram {
    let mut counts = vec![0usize; corpus.num_classes];
    for u in corpus.utterances() {
        counts[u.label] += 1;
    }
    let total: usize = counts.iter().sum();
    let proportions = counts
        .iter()
        .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
        .collect();
    ClassHistogram {
        class_names: corpus.class_names.clone(),
        counts,
        proportions,
        total,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Hold out `test_fraction` of dialogues, then `val_fraction` of the rest.
    Ratio {
        test_fraction: f64,
        val_fraction: f64,
        seed: u64,
    },
    /// The highest session number is the test set.
    Session { val_fraction: f64, seed: u64 },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Ratio {
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitPolicy {
    pub fn with_seed(&self, seed: u64) -> Self {
        match self.clone() {
            SplitPolicy::Ratio {
                test_fraction,
                val_fraction,
                ..
            } => SplitPolicy::Ratio {
                test_fraction,
                val_fraction,
                seed,
            },
            SplitPolicy::Session { val_fraction, .. } => SplitPolicy::Session { val_fraction, seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Partitions whole dialogues into train / val / test.
pub fn split(corpus: &Corpus, policy: &SplitPolicy) -> Result<Split> {
    let n = corpus.dialogues.len();
    if n < 2 {
        return Err(Error::TooFewDialogues {
            required: 2,
            found: n,
        });
    }
    let (pool, test, val_fraction, seed) = match policy {
        SplitPolicy::Ratio {
            test_fraction,
            val_fraction,
            seed,
        } => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let test = idx[..n_test].to_vec();
            let pool = idx[n_test..].to_vec();
            (pool, test, *val_fraction, *seed)
        }
        SplitPolicy::Session { val_fraction, seed } => {
            let sessions: Option<Vec<u32>> = corpus.dialogues.iter().map(|d| d.session).collect();
            let sessions = sessions
                .ok_or_else(|| Error::InvalidSpec("session split needs session tags".into()))?;
            let last = *sessions.iter().max().expect("n >= 2");
            let (test, pool): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| sessions[i] == last);
            if pool.is_empty() {
                return Err(Error::TooFewDialogues {
                    required: 2,
                    found: 1,
                });
            }
            (pool, test, *val_fraction, *seed)
        }
    };
    let mut pool = pool;
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let n_val = ((val_fraction * pool.len() as f64).round() as usize).min(pool.len() - 1);
    let val = pool[..n_val].to_vec();
    let train = pool[n_val..].to_vec();
    let take = |mut ids: Vec<usize>| {
        ids.sort_unstable();
        corpus.with_dialogues(ids.into_iter().map(|i| corpus.dialogues[i].clone()).collect())
    };
    Ok(Split {
        train: take(train),
        val: take(val),
        test: take(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(p: f64, dialogues: usize, len: usize) -> ImbalanceSpec {
        ImbalanceSpec {
            class_names: vec!["major".into(), "minor".into()],
            class_proportions: vec![1.0 - p, p],
            num_dialogues: dialogues,
            utterances_per_dialogue: (len, len),
            speakers_per_dialogue: (2, 2),
            class_separation: 2.0,
            noise_scale: 1.0,
            dims: Dims::DESK,
            long_tail: false,
            sessions: 5,
            seed: 3,
        }
    }

    #[test]
    fn proportions_round_exactly() {
        let corpus = synthesize_corpus(&two_class(0.1, 10, 10)).unwrap();
        assert_eq!(class_histogram(&corpus).counts, vec![90, 10]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = ImbalanceSpec::meld_like(11);
        assert_eq!(synthesize_corpus(&spec).unwrap(), synthesize_corpus(&spec).unwrap());
    }

    #[test]
    fn meld_preset_matches_fear_share() {
        let mut spec = ImbalanceSpec::meld_like(5);
        spec.num_dialogues = 1000;
        let h = class_histogram(&synthesize_corpus(&spec).unwrap());
        let fear = spec.class_names.iter().position(|n| n == "fear").unwrap();
        let slack = 1.0 / h.total as f64;
        assert!((h.proportions[fear] - 0.0191).abs() <= slack);
        assert!((h.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_edge_cases() {
        let mut corpus = synthesize_corpus(&two_class(0.0, 1, 10)).unwrap();
        let h = class_histogram(&corpus);
        assert_eq!(h.counts, vec![10, 0]);
        assert_eq!(h.proportions, vec![1.0, 0.0]);
        corpus.dialogues.clear();
        let h = class_histogram(&corpus);
        assert_eq!(h.total, 0);
    }

    #[test]
    fn spec_validation() {
        let mut s = two_class(0.1, 2, 2);
        s.class_proportions = vec![0.5, 0.6];
        assert!(matches!(synthesize_corpus(&s), Err(Error::InvalidSpec(_))));
        let mut s = two_class(0.5, 2, 2);
        s.long_tail = true;
        assert!(matches!(synthesize_corpus(&s), Err(Error::InvalidSpec(_))));
        let mut s = two_class(0.1, 2, 2);
        s.noise_scale = 0.0;
        assert!(synthesize_corpus(&s).is_err());
    }

    #[test]
    fn ratio_split_sizes() {
        let corpus = synthesize_corpus(&two_class(0.2, 10, 4)).unwrap();
        let s = split(&corpus, &SplitPolicy::default()).unwrap();
        assert_eq!(s.test.dialogues.len(), 2);
        assert_eq!(s.val.dialogues.len(), 1);
        assert_eq!(s.train.dialogues.len(), 7);
    }

    #[test]
    fn session_split_holds_out_last_session() {
        let corpus = synthesize_corpus(&two_class(0.2, 10, 4)).unwrap();
        let s = split(
            &corpus,
            &SplitPolicy::Session {
                val_fraction: 0.1,
                seed: 0,
            },
        )
        .unwrap();
        assert!(s.test.dialogues.iter().all(|d| d.session == Some(5)));
        assert!(s
            .train
            .dialogues
            .iter()
            .chain(&s.val.dialogues)
            .all(|d| (1..=4).contains(&d.session.unwrap())));
        let sessions: BTreeSet<u32> = corpus.dialogues.iter().filter_map(|d| d.session).collect();
        assert_eq!(sessions, (1..=5).collect());
    }

    #[test]
    fn single_dialogue_cannot_split() {
        let corpus = synthesize_corpus(&two_class(0.2, 1, 4)).unwrap();
        assert!(matches!(
            split(&corpus, &SplitPolicy::default()),
            Err(Error::TooFewDialogues { .. })
        ));
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 7).iter().sum::<usize>(), 7);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    }
}
