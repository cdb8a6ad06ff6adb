mod common;

use std::collections::BTreeSet;
use std::io::Write;

use cberl::corpus::{
    apportion, class_histogram, load_corpus, load_corpus_with, split, synthesize_corpus,
    write_corpus, Dims, ImbalanceSpec, Manifest, SplitPolicy,
};
use cberl::Error;
use proptest::prelude::*;

fn manifest(num_classes: usize) -> Manifest {
    Manifest {
        num_classes,
        class_names: (0..num_classes).map(|c| format!("c{c}")).collect(),
        d_w: 3,
        d_a: 2,
        d_v: 2,
    }
}

fn line(dialogue: u64, utterance: u64, label: usize, text_dim: usize) -> String {
    serde_json::json!({
        "dialogue": dialogue,
        "utterance": utterance,
        "speaker": utterance % 2,
        "label": label,
        "text": vec![0.5; text_dim],
        "audio": [1.0, 2.0],
        "visual": [3.0, 4.0],
    })
    .to_string()
}

fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn loads_two_dialogues() {
    let f = write_lines(&[line(0, 0, 6, 3), line(0, 1, 2, 3), line(1, 2, 0, 3)]);
    let corpus = load_corpus_with(f.path(), &manifest(7)).unwrap();
    assert_eq!(corpus.dialogues.len(), 2);
    assert_eq!(corpus.dialogues[0].utterances.len(), 2);
    assert_eq!(corpus.dims, Dims { text: 3, audio: 2, visual: 2 });
}

#[test]
fn short_text_vector_is_rejected() {
    let f = write_lines(&[line(0, 0, 1, 2)]);
    assert!(matches!(
        load_corpus_with(f.path(), &manifest(7)),
        Err(Error::DimensionMismatch { expected: 3, found: 2 })
    ));
}

#[test]
fn out_of_range_label_is_rejected() {
    let f = write_lines(&[line(0, 0, 9, 3)]);
    assert!(matches!(
        load_corpus_with(f.path(), &manifest(7)),
        Err(Error::UnknownLabel { label: 9, num_classes: 7 })
    ));
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn writer_output_round_trips() {
    let corpus = synthesize_corpus(&ImbalanceSpec::meld_like(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
}

#[test]
fn meld_preset_shape() {
    let corpus = synthesize_corpus(&ImbalanceSpec::meld_like(0)).unwrap();
    let hist = class_histogram(&corpus);
    assert_eq!(corpus.num_classes, 7);
    assert!((1300..=1700).contains(&hist.total), "{} utterances", hist.total);
    let rare = hist.proportions.iter().filter(|&&p| p <= 0.03).count();
    assert_eq!(rare, 2, "{:?}", hist.proportions);
}

#[test]
fn zero_separation_is_unlearnable() {
    // Oracle: with identical class distributions, the best a probe can do is
    // predict the majority class.
    let mut spec = ImbalanceSpec::separable_pair(11);
    spec.class_proportions = vec![0.7, 0.3];
    spec.class_separation = 0.0;
    spec.num_dialogues = 120;
    let corpus = synthesize_corpus(&spec).unwrap();
    let parts = split(&corpus, &SplitPolicy::default()).unwrap();
    let (ytr, yte) = (parts.train.labels(), parts.test.labels());
    let acc = common::probe_accuracy(
        &parts.train.feature_matrix(),
        &ytr,
        &parts.test.feature_matrix(),
        &yte,
        2,
    );
    let majority = yte.iter().filter(|&&y| y == 0).count() as f64 / yte.len() as f64;
    assert!((acc - majority).abs() < 0.08, "probe {acc:.3} vs majority {majority:.3}");
}

fn small_spec(seed: u64, dialogues: usize, classes: usize) -> ImbalanceSpec {
    let p = 1.0 / classes as f64;
    ImbalanceSpec {
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        class_proportions: vec![p; classes],
        num_dialogues: dialogues,
        utterances_per_dialogue: (1, 6),
        speakers_per_dialogue: (1, 3),
        class_separation: 1.0,
        noise_scale: 1.0,
        dims: Dims { text: 2, audio: 2, visual: 2 },
        long_tail: false,
        sessions: 3,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_dialogues(
        seed in 0u64..1000,
        dialogues in 3usize..40,
        test_fraction in 0.05f64..0.5,
        val_fraction in 0.0f64..0.4,
        by_session in any::<bool>(),
    ) {
        let corpus = synthesize_corpus(&small_spec(seed, dialogues, 3)).unwrap();
        let policy = if by_session {
            SplitPolicy::Session { val_fraction, seed }
        } else {
            SplitPolicy::Ratio { test_fraction, val_fraction, seed }
        };
        let parts = split(&corpus, &policy).unwrap();
        let ids = |c: &cberl::corpus::Corpus| c.dialogues.iter().map(|d| d.id).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&parts.train), ids(&parts.val), ids(&parts.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let all: BTreeSet<u64> = tr.union(&va).chain(te.iter()).copied().collect();
        prop_assert_eq!(all, ids(&corpus));
        prop_assert!(!parts.train.dialogues.is_empty());
        prop_assert!(!parts.test.dialogues.is_empty());
    }

    #[test]
    fn apportion_is_within_one(
        raw in prop::collection::vec(0.0f64..1.0, 1..9),
        total in 0usize..5000,
    ) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-6);
        let props: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let counts = apportion(&props, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(&props) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn synthesis_is_deterministic(seed in 0u64..10_000) {
        let spec = small_spec(seed, 5, 2);
        prop_assert_eq!(synthesize_corpus(&spec).unwrap(), synthesize_corpus(&spec).unwrap());
    }
}
