use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{
    run_experiment, EmbeddingRecord, ExperimentConfig, LossKind, Toggles, EMBEDDINGS_FILE,
    METRICS_FILE,
};
use crate::harness::metrics::MetricsReport;
use crate::harness::plot;
use crate::io::write_atomic;

/// `(feature_fusion, gamma_factor, graph_mask, adaboost)` in the order the
/// ablation table lists them.
pub const ABLATION_ORDER: [[bool; 4]; 16] = [
    [true, false, false, false],
    [false, true, false, false],
    [false, false, true, false],
    [false, false, false, true],
    [true, true, false, false],
    [true, false, true, false],
    [true, false, false, true],
    [false, true, true, false],
    [false, true, false, true],
    [false, false, true, true],
    [true, true, true, false],
    [true, false, true, true],
    [true, true, false, true],
    [false, true, true, true],
    [false, false, false, false],
    [true, true, true, true],
];

pub const DEFAULT_GAMMAS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

fn sub_dir(base: &ExperimentConfig, name: &str) -> Option<PathBuf> {
    base.output_dir.as_ref().map(|d| d.join(name))
}

fn run_all(configs: Vec<ExperimentConfig>) -> Result<Vec<MetricsReport>> {
    configs
        .into_par_iter()
        .map(|c| run_experiment(&c).map(|o| o.report))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: MetricsReport,
}

/// All sixteen combinations of the four model toggles. Augmentation stays as
/// set in `base`.
pub fn ablation_grid(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let configs: Vec<ExperimentConfig> = ABLATION_ORDER
        .iter()
        .enumerate()
        .map(|(i, &[fusion, gamma, mask, ada])| {
            let mut c = base.clone();
            c.toggles = Toggles {
                augmentation: base.toggles.augmentation,
                feature_fusion: fusion,
                gamma_factor: gamma,
                graph_mask: mask,
                adaboost: ada,
            };
            c.output_dir = sub_dir(base, &format!("ablation_{i:02}"));
            c
        })
        .collect();
    let toggles: Vec<Toggles> = configs.iter().map(|c| c.toggles).collect();
    let rows: Vec<AblationRow> = toggles
        .into_iter()
        .zip(run_all(configs)?)
        .map(|(toggles, report)| AblationRow { toggles, report })
        .collect();
    if let Some(dir) = &base.output_dir {
        write_atomic(&dir.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "+" } else { "-" };
    let mut s = String::from("feature_fusion,gamma,graph_mask,adaboost,waa,waf1,minority_f1\n");
    for r in rows {
        let t = r.toggles;
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            mark(t.feature_fusion),
            mark(t.gamma_factor),
            mark(t.graph_mask),
            mark(t.adaboost),
            r.report.waa,
            r.report.waf1,
            r.report.minority_f1
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub report: MetricsReport,
}

/// One run per focal exponent, everything else fixed.
pub fn gamma_sweep(base: &ExperimentConfig, values: &[f64]) -> Result<Vec<GammaRow>> {
    if values.is_empty() {
        return Err(Error::InvalidSpec("gamma sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.hyper.gamma = g;
            c.loss = LossKind::Focal;
            c.toggles.gamma_factor = true;
            c.output_dir = sub_dir(base, &format!("gamma_{g}"));
            c
        })
        .collect();
    let rows: Vec<GammaRow> = values
        .iter()
        .zip(run_all(configs)?)
        .map(|(&gamma, report)| GammaRow { gamma, report })
        .collect();
    if let Some(dir) = &base.output_dir {
        write_atomic(&dir.join("gamma_sweep.csv"), gamma_csv(&rows).as_bytes())?;
        write_atomic(&dir.join("gamma_sweep.svg"), gamma_svg(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn gamma_csv(rows: &[GammaRow]) -> String {
    let mut s = String::from("gamma,waa,waf1,minority_f1\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.gamma, r.report.waa, r.report.waf1, r.report.minority_f1
        ));
    }
    s
}

pub fn gamma_svg(rows: &[GammaRow]) -> String {
    let series = |name: &str, f: fn(&MetricsReport) -> f64| {
        (name.to_string(), rows.iter().map(|r| (r.gamma, f(&r.report))).collect())
    };
    plot::line_chart_svg(
        "Metrics by focal exponent",
        "gamma",
        &[
            series("WAA", |r| r.waa),
            series("WAF1", |r| r.waf1),
            series("minority F1", |r| r.minority_f1),
        ],
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub name: String,
    pub without: f64,
    pub with: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationStudy {
    pub without: MetricsReport,
    pub with: MetricsReport,
    pub synthetic_counts: Vec<usize>,
    /// F1 change for each minority class.
    pub minority_deltas: Vec<ClassDelta>,
}

/// Runs `base` with and without synthetic samples.
pub fn augmentation_study(base: &ExperimentConfig) -> Result<AugmentationStudy> {
    let arm = |on: bool| {
        let mut c = base.clone();
        c.toggles.augmentation = on;
        c.output_dir = sub_dir(base, if on { "aug" } else { "no_aug" });
        c
    };
    let (with, without) = rayon::join(|| run_experiment(&arm(true)), || run_experiment(&arm(false)));
    let (with, without) = (with?, without?);
    let minority_deltas = with
        .report
        .minority_classes
        .iter()
        .map(|&c| {
            let (w, wo) = (with.report.per_class[c].f1, without.report.per_class[c].f1);
            ClassDelta {
                class: c,
                name: with.report.per_class[c].name.clone(),
                without: wo,
                with: w,
                delta: w - wo,
            }
        })
        .collect();
    let study = AugmentationStudy {
        synthetic_counts: with.synthetic_counts,
        with: with.report,
        without: without.report,
        minority_deltas,
    };
    if let Some(dir) = &base.output_dir {
        write_atomic(&dir.join("augmentation.json"), &serde_json::to_vec_pretty(&study)?)?;
    }
    Ok(study)
}

pub fn read_embeddings(run_dir: &Path) -> Result<Vec<EmbeddingRecord>> {
    let path = run_dir.join(EMBEDDINGS_FILE);
    if !run_dir.join(METRICS_FILE).is_file() || !path.is_file() {
        return Err(Error::MissingRun(run_dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Copies a completed run's embedding dump to `out`; returns the record count.
pub fn export_embeddings(run_dir: &Path, out: &Path) -> Result<usize> {
    let records = read_embeddings(run_dir)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(out, lines.as_bytes())?;
    Ok(records.len())
}
