//! Training objective and the boosted classifier.
//!
//! The neural stages train on `xi_recon * L_recon + xi_focal * L_focal`, where
//! the focal term is `-(1/N) Σ (1 - p_y)^γ ln p_y` plus a weight penalty.
//! After training, a SAMME ensemble of shallow decision trees is fitted on the
//! frozen node embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Matrix, Tape, Var};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `λ ‖θ‖₂`
    #[default]
    Norm,
    /// `λ ‖θ‖₂²`
    SquaredNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub weight_decay: f64,
    pub regularizer: Regularizer,
    pub xi_recon: f64,
    pub xi_focal: f64,
    pub lr: f64,
    pub dropout: f64,
    /// Dialogues per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub mask_rate: f64,
    /// Epochs without validation WAF1 improvement before stopping.
    pub patience: usize,
    pub boost_rounds: usize,
    pub tree_depth: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            weight_decay: 1e-5,
            regularizer: Regularizer::Norm,
            xi_recon: 0.3,
            xi_focal: 0.7,
            lr: 3e-4,
            dropout: 0.5,
            batch_size: 32,
            max_epochs: 60,
            mask_rate: 0.3,
            patience: 10,
            boost_rounds: 50,
            tree_depth: 2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
            ("xi_recon", self.xi_recon),
            ("xi_focal", self.xi_focal),
            ("lr", self.lr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRate(self.dropout));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidRate(self.mask_rate));
        }
        if self.batch_size == 0 || self.boost_rounds == 0 || self.tree_depth == 0 {
            return Err(Error::InvalidSpec(
                "batch_size, boost_rounds and tree_depth must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_probabilities(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.nrows(),
            right: labels.len(),
        });
    }
    for (row, p) in probs.rows().into_iter().enumerate() {
        let sum: f64 = p.sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::NotAProbability { row, sum });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(Error::UnknownLabel {
            label,
            num_classes: probs.ncols(),
        });
    }
    Ok(())
}

/// Mean focal loss over the rows of `probs`. Add [`weight_penalty`] for the
/// full regularized objective.
pub fn focal_loss(probs: &Matrix, labels: &[usize], gamma: f64) -> Result<f64> {
    check_probabilities(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[[i, y]];
            let factor = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
            -factor * p.max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn weight_penalty<'a>(
    params: impl IntoIterator<Item = &'a Matrix>,
    lambda: f64,
    kind: Regularizer,
) -> f64 {
    let sq: f64 = params.into_iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum();
    match kind {
        Regularizer::Norm => lambda * sq.sqrt(),
        Regularizer::SquaredNorm => lambda * sq,
    }
}

/// Focal loss from unnormalized `logits: [n x C]`. With `gamma == 0` this is
/// exactly cross-entropy.
pub fn focal_loss_on_tape(tape: &Tape, logits: Var, labels: &[usize], gamma: f64) -> Var {
    let logp = tape.pick_cols(tape.log_softmax_rows(logits), labels);
    let weighted = if gamma == 0.0 {
        logp
    } else {
        let p = tape.exp(logp);
        let factor = tape.powf(tape.add_scalar(tape.neg(p), 1.0), gamma);
        tape.mul(factor, logp)
    };
    tape.neg(tape.mean(weighted))
}

pub fn weight_penalty_on_tape(tape: &Tape, params: &[Var], lambda: f64, kind: Regularizer) -> Var {
    let parts: Vec<Var> = params.iter().map(|&p| tape.sum(tape.square(p))).collect();
    let mut sq = parts[0];
    for &p in &parts[1..] {
        sq = tape.add(sq, p);
    }
    let base = match kind {
        Regularizer::Norm => tape.sqrt(sq),
        Regularizer::SquaredNorm => sq,
    };
    tape.scale(base, lambda)
}

pub fn combined_loss(l_recon: f64, l_focal: f64, xi_recon: f64, xi_focal: f64) -> f64 {
    xi_recon * l_recon + xi_focal * l_focal
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        class: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

/// Axis-aligned decision tree: `x[feature] <= threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: TreeNode,
}

impl DecisionTree {
    pub fn constant(class: usize) -> Self {
        Self {
            root: TreeNode::Leaf { class },
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|r| self.predict_row(r.as_slice().expect("standard layout")))
            .collect()
    }

    /// Fits by greedy weighted-Gini splits up to `depth`.
    pub fn fit(x: &Matrix, y: &[usize], w: &[f64], num_classes: usize, depth: usize) -> Self {
        let x = x.as_standard_layout();
        let rows: Vec<usize> = (0..y.len()).collect();
        Self {
            root: grow(&x.view(), y, w, num_classes, &rows, depth),
        }
    }
}

fn class_weights(y: &[usize], w: &[f64], rows: &[usize], c: usize) -> Vec<f64> {
    let mut cw = vec![0.0; c];
    for &i in rows {
        cw[y[i]] += w[i];
    }
    cw
}

fn majority(cw: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in cw.iter().enumerate() {
        if v > cw[best] {
            best = k;
        }
    }
    best
}

fn gini_mass(cw: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    total - cw.iter().map(|v| v * v).sum::<f64>() / total
}

fn grow(
    x: &ndarray::ArrayView2<f64>,
    y: &[usize],
    w: &[f64],
    c: usize,
    rows: &[usize],
    depth: usize,
) -> TreeNode {
    let cw = class_weights(y, w, rows, c);
    let leaf = TreeNode::Leaf { class: majority(&cw) };
    let total: f64 = cw.iter().sum();
    let parent = gini_mass(&cw, total);
    if depth == 0 || rows.len() < 2 || parent <= 1e-15 {
        return leaf;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut sorted = rows.to_vec();
    for f in 0..x.ncols() {
        sorted.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let mut left = vec![0.0; c];
        let mut left_total = 0.0;
        for k in 0..sorted.len() - 1 {
            let i = sorted[k];
            left[y[i]] += w[i];
            left_total += w[i];
            let (a, b) = (x[[i, f]], x[[sorted[k + 1], f]]);
            if a == b {
                continue;
            }
            let right: Vec<f64> = cw.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = gini_mass(&left, left_total) + gini_mass(&right, total - left_total);
            if best.is_none_or(|(s, _, _)| score < s - 1e-15) {
                best = Some((score, f, 0.5 * (a + b)));
            }
        }
    }
    match best {
        Some((score, feature, threshold)) if score < parent - 1e-15 => {
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| x[[i, feature]] <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(grow(x, y, w, c, &l, depth - 1)),
                right: Box::new(grow(x, y, w, c, &r, depth - 1)),
            }
        }
        _ => leaf,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostEnsemble {
    pub learners: Vec<DecisionTree>,
    pub alphas: Vec<f64>,
    /// Distribution over training samples after the last round.
    pub sample_weights: Vec<f64>,
    pub num_classes: usize,
}

/// Reported after every boosting round.
#[derive(Clone, Debug)]
pub struct RoundReport<'a> {
    pub round: usize,
    pub error: f64,
    pub alpha: f64,
    pub weights: &'a [f64],
}

const MIN_ERROR: f64 = 1e-10;

/// SAMME boosting. Stops early when a round is perfect or no better than
/// chance; the latter is an error only in the first round.
pub fn boost_fit(
    x: &Matrix,
    y: &[usize],
    num_classes: usize,
    rounds: usize,
    depth: usize,
    mut observer: impl FnMut(&RoundReport),
) -> Result<BoostEnsemble> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    if rounds == 0 {
        return Err(Error::InvalidSpec("boosting needs at least one round".into()));
    }
    if let Some(&label) = y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::UnknownLabel { label, num_classes });
    }
    let mut present = vec![false; num_classes];
    y.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidSpec("boosting needs two classes present".into()));
    }

    let n = y.len();
    let c = num_classes as f64;
    let mut w = vec![1.0 / n as f64; n];
    let mut ens = BoostEnsemble {
        learners: Vec::new(),
        alphas: Vec::new(),
        sample_weights: w.clone(),
        num_classes,
    };
    for round in 0..rounds {
        let tree = DecisionTree::fit(x, y, &w, num_classes, depth);
        let pred = tree.predict(x);
        let miss: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p != t).collect();
        let error: f64 = w.iter().zip(&miss).filter(|(_, &m)| m).map(|(wi, _)| wi).sum();
        if error >= 1.0 - 1.0 / c {
            if round == 0 {
                return Err(Error::DegenerateRound(error));
            }
            break;
        }
        let e = error.max(MIN_ERROR);
        let alpha = ((1.0 - e) / e).ln() + (c - 1.0).ln();
        ens.learners.push(tree);
        ens.alphas.push(alpha);
        if error > 0.0 {
            for (wi, &m) in w.iter_mut().zip(&miss) {
                if m {
                    *wi *= alpha.exp();
                }
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|wi| *wi /= s);
        }
        observer(&RoundReport {
            round,
            error,
            alpha,
            weights: &w,
        });
        if error == 0.0 {
            break;
        }
    }
    ens.sample_weights = w;
    Ok(ens)
}

impl BoostEnsemble {
    /// Weighted votes per class, `[n x C]`.
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        if self.learners.is_empty() {
            return Err(Error::UnfittedEnsemble);
        }
        let mut votes = Matrix::zeros((x.nrows(), self.num_classes));
        let x = x.as_standard_layout();
        for (tree, &alpha) in self.learners.iter().zip(&self.alphas) {
            for (i, row) in x.rows().into_iter().enumerate() {
                votes[[i, tree.predict_row(row.as_slice().expect("standard layout"))]] += alpha;
            }
        }
        Ok(votes)
    }

    /// Arg-max of the weighted votes; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<(Vec<usize>, Matrix)> {
        let votes = self.scores(x)?;
        let classes = votes
            .rows()
            .into_iter()
            .map(|r| majority(r.as_slice().expect("standard layout")))
            .collect();
        Ok((classes, votes))
    }
}
