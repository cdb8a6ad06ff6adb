//! Relational dialogue graph with attention edge weights, random node masking
//! and a feature-reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SpeakerId;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SameSpeakerPast,
    SameSpeakerFuture,
    CrossSpeakerPast,
    CrossSpeakerFuture,
    SelfLoop,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::SameSpeakerPast,
        Relation::SameSpeakerFuture,
        Relation::CrossSpeakerPast,
        Relation::CrossSpeakerFuture,
        Relation::SelfLoop,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    fn between(same_speaker: bool, source: usize, target: usize) -> Self {
        use Relation::*;
        match (same_speaker, source.cmp(&target)) {
            (_, std::cmp::Ordering::Equal) => SelfLoop,
            (true, std::cmp::Ordering::Less) => SameSpeakerPast,
            (true, std::cmp::Ordering::Greater) => SameSpeakerFuture,
            (false, std::cmp::Ordering::Less) => CrossSpeakerPast,
            (false, std::cmp::Ordering::Greater) => CrossSpeakerFuture,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Window {
    pub past: usize,
    pub future: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self { past: 4, future: 4 }
    }
}

/// Directed edge: `target` aggregates a message from `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub source: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationGraph {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub window: Window,
}

pub fn build_graph(speakers: &[SpeakerId], window: Window) -> Result<ConversationGraph> {
    let n = speakers.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(window.past);
        let hi = (i + window.future).min(n - 1);
        for j in lo..=hi {
            edges.push(Edge {
                target: i,
                source: j,
                relation: Relation::between(speakers[i] == speakers[j], j, i),
            });
        }
    }
    Ok(ConversationGraph {
        num_nodes: n,
        edges,
        window,
    })
}

impl ConversationGraph {
    /// Places the graphs side by side, offsetting node ids in order.
    pub fn union(graphs: &[ConversationGraph]) -> ConversationGraph {
        let mut offset = 0;
        let mut edges = Vec::new();
        for g in graphs {
            edges.extend(g.edges.iter().map(|e| Edge {
                target: e.target + offset,
                source: e.source + offset,
                relation: e.relation,
            }));
            offset += g.num_nodes;
        }
        ConversationGraph {
            num_nodes: offset,
            edges,
            window: graphs.first().map(|g| g.window).unwrap_or_default(),
        }
    }

    /// Renames node `i` to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> ConversationGraph {
        ConversationGraph {
            num_nodes: self.num_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    target: perm[e.target],
                    source: perm[e.source],
                    relation: e.relation,
                })
                .collect(),
            window: self.window,
        }
    }

    pub fn count(&self, relation: Relation) -> usize {
        self.edges.iter().filter(|e| e.relation == relation).count()
    }

    /// Edges that survive `mask`: every self-loop plus edges from unmasked
    /// sources.
    pub fn active_edges(&self, mask: &MaskPlan) -> Vec<Edge> {
        self.edges
            .iter()
            .copied()
            .filter(|e| e.relation == Relation::SelfLoop || !mask.is_masked(e.source))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub rate: f64,
    pub seed: u64,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn none(num_nodes: usize) -> Self {
        Self {
            rate: 0.0,
            seed: 0,
            masked: vec![false; num_nodes],
        }
    }

    pub fn is_masked(&self, node: usize) -> bool {
        self.masked.get(node).copied().unwrap_or(false)
    }

    pub fn masked_nodes(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Masks `round(rate * n)` nodes chosen uniformly without replacement.
pub fn apply_mask(num_nodes: usize, rate: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    let k = (rate * num_nodes as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; num_nodes];
    for i in rand::seq::index::sample(&mut rng, num_nodes, k) {
        masked[i] = true;
    }
    Ok(MaskPlan { rate, seed, masked })
}

/// Attention scores and normalized weights for every edge of a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    pub scores: Vec<f64>,
    /// Zero for edges removed by the mask.
    pub weights: Vec<f64>,
    pub active: Vec<bool>,
    /// `c_{i,r}`: active edges in the edge's `(target, relation)` group.
    pub group_sizes: Vec<usize>,
    /// Groups present in the graph whose every source is masked.
    pub empty_groups: Vec<(usize, Relation)>,
}

fn group_of(e: &Edge) -> usize {
    e.target * Relation::COUNT + e.relation.index()
}

/// Softmax of `scores` within each `(target, relation)` group, restricted to
/// edges whose source is unmasked (self-loops always stay).
pub fn edge_weights(
    scores: &[f64],
    graph: &ConversationGraph,
    mask: &MaskPlan,
) -> Result<EdgeWeights> {
    if scores.len() != graph.edges.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: graph.edges.len(),
        });
    }
    let n_groups = graph.num_nodes * Relation::COUNT;
    let active: Vec<bool> = graph
        .edges
        .iter()
        .map(|e| e.relation == Relation::SelfLoop || !mask.is_masked(e.source))
        .collect();
    let mut present = vec![false; n_groups];
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    let mut sizes = vec![0usize; n_groups];
    for (e, (&s, &on)) in graph.edges.iter().zip(scores.iter().zip(&active)) {
        let g = group_of(e);
        present[g] = true;
        if on {
            max[g] = max[g].max(s);
            sizes[g] += 1;
        }
    }
    let mut denom = vec![0.0; n_groups];
    let mut weights = vec![0.0; scores.len()];
    for (k, e) in graph.edges.iter().enumerate() {
        if active[k] {
            let g = group_of(e);
            weights[k] = (scores[k] - max[g]).exp();
            denom[g] += weights[k];
        }
    }
    for (k, e) in graph.edges.iter().enumerate() {
        if active[k] {
            weights[k] /= denom[group_of(e)];
        }
    }
    let empty_groups = (0..n_groups)
        .filter(|&g| present[g] && sizes[g] == 0)
        .map(|g| (g / Relation::COUNT, Relation::ALL[g % Relation::COUNT]))
        .collect();
    Ok(EdgeWeights {
        scores: scores.to_vec(),
        weights,
        group_sizes: graph.edges.iter().map(|e| sizes[group_of(e)]).collect(),
        active,
        empty_groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub width: usize,
    pub attn_hidden: usize,
    pub layers: usize,
    pub recon_hidden: usize,
    pub window: Window,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            width: 32,
            attn_hidden: 16,
            layers: 2,
            recon_hidden: 32,
            window: Window::default(),
        }
    }
}

impl GnnConfig {
    /// Full-size widths: attention hidden 110, one shared width of 150 for
    /// the relation and self transforms.
    pub fn full_size() -> Self {
        Self {
            width: 150,
            attn_hidden: 110,
            recon_hidden: 150,
            ..Self::default()
        }
    }
}

/// One propagation layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnLayer {
    /// First attention layer over `[phi_i, phi_j, 1]`.
    pub attn_hidden: Linear,
    /// Scalar attention output.
    pub attn_out: Linear,
    /// One transform per non-self relation, indexed by [`Relation::index`].
    pub relations: Vec<Linear>,
    pub self_transform: Linear,
}

impl GnnLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let relations = Relation::ALL[..4]
            .iter()
            .map(|r| Linear::new(store, &format!("{name}.w_rel{}", r.index()), width, width, false, rng))
            .collect();
        Self {
            attn_hidden: Linear::new(store, &format!("{name}.attn1"), 2 * width + 1, hidden, true, rng),
            attn_out: Linear::new(store, &format!("{name}.attn2"), hidden, 1, true, rng),
            relations,
            self_transform: Linear::new(store, &format!("{name}.w_self"), width, width, false, rng),
        }
    }

    fn transform(&self, r: Relation) -> &Linear {
        match r {
            Relation::SelfLoop => &self.self_transform,
            other => &self.relations[other.index()],
        }
    }

    /// `[e x 1]` scores for `edges` from node states `phi`.
    pub fn scores(&self, tape: &Tape, bound: &Bound, phi: Var, edges: &[Edge]) -> Var {
        let targets: Vec<usize> = edges.iter().map(|e| e.target).collect();
        let sources: Vec<usize> = edges.iter().map(|e| e.source).collect();
        let ones = tape.constant(Matrix::ones((edges.len(), 1)));
        let pair = tape.concat_cols(&[
            tape.gather_rows(phi, &targets),
            tape.gather_rows(phi, &sources),
            ones,
        ]);
        let h = tape.relu(self.attn_hidden.forward(tape, bound, pair));
        self.attn_out.forward(tape, bound, h)
    }

    /// One round of masked relational message passing.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        phi: Var,
        graph: &ConversationGraph,
        mask: &MaskPlan,
    ) -> Var {
        let n = graph.num_nodes;
        let edges = graph.active_edges(mask);
        let groups: Vec<usize> = edges.iter().map(group_of).collect();
        let mut sizes = vec![0usize; n * Relation::COUNT];
        for &g in &groups {
            sizes[g] += 1;
        }
        let scores = self.scores(tape, bound, phi, &edges);
        let w = tape.segment_softmax(scores, &groups);
        let inv_c = tape.constant(Matrix::from_shape_fn((edges.len(), 1), |(k, _)| {
            1.0 / sizes[groups[k]] as f64
        }));
        let coef = tape.mul(w, inv_c);
        let transformed: Vec<Var> = Relation::ALL
            .iter()
            .map(|&r| self.transform(r).forward(tape, bound, phi))
            .collect();
        let stacked = tape.concat_rows(&transformed);
        let dst: Vec<usize> = edges.iter().map(|e| e.target).collect();
        let src: Vec<usize> = edges
            .iter()
            .map(|e| e.relation.index() * n + e.source)
            .collect();
        tape.relu(tape.spmm(coef, stacked, &dst, &src, n))
    }
}

/// Projection, propagation layers and reconstruction head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gnn {
    pub input_proj: Linear,
    pub layers: Vec<GnnLayer>,
    pub reconstruct: Mlp,
    pub config: GnnConfig,
}

impl Gnn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        recon_dim: usize,
        config: &GnnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = config.width;
        let input_proj = Linear::new(store, &format!("{name}.proj"), input_dim, w, true, rng);
        let layers = (0..config.layers)
            .map(|t| GnnLayer::new(store, &format!("{name}.layer{t}"), w, config.attn_hidden, rng))
            .collect();
        let reconstruct = Mlp::new(
            store,
            &format!("{name}.recon"),
            &[w, config.recon_hidden, recon_dim],
            Activation::Relu,
            rng,
        );
        Self {
            input_proj,
            layers,
            reconstruct,
            config: config.clone(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.width
    }

    /// Final node embeddings from context vectors `l: [n x d]`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        l: Var,
        graph: &ConversationGraph,
        mask: &MaskPlan,
    ) -> Var {
        let mut phi = self.input_proj.forward(tape, bound, l);
        for layer in &self.layers {
            phi = layer.forward(tape, bound, phi, graph, mask);
        }
        phi
    }

    pub fn reconstruct(&self, tape: &Tape, bound: &Bound, phi: Var) -> Var {
        self.reconstruct.forward(tape, bound, phi)
    }
}

/// Value-level scores for every edge of `graph`.
pub fn edge_scores(
    layer: &GnnLayer,
    store: &ParamStore,
    phi: &Matrix,
    graph: &ConversationGraph,
) -> Result<Vec<f64>> {
    check_nodes(phi, graph, layer.self_transform.in_dim)?;
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    let p = tape.constant(phi.clone());
    let s = layer.scores(&tape, &bound, p, &graph.edges);
    let v = tape.value(s).iter().copied().collect();
    Ok(v)
}

/// Value-level propagation with precomputed weights.
pub fn propagate(
    layer: &GnnLayer,
    store: &ParamStore,
    phi: &Matrix,
    graph: &ConversationGraph,
    weights: &EdgeWeights,
) -> Result<Matrix> {
    check_nodes(phi, graph, layer.self_transform.in_dim)?;
    if weights.weights.len() != graph.edges.len() {
        return Err(Error::LengthMismatch {
            left: weights.weights.len(),
            right: graph.edges.len(),
        });
    }
    let transformed: Vec<Matrix> = Relation::ALL
        .iter()
        .map(|&r| phi.dot(store.get(layer.transform(r).weight)))
        .collect();
    let mut out = Matrix::zeros((graph.num_nodes, layer.self_transform.out_dim));
    for (k, e) in graph.edges.iter().enumerate() {
        if !weights.active[k] {
            continue;
        }
        let coef = weights.weights[k] / weights.group_sizes[k] as f64;
        out.row_mut(e.target)
            .scaled_add(coef, &transformed[e.relation.index()].row(e.source));
    }
    out.mapv_inplace(|v| v.max(0.0));
    Ok(out)
}

fn check_nodes(phi: &Matrix, graph: &ConversationGraph, width: usize) -> Result<()> {
    if phi.nrows() != graph.num_nodes || phi.ncols() != width {
        return Err(Error::shape(format!(
            "node states are {:?}, graph needs [{} x {}]",
            phi.dim(),
            graph.num_nodes,
            width
        )));
    }
    Ok(())
}

/// Mean over nodes and dimensions of the squared reconstruction error.
pub fn reconstruction_loss(original: &Matrix, reconstructed: &Matrix) -> Result<f64> {
    if original.dim() != reconstructed.dim() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs original {:?}",
            reconstructed.dim(),
            original.dim()
        )));
    }
    if original.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = original
        .iter()
        .zip(reconstructed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / original.len() as f64)
}

pub fn reconstruction_loss_on_tape(tape: &Tape, original: Var, reconstructed: Var) -> Var {
    tape.mean(tape.square(tape.sub(reconstructed, original)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::standard_normal;

    fn speakers(ids: &[u32]) -> Vec<SpeakerId> {
        ids.iter().map(|&i| SpeakerId(i)).collect()
    }

    #[test]
    fn three_utterance_graph() {
        let g = build_graph(&speakers(&[0, 1, 0]), Window { past: 1, future: 1 }).unwrap();
        assert_eq!(g.count(Relation::SelfLoop), 3);
        assert_eq!(g.edges.len(), 7);
        assert_eq!(g.count(Relation::CrossSpeakerPast), 2);
        assert_eq!(g.count(Relation::CrossSpeakerFuture), 2);
    }

    #[test]
    fn zero_window_has_only_self_loops() {
        let g = build_graph(&speakers(&[0, 1, 0, 1]), Window { past: 0, future: 0 }).unwrap();
        assert!(g.edges.iter().all(|e| e.relation == Relation::SelfLoop));
    }

    #[test]
    fn single_speaker_has_no_cross_relations() {
        let g = build_graph(&speakers(&[3, 3, 3, 3]), Window::default()).unwrap();
        assert_eq!(g.count(Relation::CrossSpeakerPast) + g.count(Relation::CrossSpeakerFuture), 0);
    }

    #[test]
    fn softmax_within_groups() {
        // node 0 has two same-speaker future neighbors
        let g = build_graph(&speakers(&[0, 0, 0]), Window { past: 0, future: 2 }).unwrap();
        let scores: Vec<f64> = g
            .edges
            .iter()
            .map(|e| match (e.target, e.source) {
                (0, 1) => 1.0,
                (0, 2) => 2.0,
                _ => 0.0,
            })
            .collect();
        let w = edge_weights(&scores, &g, &MaskPlan::none(3)).unwrap();
        let find = |t, s| {
            let k = g.edges.iter().position(|e| e.target == t && e.source == s).unwrap();
            w.weights[k]
        };
        assert!((find(0, 1) - 0.268_941_421_369_995).abs() < 1e-5);
        assert!((find(0, 2) - 0.731_058_578_630_005).abs() < 1e-5);
        assert_eq!(find(1, 2), 1.0);
        assert_eq!(find(0, 0), 1.0);
    }

    #[test]
    fn fully_masked_group_is_flagged() {
        let g = build_graph(&speakers(&[0, 0]), Window { past: 1, future: 1 }).unwrap();
        let mut mask = MaskPlan::none(2);
        mask.masked[1] = true;
        let w = edge_weights(&vec![0.0; g.edges.len()], &g, &mask).unwrap();
        assert_eq!(w.empty_groups, vec![(0, Relation::SameSpeakerFuture)]);
    }

    #[test]
    fn mask_counts_and_determinism() {
        assert!(apply_mask(10, 0.0, 1).unwrap().masked_nodes().is_empty());
        let a = apply_mask(10, 0.3, 7).unwrap();
        assert_eq!(a.masked_nodes().len(), 3);
        assert_eq!(a, apply_mask(10, 0.3, 7).unwrap());
        assert!(matches!(apply_mask(10, 1.0, 0), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn reconstruction_loss_hand_value() {
        let y = Matrix::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
        assert_eq!(reconstruction_loss(&y, &Matrix::zeros((1, 2))).unwrap(), 2.5);
        assert_eq!(reconstruction_loss(&y, &y).unwrap(), 0.0);
        assert!(reconstruction_loss(&y, &Matrix::zeros((2, 1))).is_err());
    }

    #[test]
    fn tape_layer_matches_value_level_propagation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = GnnLayer::new(&mut store, "l", 4, 5, &mut rng);
        let g = build_graph(&speakers(&[0, 1, 1, 0, 2, 1]), Window { past: 2, future: 1 }).unwrap();
        let mask = apply_mask(6, 0.3, 9).unwrap();
        let phi = standard_normal(6, 4, 4);

        let scores = edge_scores(&layer, &store, &phi, &g).unwrap();
        let w = edge_weights(&scores, &g, &mask).unwrap();
        let expected = propagate(&layer, &store, &phi, &g, &w).unwrap();

        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let p = tape.constant(phi);
        let out = layer.forward(&tape, &b, p, &g, &mask);
        let out = tape.value(out);
        for (a, e) in out.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
