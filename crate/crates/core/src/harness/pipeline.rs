//! The jointly trained network: optional fusion encoder, context encoder,
//! graph network, classification head and reconstruction head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify::{focal_loss_on_tape, weight_penalty_on_tape, Hyperparams};
use crate::context::{ContextEncoder, InputMode};
use crate::corpus::{Corpus, Dialogue};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::graph::{
    apply_mask, build_graph, reconstruction_loss_on_tape, ConversationGraph, Gnn, GnnConfig,
    MaskPlan, Window,
};
use crate::harness::metrics::compute_metrics;
use crate::harness::seed_for;
use crate::nn::{all_finite, dropout, Activation, Adam, AdamConfig, Bound, Mlp, ParamStore};
use crate::tape::{Matrix, Tape, Var};

/// Rows of several dialogues stacked in order, with their graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub dialogues: Vec<Vec<usize>>,
    pub graph: ConversationGraph,
}

pub fn make_batch(dialogues: &[&Dialogue], window: Window) -> Result<Batch> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let mut graphs = Vec::new();
    for d in dialogues {
        let start = labels.len();
        for u in &d.utterances {
            rows.extend(u.concat_features());
            labels.push(u.label);
            ids.push(u.id);
        }
        spans.push((start..labels.len()).collect());
        let speakers: Vec<_> = d.utterances.iter().map(|u| u.speaker).collect();
        graphs.push(build_graph(&speakers, window)?);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let x = Matrix::from_shape_vec((n, rows.len() / n), rows).map_err(|e| Error::shape(e.to_string()))?;
    Ok(Batch {
        x,
        labels,
        ids,
        dialogues: spans,
        graph: ConversationGraph::union(&graphs),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointModel {
    pub store: ParamStore,
    pub fusion: Option<FusionModel>,
    pub input_mode: InputMode,
    pub context: ContextEncoder,
    pub gnn: Gnn,
    pub head: Mlp,
    pub num_classes: usize,
    pub window: Window,
}

/// Per-run training settings resolved from the toggles.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub hyper: Hyperparams,
    pub gamma: f64,
    pub mask_rate: f64,
    pub fine_tune_fusion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub focal: f64,
    pub val_waf1: f64,
}

struct TrainState<'a> {
    rng: &'a mut ChaCha8Rng,
    mask: MaskPlan,
    dropout: f64,
}

struct Outputs {
    x: Var,
    phi: Var,
    logits: Var,
}

impl JointModel {
    /// Without a fusion model the input mode falls back to raw features.
    pub fn new(
        fusion: Option<FusionModel>,
        input_mode: InputMode,
        context_hidden: usize,
        gnn: &GnnConfig,
        head_hidden: usize,
        num_classes: usize,
        raw_dim: usize,
        seed: u64,
    ) -> Self {
        let input_mode = if fusion.is_some() { input_mode } else { InputMode::Concat };
        let d_z = fusion.as_ref().map_or(0, FusionModel::d_z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_dim = input_mode.dim(d_z, raw_dim);
        let context = ContextEncoder::new(&mut store, "ctx", in_dim, context_hidden, &mut rng);
        let gnn_net = Gnn::new(&mut store, "gnn", context.output_dim(), raw_dim, gnn, &mut rng);
        let head = Mlp::new(
            &mut store,
            "head",
            &[gnn.width, head_hidden, num_classes],
            Activation::Relu,
            &mut rng,
        );
        Self {
            store,
            fusion,
            input_mode,
            context,
            gnn: gnn_net,
            head,
            num_classes,
            window: gnn.window,
        }
    }

    fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        fusion_bound: Option<&Bound>,
        batch: &Batch,
        train: Option<&mut TrainState>,
    ) -> Result<Outputs> {
        let x = tape.constant(batch.x.clone());
        let mut train = train;
        let latent = match (&self.fusion, fusion_bound) {
            (Some(f), Some(fb)) => {
                let (mu, logvar) = f.encode_on_tape(tape, fb, x);
                Some(match train.as_deref_mut() {
                    Some(state) => {
                        let eps = Matrix::from_shape_fn((batch.labels.len(), f.d_z()), |_| {
                            state.rng.sample(StandardNormal)
                        });
                        f.reparameterize(tape, mu, logvar, &eps)
                    }
                    None => mu,
                })
            }
            _ => None,
        };
        let input = match (self.input_mode, latent) {
            (InputMode::Latent, Some(z)) => z,
            (InputMode::Hybrid, Some(z)) => tape.concat_cols(&[z, x]),
            _ => x,
        };
        let mut ctx = self.context.forward(tape, bound, input, &batch.dialogues)?;
        let none;
        let mask = match train {
            Some(state) => {
                ctx = dropout(tape, ctx, state.dropout, state.rng);
                &state.mask
            }
            None => {
                none = MaskPlan::none(batch.labels.len());
                &none
            }
        };
        let phi = self.gnn.forward(tape, bound, ctx, &batch.graph, mask);
        let logits = self.head.forward(tape, bound, phi);
        Ok(Outputs { x, phi, logits })
    }

    /// Node embeddings and head predictions for every utterance of `corpus`,
    /// in corpus order.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<Evaluation> {
        let refs: Vec<&Dialogue> = corpus.dialogues.iter().collect();
        let batch = make_batch(&refs, self.window)?;
        let tape = Tape::new();
        let bound = self.store.bind_frozen(&tape);
        let fb = self.fusion.as_ref().map(|f| f.store.bind_frozen(&tape));
        let out = self.forward(&tape, &bound, fb.as_ref(), &batch, None)?;
        let embeddings = tape.value(out.phi).clone();
        let logits = tape.value(out.logits).clone();
        Ok(Evaluation {
            predictions: crate::augment::argmax_rows(&logits),
            embeddings,
            labels: batch.labels,
            ids: batch.ids,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub embeddings: Matrix,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

/// Trains on `ξ₁ L_recon + ξ₂ L_focal + λ‖θ‖`, stopping when validation WAF1
/// has not improved for `patience` epochs and restoring the best epoch.
pub fn train_joint(
    model: &mut JointModel,
    train: &Corpus,
    val: &Corpus,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let hp = &opts.hyper;
    if train.dialogues.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let adam_cfg = AdamConfig {
        lr: hp.lr,
        ..Default::default()
    };
    let mut opt = Adam::all(adam_cfg, &model.store);
    let tune = opts.fine_tune_fusion && model.fusion.is_some();
    let mut fusion_opt = model
        .fusion
        .as_ref()
        .filter(|_| tune)
        .map(|f| Adam::all(adam_cfg, &f.store));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.dialogues.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore, Option<ParamStore>)> = None;
    let mut stale = 0;

    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_recon, mut sum_focal, mut batches) = (0.0, 0.0, 0.0, 0);
        for (b_idx, chunk) in order.chunks(hp.batch_size).enumerate() {
            let refs: Vec<&Dialogue> = chunk.iter().map(|&i| &train.dialogues[i]).collect();
            let batch = make_batch(&refs, model.window)?;
            let n = batch.labels.len();
            let mask = apply_mask(n, opts.mask_rate, seed_for(seed, &[epoch as u64, b_idx as u64]))?;
            let mut state = TrainState {
                rng: &mut rng,
                mask,
                dropout: hp.dropout,
            };

            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let fb = model.fusion.as_ref().map(|f| {
                if tune {
                    f.store.bind(&tape)
                } else {
                    f.store.bind_frozen(&tape)
                }
            });
            let out = model.forward(&tape, &bound, fb.as_ref(), &batch, Some(&mut state))?;
            let recon_out = model.gnn.reconstruct(&tape, &bound, out.phi);
            let recon = reconstruction_loss_on_tape(&tape, out.x, recon_out);
            let focal = focal_loss_on_tape(&tape, out.logits, &batch.labels, opts.gamma);
            let mut params: Vec<Var> = bound.vars().to_vec();
            if tune {
                params.extend_from_slice(fb.as_ref().expect("fusion bound").vars());
            }
            let penalty = weight_penalty_on_tape(&tape, &params, hp.weight_decay, hp.regularizer);
            let total = tape.add(
                tape.add(tape.scale(recon, hp.xi_recon), tape.scale(focal, hp.xi_focal)),
                penalty,
            );
            let grads = tape.backward(total);
            let g = model.store.gradients(&bound, &grads);
            if !all_finite(&g) {
                return Err(Error::NonFiniteGradient(format!("joint epoch {epoch}")));
            }
            opt.step(&mut model.store, &g, false);
            if let (Some(fopt), Some(f), Some(fb)) = (fusion_opt.as_mut(), model.fusion.as_mut(), fb.as_ref()) {
                let fg = f.store.gradients(fb, &grads);
                if !all_finite(&fg) {
                    return Err(Error::NonFiniteGradient(format!("fusion epoch {epoch}")));
                }
                fopt.step(&mut f.store, &fg, false);
            }
            sum_loss += tape.scalar(total);
            sum_recon += tape.scalar(recon);
            sum_focal += tape.scalar(focal);
            batches += 1;
        }

        let val_waf1 = if val.dialogues.is_empty() {
            0.0
        } else {
            let ev = model.evaluate(val)?;
            compute_metrics(&ev.labels, &ev.predictions, model.num_classes)?.waf1
        };
        let k = batches as f64;
        log::debug!("epoch {epoch}: loss {:.4}, val WAF1 {val_waf1:.4}", sum_loss / k);
        logs.push(EpochLog {
            epoch,
            loss: sum_loss / k,
            recon: sum_recon / k,
            focal: sum_focal / k,
            val_waf1,
        });
        if val.dialogues.is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_waf1 > *b) {
            let fusion_store = model.fusion.as_ref().map(|f| f.store.clone());
            best = Some((val_waf1, model.store.clone(), fusion_store));
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                log::debug!("stopping after epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, store, fusion_store)) = best {
        model.store = store;
        if let (Some(f), Some(s)) = (model.fusion.as_mut(), fusion_store) {
            f.store = s;
        }
    }
    Ok(logs)
}
