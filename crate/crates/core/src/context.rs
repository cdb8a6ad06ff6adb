//! Bidirectional LSTM over the utterances of each dialogue.
//!
//! Each utterance vector `l_t` is `[forward h_t : backward h_t]`. Dialogues of
//! different lengths run in one batch: they are sorted by length so the active
//! rows at step `t` are always a prefix of the batch.

use std::cmp::Reverse;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::{Bound, LstmCell, ParamStore};
use crate::tape::{Matrix, Tape, Var};

/// What is fed to the recurrence for each utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The fused latent code.
    #[default]
    Latent,
    /// Raw text, audio and visual features side by side.
    Concat,
    /// Latent code followed by the raw features.
    Hybrid,
}

impl InputMode {
    pub fn dim(self, d_z: usize, raw: usize) -> usize {
        match self {
            Self::Latent => d_z,
            Self::Concat => raw,
            Self::Hybrid => d_z + raw,
        }
    }
}

pub fn make_input(utterance: &Utterance, latent: &[f64], mode: InputMode) -> Vec<f64> {
    match mode {
        InputMode::Latent => latent.to_vec(),
        InputMode::Concat => utterance.concat_features(),
        InputMode::Hybrid => {
            let mut v = latent.to_vec();
            v.extend(utterance.concat_features());
            v
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub hidden: usize,
    pub input_mode: InputMode,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            input_mode: InputMode::Latent,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Output of [`bilstm_forward`] for one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence {
    /// `l_t`, one row per utterance, width `2 * d_h`.
    pub vectors: Matrix,
    /// Forward-direction `[input, forget, output]` gate activations per step.
    pub forward_gates: Vec<[Vec<f64>; 3]>,
    /// Backward-direction gates, indexed by step of the reversed pass.
    pub backward_gates: Vec<[Vec<f64>; 3]>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `V`, the row-major concatenation of every `l_t`.
    pub fn flattened(&self) -> Vec<f64> {
        self.vectors.iter().copied().collect()
    }
}

struct Pass {
    out: Var,
    gates: Vec<[Var; 3]>,
}

impl ContextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_dim, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_dim, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    /// Runs both directions over `x: [n x d_f]`. `dialogues` lists the row
    /// indices of each dialogue in temporal order and must cover every row
    /// exactly once. Returns `[n x 2 d_h]` aligned with the rows of `x`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        dialogues: &[Vec<usize>],
    ) -> Result<Var> {
        Ok(self.both(tape, bound, x, dialogues)?.0)
    }

    fn both(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        dialogues: &[Vec<usize>],
    ) -> Result<(Var, Pass, Pass)> {
        let (n, d) = tape.shape(x);
        if d != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: d,
            });
        }
        check_partition(n, dialogues)?;
        let fwd = self.pass(tape, bound, &self.forward, x, dialogues, false);
        let bwd = self.pass(tape, bound, &self.backward, x, dialogues, true);
        let out = tape.concat_cols(&[fwd.out, bwd.out]);
        Ok((out, fwd, bwd))
    }

    fn pass(
        &self,
        tape: &Tape,
        bound: &Bound,
        cell: &LstmCell,
        x: Var,
        dialogues: &[Vec<usize>],
        reverse: bool,
    ) -> Pass {
        let n = tape.shape(x).0;
        let mut order: Vec<usize> = (0..dialogues.len()).collect();
        order.sort_by_key(|&k| Reverse(dialogues[k].len()));
        let max_len = order.first().map_or(0, |&k| dialogues[k].len());
        let hd = cell.hidden_dim;

        let mut active = order.len();
        let mut h = tape.zeros(active, hd);
        let mut c = tape.zeros(active, hd);
        let mut outputs = Vec::with_capacity(max_len);
        let mut gates = Vec::with_capacity(max_len);
        let mut placed = Vec::with_capacity(n);
        for t in 0..max_len {
            let now = order.iter().take_while(|&&k| dialogues[k].len() > t).count();
            if now < active {
                let keep: Vec<usize> = (0..now).collect();
                h = tape.gather_rows(h, &keep);
                c = tape.gather_rows(c, &keep);
                active = now;
            }
            let rows: Vec<usize> = order[..active]
                .iter()
                .map(|&k| {
                    let d = &dialogues[k];
                    if reverse {
                        d[d.len() - 1 - t]
                    } else {
                        d[t]
                    }
                })
                .collect();
            let xt = tape.gather_rows(x, &rows);
            let step = cell.step(tape, bound, xt, h, c);
            h = step.h;
            c = step.c;
            outputs.push(h);
            gates.push(step.gates);
            placed.extend(rows);
        }
        let stacked = tape.concat_rows(&outputs);
        let mut inverse = vec![0; n];
        for (pos, &row) in placed.iter().enumerate() {
            inverse[row] = pos;
        }
        Pass {
            out: tape.gather_rows(stacked, &inverse),
            gates,
        }
    }
}

fn check_partition(n: usize, dialogues: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; n];
    let mut count = 0;
    for d in dialogues {
        if d.is_empty() {
            return Err(Error::EmptySequence);
        }
        for &i in d {
            if i >= n || seen[i] {
                return Err(Error::shape(format!(
                    "dialogue rows must partition 0..{n}; row {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
            count += 1;
        }
    }
    if count != n {
        return Err(Error::shape(format!(
            "dialogues cover {count} of {n} rows"
        )));
    }
    Ok(())
}

/// Value-level forward over a single dialogue.
pub fn bilstm_forward(
    encoder: &ContextEncoder,
    store: &ParamStore,
    sequence: &Matrix,
) -> Result<ContextSequence> {
    if sequence.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    if sequence.ncols() != encoder.input_dim() {
        return Err(Error::shape(format!(
            "expected {}-dim inputs, got {}",
            encoder.input_dim(),
            sequence.ncols()
        )));
    }
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    let x = tape.constant(sequence.clone());
    let rows: Vec<usize> = (0..sequence.nrows()).collect();
    let (out, fwd, bwd) = encoder.both(&tape, &bound, x, &[rows])?;
    let read = |gates: &[[Var; 3]]| {
        gates
            .iter()
            .map(|g| g.map(|v| tape.value(v).iter().copied().collect()))
            .collect()
    };
    let seq = ContextSequence {
        vectors: tape.value(out).clone(),
        forward_gates: read(&fwd.gates),
        backward_gates: read(&bwd.gates),
    };
    Ok(seq)
}
