//! Deep joint variational autoencoder fusing the three modalities.
//!
//! Text features are read as a short token sequence by a bidirectional LSTM,
//! audio and visual features by 1-D convolutions. The three per-modality codes
//! have equal width and are summed before a shared head emits the Gaussian
//! posterior `(mu, log-variance)`. The decoder reconstructs the concatenated
//! input from a reparameterized sample.
//!
//! The reconstruction likelihood is a unit-variance Gaussian, so its negative
//! log is `½‖x − x̂‖²` plus a constant that is dropped. The loss is the plain
//! negative ELBO: reconstruction plus KL to a standard normal, both summed over
//! the batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dims, Utterance};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Bound, Linear, LstmCell, Mlp, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_z: usize,
    /// Width of each per-modality code.
    pub code_width: usize,
    /// Text features are split into tokens of this width.
    pub text_token: usize,
    pub text_hidden: usize,
    pub conv_channels: usize,
    pub audio_kernel: usize,
    pub visual_kernel: usize,
    pub visual_stride: usize,
    pub decoder_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_z: 8,
            code_width: 32,
            text_token: 4,
            text_hidden: 16,
            conv_channels: 4,
            audio_kernel: 3,
            visual_kernel: 5,
            visual_stride: 2,
            decoder_hidden: 64,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// Posterior parameters and a reparameterized draw for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Matrix,
    pub sigma: Matrix,
    pub sample: Matrix,
    /// Standard-normal noise used for `sample = mu + sigma * eps`.
    pub eps: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DjvaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Conv1d {
    filters: Linear,
    proj: Linear,
    kernel: usize,
    stride: usize,
    len: usize,
}

impl Conv1d {
    fn out_len(len: usize, kernel: usize, stride: usize) -> usize {
        (len - kernel) / stride + 1
    }

    fn new(
        store: &mut ParamStore,
        name: &str,
        len: usize,
        kernel: usize,
        stride: usize,
        channels: usize,
        code: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let filters = Linear::new(store, &format!("{name}.filters"), kernel, channels, true, rng);
        let out = Self::out_len(len, kernel, stride);
        let proj = Linear::new(store, &format!("{name}.proj"), out * channels, code, true, rng);
        Self {
            filters,
            proj,
            kernel,
            stride,
            len,
        }
    }

    /// `x: [b x len] -> [b x code]`.
    fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let b = tape.shape(x).0;
        let out = Self::out_len(self.len, self.kernel, self.stride);
        let flat = tape.reshape(x, b * self.len, 1);
        let mut idx = Vec::with_capacity(b * out * self.kernel);
        for r in 0..b {
            for s in 0..out {
                for j in 0..self.kernel {
                    idx.push(r * self.len + s * self.stride + j);
                }
            }
        }
        let windows = tape.reshape(tape.gather_rows(flat, &idx), b * out, self.kernel);
        let maps = tape.relu(self.filters.forward(tape, bound, windows));
        let channels = self.filters.out_dim;
        let maps = tape.reshape(maps, b, out * channels);
        self.proj.forward(tape, bound, maps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionModel {
    pub store: ParamStore,
    pub config: FusionConfig,
    pub dims: Dims,
    text_fwd: LstmCell,
    text_bwd: LstmCell,
    text_proj: Linear,
    audio: Conv1d,
    visual: Conv1d,
    /// Shared head to `[mu, log-variance]`.
    pub head: Linear,
    decoder: Mlp,
    pub trained: bool,
}

impl FusionModel {
    pub fn new(dims: Dims, config: &FusionConfig, seed: u64) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if config.text_token == 0 || dims.text % config.text_token != 0 {
            return bad("text dim must be a multiple of text_token");
        }
        if config.audio_kernel == 0 || config.audio_kernel > dims.audio {
            return bad("audio kernel must fit the audio dim");
        }
        if config.visual_kernel == 0 || config.visual_kernel > dims.visual || config.visual_stride == 0
        {
            return bad("visual kernel must fit the visual dim");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let text_fwd = LstmCell::new(&mut store, "text.fwd", c.text_token, c.text_hidden, &mut rng);
        let text_bwd = LstmCell::new(&mut store, "text.bwd", c.text_token, c.text_hidden, &mut rng);
        let text_proj = Linear::new(
            &mut store,
            "text.proj",
            2 * c.text_hidden,
            c.code_width,
            true,
            &mut rng,
        );
        let audio = Conv1d::new(
            &mut store,
            "audio",
            dims.audio,
            c.audio_kernel,
            1,
            c.conv_channels,
            c.code_width,
            &mut rng,
        );
        let visual = Conv1d::new(
            &mut store,
            "visual",
            dims.visual,
            c.visual_kernel,
            c.visual_stride,
            c.conv_channels,
            c.code_width,
            &mut rng,
        );
        let head = Linear::new(&mut store, "head", c.code_width, 2 * c.d_z, true, &mut rng);
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &[c.d_z, c.decoder_hidden, dims.total()],
            Activation::Relu,
            &mut rng,
        );
        Ok(Self {
            store,
            config: config.clone(),
            dims,
            text_fwd,
            text_bwd,
            text_proj,
            audio,
            visual,
            head,
            decoder,
            trained: false,
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    /// Sets the `(mu, log-variance)` head to zero.
    pub fn zero_head(&mut self) {
        self.store.get_mut(self.head.weight).fill(0.0);
        if let Some(b) = self.head.bias {
            self.store.get_mut(b).fill(0.0);
        }
    }

    fn text_code(&self, tape: &Tape, bound: &Bound, text: Var) -> Var {
        let b = tape.shape(text).0;
        let tok = self.config.text_token;
        let n_tok = self.dims.text / tok;
        let tokens: Vec<Var> = (0..n_tok)
            .map(|t| tape.slice_cols(text, t * tok, (t + 1) * tok))
            .collect();
        let h0 = self.config.text_hidden;
        let run = |cell: &LstmCell, order: &mut dyn Iterator<Item = &Var>| {
            let mut h = tape.zeros(b, h0);
            let mut c = tape.zeros(b, h0);
            for &x in order {
                let s = cell.step(tape, bound, x, h, c);
                h = s.h;
                c = s.c;
            }
            h
        };
        let fwd = run(&self.text_fwd, &mut tokens.iter());
        let bwd = run(&self.text_bwd, &mut tokens.iter().rev());
        self.text_proj
            .forward(tape, bound, tape.concat_cols(&[fwd, bwd]))
    }

    /// `x: [b x (d_w + d_a + d_v)]` to `(mu, log-variance)`, each `[b x d_z]`.
    pub fn encode_on_tape(&self, tape: &Tape, bound: &Bound, x: Var) -> (Var, Var) {
        let d = self.dims;
        let text = tape.slice_cols(x, 0, d.text);
        let audio = tape.slice_cols(x, d.text, d.text + d.audio);
        let visual = tape.slice_cols(x, d.text + d.audio, d.total());
        let codes = tape.add(
            tape.add(self.text_code(tape, bound, text), self.audio.forward(tape, bound, audio)),
            self.visual.forward(tape, bound, visual),
        );
        let stats = self.head.forward(tape, bound, tape.tanh(codes));
        let dz = self.config.d_z;
        (tape.slice_cols(stats, 0, dz), tape.slice_cols(stats, dz, 2 * dz))
    }

    /// `mu + exp(½ logvar) * eps`.
    pub fn reparameterize(&self, tape: &Tape, mu: Var, logvar: Var, eps: &Matrix) -> Var {
        let sigma = tape.exp(tape.scale(logvar, 0.5));
        let e = tape.constant(eps.clone());
        tape.add(mu, tape.mul(sigma, e))
    }

    pub fn decode_on_tape(&self, tape: &Tape, bound: &Bound, z: Var) -> Var {
        self.decoder.forward(tape, bound, z)
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.dims.total() {
            return Err(Error::shape(format!(
                "fusion expects {} features, got {}",
                self.dims.total(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Encodes rows of `x` using the supplied noise for the sample.
    pub fn encode(&self, x: &Matrix, eps: &Matrix) -> Result<LatentCode> {
        self.check_width(x)?;
        if eps.dim() != (x.nrows(), self.config.d_z) {
            return Err(Error::shape("noise must be [rows x d_z]"));
        }
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_on_tape(&tape, &b, xv);
        let z = self.reparameterize(&tape, mu, logvar, eps);
        let sigma = tape.value(logvar).mapv(|lv| (0.5 * lv).exp());
        let code = LatentCode {
            mu: tape.value(mu).clone(),
            sigma,
            sample: tape.value(z).clone(),
            eps: eps.clone(),
        };
        Ok(code)
    }

    /// Encodes with noise drawn from `seed`.
    pub fn encode_seeded(&self, x: &Matrix, seed: u64) -> Result<LatentCode> {
        let eps = standard_normal(x.nrows(), self.config.d_z, seed);
        self.encode(x, &eps)
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if z.ncols() != self.config.d_z {
            return Err(Error::shape("latent width differs from d_z"));
        }
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let zv = tape.constant(z.clone());
        let out = self.decode_on_tape(&tape, &b, zv);
        let v = tape.value(out).clone();
        Ok(v)
    }

    fn loss_vars(&self, tape: &Tape, bound: &Bound, x: &Matrix, eps: &Matrix) -> (Var, Var, Var) {
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_on_tape(tape, bound, xv);
        let z = self.reparameterize(tape, mu, logvar, eps);
        let recon = self.decode_on_tape(tape, bound, z);
        let rec = tape.scale(tape.sum(tape.square(tape.sub(recon, xv))), 0.5);
        // ½ Σ (μ² + σ² − 1 − ln σ²) with σ² = exp(logvar)
        let inner = tape.sub(
            tape.add(tape.square(mu), tape.exp(logvar)),
            tape.add_scalar(logvar, 1.0),
        );
        let kl = tape.scale(tape.sum(inner), 0.5);
        (rec, kl, tape.add(rec, kl))
    }

    /// Negative ELBO summed over the batch.
    pub fn djvae_loss(&self, x: &Matrix, eps: &Matrix) -> Result<DjvaeLoss> {
        self.check_width(x)?;
        if x.nrows() == 0 {
            return Err(Error::shape("empty batch"));
        }
        if eps.dim() != (x.nrows(), self.config.d_z) {
            return Err(Error::shape("noise must be [rows x d_z]"));
        }
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let (rec, kl, total) = self.loss_vars(&tape, &b, x, eps);
        Ok(DjvaeLoss {
            reconstruction: tape.scalar(rec),
            kl: tape.scalar(kl),
            total: tape.scalar(total),
        })
    }

    /// Loss and its gradient for every parameter.
    pub fn loss_gradients(&self, x: &Matrix, eps: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        self.check_width(x)?;
        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let (_, _, total) = self.loss_vars(&tape, &b, x, eps);
        let g = tape.backward(total);
        Ok((tape.scalar(total), self.store.gradients(&b, &g)))
    }

    /// Posterior mean, the deterministic fused representation.
    pub fn fuse(&self, u: &Utterance) -> Result<Vec<f64>> {
        let x = Matrix::from_shape_vec((1, self.dims.total()), u.concat_features())
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.fuse_matrix(&x)?.row(0).to_vec())
    }

    pub fn fuse_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if !self.trained {
            return Err(Error::UntrainedFusion);
        }
        self.check_width(x)?;
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let (mu, _) = self.encode_on_tape(&tape, &b, xv);
        let v = tape.value(mu).clone();
        Ok(v)
    }
}

pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Closed-form `KL(N(mu, diag sigma²) ‖ N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::LengthMismatch {
            left: mu.len(),
            right: sigma.len(),
        });
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::NonPositiveSigma(s));
        }
        let var = s * s;
        kl += m * m + var - 1.0 - var.ln();
    }
    Ok(0.5 * kl)
}

/// Fits a fresh model on all utterances of `corpus` by minimizing the
/// batch-mean negative ELBO.
pub fn train_fusion(corpus: &Corpus, config: &FusionConfig, seed: u64) -> Result<FusionModel> {
    let x = corpus.feature_matrix();
    if x.nrows() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut model = FusionModel::new(corpus.dims, config, seed)?;
    let mut adam = Adam::all(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let eps = Matrix::from_shape_fn((chunk.len(), config.d_z), |_| {
                rng.sample(StandardNormal)
            });
            let tape = Tape::new();
            let b = model.store.bind(&tape);
            let (_, _, total) = model.loss_vars(&tape, &b, &xb, &eps);
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            let g = tape.backward(mean);
            let grads = model.store.gradients(&b, &g);
            adam.step(&mut model.store, &grads, false);
        }
    }
    model.trained = true;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_standard_normal(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_standard_normal(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_standard_normal(&[0.0], &[2.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.806_852_819_440_054_3).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        assert!(matches!(
            kl_standard_normal(&[0.0], &[0.0]),
            Err(Error::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn zero_head_gives_standard_posterior() {
        let mut m = FusionModel::new(Dims::DESK, &FusionConfig::default(), 1).unwrap();
        m.zero_head();
        let x = standard_normal(3, Dims::DESK.total(), 2);
        let eps = standard_normal(3, 8, 3);
        let code = m.encode(&x, &eps).unwrap();
        assert!(code.mu.iter().all(|&v| v == 0.0));
        assert!(code.sigma.iter().all(|&v| v == 1.0));
        assert_eq!(code.sample, eps);
    }

    #[test]
    fn fuse_requires_training() {
        let m = FusionModel::new(Dims::DESK, &FusionConfig::default(), 1).unwrap();
        let x = standard_normal(1, Dims::DESK.total(), 2);
        assert!(matches!(m.fuse_matrix(&x), Err(Error::UntrainedFusion)));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let cfg = FusionConfig {
            text_token: 5,
            ..Default::default()
        };
        assert!(FusionModel::new(Dims::DESK, &cfg, 0).is_err());
    }
}
