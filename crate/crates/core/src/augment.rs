//! Emotion-conditioned GAN augmenter.
//!
//! Two residual generators map between a source and a target feature space:
//! `G_st` (source to target) and `G_ts` (target to source, additionally
//! conditioned on a one-hot emotion state vector `Z`). A sigmoid discriminator
//! scores target-space samples, and a frozen pretrained emotion classifier
//! `EC_s` guides `G_ts` towards the requested class.
//!
//! Loss conventions: the classification terms `l_c` and `l_rc` are returned as
//! negated log-likelihoods (summed over the batch), `l_adv` is the raw
//! adversarial log-likelihood `E[log D(T)] + E[log(1 - D(G_st(S)))]`, and
//! `l_identity` is a batch mean of squared norms. The weighted total
//! `λ1·l_identity + λ2·l_adv + λ3·(l_c + l_rc)` is minimized by the generators
//! and maximized by the discriminator. Every log is floored at `log_floor`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dims, FeatureVector, Modality, SpeakerId, Utterance};
use crate::error::{Error, Result};
use crate::nn::{all_finite, Activation, Adam, AdamConfig, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub identity: f64,
    pub adversarial: f64,
    pub classification: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            identity: 1.0,
            adversarial: 0.5,
            classification: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Hidden width as a multiple of the generator input width.
    pub hidden_mult: usize,
    pub leaky_slope: f64,
    pub lambdas: Lambdas,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Input perturbation at generation time, in units of per-feature std.
    pub jitter: f64,
    pub log_floor: f64,
    pub classifier: ClassifierConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            hidden_mult: 4,
            leaky_slope: 0.2,
            lambdas: Lambdas::default(),
            adam: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_size: 32,
            steps: 300,
            jitter: 0.3,
            log_floor: 1e-12,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// One-hot emotion state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionStateVector(Vec<f64>);

impl EmotionStateVector {
    pub fn new(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} out of range");
        let mut z = vec![0.0; num_classes];
        z[class] = 1.0;
        Self(z)
    }

    pub fn class(&self) -> usize {
        self.0.iter().position(|&x| x == 1.0).expect("one-hot")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn one_hot_rows(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

/// Frozen pretrained classifier `EC_s` over concatenated tri-modal features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmotionClassifier {
    pub store: ParamStore,
    pub net: Mlp,
    pub input_dim: usize,
    pub num_classes: usize,
    pub frozen: bool,
}

impl EmotionClassifier {
    fn new(input_dim: usize, num_classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "ec",
            &[input_dim, hidden, num_classes],
            Activation::Relu,
            rng,
        );
        Self {
            store,
            net,
            input_dim,
            num_classes,
            frozen: false,
        }
    }

    pub fn probs_on_tape(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let logits = self.net.forward(tape, bound, x);
        tape.softmax_rows(logits)
    }

    /// Class probabilities for each row of `x`.
    pub fn probs(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "classifier expects {} features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let p = self.probs_on_tape(&tape, &b, xv);
        let out = tape.value(p).clone();
        Ok(out)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.probs(x)?))
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Trains `EC_s` with cross-entropy and returns it frozen.
pub fn pretrain_classifier(
    train: &Corpus,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<EmotionClassifier> {
    let n = train.num_utterances();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = train.feature_matrix();
    let labels = train.labels();
    let mut ec = EmotionClassifier::new(x.ncols(), train.num_classes, cfg.hidden, &mut rng);
    let mut adam = Adam::all(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &ec.store,
    );
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let b = ec.store.bind(&tape);
            let xb = tape.constant(x.select(ndarray::Axis(0), chunk));
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = ec.net.forward(&tape, &b, xb);
            let lp = tape.pick_cols(tape.log_softmax_rows(logits), &yb);
            let loss = tape.neg(tape.mean(lp));
            let g = tape.backward(loss);
            let grads = ec.store.gradients(&b, &g);
            adam.step(&mut ec.store, &grads, false);
        }
    }
    ec.frozen = true;
    Ok(ec)
}

/// `x + MLP([x, cond])` with the output layer zero-initialized, so a fresh
/// generator is the identity map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    pub net: Mlp,
    pub dim: usize,
    pub cond_dim: usize,
}

impl Generator {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cond_dim: usize,
        cfg: &GanConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = dim + cond_dim;
        let hidden = cfg.hidden_mult * input;
        let net = Mlp::new(
            store,
            name,
            &[input, hidden, hidden, dim],
            Activation::LeakyRelu(cfg.leaky_slope),
            rng,
        );
        let out = net.output_layer();
        store.get_mut(out.weight).fill(0.0);
        Self { net, dim, cond_dim }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var, cond: Option<Var>) -> Var {
        let input = match cond {
            Some(z) => tape.concat_cols(&[x, z]),
            None => x,
        };
        let delta = self.net.forward(tape, bound, input);
        tape.add(x, delta)
    }
}

/// Both generators, the discriminator and the frozen classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanParams {
    pub store: ParamStore,
    pub gen_s2t: Generator,
    pub gen_t2s: Generator,
    pub disc: Mlp,
    pub ec_s: EmotionClassifier,
    pub lambdas: Lambdas,
    pub log_floor: f64,
    pub dim: usize,
    pub num_classes: usize,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossBreakdown {
    pub l_c: f64,
    pub l_rc: f64,
    pub l_adv: f64,
    pub l_identity: f64,
    pub total: f64,
}

/// Labeled sources `S_k`, targets `T_i` all of class `target_class`.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBatch {
    pub sources: Matrix,
    pub source_labels: Vec<usize>,
    pub targets: Matrix,
    pub target_class: usize,
}

struct LossVars {
    l_c: Var,
    l_rc: Var,
    l_adv: Var,
    l_identity: Var,
    total: Var,
}

impl GanParams {
    pub fn new(ec_s: EmotionClassifier, cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let dim = ec_s.input_dim;
        let num_classes = ec_s.num_classes;
        let mut store = ParamStore::new();
        let gen_s2t = Generator::new(&mut store, "g_st", dim, 0, cfg, rng);
        let gen_t2s = Generator::new(&mut store, "g_ts", dim, num_classes, cfg, rng);
        let split = store.len();
        let hidden = cfg.hidden_mult * dim;
        let disc = Mlp::new(
            &mut store,
            "disc",
            &[dim, hidden, hidden, 1],
            Activation::LeakyRelu(cfg.leaky_slope),
            rng,
        );
        let gen_ids = store.ids().take(split).collect();
        let disc_ids = store.ids().skip(split).collect();
        Self {
            store,
            gen_s2t,
            gen_t2s,
            disc,
            ec_s,
            lambdas: cfg.lambdas,
            log_floor: cfg.log_floor,
            dim,
            num_classes,
            gen_ids,
            disc_ids,
        }
    }

    pub fn generator_ids(&self) -> &[ParamId] {
        &self.gen_ids
    }

    pub fn discriminator_ids(&self) -> &[ParamId] {
        &self.disc_ids
    }

    fn check(&self, batch: &GanBatch) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if batch.sources.ncols() != self.dim || batch.targets.ncols() != self.dim {
            return bad(format!("batch width differs from {}", self.dim));
        }
        if batch.sources.nrows() != batch.source_labels.len() {
            return bad("one label per source sample".into());
        }
        if batch.sources.nrows() == 0 || batch.targets.nrows() == 0 {
            return bad("empty batch".into());
        }
        if batch.target_class >= self.num_classes
            || batch.source_labels.iter().any(|&l| l >= self.num_classes)
        {
            return bad("label out of range".into());
        }
        Ok(())
    }

    pub fn discriminate(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        tape.sigmoid(self.disc.forward(tape, bound, x))
    }

    fn losses(&self, tape: &Tape, gb: &Bound, eb: &Bound, batch: &GanBatch) -> LossVars {
        let floor = self.log_floor;
        let c = self.num_classes;
        let s = tape.constant(batch.sources.clone());
        let t = tape.constant(batch.targets.clone());
        let z_k = tape.constant(one_hot_rows(&batch.source_labels, c));
        let z_r = tape.constant(one_hot_rows(
            &vec![batch.target_class; batch.targets.nrows()],
            c,
        ));
        let ec = |x: Var| self.ec_s.probs_on_tape(tape, eb, x);
        let nll_sum = |p: Var, labels: &[usize]| {
            tape.neg(tape.sum(tape.log_floor(tape.pick_cols(p, labels), floor)))
        };

        let st_s = self.gen_s2t.forward(tape, gb, s, None);
        let cycle = self.gen_t2s.forward(tape, gb, st_s, Some(z_k));
        let direct = self.gen_t2s.forward(tape, gb, s, Some(z_k));
        let l_c = tape.add(
            nll_sum(ec(cycle), &batch.source_labels),
            nll_sum(ec(direct), &batch.source_labels),
        );

        let ts_t = self.gen_t2s.forward(tape, gb, t, Some(z_r));
        let rc_labels = vec![batch.target_class; batch.targets.nrows()];
        let l_rc = nll_sum(ec(ts_t), &rc_labels);

        let d_real = self.discriminate(tape, gb, t);
        let d_fake = self.discriminate(tape, gb, st_s);
        let l_adv = tape.add(
            tape.mean(tape.log_floor(d_real, floor)),
            tape.mean(tape.log_floor(tape.add_scalar(tape.neg(d_fake), 1.0), floor)),
        );

        let st_t = self.gen_s2t.forward(tape, gb, t, None);
        let sq_mean = |a: Var, b: Var, n: usize| {
            tape.scale(tape.sum(tape.square(tape.sub(a, b))), 1.0 / n as f64)
        };
        let l_identity = tape.add(
            sq_mean(direct, s, batch.sources.nrows()),
            sq_mean(st_t, t, batch.targets.nrows()),
        );

        let Lambdas {
            identity,
            adversarial,
            classification,
        } = self.lambdas;
        let total = tape.add(
            tape.add(
                tape.scale(l_identity, identity),
                tape.scale(l_adv, adversarial),
            ),
            tape.scale(tape.add(l_c, l_rc), classification),
        );
        LossVars {
            l_c,
            l_rc,
            l_adv,
            l_identity,
            total,
        }
    }

    pub fn loss_breakdown(&self, batch: &GanBatch) -> Result<GanLossBreakdown> {
        self.check(batch)?;
        let tape = Tape::new();
        let gb = self.store.bind_frozen(&tape);
        let eb = self.ec_s.store.bind_frozen(&tape);
        let v = self.losses(&tape, &gb, &eb, batch);
        Ok(GanLossBreakdown {
            l_c: tape.scalar(v.l_c),
            l_rc: tape.scalar(v.l_rc),
            l_adv: tape.scalar(v.l_adv),
            l_identity: tape.scalar(v.l_identity),
            total: tape.scalar(v.total),
        })
    }

    /// `(l_c, l_rc)` as negated log-likelihoods.
    pub fn classification_loss(&self, batch: &GanBatch) -> Result<(f64, f64)> {
        self.loss_breakdown(batch).map(|b| (b.l_c, b.l_rc))
    }

    pub fn adversarial_loss(&self, batch: &GanBatch) -> Result<f64> {
        self.loss_breakdown(batch).map(|b| b.l_adv)
    }

    pub fn identity_loss(&self, batch: &GanBatch) -> Result<f64> {
        self.loss_breakdown(batch).map(|b| b.l_identity)
    }

    /// Gradient of the weighted total with respect to every GAN parameter.
    pub fn total_gradients(&self, batch: &GanBatch) -> Result<(f64, Vec<Matrix>)> {
        self.check(batch)?;
        let tape = Tape::new();
        let gb = self.store.bind(&tape);
        let eb = self.ec_s.store.bind_frozen(&tape);
        let v = self.losses(&tape, &gb, &eb, batch);
        let g = tape.backward(v.total);
        Ok((tape.scalar(v.total), self.store.gradients(&gb, &g)))
    }

    /// Gradients of a single term; `term` is one of `c`, `rc`, `adv`, `identity`, `total`.
    pub fn term_gradients(&self, batch: &GanBatch, term: &str) -> Result<(f64, Vec<Matrix>)> {
        self.check(batch)?;
        let tape = Tape::new();
        let gb = self.store.bind(&tape);
        let eb = self.ec_s.store.bind_frozen(&tape);
        let v = self.losses(&tape, &gb, &eb, batch);
        let target = match term {
            "c" => v.l_c,
            "rc" => v.l_rc,
            "adv" => v.l_adv,
            "identity" => v.l_identity,
            "total" => v.total,
            other => return Err(Error::InvalidSpec(format!("unknown loss term {other}"))),
        };
        let g = tape.backward(target);
        Ok((tape.scalar(target), self.store.gradients(&gb, &g)))
    }

    /// `G_ts(x, Z_class)` for every row of `x`.
    pub fn translate_to_class(&self, x: &Matrix, class: usize) -> Matrix {
        let tape = Tape::new();
        let gb = self.store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let z = tape.constant(one_hot_rows(&vec![class; x.nrows()], self.num_classes));
        let out = self.gen_t2s.forward(&tape, &gb, xv, Some(z));
        let v = tape.value(out).clone();
        v
    }
}

/// Pure forms of the loss terms over already-computed network outputs.
pub mod terms {
    use crate::tape::Matrix;

    fn nll(p: &Matrix, labels: &[usize], floor: f64) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[[i, y]].max(floor).ln())
            .sum()
    }

    /// `(l_c, l_rc)` from classifier probabilities on the cycle path, the
    /// direct path and the conditioned target path.
    pub fn classification(
        cycle_probs: &Matrix,
        direct_probs: &Matrix,
        labels: &[usize],
        rc_probs: &Matrix,
        target_class: usize,
        floor: f64,
    ) -> (f64, f64) {
        let l_c = nll(cycle_probs, labels, floor) + nll(direct_probs, labels, floor);
        let rc_labels = vec![target_class; rc_probs.nrows()];
        (l_c, nll(rc_probs, &rc_labels, floor))
    }

    /// `mean log D(T) + mean log(1 - D(fake))`.
    pub fn adversarial(d_real: &[f64], d_fake: &[f64], floor: f64) -> f64 {
        let real = d_real.iter().map(|d| d.max(floor).ln()).sum::<f64>() / d_real.len() as f64;
        let fake =
            d_fake.iter().map(|d| (1.0 - d).max(floor).ln()).sum::<f64>() / d_fake.len() as f64;
        real + fake
    }

    pub fn identity(ts_of_s: &Matrix, s: &Matrix, st_of_t: &Matrix, t: &Matrix) -> f64 {
        let sq = |a: &Matrix, b: &Matrix| (a - b).mapv(|x| x * x).sum() / a.nrows() as f64;
        sq(ts_of_s, s) + sq(st_of_t, t)
    }
}

/// Real training samples per class, kept with the trained GAN as generator inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub dims: Dims,
    pub feature_std: Vec<f64>,
}

impl SamplePool {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let features = corpus.feature_matrix();
        let feature_std = features
            .columns()
            .into_iter()
            .map(|c| c.std(0.0).max(1e-8))
            .collect();
        Self {
            features,
            labels: corpus.labels(),
            dims: corpus.dims,
            feature_std,
        }
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Mutable training state: parameters plus one Adam per player.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanState {
    pub params: GanParams,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub steps: u64,
    pub pool: SamplePool,
    pub config: GanConfig,
}

impl GanState {
    pub fn new(ec_s: EmotionClassifier, pool: SamplePool, cfg: &GanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GanParams::new(ec_s, cfg, &mut rng);
        let gen_opt = Adam::new(cfg.adam, &params.store, params.gen_ids.clone());
        let disc_opt = Adam::new(cfg.adam, &params.store, params.disc_ids.clone());
        Self {
            params,
            gen_opt,
            disc_opt,
            steps: 0,
            pool,
            config: cfg.clone(),
        }
    }

    /// Samples sources uniformly, a target class uniformly among present
    /// classes, and targets from that class with replacement.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> GanBatch {
        let n = self.pool.labels.len();
        let b = self.config.batch_size.max(1);
        let src: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let present: Vec<usize> = (0..self.params.num_classes)
            .filter(|&c| self.pool.labels.contains(&c))
            .collect();
        let r = *present.choose(rng).expect("pool is nonempty");
        let members = self.pool.indices_of(r);
        let tgt: Vec<usize> = (0..b).map(|_| *members.choose(rng).unwrap()).collect();
        GanBatch {
            sources: self.pool.features.select(ndarray::Axis(0), &src),
            source_labels: src.iter().map(|&i| self.pool.labels[i]).collect(),
            targets: self.pool.features.select(ndarray::Axis(0), &tgt),
            target_class: r,
        }
    }
}

/// One alternating update: generators descend the weighted total, then the
/// discriminator ascends it (only the adversarial term depends on it).
/// `EC_s` is bound as constants and never changes.
pub fn gan_step(state: &mut GanState, batch: &GanBatch) -> Result<()> {
    let (_, grads) = state.params.total_gradients(batch)?;
    if !all_finite(&grads) {
        return Err(Error::NonFiniteGradient("generator step".into()));
    }
    state.gen_opt.step(&mut state.params.store, &grads, false);

    let (_, grads) = state.params.total_gradients(batch)?;
    if !all_finite(&grads) {
        return Err(Error::NonFiniteGradient("discriminator step".into()));
    }
    state.disc_opt.step(&mut state.params.store, &grads, true);
    state.steps += 1;
    Ok(())
}

/// Pretrains `EC_s` on `train` and runs `cfg.steps` GAN updates.
pub fn train_gan(train: &Corpus, cfg: &GanConfig, seed: u64) -> Result<GanState> {
    let ec = pretrain_classifier(train, &cfg.classifier, seed)?;
    let pool = SamplePool::from_corpus(train);
    let mut state = GanState::new(ec, pool, cfg, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for _ in 0..cfg.steps {
        let batch = state.sample_batch(&mut rng);
        gan_step(&mut state, &batch)?;
    }
    Ok(state)
}

/// Produces exactly `counts[c]` synthetic utterances of class `c`, each
/// `G_ts(T + jitter, Z_c)` for a real sample `T` of class `c` (any class when
/// `c` has no real samples).
pub fn generate_samples(state: &GanState, counts: &[usize], seed: u64) -> Result<Vec<Utterance>> {
    if state.steps == 0 {
        return Err(Error::UntrainedGenerator);
    }
    let c = state.params.num_classes;
    if counts.len() != c {
        return Err(Error::shape(format!("{} counts for {c} classes", counts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = &state.pool;
    let all: Vec<usize> = (0..pool.labels.len()).collect();
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let members = pool.indices_of(class);
        let source = if members.is_empty() { &all } else { &members };
        let picks: Vec<usize> = (0..n).map(|_| *source.choose(&mut rng).unwrap()).collect();
        let mut x = pool.features.select(ndarray::Axis(0), &picks);
        for mut row in x.rows_mut() {
            for (v, sd) in row.iter_mut().zip(&pool.feature_std) {
                *v += state.config.jitter * sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let generated = state.params.translate_to_class(&x, class);
        for row in generated.rows() {
            let row = row.to_vec();
            out.push(split_modalities(&row, &pool.dims, class, out.len() as u64));
        }
    }
    Ok(out)
}

fn split_modalities(row: &[f64], dims: &Dims, label: usize, id: u64) -> Utterance {
    let (t, rest) = row.split_at(dims.text);
    let (a, v) = rest.split_at(dims.audio);
    Utterance {
        id,
        speaker: SpeakerId(0),
        text: FeatureVector::new(Modality::Text, t.to_vec()),
        audio: FeatureVector::new(Modality::Audio, a.to_vec()),
        visual: FeatureVector::new(Modality::Visual, v.to_vec()),
        label,
        synthetic: true,
    }
}

/// Table of synthetic sample counts per emotion for the two reference corpora.
pub const IEMOCAP_AUGMENT_COUNTS: [(&str, usize); 6] = [
    ("happy", 250),
    ("neutral", 80),
    ("sad", 120),
    ("excited", 120),
    ("angry", 250),
    ("frustrated", 80),
];

pub const MELD_AUGMENT_COUNTS: [(&str, usize); 7] = [
    ("joy", 0),
    ("neutral", 0),
    ("sadness", 60),
    ("fear", 200),
    ("anger", 60),
    ("disgust", 200),
    ("surprise", 0),
];

/// Reference corpus sizes (utterances) that the count tables were drawn for.
pub const IEMOCAP_UTTERANCES: usize = 7433;
pub const MELD_UTTERANCES: usize = 13708;

fn canonical(name: &str) -> &str {
    match name.to_ascii_lowercase().as_str() {
        "anger" | "angry" => "anger",
        "sad" | "sadness" => "sad",
        "happy" | "joy" | "happiness" => "happy",
        _ => name,
    }
}

/// Maps a named count table onto `class_names`; unmatched classes get 0.
pub fn counts_for_classes(table: &[(&str, usize)], class_names: &[String]) -> Vec<usize> {
    class_names
        .iter()
        .map(|name| {
            let key = canonical(name).to_ascii_lowercase();
            table
                .iter()
                .find(|(n, _)| canonical(n).eq_ignore_ascii_case(&key))
                .map_or(0, |(_, c)| *c)
        })
        .collect()
}

/// Scales counts by `factor`, rounding to nearest.
pub fn scale_counts(counts: &[usize], factor: f64) -> Vec<usize> {
    counts
        .iter()
        .map(|&c| (c as f64 * factor).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_classifier_gives_zero_classification_loss() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let (l_c, l_rc) = terms::classification(&p, &p, &[0, 1], &array![[0.0, 1.0]], 1, 1e-12);
        assert_eq!((l_c, l_rc), (0.0, 0.0));
    }

    #[test]
    fn uniform_classifier_over_four_classes() {
        let p = Matrix::from_elem((2, 4), 0.25);
        let (l_c, l_rc) = terms::classification(&p, &p, &[0, 3], &p, 2, 1e-12);
        let ln4 = 4f64.ln();
        assert!((l_c - 2.0 * 2.0 * ln4).abs() < 1e-12);
        assert!((l_rc - 2.0 * ln4).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = array![[0.0, 1.0]];
        let (l_c, _) = terms::classification(&p, &p, &[0], &p, 1, 1e-12);
        assert!((l_c - 2.0 * -(1e-12f64).ln()).abs() < 1e-9);
        assert!(l_c.is_finite());
    }

    #[test]
    fn adversarial_hand_cases() {
        let half = terms::adversarial(&[0.5, 0.5], &[0.5], 1e-12);
        assert!((half - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(terms::adversarial(&[1.0], &[0.0], 1e-12), 0.0);
        let v = terms::adversarial(&[0.8], &[0.3], 1e-12);
        assert!((v - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn identity_hand_cases() {
        let s = array![[1.0, 2.0, 3.0]];
        assert_eq!(terms::identity(&s, &s, &s, &s), 0.0);
        let shifted = &s + 1.0;
        assert_eq!(terms::identity(&shifted, &s, &s, &s), 3.0);
    }

    #[test]
    fn emotion_state_vector_is_one_hot() {
        let z = EmotionStateVector::new(2, 5);
        assert_eq!(z.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(z.class(), 2);
    }

    #[test]
    fn table_counts_map_by_name() {
        let iemocap: Vec<String> = crate::corpus::IEMOCAP_CLASSES
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let counts = counts_for_classes(&IEMOCAP_AUGMENT_COUNTS, &iemocap);
        assert_eq!(counts.iter().sum::<usize>(), 900);
        let meld: Vec<String> = crate::corpus::MELD_CLASSES
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let counts = counts_for_classes(&MELD_AUGMENT_COUNTS, &meld);
        assert_eq!(counts.iter().sum::<usize>(), 520);
        assert_eq!(counts[meld.iter().position(|n| n == "fear").unwrap()], 200);
    }
}
