//! Datasets, the training loop and bound sweeps over trained models.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capacity::{BoundOptions, BoundReport, BoundSelection, Flavor, NormProfile};
use crate::empirical::extract_norm_profile;
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::LossSpec;
use crate::rng;
use crate::rnn::{self, Activation, Checkpoint, Labels, RnnParams, SequenceBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SyntheticParity,
    SyntheticMajority,
    Corpus,
}

fn default_lr() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    0.25
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    20
}
fn default_loss() -> String {
    "cross_entropy".into()
}
fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub d_x: usize,
    pub d_h: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub t: usize,
    pub n: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl TrainConfig {
    pub fn synthetic(task: Task, d_x: usize, d_h: usize, k: usize, t: usize, n: usize) -> Self {
        Self {
            task,
            d_x,
            d_h,
            k,
            t,
            n,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            clip: default_clip(),
            loss: default_loss(),
            gamma: None,
            activation: default_activation(),
            seed: 0,
            corpus_path: None,
            vocab_size: None,
        }
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        LossSpec::from_name(&self.loss, self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 || self.t == 0 || self.n == 0 {
            return invalid("d_x, d_h, t and n must be positive");
        }
        if self.k < 2 {
            return invalid("K must be at least 2");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return invalid("lr must be nonnegative and clip positive");
        }
        if self.task == Task::SyntheticMajority && self.d_x < self.k {
            return invalid("majority task needs d_x >= K");
        }
        if self.task == Task::Corpus && self.corpus_path.is_none() {
            return invalid("corpus task needs corpus_path");
        }
        self.loss_spec()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn dataset(&self) -> Result<SequenceBatch> {
        self.validate()?;
        match self.task {
            Task::Corpus => ingest_corpus(
                self.corpus_path.as_deref().expect("validated"),
                self.vocab_size.unwrap_or(1000),
                self.d_x,
                self.t,
                self.n,
                self.k,
                self.seed,
            ),
            task => synth_dataset(task, self.n, self.t, self.d_x, self.k, self.seed),
        }
    }
}

/// Synthetic sequence classification data with unit-norm inputs.
///
/// Parity: each step is `±e_j`; the label is the number of negative steps mod `K`.
/// Majority: each step is `e_c` for a class `c < K`; the label is the most
/// frequent class, ties going to the lowest index.
pub fn synth_dataset(task: Task, n: usize, t: usize, d_x: usize, k: usize, seed: u64) -> Result<SequenceBatch> {
    if n == 0 || t == 0 || d_x == 0 || k < 2 {
        return invalid("synth_dataset needs positive n, t, d_x and K >= 2");
    }
    let rng = &mut rng::stream(seed, &[0x50]);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match task {
        Task::SyntheticParity => {
            for _ in 0..n {
                let mut negatives = 0;
                let seq = (0..t)
                    .map(|_| {
                        let mut x = vec![0.0; d_x];
                        let neg = rng.random::<bool>();
                        negatives += neg as usize;
                        x[rng.random_range(0..d_x)] = if neg { -1.0 } else { 1.0 };
                        x
                    })
                    .collect();
                inputs.push(seq);
                labels.push(negatives % k);
            }
        }
        Task::SyntheticMajority => {
            if d_x < k {
                return invalid("majority task needs d_x >= K");
            }
            for _ in 0..n {
                let mut counts = vec![0usize; k];
                let seq = (0..t)
                    .map(|_| {
                        let c = rng.random_range(0..k);
                        counts[c] += 1;
                        let mut x = vec![0.0; d_x];
                        x[c] = 1.0;
                        x
                    })
                    .collect();
                let top = counts.iter().copied().max().unwrap();
                inputs.push(seq);
                labels.push(counts.iter().position(|&c| c == top).unwrap());
            }
        }
        Task::Corpus => return invalid("corpus data comes from ingest_corpus"),
    }
    SequenceBatch::new(inputs, Labels::Terminal(labels), 1.0)
}

/// Sliding windows over a whitespace-tokenized text file.
///
/// The `vocab_size` most frequent tokens are kept and everything else maps to
/// an UNK token. Each token id gets a fixed seeded unit vector. A window's
/// label is the frequency-rank bucket (out of `k`) of the token that follows it.
pub fn ingest_corpus(
    path: &Path,
    vocab_size: usize,
    d_x: usize,
    t: usize,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    if vocab_size == 0 || d_x == 0 || t == 0 || n == 0 || k < 2 {
        return invalid("ingest_corpus needs positive sizes and K >= 2");
    }
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Data(format!("{} contains no tokens", path.display())));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &tokens {
        *counts.entry(tok).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(vocab_size);
    let vocab: HashMap<&str, usize> = ranked.iter().enumerate().map(|(i, (tok, _))| (*tok, i)).collect();
    let unk = vocab.len();
    let ids: Vec<usize> = tokens
        .iter()
        .map(|tok| vocab.get(tok).copied().unwrap_or(unk))
        .collect();
    let embeddings: Vec<Vec<f64>> = (0..=unk)
        .map(|id| rng::unit_vec(&mut rng::stream(seed, &[0x51, id as u64]), d_x))
        .collect();
    let available = ids.len().saturating_sub(t);
    if available < n {
        return Err(Error::Data(format!(
            "{} yields {available} windows of length {t}, need {n}",
            path.display()
        )));
    }
    let buckets = unk + 1;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for start in 0..n {
        inputs.push(ids[start..start + t].iter().map(|&id| embeddings[id].clone()).collect());
        labels.push(ids[start + t] * k / buckets);
    }
    SequenceBatch::new(inputs, Labels::Terminal(labels), 1.0)
}

/// SHA-256 over the shape, labels and exact input bits of a batch.
pub fn batch_hash(batch: &SequenceBatch) -> String {
    let mut h = Sha256::new();
    for v in [batch.n(), batch.t(), batch.d_x()] {
        h.update((v as u64).to_le_bytes());
    }
    for x in batch.inputs().iter().flatten().flatten() {
        h.update(x.to_bits().to_le_bytes());
    }
    match batch.labels() {
        Labels::Terminal(z) => z.iter().for_each(|z| h.update((*z as u64).to_le_bytes())),
        Labels::PerStep(z) => z.iter().flatten().for_each(|z| h.update((*z as u64).to_le_bytes())),
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub epoch: usize,
    pub risk: f64,
    #[serde(rename = "B_U")]
    pub b_u: f64,
    #[serde(rename = "M_U")]
    pub m_u: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: RnnParams,
    /// Checkpoints for epochs 0 (initialization) through `epochs`.
    pub checkpoints: Vec<Checkpoint>,
    /// Training risk per epoch, starting with the initial model.
    pub loss_curve: Vec<f64>,
    pub data: SequenceBatch,
}

/// Uniform `±1/√d_h` initialization.
pub fn init_params(d_x: usize, d_h: usize, d_y: usize, activation: Activation, seed: u64) -> RnnParams {
    let rng = &mut rng::stream(seed, &[0x52]);
    let a = 1.0 / (d_h as f64).sqrt();
    let mut m = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-a..=a)).collect();
        Matrix::from_vec(r, c, data).expect("finite init")
    };
    let u = m(d_h, d_h);
    let w = m(d_h, d_x);
    let v = m(d_y, d_h);
    RnnParams { u, w, v, activation }
}

/// Minibatch SGD with gradient clipping, logging one event per epoch.
pub fn train(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochEvent)) -> Result<TrainResult> {
    let data = cfg.dataset()?;
    train_on(cfg, data, &mut on_epoch)
}

pub fn train_on(cfg: &TrainConfig, data: SequenceBatch, on_epoch: &mut dyn FnMut(&EpochEvent)) -> Result<TrainResult> {
    cfg.validate()?;
    let loss = cfg.loss_spec()?;
    if data.d_x() != cfg.d_x {
        return Err(Error::Shape(format!(
            "data d_x {} vs config d_x {}",
            data.d_x(),
            cfg.d_x
        )));
    }
    let start = Instant::now();
    let mut params = init_params(cfg.d_x, cfg.d_h, cfg.k, cfg.activation, cfg.seed);
    let mut checkpoints = Vec::with_capacity(cfg.epochs + 1);
    let mut loss_curve = Vec::with_capacity(cfg.epochs + 1);
    let mut record = |epoch: usize, params: &RnnParams, curve: &mut Vec<f64>| -> Result<()> {
        let risk = rnn::empirical_risk(params, &data, &loss)?;
        if !risk.is_finite() {
            return Err(Error::NonFinite(format!("training risk at epoch {epoch}")));
        }
        curve.push(risk);
        checkpoints.push(Checkpoint::from_params(params, cfg.seed, epoch));
        on_epoch(&EpochEvent {
            epoch,
            risk,
            b_u: linalg::frobenius_norm(&params.u),
            m_u: linalg::spectral_norm_default(&params.u)?,
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
        Ok(())
    };
    record(0, &params, &mut loss_curve)?;
    let mut order: Vec<usize> = (0..data.n()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0x53, epoch as u64]));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mb = data.subset(idx);
            let (risk, g) = rnn::risk_and_gradient(&params, &mb, &loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, minibatch {b}: {m}")),
                e => e,
            })?;
            if !risk.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, minibatch {b}")));
            }
            params = rnn::clip_and_step(&params, &g, cfg.lr, cfg.clip)?;
        }
        record(epoch, &params, &mut loss_curve)?;
    }
    Ok(TrainResult {
        params,
        checkpoints,
        loss_curve,
        data,
    })
}

fn default_delta() -> f64 {
    0.01
}
fn default_bounds() -> String {
    "all".into()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label written to the `dataset` column.
    pub dataset: String,
    /// Base training setup; `t`, `n` and `activation` are overridden per sweep point.
    pub train: TrainConfig,
    pub t_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default = "default_bounds")]
    pub bounds: String,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub flavor: Flavor,
    #[serde(default = "default_true")]
    pub imp_per: bool,
    #[serde(default)]
    pub output_csv: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_values.is_empty() || self.n_values.is_empty() || self.activations.is_empty() {
            return invalid("sweep lists must be nonempty");
        }
        BoundSelection::parse(&self.bounds)?;
        self.train.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Sweep points in row order: activation, then t, then n.
    pub fn points(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &activation in &self.activations {
            for &t in &self.t_values {
                for &n in &self.n_values {
                    out.push(TrainConfig {
                        t,
                        n,
                        activation,
                        ..self.train.clone()
                    });
                }
            }
        }
        out
    }
}

/// Bound report for a trained model on its training data.
pub fn report_for_model(
    dataset: &str,
    params: &RnnParams,
    data: &SequenceBatch,
    loss: &LossSpec,
    opts: &BoundOptions,
) -> Result<(NormProfile, BoundReport)> {
    let profile = extract_norm_profile(params, data)?;
    let risk = rnn::empirical_risk(params, data, loss)?;
    let opts = BoundOptions {
        empirical_risk: risk,
        ..*opts
    };
    let report = BoundReport::compute(dataset, &profile, data.t(), data.n(), loss, &opts)?;
    Ok((profile, report))
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub config: TrainConfig,
    pub result: TrainResult,
    pub profile: NormProfile,
    pub report: BoundReport,
}

/// Trains every sweep point (in parallel) and evaluates the bounds on the final model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let opts = BoundOptions {
        delta: cfg.delta,
        flavor: cfg.flavor,
        which: BoundSelection::parse(&cfg.bounds)?,
        ..BoundOptions::default()
    };
    cfg.points()
        .into_par_iter()
        .map(|point| {
            let result = train(&point, |_| {})?;
            let loss = point.loss_spec()?;
            let (profile, report) = report_for_model(&cfg.dataset, &result.params, &result.data, &loss, &opts)?;
            Ok(SweepPoint {
                config: point,
                result,
                profile,
                report,
            })
        })
        .collect()
}

/// One report per labelled profile, all evaluated at the same `(t, n)`.
pub fn compare_profiles(
    profiles: &[(String, NormProfile)],
    t: usize,
    n: usize,
    loss: &LossSpec,
    opts: &BoundOptions,
) -> Result<Vec<BoundReport>> {
    profiles
        .iter()
        .map(|(label, p)| BoundReport::compute(label, p, t, n, loss, opts))
        .collect()
}
