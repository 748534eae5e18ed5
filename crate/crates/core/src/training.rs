//! Two-phase protocol: autoencoder pretraining with an optional invariance
//! regularizer, then supervised fine-tuning of encoder and classifier with
//! an optional triplet term. Also the multi-trial runner, the
//! person-specific protocol and a domain probe on frozen latents.
//!
//! Every random choice draws from a named stream of the trial seed (see
//! [`crate::rng::stream`]), so toggling one term never perturbs the
//! shuffling or initialization seen by another.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, DomainTarget, KernelConfig, PretrainMode, TripletIndex};
use crate::models::{self, ModelParams, ModelSpec, Part, Preset};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub pretrain_mode: PretrainMode,
    pub lambda_mmd: f64,
    /// Weight of the domain loss; its adversarial sign comes from the
    /// gradient reversal layer.
    pub lambda_domain: f64,
    pub grl_scale: f64,
    pub kernel: KernelConfig,
    pub finetune_triplet: bool,
    pub lambda_triplet: f64,
    pub triplet_margin: f64,
    pub freeze_encoder: bool,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            pretrain_mode: PretrainMode::None,
            lambda_mmd: 0.2,
            lambda_domain: 1.0,
            grl_scale: 1.0,
            kernel: KernelConfig::default(),
            finetune_triplet: false,
            lambda_triplet: 0.2,
            triplet_margin: 1.0,
            freeze_encoder: false,
            trials: 10,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults with the batch size used for `preset` (256 for apnea).
    pub fn for_preset(preset: Preset) -> Self {
        let mut c = Self::default();
        if preset == Preset::Apnea {
            c.batch_size = 256;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(invalid("training config", String::from(what)))
            }
        };
        check(self.epochs > 0, "epochs must be positive")?;
        check(self.batch_size > 0, "batch size must be positive")?;
        check(self.trials > 0, "trials must be positive")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive",
        )?;
        check(
            self.triplet_margin > 0.0 && self.triplet_margin.is_finite(),
            "triplet margin must be positive",
        )?;
        check(
            [self.lambda_mmd, self.lambda_domain, self.lambda_triplet, self.grl_scale]
                .iter()
                .all(|v| v.is_finite()),
            "coefficients must be finite",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_epsilon > 0.0,
            "adam betas must lie in [0, 1) and epsilon must be positive",
        )?;
        Ok(())
    }

    /// The configuration used by trial `t`: seed offset by `t`.
    pub fn for_trial(&self, t: usize) -> Self {
        let mut c = self.clone();
        c.seed = self.seed.wrapping_add(t as u64);
        c
    }
}

/// Adam or plain SGD over a flat list of tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: &TrainingConfig, sizes: &[usize]) -> Self {
        Self::with_rate(config, config.learning_rate, sizes)
    }

    pub fn with_rate(config: &TrainingConfig, lr: f64, sizes: &[usize]) -> Self {
        Self {
            kind: config.optimizer,
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_epsilon,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates `params[i]` with `grads[i]` where `active[i]` holds and a
    /// gradient exists.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], active: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, f64::from(self.step));
        let bc2 = 1.0 - libm::pow(self.beta2, f64::from(self.step));
        for (i, p) in params.into_iter().enumerate() {
            let (Some(g), true) = (&grads[i], active[i]) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
                    }
                }
            }
        }
    }
}

fn sizes(params: &ModelParams) -> Vec<usize> {
    params.tensors().iter().map(|t| t.len()).collect()
}

/// Mean losses of one pretraining epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub recon: f64,
    /// Pairwise latent MMD; tracked in every mode.
    pub mmd: f64,
    /// Domain loss; zero unless the mode is `dann`.
    pub domain: f64,
    pub total: f64,
}

/// Mean losses of one fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub classification: f64,
    /// Mean triplet loss over mined triplets; tracked even when the term
    /// is not optimized.
    pub triplet: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

fn subject_count(set: &[usize]) -> usize {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len()
}

fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Autoencoder pretraining of encoder and decoder (and the domain head in
/// `dann` mode).
pub fn pretrain(params: &mut ModelParams, data: &Dataset, config: &TrainingConfig) -> Result<Vec<PretrainEpoch>> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("pretrain", "empty dataset"));
    }
    let subjects = data.subject_indices();
    let n_subjects = data.subjects().len();
    let mode = config.pretrain_mode;
    if mode != PretrainMode::None && n_subjects < 2 {
        return Err(invalid(
            "pretrain",
            format!("mode {} needs at least 2 subjects", mode.name()),
        ));
    }
    if mode == PretrainMode::Dann && params.spec.n_domains() != n_subjects {
        return Err(invalid(
            "pretrain",
            format!(
                "domain head has {} outputs for {n_subjects} subjects",
                params.spec.n_domains()
            ),
        ));
    }
    let active: Vec<bool> = params
        .parts()
        .iter()
        .map(|p| match p {
            Part::Encoder | Part::Decoder => true,
            Part::DomainHead => mode == PretrainMode::Dann,
            Part::Classifier => false,
        })
        .collect();
    let mut rng = Rng::with_stream(config.seed, stream::PRETRAIN_SHUFFLE);
    let mut opt = Optimizer::new(config, &sizes(params));
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), &mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch_subjects: Vec<usize> = rows.iter().map(|&r| subjects[r]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.leaf(data.batch(rows)?);
            let e = models::encode(&mut g, params, &bound, x)?;
            let x_hat = models::decode(&mut g, params, &bound, e)?;
            let recon = losses::recon_loss(&mut g, x, x_hat)?;
            let mmd = if mode == PretrainMode::Mmd || subject_count(&batch_subjects) >= 2 {
                Some(losses::mmd_pairwise(&mut g, e, &batch_subjects, &config.kernel)?)
            } else {
                None
            };
            let domain = if mode == PretrainMode::Dann {
                let reversed = losses::gradient_reversal(&mut g, e, config.grl_scale);
                let d_hat = models::classify_domain(&mut g, params, &bound, reversed)?;
                let targets = DomainTarget::batch(&batch_subjects, n_subjects)?;
                Some(losses::domain_loss(&mut g, d_hat, &targets)?)
            } else {
                None
            };
            let (reg, lambda) = match mode {
                PretrainMode::None => (None, 0.0),
                PretrainMode::Mmd => (mmd, config.lambda_mmd),
                PretrainMode::Dann => (domain, config.lambda_domain),
            };
            let total = losses::combined_pretrain_loss(&mut g, recon, reg, mode, lambda)?;
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let row = [g.value(recon).item(), val(mmd), val(domain), g.value(total).item()];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    phase: "pretrain",
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
            batches += 1;
            let grads = g.backward(total)?;
            let flat = bound.gradients(&grads);
            opt.step(params.tensors_mut(), &flat, &active);
        }
        let n = batches as f64;
        history.push(PretrainEpoch {
            epoch: epoch + 1,
            recon: sums[0] / n,
            mmd: sums[1] / n,
            domain: sums[2] / n,
            total: sums[3] / n,
        });
    }
    Ok(history)
}

/// For each anchor, one uniformly drawn positive (same label, not the
/// anchor) and one uniformly drawn negative. Anchors lacking either are
/// skipped.
pub fn sample_triplets(labels: &[u8], rng: &mut Rng) -> Vec<TripletIndex> {
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let p = pos[rng.index(pos.len())];
        let n = neg[rng.index(neg.len())];
        out.push((a, p, n));
    }
    out
}

/// Supervised fine-tuning of encoder and classifier head.
pub fn finetune(params: &mut ModelParams, data: &Dataset, config: &TrainingConfig) -> Result<Vec<FinetuneEpoch>> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("finetune", "empty dataset"));
    }
    let labels = data.labels();
    let active: Vec<bool> = params
        .parts()
        .iter()
        .map(|p| match p {
            Part::Classifier => true,
            Part::Encoder => !config.freeze_encoder,
            Part::Decoder | Part::DomainHead => false,
        })
        .collect();
    let mut rng = Rng::with_stream(config.seed, stream::FINETUNE_SHUFFLE);
    let mut mining = Rng::with_stream(config.seed, stream::TRIPLETS);
    let mut opt = Optimizer::new(config, &sizes(params));
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), &mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch_labels: Vec<u8> = rows.iter().map(|&r| labels[r]).collect();
            let triples = sample_triplets(&batch_labels, &mut mining);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.leaf(data.batch(rows)?);
            let e = models::encode(&mut g, params, &bound, x)?;
            let p = models::classify(&mut g, params, &bound, e)?;
            let cls = losses::classification_loss(&mut g, p, &batch_labels)?;
            let trip = if triples.is_empty() {
                if config.finetune_triplet {
                    log::warn!(
                        "finetune: epoch {} batch {} has one class; triplet term skipped",
                        epoch + 1,
                        b + 1
                    );
                }
                None
            } else {
                Some(losses::triplet_loss(&mut g, e, &triples, config.triplet_margin)?)
            };
            let total = match (config.finetune_triplet, trip) {
                (true, Some(t)) => {
                    let w = g.scale(t, config.lambda_triplet);
                    g.add(cls, w)?
                }
                _ => cls,
            };
            let row = [
                g.value(cls).item(),
                trip.map_or(0.0, |t| g.value(t).item()),
                g.value(total).item(),
            ];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    phase: "finetune",
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            correct += g
                .value(p)
                .data()
                .iter()
                .zip(&batch_labels)
                .filter(|(&prob, &y)| predict(prob) == y)
                .count();
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
            batches += 1;
            let grads = g.backward(total)?;
            let flat = bound.gradients(&grads);
            opt.step(params.tensors_mut(), &flat, &active);
        }
        let n = batches as f64;
        history.push(FinetuneEpoch {
            epoch: epoch + 1,
            classification: sums[0] / n,
            triplet: sums[1] / n,
            total: sums[2] / n,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

/// Decision rule: probability `>= 0.5` is class 1.
pub fn predict(prob: f64) -> u8 {
    u8::from(prob >= 0.5)
}

const EVAL_CHUNK: usize = 256;

/// Latent codes `[n, latent_dim]` of every sample.
pub fn latents(params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let d = params.spec.latent_dim;
    let mut out = Vec::with_capacity(data.len() * d);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        out.extend_from_slice(params.encode_tensor(&data.batch(chunk)?)?.data());
    }
    Tensor::matrix(data.len(), d, out)
}

pub fn predictions(params: &ModelParams, data: &Dataset) -> Result<Vec<u8>> {
    let e = latents(params, data)?;
    let probs = params.classify_tensor(&e)?;
    Ok(probs.data().iter().map(|&p| predict(p)).collect())
}

pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<f64> {
    crate::analysis::accuracy(&predictions(params, data)?, &data.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_index: usize,
    pub seed: u64,
    pub pretrain: Vec<PretrainEpoch>,
    pub finetune: Vec<FinetuneEpoch>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean_accuracy: f64,
    /// Population standard deviation over trials.
    pub sd_accuracy: f64,
    pub trials: Vec<TrialReport>,
}

pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Merges trials in trial-index order.
pub fn aggregate(mut trials: Vec<TrialReport>) -> AggregateReport {
    trials.sort_by_key(|t| t.trial_index);
    let accs: Vec<f64> = trials.iter().map(|t| t.test_accuracy).collect();
    let (mean_accuracy, sd_accuracy) = mean_and_sd(&accs);
    AggregateReport {
        mean_accuracy,
        sd_accuracy,
        trials,
    }
}

/// Builds a model for `train`'s subjects and pretrains it with trial `t`'s seed.
pub fn pretrain_trial(
    spec: &ModelSpec,
    train: &Dataset,
    config: &TrainingConfig,
    t: usize,
) -> Result<(ModelParams, Vec<PretrainEpoch>)> {
    let cfg = config.for_trial(t);
    let spec = spec.with_domains(train.subjects().len().max(1));
    let mut params = models::build(&spec, cfg.seed)?;
    let history = pretrain(&mut params, train, &cfg)?;
    Ok((params, history))
}

/// Fine-tunes pretrained parameters and scores the held-out split.
pub fn finetune_trial(
    mut params: ModelParams,
    pretrain_history: Vec<PretrainEpoch>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
    t: usize,
) -> Result<(ModelParams, TrialReport)> {
    let cfg = config.for_trial(t);
    let finetune_history = finetune(&mut params, train, &cfg)?;
    let report = TrialReport {
        trial_index: t,
        seed: cfg.seed,
        pretrain: pretrain_history,
        finetune: finetune_history,
        train_accuracy: evaluate(&params, train)?,
        test_accuracy: evaluate(&params, test)?,
    };
    Ok((params, report))
}

pub fn run_trial(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
    t: usize,
) -> Result<TrialReport> {
    let (params, history) = pretrain_trial(spec, train, config, t)?;
    Ok(finetune_trial(params, history, train, test, config, t)?.1)
}

/// Runs `config.trials` trials sequentially; trial `t` uses seed `seed + t`.
pub fn run_trials(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
) -> Result<AggregateReport> {
    config.validate()?;
    let trials = (0..config.trials)
        .map(|t| run_trial(spec, train, test, config, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(trials))
}

/// Fraction of each subject's samples held out by [`person_specific`].
pub const PERSON_SPECIFIC_TEST_FRACTION: f64 = 0.3;

/// Stratified split of row indices into `(train, test)`.
pub fn stratified_split(labels: &[u8], test_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let n_test = libm::round(idx.len() as f64 * test_fraction) as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if test.is_empty() && train.len() > 1 {
        test.push(train.pop().unwrap());
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpecificReport {
    pub trial_index: usize,
    pub seed: u64,
    pub per_subject: Vec<(String, f64)>,
    pub mean_accuracy: f64,
}

/// Trains one model per subject on a stratified 70/30 split of that
/// subject's samples and averages the held-out accuracies (unweighted).
pub fn person_specific(
    spec: &ModelSpec,
    data: &Dataset,
    config: &TrainingConfig,
    t: usize,
) -> Result<PersonSpecificReport> {
    let mut cfg = config.for_trial(t);
    cfg.pretrain_mode = PretrainMode::None;
    cfg.finetune_triplet = false;
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, stream::SPLIT);
    let spec = spec.with_domains(1);
    let mut per_subject = Vec::new();
    for id in data.subjects() {
        let sub = data.subject(&id);
        if sub.len() < 4 {
            return Err(invalid(
                "person_specific",
                format!("subject {id} has {} samples; need 4", sub.len()),
            ));
        }
        let labels = sub.labels();
        let (tr, te) = stratified_split(&labels, PERSON_SPECIFIC_TEST_FRACTION, &mut rng);
        let pick = |rows: &[usize]| Dataset::new(rows.iter().map(|&r| sub.samples[r].clone()).collect());
        let (train, test) = (pick(&tr), pick(&te));
        if subject_count(&train.labels().iter().map(|&l| usize::from(l)).collect::<Vec<_>>()) < 2 {
            log::warn!("person_specific: subject {id} has a single class in its training portion");
        }
        let mut params = models::build(&spec, cfg.seed)?;
        pretrain(&mut params, &train, &cfg)?;
        finetune(&mut params, &train, &cfg)?;
        per_subject.push((id, evaluate(&params, &test)?));
    }
    let accs: Vec<f64> = per_subject.iter().map(|(_, a)| *a).collect();
    Ok(PersonSpecificReport {
        trial_index: t,
        seed: cfg.seed,
        mean_accuracy: mean_and_sd(&accs).0,
        per_subject,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            hidden: 16,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a freshly trained two-layer subject classifier on
/// frozen latents (`[n, D]`, row `i` from subject `subjects[i]`).
///
/// Features are standardized with the training portion's statistics, so
/// the score does not depend on the latent scale.
pub fn domain_probe_accuracy(latents: &Tensor, subjects: &[usize], probe: &ProbeConfig) -> Result<f64> {
    let [n, d] = *latents.shape() else {
        return Err(invalid("domain_probe", "latents must be [n, D]"));
    };
    if subjects.len() != n {
        return Err(invalid("domain_probe", "one subject index per latent row"));
    }
    let n_subjects = subjects.iter().max().map_or(0, |m| m + 1);
    if n_subjects < 2 {
        return Err(invalid("domain_probe", "need at least two subjects"));
    }
    let mut rng = Rng::with_stream(probe.seed, stream::PROBE);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, rows) in losses::group_rows(subjects) {
        let _ = s;
        let mut rows = rows;
        rng.shuffle(&mut rows);
        let n_test = (libm::round(rows.len() as f64 * probe.test_fraction) as usize).min(rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    if test.is_empty() {
        return Err(invalid("domain_probe", "no held-out rows"));
    }
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &r in &train {
        for k in 0..d {
            mean[k] += latents.row(r)[k] / train.len() as f64;
        }
    }
    for &r in &train {
        for k in 0..d {
            let c = latents.row(r)[k] - mean[k];
            sd[k] += c * c / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(libm::sqrt).collect();
    let standardize = |rows: &[usize]| -> Result<Tensor> {
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for k in 0..d {
                let v = latents.row(r)[k] - mean[k];
                out.push(if sd[k] > 1e-12 { v / sd[k] } else { 0.0 });
            }
        }
        Tensor::matrix(rows.len(), d, out)
    };
    let (xtr, xte) = (standardize(&train)?, standardize(&test)?);
    let ytr: Vec<usize> = train.iter().map(|&r| subjects[r]).collect();
    let targets = DomainTarget::batch(&ytr, n_subjects)?;

    let mut init = Rng::with_stream(probe.seed, stream::INIT);
    let glorot = |rng: &mut Rng, rows: usize, cols: usize| {
        let lim = libm::sqrt(6.0 / (rows + cols) as f64);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(-lim, lim)).collect()).unwrap()
    };
    let mut weights = vec![
        glorot(&mut init, probe.hidden, d),
        Tensor::zeros(&[probe.hidden]),
        glorot(&mut init, n_subjects, probe.hidden),
        Tensor::zeros(&[n_subjects]),
    ];
    let forward = |g: &mut Graph, w: &[Var], x: Var| -> Result<Var> {
        let h = g.dense(x, w[0], w[1])?;
        let h = g.relu(h);
        let logits = g.dense(h, w[2], w[3])?;
        Ok(g.softmax(logits))
    };
    let cfg = TrainingConfig::default();
    let sizes: Vec<usize> = weights.iter().map(Tensor::len).collect();
    let mut opt = Optimizer::with_rate(&cfg, probe.learning_rate, &sizes);
    for _ in 0..probe.epochs {
        let mut g = Graph::new();
        let w: Vec<Var> = weights.iter().map(|t| g.leaf(t.clone())).collect();
        let x = g.leaf(xtr.clone());
        let p = forward(&mut g, &w, x)?;
        let loss = losses::domain_loss(&mut g, p, &targets)?;
        let grads = g.backward(loss)?;
        let flat: Vec<Option<Tensor>> = w.iter().map(|&v| grads.get(v).cloned()).collect();
        opt.step(weights.iter_mut().collect(), &flat, &[true; 4]);
    }
    let mut g = Graph::new();
    let w: Vec<Var> = weights.iter().map(|t| g.leaf(t.clone())).collect();
    let x = g.leaf(xte);
    let p = forward(&mut g, &w, x)?;
    let probs = g.value(p);
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(i, &r)| {
            let row = probs.row(i);
            let best = (0..n_subjects).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == subjects[r]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainingConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.trials), (100, 32, 10));
        assert_eq!((c.learning_rate, c.lambda_mmd, c.lambda_triplet), (0.001, 0.2, 0.2));
        assert_eq!(TrainingConfig::for_preset(Preset::Apnea).batch_size, 256);
        assert_eq!(TrainingConfig::for_preset(Preset::Clas).batch_size, 32);
    }

    #[test]
    fn triplet_sampling_cases() {
        let mut rng = Rng::new(1);
        let t = sample_triplets(&[0, 1], &mut rng);
        assert!(t.len() <= 2);
        assert!(sample_triplets(&[0, 0, 0], &mut rng).is_empty());
        let labels = [0u8, 0, 1, 1];
        for _ in 0..50 {
            let t = sample_triplets(&labels, &mut rng);
            assert_eq!(t.len(), 4);
            for (a, p, n) in t {
                assert_ne!(a, p);
                assert_eq!(labels[a], labels[p]);
                assert_ne!(labels[a], labels[n]);
            }
        }
    }

    #[test]
    fn population_sd() {
        assert_eq!(mean_and_sd(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_and_sd(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn stratified_split_keeps_classes() {
        let labels = [0u8, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let (tr, te) = stratified_split(&labels, 0.3, &mut Rng::new(2));
        assert_eq!(tr.len() + te.len(), 10);
        assert_eq!(te.iter().filter(|&&i| labels[i] == 1).count(), 1);
        assert_eq!(te.iter().filter(|&&i| labels[i] == 0).count(), 2);
    }

    fn tiny() -> (ModelSpec, Dataset) {
        let cfg = SynthConfig {
            n_subjects: 3,
            samples_per_subject: 8,
            length: 16,
            seed: 4,
            ..Default::default()
        };
        let data = synth_generate(&cfg).unwrap().normalized();
        (ModelSpec::preset(Preset::Clas, 16, 3).unwrap(), data)
    }

    #[test]
    fn pretrain_records_every_epoch() {
        let (spec, data) = tiny();
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        for mode in [PretrainMode::None, PretrainMode::Mmd, PretrainMode::Dann] {
            let mut p = models::build(&spec, 1).unwrap();
            let h = pretrain(
                &mut p,
                &data,
                &TrainingConfig {
                    pretrain_mode: mode,
                    ..cfg.clone()
                },
            )
            .unwrap();
            assert_eq!(h.len(), 3);
            assert_eq!(h.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
            assert!(p.is_finite());
        }
    }

    #[test]
    fn dann_needs_matching_domain_head() {
        let (spec, data) = tiny();
        let mut p = models::build(&spec.with_domains(5), 1).unwrap();
        let cfg = TrainingConfig {
            epochs: 1,
            pretrain_mode: PretrainMode::Dann,
            ..Default::default()
        };
        assert!(pretrain(&mut p, &data, &cfg).is_err());
    }

    #[test]
    fn nan_loss_names_epoch_and_batch() {
        let (spec, mut data) = tiny();
        data.samples[0].series.data_mut()[0] = f64::NAN;
        let mut p = models::build(&spec, 1).unwrap();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 100,
            ..Default::default()
        };
        assert_eq!(
            pretrain(&mut p, &data, &cfg),
            Err(Error::Diverged {
                phase: "pretrain",
                epoch: 1,
                batch: 1
            })
        );
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let (spec, data) = tiny();
        let mut p = models::build(&spec, 1).unwrap();
        let before = p.encoder.clone();
        let cfg = TrainingConfig {
            epochs: 2,
            freeze_encoder: true,
            ..Default::default()
        };
        finetune(&mut p, &data, &cfg).unwrap();
        assert_eq!(p.encoder, before);
        let cfg = TrainingConfig {
            freeze_encoder: false,
            ..cfg
        };
        finetune(&mut p, &data, &cfg).unwrap();
        assert_ne!(p.encoder, before);
    }

    #[test]
    fn single_trial_has_zero_sd() {
        let (spec, data) = tiny();
        let ids = data.subjects();
        let (train, test) = crate::data::split_by_subject(&data, &ids[..2]).unwrap();
        let cfg = TrainingConfig {
            epochs: 2,
            trials: 1,
            ..Default::default()
        };
        let r = run_trials(&spec, &train, &test, &cfg).unwrap();
        assert_eq!(r.sd_accuracy, 0.0);
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r, run_trials(&spec, &train, &test, &cfg).unwrap());
    }

    #[test]
    fn probe_finds_separable_subjects() {
        let mut rng = Rng::new(3);
        let mut rows = Vec::new();
        let mut subj = Vec::new();
        for s in 0..3 {
            for _ in 0..20 {
                rows.extend((0..4).map(|k| if k == s { 5.0 } else { 0.0 } + rng.normal(0.0, 0.1)));
                subj.push(s);
            }
        }
        let lat = Tensor::matrix(60, 4, rows).unwrap();
        let acc = domain_probe_accuracy(&lat, &subj, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}
