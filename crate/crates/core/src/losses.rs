//! Objective terms: reconstruction, kernel MMD between subjects, domain
//! classification behind gradient reversal, triplet hinge, and binary
//! cross-entropy.
//!
//! Every term is a graph node with a hand-written backward rule. Value-only
//! helpers for the same terms live in [`value`].

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Function, Graph, Var};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Bandwidth of the Gaussian RBF kernel `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Explicit `sigma > 0`.
    Fixed(f64),
    /// `sigma^2 = median(pairwise squared distances of the pooled sample) / 2`.
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    /// Resolves `sigma^2` for the pooled rows of `a` and `b`.
    ///
    /// The median-heuristic bandwidth is treated as a constant by the
    /// backward pass.
    pub fn sigma_squared(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(sigma) if sigma > 0.0 && sigma.is_finite() => Ok(sigma * sigma),
            Bandwidth::Fixed(sigma) => Err(invalid("kernel", alloc::format!("bandwidth {sigma} must be positive"))),
            Bandwidth::MedianHeuristic => Ok(median_heuristic(a, b)),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn median_heuristic(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.shape()[0])
        .map(|i| a.row(i))
        .chain((0..b.shape()[0]).map(|j| b.row(j)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_unstable_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if median > 0.0 && median.is_finite() {
        median / 2.0
    } else {
        1.0
    }
}

fn as_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, d] => Ok((m, d)),
        _ => Err(invalid(
            op,
            alloc::format!("expected [rows, width], got {:?}", t.shape()),
        )),
    }
}

struct Mse;

impl Function for Mse {
    fn name(&self) -> &'static str {
        "recon_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, y) = (inputs[0], inputs[1]);
        let n = x.len() as f64;
        let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(Tensor::scalar(s / n))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, y) = (inputs[0], inputs[1]);
        let c = 2.0 * grad.item() / x.len() as f64;
        let gx = x.zip_map(y, |a, b| c * (a - b));
        let gy = gx.map(|v| -v);
        vec![gx, gy]
    }
}

/// Mean squared error over all elements of `x` and `x_hat`.
pub fn recon_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let (a, b) = (g.value(x), g.value(x_hat));
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    g.custom(&[x, x_hat], Box::new(Mse))
}

/// Biased squared-MMD estimator with a fixed `sigma^2`, clamped at zero.
struct Mmd {
    sigma2: f64,
}

impl Mmd {
    fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        libm::exp(-sq_dist(x, y) / (2.0 * self.sigma2))
    }

    fn raw(&self, a: &Tensor, b: &Tensor) -> f64 {
        let (m, n) = (a.shape()[0], b.shape()[0]);
        let mut kaa = 0.0;
        for i in 0..m {
            for j in 0..m {
                kaa += self.kernel(a.row(i), a.row(j));
            }
        }
        let mut kbb = 0.0;
        for i in 0..n {
            for j in 0..n {
                kbb += self.kernel(b.row(i), b.row(j));
            }
        }
        let mut kab = 0.0;
        for i in 0..m {
            for j in 0..n {
                kab += self.kernel(a.row(i), b.row(j));
            }
        }
        let (mf, nf) = (m as f64, n as f64);
        kaa / (mf * mf) + kbb / (nf * nf) - 2.0 * kab / (mf * nf)
    }
}

impl Function for Mmd {
    fn name(&self) -> &'static str {
        "mmd_rbf"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(self.raw(inputs[0], inputs[1]).max(0.0)))
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros_like(a);
        let mut gb = Tensor::zeros_like(b);
        if out.item() <= 0.0 {
            return vec![ga, gb];
        }
        let (m, n) = (a.shape()[0], b.shape()[0]);
        let d = a.shape()[1];
        let (mf, nf) = (m as f64, n as f64);
        let up = grad.item();
        // d k(x, y) / dx = -k(x, y) (x - y) / sigma^2
        let pair = |x: &[f64], y: &[f64], coeff: f64, gx: &mut [f64], gy: Option<&mut [f64]>| {
            let c = coeff * self.kernel(x, y) / self.sigma2;
            match gy {
                Some(gy) => {
                    for k in 0..d {
                        let diff = x[k] - y[k];
                        gx[k] -= c * diff;
                        gy[k] += c * diff;
                    }
                }
                None => {
                    for k in 0..d {
                        gx[k] -= c * (x[k] - y[k]);
                    }
                }
            }
        };
        let caa = 2.0 * up / (mf * mf);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    pair(a.row(i), a.row(j), caa, &mut ga.data_mut()[i * d..(i + 1) * d], None);
                }
            }
        }
        let cbb = 2.0 * up / (nf * nf);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pair(b.row(i), b.row(j), cbb, &mut gb.data_mut()[i * d..(i + 1) * d], None);
                }
            }
        }
        let cab = -2.0 * up / (mf * nf);
        for i in 0..m {
            for j in 0..n {
                let (gai, gbj) = (
                    &mut ga.data_mut()[i * d..(i + 1) * d],
                    &mut gb.data_mut()[j * d..(j + 1) * d],
                );
                pair(a.row(i), b.row(j), cab, gai, Some(gbj));
            }
        }
        vec![ga, gb]
    }
}

/// Squared MMD between the row sets `a` (`[m, D]`) and `b` (`[n, D]`).
pub fn mmd_rbf(g: &mut Graph, a: Var, b: Var, kernel: &KernelConfig) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    let (_, da) = as_rows("mmd_rbf", ta)?;
    let (_, db) = as_rows("mmd_rbf", tb)?;
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "mmd_rbf",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    let sigma2 = kernel.sigma_squared(ta, tb)?;
    g.custom(&[a, b], Box::new(Mmd { sigma2 }))
}

/// Groups row indices by subject, in ascending subject order.
pub fn group_rows(subjects: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &s) in subjects.iter().enumerate() {
        groups.entry(s).or_default().push(row);
    }
    groups
}

/// Mean of [`mmd_rbf`] over all unordered pairs of subjects present in
/// `latents` (`[B, D]`, row `i` belonging to `subjects[i]`).
///
/// With fewer than two subjects the term is a constant zero and a warning
/// is logged.
pub fn mmd_pairwise(g: &mut Graph, latents: Var, subjects: &[usize], kernel: &KernelConfig) -> Result<Var> {
    let (rows, _) = as_rows("mmd_pairwise", g.value(latents))?;
    if rows != subjects.len() {
        return Err(invalid(
            "mmd_pairwise",
            alloc::format!("{rows} rows but {} subject tags", subjects.len()),
        ));
    }
    let groups = group_rows(subjects);
    if groups.len() < 2 {
        log::warn!(
            "mmd_pairwise: batch holds {} subject(s); MMD term set to 0",
            groups.len()
        );
        return Ok(g.leaf(Tensor::scalar(0.0)));
    }
    let parts: Vec<Var> = groups
        .values()
        .map(|idx| g.select_rows(latents, idx))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            let v = mmd_rbf(g, parts[i], parts[j], kernel)?;
            total = Some(match total {
                Some(t) => g.add(t, v)?,
                None => v,
            });
            pairs += 1;
        }
    }
    Ok(g.scale(total.expect("at least one pair"), 1.0 / pairs as f64))
}

/// One-hot encoding of a source subject among `n` training subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTarget {
    one_hot: Tensor,
}

impl DomainTarget {
    pub fn new(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(invalid(
                "domain_target",
                alloc::format!("index {index} out of range for {n} domains"),
            ));
        }
        let mut one_hot = Tensor::zeros(&[n]);
        one_hot.data_mut()[index] = 1.0;
        Ok(Self { one_hot })
    }

    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }

    /// `[B, n]` matrix of one-hot rows.
    pub fn batch(indices: &[usize], n: usize) -> Result<Tensor> {
        let mut data = vec![0.0; indices.len() * n];
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(invalid(
                    "domain_target",
                    alloc::format!("index {i} out of range for {n} domains"),
                ));
            }
            data[r * n + i] = 1.0;
        }
        Tensor::new(vec![indices.len(), n], data)
    }
}

struct SquaredDistanceToTarget {
    target: Tensor,
    rows: usize,
}

impl Function for SquaredDistanceToTarget {
    fn name(&self) -> &'static str {
        "domain_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let s: f64 = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(p, d)| (d - p) * (d - p))
            .sum();
        Ok(Tensor::scalar(s / self.rows as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = 2.0 * grad.item() / self.rows as f64;
        vec![inputs[0].zip_map(&self.target, |p, d| c * (p - d))]
    }
}

/// `sum (d - d_hat)^2` for a single prediction `[N]`, or its mean over rows
/// for a batch `[B, N]` with `targets` of the same shape.
pub fn domain_loss(g: &mut Graph, d_hat: Var, targets: &Tensor) -> Result<Var> {
    let p = g.value(d_hat);
    if p.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "domain_loss",
            left: p.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let rows = if p.rank() == 2 { p.shape()[0] } else { 1 };
    g.custom(
        &[d_hat],
        Box::new(SquaredDistanceToTarget {
            target: targets.clone(),
            rows,
        }),
    )
}

/// Forward identity, backward multiplication by `-scale`.
pub fn gradient_reversal(g: &mut Graph, x: Var, scale: f64) -> Var {
    g.gradient_reversal(x, scale)
}

/// Row indices `(anchor, positive, negative)` into an embedding batch.
pub type TripletIndex = (usize, usize, usize);

struct TripletHinge {
    triples: Vec<TripletIndex>,
    margin: f64,
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    libm::sqrt(sq_dist(x, y))
}

impl Function for TripletHinge {
    fn name(&self) -> &'static str {
        "triplet_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let e = inputs[0];
        let total: f64 = self
            .triples
            .iter()
            .map(|&(a, p, n)| (distance(e.row(a), e.row(p)) - distance(e.row(a), e.row(n)) + self.margin).max(0.0))
            .sum();
        Ok(Tensor::scalar(total / self.triples.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let e = inputs[0];
        let d = e.shape()[1];
        let c = grad.item() / self.triples.len() as f64;
        let mut ge = Tensor::zeros_like(e);
        for &(a, p, n) in &self.triples {
            let (ea, ep, en) = (e.row(a), e.row(p), e.row(n));
            let (dap, dan) = (distance(ea, ep), distance(ea, en));
            if dap - dan + self.margin <= 0.0 {
                continue;
            }
            // unit vectors; zero where the distance vanishes
            let uap: Vec<f64> = (0..d)
                .map(|k| if dap > 0.0 { (ea[k] - ep[k]) / dap } else { 0.0 })
                .collect();
            let uan: Vec<f64> = (0..d)
                .map(|k| if dan > 0.0 { (ea[k] - en[k]) / dan } else { 0.0 })
                .collect();
            let gd = ge.data_mut();
            for k in 0..d {
                gd[a * d + k] += c * (uap[k] - uan[k]);
                gd[p * d + k] -= c * uap[k];
                gd[n * d + k] += c * uan[k];
            }
        }
        vec![ge]
    }
}

/// Mean of `max(d(a, p) - d(a, n) + margin, 0)` over `triples`, with `d`
/// the Euclidean distance between rows of `embeddings` (`[B, D]`).
pub fn triplet_loss(g: &mut Graph, embeddings: Var, triples: &[TripletIndex], margin: f64) -> Result<Var> {
    let (rows, _) = as_rows("triplet_loss", g.value(embeddings))?;
    if triples.is_empty() {
        return Err(invalid("triplet_loss", "no triplets"));
    }
    if !(margin > 0.0) {
        return Err(invalid("triplet_loss", "margin must be positive"));
    }
    if triples.iter().any(|&(a, p, n)| a.max(p).max(n) >= rows) {
        return Err(invalid("triplet_loss", "triplet index out of range"));
    }
    g.custom(
        &[embeddings],
        Box::new(TripletHinge {
            triples: triples.to_vec(),
            margin,
        }),
    )
}

struct BinaryCrossEntropy {
    labels: Vec<f64>,
}

impl Function for BinaryCrossEntropy {
    fn name(&self) -> &'static str {
        "classification_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let total: f64 = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
            })
            .sum();
        Ok(Tensor::scalar(total / self.labels.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = grad.item() / self.labels.len() as f64;
        let mut gp = Tensor::zeros_like(inputs[0]);
        for ((gv, &p), &y) in gp.data_mut().iter_mut().zip(inputs[0].data()).zip(&self.labels) {
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                *gv = -c * (y / p - (1.0 - y) / (1.0 - p));
            }
        }
        vec![gp]
    }
}

/// Mean binary cross-entropy of probabilities `y_hat` against 0/1 labels.
pub fn classification_loss(g: &mut Graph, y_hat: Var, labels: &[u8]) -> Result<Var> {
    let p = g.value(y_hat);
    if p.len() != labels.len() {
        return Err(invalid(
            "classification_loss",
            alloc::format!("{} predictions for {} labels", p.len(), labels.len()),
        ));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(invalid("classification_loss", "labels must be 0 or 1"));
    }
    let labels = labels.iter().map(|&y| f64::from(y)).collect();
    g.custom(&[y_hat], Box::new(BinaryCrossEntropy { labels }))
}

/// Invariance regularizer used during autoencoder pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    #[default]
    None,
    Mmd,
    Dann,
}

impl PretrainMode {
    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::None => "none",
            PretrainMode::Mmd => "mmd",
            PretrainMode::Dann => "dann",
        }
    }
}

/// `recon` alone, or `recon + lambda * regularizer`.
///
/// In `Dann` mode the regularizer must already sit behind a gradient
/// reversal layer; the adversarial sign is applied there and only there.
pub fn combined_pretrain_loss(
    g: &mut Graph,
    recon: Var,
    regularizer: Option<Var>,
    mode: PretrainMode,
    lambda: f64,
) -> Result<Var> {
    match (mode, regularizer) {
        (PretrainMode::None, _) => Ok(recon),
        (_, Some(reg)) => {
            let weighted = g.scale(reg, lambda);
            g.add(recon, weighted)
        }
        (mode, None) => Err(invalid(
            "combined_pretrain_loss",
            alloc::format!("mode {} needs a regularizer", mode.name()),
        )),
    }
}

/// Value-only versions of the objective terms.
pub mod value {
    use alloc::string::String;
    use alloc::vec::Vec;

    use super::*;

    fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let v = build(&mut g)?;
        Ok(g.value(v).item())
    }

    pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
        eval(|g| {
            let (a, b) = (g.leaf(x.clone()), g.leaf(x_hat.clone()));
            super::recon_loss(g, a, b)
        })
    }

    fn rows_tensor(op: &'static str, rows: &[Vec<f64>]) -> Result<Tensor> {
        let first = rows.first().ok_or_else(|| invalid(op, "empty sample set"))?;
        if rows.iter().any(|r| r.len() != first.len()) || first.is_empty() {
            return Err(invalid(op, "vectors must share a positive width"));
        }
        Tensor::matrix(rows.len(), first.len(), rows.concat())
    }

    /// Squared MMD between two sets of equal-width vectors.
    pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelConfig) -> Result<f64> {
        let (ta, tb) = (rows_tensor("mmd_rbf", a)?, rows_tensor("mmd_rbf", b)?);
        eval(|g| {
            let (a, b) = (g.leaf(ta), g.leaf(tb));
            super::mmd_rbf(g, a, b, kernel)
        })
    }

    /// Latent vectors of one subject within a minibatch.
    #[derive(Clone, Debug, PartialEq)]
    pub struct SubjectBatch {
        pub subject_id: String,
        /// `[m, D]`
        pub latents: Tensor,
    }

    pub fn mmd_pairwise(batches: &[SubjectBatch], kernel: &KernelConfig) -> Result<f64> {
        let mut ids: Vec<&str> = batches.iter().map(|b| b.subject_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut subjects = Vec::new();
        let mut data = Vec::new();
        for b in batches {
            let s = ids.binary_search(&b.subject_id.as_str()).unwrap();
            subjects.extend(core::iter::repeat_n(s, b.latents.shape()[0]));
            data.extend_from_slice(b.latents.data());
        }
        let width = batches
            .first()
            .map(|b| b.latents.shape()[1])
            .ok_or_else(|| invalid("mmd_pairwise", "no subject batches"))?;
        let all = Tensor::matrix(subjects.len(), width, data)?;
        eval(|g| {
            let l = g.leaf(all);
            super::mmd_pairwise(g, l, &subjects, kernel)
        })
    }

    pub fn domain_loss(d_hat: &Tensor, d: &DomainTarget) -> Result<f64> {
        eval(|g| {
            let p = g.leaf(d_hat.clone());
            super::domain_loss(g, p, d.one_hot())
        })
    }

    pub fn classification_loss(y_hat: f64, y: u8) -> Result<f64> {
        eval(|g| {
            let p = g.leaf(Tensor::vector(alloc::vec![y_hat]));
            super::classification_loss(g, p, &[y])
        })
    }
}

/// An (anchor, positive, negative) triple of latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub margin: f64,
}

impl Triplet {
    pub fn loss(&self) -> Result<f64> {
        let w = self.anchor.len();
        if w == 0 || self.positive.len() != w || self.negative.len() != w {
            return Err(invalid("triplet_loss", "vectors must share a positive width"));
        }
        let e = Tensor::matrix(
            3,
            w,
            [&self.anchor[..], &self.positive[..], &self.negative[..]].concat(),
        )?;
        let mut g = Graph::new();
        let v = g.leaf(e);
        let l = triplet_loss(&mut g, v, &[(0, 1, 2)], self.margin)?;
        Ok(g.value(l).item())
    }
}
