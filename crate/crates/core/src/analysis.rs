//! Evaluation metrics, one-way ANOVA with Tukey HSD post-hoc comparisons,
//! latent export with a deterministic PCA projection, and the subject
//! dispersion score.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::models::ModelParams;
use crate::tensor::Tensor;
use crate::training;

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid("accuracy", "predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(invalid("accuracy", "no labels"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ms_between: f64,
    pub ms_within: f64,
}

fn sq(x: f64) -> f64 {
    x * x
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<Anova> {
    if groups.len() < 2 {
        return Err(invalid("anova_oneway", "need at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(invalid("anova_oneway", "every group needs at least two values"));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let ss_between: f64 = groups.iter().map(|g| g.len() as f64 * sq(mean(g) - grand)).sum();
    let ss_within: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|v| sq(v - m)).sum::<f64>()
        })
        .sum();
    let (df_between, df_within) = (k - 1, n - k);
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    let f_statistic = if ms_within > 0.0 {
        ms_between / ms_within
    } else if ms_between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(Anova {
        f_statistic,
        df_between,
        df_within,
        ms_between,
        ms_within,
    })
}

/// Rows of the bundled studentized-range table.
pub const TUKEY_DF: [usize; 8] = [5, 10, 15, 20, 30, 60, 120, usize::MAX];
pub const TUKEY_MAX_GROUPS: usize = 10;

// Upper quantiles of the studentized range, columns k = 2..=10.
const Q_05: [[f64; 9]; 8] = [
    [3.635, 4.602, 5.218, 5.673, 6.033, 6.330, 6.582, 6.801, 6.995],
    [3.151, 3.877, 4.327, 4.654, 4.912, 5.124, 5.304, 5.460, 5.598],
    [3.014, 3.673, 4.076, 4.367, 4.595, 4.782, 4.940, 5.077, 5.198],
    [2.950, 3.578, 3.958, 4.232, 4.445, 4.620, 4.768, 4.895, 5.008],
    [2.888, 3.486, 3.845, 4.102, 4.301, 4.464, 4.601, 4.720, 4.824],
    [2.829, 3.399, 3.737, 3.977, 4.163, 4.314, 4.441, 4.550, 4.646],
    [2.800, 3.356, 3.685, 3.917, 4.096, 4.241, 4.363, 4.468, 4.560],
    [2.772, 3.314, 3.633, 3.858, 4.030, 4.170, 4.286, 4.387, 4.474],
];
const Q_01: [[f64; 9]; 8] = [
    [5.702, 6.976, 7.804, 8.421, 8.913, 9.321, 9.669, 9.971, 10.239],
    [4.482, 5.270, 5.769, 6.136, 6.428, 6.669, 6.875, 7.054, 7.213],
    [4.167, 4.836, 5.252, 5.556, 5.796, 5.994, 6.162, 6.309, 6.438],
    [4.024, 4.639, 5.018, 5.293, 5.510, 5.688, 5.839, 5.970, 6.086],
    [3.889, 4.455, 4.799, 5.048, 5.242, 5.401, 5.536, 5.653, 5.756],
    [3.762, 4.282, 4.594, 4.818, 4.991, 5.133, 5.253, 5.356, 5.447],
    [3.702, 4.200, 4.497, 4.709, 4.872, 5.005, 5.118, 5.214, 5.299],
    [3.643, 4.120, 4.403, 4.603, 4.757, 4.882, 4.987, 5.078, 5.157],
];

/// Critical studentized range for `k` groups at `alpha`, using the largest
/// tabled df not above `df` (the conservative direction).
pub fn q_critical(k: usize, df: usize, alpha: f64) -> Result<f64> {
    let unsupported = Error::UnsupportedRange { k, df, alpha };
    let table = if alpha == 0.05 {
        &Q_05
    } else if alpha == 0.01 {
        &Q_01
    } else {
        return Err(unsupported);
    };
    if !(2..=TUKEY_MAX_GROUPS).contains(&k) {
        return Err(unsupported);
    }
    let Some(row) = TUKEY_DF.iter().rposition(|&d| d <= df) else {
        return Err(unsupported);
    };
    Ok(table[row][k - 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub group_a: usize,
    pub group_b: usize,
    /// `mean(b) - mean(a)`.
    pub mean_diff: f64,
    pub q_statistic: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub alpha: f64,
    pub q_critical: f64,
    pub pairwise: Vec<PairwiseComparison>,
}

/// ANOVA followed by every Tukey HSD pair `(a, b)` with `a < b`.
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<StatTestResult> {
    let anova = anova_oneway(groups)?;
    let q_crit = q_critical(groups.len(), anova.df_within, alpha)?;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let mut pairwise = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let diff = means[b] - means[a];
            let se = libm::sqrt(anova.ms_within / 2.0 * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64));
            let q = if se > 0.0 {
                diff.abs() / se
            } else if diff != 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            pairwise.push(PairwiseComparison {
                group_a: a,
                group_b: b,
                mean_diff: diff,
                q_statistic: q,
                significant: q >= q_crit,
            });
        }
    }
    Ok(StatTestResult {
        f_statistic: anova.f_statistic,
        df_between: anova.df_between,
        df_within: anova.df_within,
        alpha,
        q_critical: q_crit,
        pairwise,
    })
}

/// Principal axes fit on a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-length components, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits on `rows` (`[n, D]`, `n >= 1`, `D >= 2`). Each component's
    /// largest-magnitude loading is made positive.
    pub fn fit(rows: &Tensor) -> Result<Self> {
        let [n, d] = *rows.shape() else {
            return Err(invalid("pca", "rows must be [n, D]"));
        };
        if d < 2 {
            return Err(invalid("pca", "need at least two latent dimensions"));
        }
        if n == 0 {
            return Err(invalid("pca", "no rows to fit"));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let c: Vec<f64> = rows.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += c[a] * c[b] / n as f64;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(d);
        let mut eigenvalues = Vec::with_capacity(d);
        for &j in &order {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            eigenvalues.push(eig.eigenvalues[j].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues
            .iter()
            .map(|&e| if total > 0.0 { e / total } else { 0.0 })
            .collect()
    }

    /// Coordinates of `row` on the first `k` components.
    pub fn project(&self, row: &[f64], k: usize) -> Vec<f64> {
        self.components[..k]
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub subject_id: String,
    pub label: u8,
    pub split: Split,
    pub latent: Vec<f64>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDump {
    pub rows: Vec<LatentRow>,
    pub explained_variance_ratio: Vec<f64>,
}

impl LatentDump {
    pub fn latent_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.latent.len())
    }

    /// Latents as `[n, D]` with subject indices in sorted-id order.
    pub fn matrix(&self) -> Result<(Tensor, Vec<usize>)> {
        let ids: BTreeMap<&str, usize> = {
            let mut v: Vec<&str> = self.rows.iter().map(|r| r.subject_id.as_str()).collect();
            v.sort_unstable();
            v.dedup();
            v.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
        };
        let data = self.rows.iter().flat_map(|r| r.latent.iter().copied()).collect();
        let subjects = self.rows.iter().map(|r| ids[r.subject_id.as_str()]).collect();
        Ok((Tensor::matrix(self.rows.len(), self.latent_dim(), data)?, subjects))
    }
}

/// Encodes every sample and projects onto two principal axes fit on the
/// train-split rows (all rows if there are none).
pub fn export_latents(params: &ModelParams, data: &Dataset) -> Result<LatentDump> {
    if params.spec.latent_dim < 2 {
        return Err(invalid("export_latents", "need at least two latent dimensions"));
    }
    if data.is_empty() {
        return Err(invalid("export_latents", "empty dataset"));
    }
    let z = training::latents(params, data)?;
    let d = params.spec.latent_dim;
    let train: Vec<usize> = (0..data.len())
        .filter(|&i| data.samples[i].split == Split::Train)
        .collect();
    let fit_rows = if train.is_empty() {
        (0..data.len()).collect()
    } else {
        train
    };
    let fit = Tensor::matrix(
        fit_rows.len(),
        d,
        fit_rows.iter().flat_map(|&i| z.row(i).iter().copied()).collect(),
    )?;
    let pca = Pca::fit(&fit)?;
    let rows = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = pca.project(z.row(i), 2);
            LatentRow {
                subject_id: s.subject_id.clone(),
                label: s.label,
                split: s.split,
                latent: z.row(i).to_vec(),
                pc1: p[0],
                pc2: p[1],
            }
        })
        .collect();
    Ok(LatentDump {
        rows,
        explained_variance_ratio: pca.explained_variance_ratio(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    /// Mean distance between pairs of subject centroids.
    pub between: f64,
    /// Mean distance from each latent to its own subject's centroid.
    pub within: f64,
    /// `between / within`; 0 when both vanish.
    pub score: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Heterogeneity of latents `[n, D]` grouped by subject index.
pub fn subject_dispersion(latents: &Tensor, subjects: &[usize]) -> Result<Dispersion> {
    let [n, d] = *latents.shape() else {
        return Err(invalid("subject_dispersion", "latents must be [n, D]"));
    };
    if subjects.len() != n {
        return Err(invalid("subject_dispersion", "one subject index per latent row"));
    }
    let groups = crate::losses::group_rows(subjects);
    if groups.len() < 2 {
        return Err(invalid("subject_dispersion", "need at least two subjects"));
    }
    let centroids: BTreeMap<usize, Vec<f64>> = groups
        .iter()
        .map(|(&s, rows)| {
            let mut c = vec![0.0; d];
            for &r in rows {
                for (ck, v) in c.iter_mut().zip(latents.row(r)) {
                    *ck += v / rows.len() as f64;
                }
            }
            (s, c)
        })
        .collect();
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let mut between = 0.0;
    let mut pairs = 0usize;
    for a in 0..cs.len() {
        for b in a + 1..cs.len() {
            between += dist(cs[a], cs[b]);
            pairs += 1;
        }
    }
    between /= pairs as f64;
    let within = (0..n)
        .map(|i| dist(latents.row(i), &centroids[&subjects[i]]))
        .sum::<f64>()
        / n as f64;
    let score = if within > 0.0 {
        between / within
    } else if between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(Dispersion { between, within, score })
}
