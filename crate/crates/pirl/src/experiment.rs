//! Multi-variant experiment: every requested variant is trained for
//! `trials` seeds on the training subjects and scored on the held-out
//! subjects; the variants are then compared with ANOVA and Tukey HSD.
//!
//! Within a trial each pretraining mode runs once and is shared by the
//! variants that fine-tune from it, which is equivalent to running them
//! separately because pretraining never reads the fine-tuning settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pirl_core::analysis;
use pirl_core::data::{self, Dataset};
use pirl_core::losses::PretrainMode;
use pirl_core::models::{ModelParams, ModelSpec};
use pirl_core::training::{self, FinetuneEpoch, PretrainEpoch};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::io;

pub const ALPHAS: [f64; 2] = [0.05, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub series_len: usize,
    pub normalized: bool,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_accuracy: f64,
    /// Population standard deviation over trials.
    pub sd_accuracy: f64,
    pub trial_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVsBaseline {
    pub variant: Variant,
    /// `mean(variant) - mean(baseline)`.
    pub mean_diff: f64,
    pub q_statistic: f64,
    /// Whether the pair is significant at each entry of [`ALPHAS`].
    pub significant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub alphas: Vec<f64>,
    pub q_critical: Vec<f64>,
    pub pairs: Vec<PairVsBaseline>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: DatasetSummary,
    pub trials: usize,
    pub seed: u64,
    pub variants: Vec<VariantSummary>,
    pub comparison: Option<Comparison>,
    /// Why `comparison` is absent, if it is.
    pub comparison_note: Option<String>,
}

/// One line of `metrics.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum Metric {
    Pretrain {
        variant: Variant,
        trial: usize,
        #[serde(flatten)]
        epoch: PretrainEpoch,
    },
    Finetune {
        variant: Variant,
        trial: usize,
        #[serde(flatten)]
        epoch: FinetuneEpoch,
    },
    Eval {
        variant: Variant,
        trial: usize,
        train_accuracy: Option<f64>,
        test_accuracy: f64,
    },
}

pub struct Experiment {
    pub report: Report,
    pub metrics: Vec<Metric>,
    /// `(file name, parameters)` for every pretrained encoder and every
    /// fine-tuned generic variant, per trial.
    pub checkpoints: Vec<(String, ModelParams)>,
}

struct TrialOutput {
    accuracies: Vec<(Variant, f64)>,
    metrics: Vec<Metric>,
    checkpoints: Vec<(String, ModelParams)>,
}

fn checkpoint_name(variant: Variant, trial: usize) -> String {
    format!("{}-trial{trial}.ckpt", variant.name())
}

fn run_one_trial(cfg: &RunConfig, spec: &ModelSpec, train: &Dataset, test: &Dataset, t: usize) -> Result<TrialOutput> {
    let mut out = TrialOutput {
        accuracies: Vec::new(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
    };
    let fail = |variant: Variant| {
        move |source| Error::Trial {
            variant: variant.name().into(),
            trial: t,
            source,
        }
    };
    let mut pretrained: BTreeMap<PretrainMode, (ModelParams, Vec<PretrainEpoch>)> = BTreeMap::new();
    for &variant in &cfg.variants {
        if variant == Variant::PersonSpecific {
            let r =
                training::person_specific(spec, train, &variant.training(&cfg.training), t).map_err(fail(variant))?;
            out.metrics.push(Metric::Eval {
                variant,
                trial: t,
                train_accuracy: None,
                test_accuracy: r.mean_accuracy,
            });
            out.accuracies.push((variant, r.mean_accuracy));
            continue;
        }
        let tc = variant.training(&cfg.training);
        let mode = variant.pretrain_mode();
        if !pretrained.contains_key(&mode) {
            let p = training::pretrain_trial(spec, train, &tc, t).map_err(fail(variant))?;
            out.checkpoints
                .push((format!("pretrain-{}-trial{t}.ckpt", mode.name()), p.0.clone()));
            pretrained.insert(mode, p);
        }
        let (params, history) = pretrained[&mode].clone();
        let (params, report) = training::finetune_trial(params, history, train, test, &tc, t).map_err(fail(variant))?;
        out.metrics.extend(report.pretrain.iter().map(|e| Metric::Pretrain {
            variant,
            trial: t,
            epoch: e.clone(),
        }));
        out.metrics.extend(report.finetune.iter().map(|e| Metric::Finetune {
            variant,
            trial: t,
            epoch: e.clone(),
        }));
        out.metrics.push(Metric::Eval {
            variant,
            trial: t,
            train_accuracy: Some(report.train_accuracy),
            test_accuracy: report.test_accuracy,
        });
        out.accuracies.push((variant, report.test_accuracy));
        out.checkpoints.push((checkpoint_name(variant, t), params));
    }
    Ok(out)
}

/// Splits, normalizes as configured, and tags the splits.
pub fn prepare(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let dataset = if cfg.normalize {
        dataset.normalized()
    } else {
        dataset.clone()
    };
    let train_ids = cfg.train_subjects(&dataset)?;
    Ok(data::split_by_subject(&dataset, &train_ids)?)
}

pub fn run(cfg: &RunConfig, dataset: &Dataset) -> Result<Experiment> {
    cfg.validate()?;
    let (train, test) = prepare(cfg, dataset)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "both the training and the test split need samples".into(),
        ));
    }
    let series_len = dataset.series_len().unwrap_or(0);
    let spec = ModelSpec::preset(cfg.preset, series_len, train.subjects().len())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_trials)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outputs: Vec<TrialOutput> = pool.install(|| {
        (0..cfg.training.trials)
            .into_par_iter()
            .map(|t| run_one_trial(cfg, &spec, &train, &test, t))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut per_variant: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for out in outputs {
        for (v, acc) in out.accuracies {
            per_variant.entry(v).or_default().push(acc);
        }
        metrics.extend(out.metrics);
        checkpoints.extend(out.checkpoints);
    }
    let variants: Vec<VariantSummary> = cfg
        .variants
        .iter()
        .map(|&v| {
            let accs = per_variant.remove(&v).unwrap_or_default();
            let (mean, sd) = training::mean_and_sd(&accs);
            VariantSummary {
                variant: v,
                mean_accuracy: mean,
                sd_accuracy: sd,
                trial_accuracies: accs,
            }
        })
        .collect();
    let (comparison, comparison_note) = match compare(&variants) {
        Ok(c) => (c, None),
        Err(note) => (None, Some(note)),
    };
    let report = Report {
        dataset: DatasetSummary {
            samples: dataset.len(),
            series_len,
            normalized: cfg.normalize,
            train_subjects: train.subjects(),
            test_subjects: test.subjects(),
            train_samples: train.len(),
            test_samples: test.len(),
        },
        trials: cfg.training.trials,
        seed: cfg.training.seed,
        variants,
        comparison,
        comparison_note,
    };
    Ok(Experiment {
        report,
        metrics,
        checkpoints,
    })
}

/// ANOVA over all variants and the Tukey pairs that involve the baseline.
fn compare(variants: &[VariantSummary]) -> std::result::Result<Option<Comparison>, String> {
    let Some(base) = variants.iter().position(|v| v.variant == Variant::Baseline) else {
        return Err("no baseline variant to compare against".into());
    };
    if variants.len() < 2 {
        return Err("only one variant".into());
    }
    let groups: Vec<Vec<f64>> = variants.iter().map(|v| v.trial_accuracies.clone()).collect();
    let mut tests = Vec::new();
    for alpha in ALPHAS {
        tests.push(analysis::tukey_hsd(&groups, alpha).map_err(|e| e.to_string())?);
    }
    let pairs = tests[0]
        .pairwise
        .iter()
        .enumerate()
        .filter(|(_, p)| p.group_a == base || p.group_b == base)
        .map(|(i, p)| {
            let other = if p.group_a == base { p.group_b } else { p.group_a };
            PairVsBaseline {
                variant: variants[other].variant,
                mean_diff: variants[other].mean_accuracy - variants[base].mean_accuracy,
                q_statistic: p.q_statistic,
                significant: tests.iter().map(|t| t.pairwise[i].significant).collect(),
            }
        })
        .collect();
    Ok(Some(Comparison {
        f_statistic: tests[0].f_statistic,
        df_between: tests[0].df_between,
        df_within: tests[0].df_within,
        alphas: ALPHAS.to_vec(),
        q_critical: tests.iter().map(|t| t.q_critical).collect(),
        pairs,
    }))
}

impl Report {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let mut s = String::new();
        writeln!(
            s,
            "dataset: {} samples of length {} (normalized: {})",
            d.samples, d.series_len, d.normalized
        )
        .unwrap();
        writeln!(
            s,
            "train subjects ({} samples): {}",
            d.train_samples,
            d.train_subjects.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            "test subjects ({} samples): {}",
            d.test_samples,
            d.test_subjects.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            "trials: {} (seeds {}..{})",
            self.trials,
            self.seed,
            self.seed + self.trials as u64 - 1
        )
        .unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<16} {:>9} {:>7}", "variant", "accuracy", "sd").unwrap();
        for v in &self.variants {
            writeln!(
                s,
                "{:<16} {:>9.4} {:>7.4}",
                v.variant.name(),
                v.mean_accuracy,
                v.sd_accuracy
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        match (&self.comparison, &self.comparison_note) {
            (Some(c), _) => {
                writeln!(
                    s,
                    "one-way ANOVA: F = {:.4} (df {}, {})",
                    c.f_statistic, c.df_between, c.df_within
                )
                .unwrap();
                let crit: Vec<String> = c
                    .alphas
                    .iter()
                    .zip(&c.q_critical)
                    .map(|(a, q)| format!("q({a}) = {q}"))
                    .collect();
                writeln!(s, "Tukey HSD against baseline, critical {}", crit.join(", ")).unwrap();
                for p in &c.pairs {
                    let marks: Vec<String> = c
                        .alphas
                        .iter()
                        .zip(&p.significant)
                        .map(|(a, &sig)| format!("p<{a}: {}", if sig { "yes" } else { "no" }))
                        .collect();
                    writeln!(
                        s,
                        "  {:<16} diff {:+.4}  q {:>8.4}  {}",
                        p.variant.name(),
                        p.mean_diff,
                        p.q_statistic,
                        marks.join("  ")
                    )
                    .unwrap();
                }
            }
            (None, Some(note)) => writeln!(s, "no statistical comparison: {note}").unwrap(),
            (None, None) => {}
        }
        s
    }
}

/// Writes `report.txt`, `report.json`, `metrics.ndjson`, `config.toml` and
/// `checkpoints/` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, exp: &Experiment) -> Result<()> {
    io::write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    io::write_file(&dir.join("report.txt"), exp.report.to_text().as_bytes())?;
    let json = serde_json::to_string_pretty(&exp.report).map_err(|e| Error::Config(e.to_string()))? + "\n";
    io::write_file(&dir.join("report.json"), json.as_bytes())?;
    let mut lines = String::new();
    for m in &exp.metrics {
        lines.push_str(&serde_json::to_string(m).map_err(|e| Error::Config(e.to_string()))?);
        lines.push('\n');
    }
    io::write_file(&dir.join("metrics.ndjson"), lines.as_bytes())?;
    for (name, params) in &exp.checkpoints {
        io::write_checkpoint(&dir.join("checkpoints").join(name), params)?;
    }
    Ok(())
}
