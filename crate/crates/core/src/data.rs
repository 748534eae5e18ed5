//! Labelled multi-subject time-series windows, normalization, subject
//! splits, a synthetic cohort generator, and the canonical CSV encoding.
//!
//! Canonical CSV: header `subject_id,label,v0,...,v{L-1}`, one sample per
//! row, `.` as decimal separator. Values are written in Rust's shortest
//! round-trip form, so `to_csv(parse_csv(s)) == s` for canonical input.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labelled window. Label 0 is non-stressed / normal breathing, 1 is
/// stressed / disordered breathing.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub label: u8,
    /// `[1, L]`
    pub series: Tensor,
    pub split: Split,
}

impl Sample {
    pub fn new(subject_id: impl Into<String>, label: u8, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(invalid("sample", "empty subject id"));
        }
        if label > 1 {
            return Err(invalid("sample", format!("label {label} is not binary")));
        }
        let len = values.len();
        if len == 0 {
            return Err(invalid("sample", "empty series"));
        }
        Ok(Self {
            subject_id,
            label,
            series: Tensor::new(vec![1, len], values)?,
            split: Split::Train,
        })
    }

    pub fn values(&self) -> &[f64] {
        self.series.data()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Sample counts keyed by `(split, label, subject)`.
pub type Manifest = BTreeMap<(Split, u8, String), usize>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common series length, if the dataset is nonempty.
    pub fn series_len(&self) -> Option<usize> {
        self.samples.first().map(Sample::len)
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Index of each sample's subject within [`Dataset::subjects`].
    pub fn subject_indices(&self) -> Vec<usize> {
        let subjects = self.subjects();
        self.samples
            .iter()
            .map(|s| subjects.binary_search(&s.subject_id).unwrap())
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for s in &self.samples {
            *m.entry((s.split, s.label, s.subject_id.clone())).or_default() += 1;
        }
        m
    }

    /// Samples of one subject, in dataset order.
    pub fn subject(&self, id: &str) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| s.subject_id == id).cloned().collect())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        for s in &mut self.samples {
            s.split = split;
        }
        self
    }

    /// Per-sample min-max normalization of every series.
    pub fn normalized(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                let scaled = min_max_normalize(s.values());
                s.series.data_mut().copy_from_slice(&scaled);
                s
            })
            .collect();
        Dataset::new(samples)
    }

    /// `[B, 1, L]` batch of the selected samples.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor> {
        let len = self.series_len().ok_or_else(|| invalid("batch", "empty dataset"))?;
        let mut data = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            data.extend_from_slice(self.samples[r].values());
        }
        Tensor::new(vec![rows.len(), 1, len], data)
    }

    /// Concatenation; samples keep their split tags.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(samples)
    }
}

/// `(x - min) / (max - min)`; a constant series maps to all 0.5.
pub fn min_max_normalize(series: &[f64]) -> Vec<f64> {
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.5; series.len()];
    }
    series.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Partitions by subject: listed subjects go to train, the rest to test.
pub fn split_by_subject(dataset: &Dataset, train_subjects: &[String]) -> Result<(Dataset, Dataset)> {
    let known = dataset.subjects();
    if let Some(bad) = train_subjects.iter().find(|id| known.binary_search(id).is_err()) {
        return Err(Error::UnknownSubject(bad.clone()));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in &dataset.samples {
        let mut s = s.clone();
        if train_subjects.contains(&s.subject_id) {
            s.split = Split::Train;
            train.push(s);
        } else {
            s.split = Split::Test;
            test.push(s);
        }
    }
    Ok((Dataset::new(train), Dataset::new(test)))
}

/// Synthetic cohort: subject `s`, class `c` produces
/// `offset_s + amp_s * sin(2 pi f_c t / L + phase) + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub length: usize,
    /// Cycles per window for class 0 and class 1.
    pub class_freqs: (f64, f64),
    /// Subject offsets are spread evenly over `[-scale, scale]`.
    pub subject_shift_scale: f64,
    /// Subject amplitudes are drawn from `1 + U(-j, j)`.
    pub amplitude_jitter: f64,
    pub noise_sd: f64,
    /// Fraction of class-1 samples per subject.
    pub class_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            samples_per_subject: 40,
            length: 128,
            class_freqs: (3.0, 5.0),
            subject_shift_scale: 1.0,
            amplitude_jitter: 0.3,
            noise_sd: 0.2,
            class_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Subject offsets much larger than the noise, meant to be used without
    /// per-sample normalization (which would remove them).
    pub fn shift_heavy() -> Self {
        Self {
            n_subjects: 6,
            samples_per_subject: 80,
            length: 32,
            class_freqs: (3.0, 4.0),
            subject_shift_scale: 3.0,
            amplitude_jitter: 0.3,
            noise_sd: 0.8,
            class_ratio: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f0, f1) = self.class_freqs;
        if self.n_subjects == 0 || self.samples_per_subject == 0 || self.length == 0 {
            return Err(invalid(
                "synth",
                "subjects, samples per subject and length must be positive",
            ));
        }
        if f0 == f1 {
            return Err(invalid("synth", "class frequencies must differ"));
        }
        let scales = [self.subject_shift_scale, self.amplitude_jitter, self.noise_sd];
        if scales.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(invalid(
                "synth",
                "shift, jitter and noise scales must be finite and nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.class_ratio) {
            return Err(invalid("synth", "class ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn subject_id(&self, s: usize) -> String {
        let width = self.n_subjects.to_string().len().max(2);
        format!("s{:0width$}", s + 1)
    }

    /// Offset assigned to each subject, in subject order.
    pub fn subject_offsets(&self) -> Vec<f64> {
        let mut rng = Rng::with_stream(self.seed, stream::SYNTH);
        let n = self.n_subjects;
        let mut offsets: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    0.0
                } else {
                    self.subject_shift_scale * (2.0 * i as f64 / (n - 1) as f64 - 1.0)
                }
            })
            .collect();
        rng.shuffle(&mut offsets);
        offsets
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let offsets = config.subject_offsets();
    // offsets consumed the first draws of this stream; amplitudes and
    // samples use a sibling stream
    let mut rng = Rng::with_stream(config.seed, stream::SYNTH + 100);
    let amps: Vec<f64> = (0..config.n_subjects)
        .map(|_| 1.0 + rng.uniform(-config.amplitude_jitter, config.amplitude_jitter))
        .collect();
    let len = config.length as f64;
    let n1 = libm::round(config.samples_per_subject as f64 * config.class_ratio) as usize;
    let mut samples = Vec::with_capacity(config.n_subjects * config.samples_per_subject);
    for s in 0..config.n_subjects {
        let mut labels: Vec<u8> = vec![0; config.samples_per_subject - n1];
        labels.extend(core::iter::repeat_n(1u8, n1));
        rng.shuffle(&mut labels);
        for label in labels {
            let f = if label == 0 {
                config.class_freqs.0
            } else {
                config.class_freqs.1
            };
            let phase = rng.uniform(0.0, 2.0 * PI);
            let values = (0..config.length)
                .map(|t| {
                    let noise = if config.noise_sd > 0.0 {
                        rng.normal(0.0, config.noise_sd)
                    } else {
                        0.0
                    };
                    offsets[s] + amps[s] * libm::sin(2.0 * PI * f * t as f64 / len + phase) + noise
                })
                .collect();
            samples.push(Sample::new(config.subject_id(s), label, values)?);
        }
    }
    Ok(Dataset::new(samples))
}

fn valid_subject_id(id: &str) -> bool {
    !id.is_empty() && !id.contains([',', '\n', '\r', '"'])
}

/// Parses canonical CSV. Every sample is tagged [`Split::Train`].
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let ok_header = cols.len() >= 3
        && cols[0] == "subject_id"
        && cols[1] == "label"
        && cols[2..].iter().enumerate().all(|(i, c)| *c == format!("v{i}"));
    if !ok_header {
        return Err(Error::Parse {
            line: 1,
            reason: "header must be subject_id,label,v0,...,v{L-1}".into(),
        });
    }
    let len = cols.len() - 2;
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line: line_no, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(format!("expected at least 3 fields, found {}", fields.len())));
        }
        let subject = fields[0];
        if !valid_subject_id(subject) {
            return Err(parse_err(format!("invalid subject id {subject:?}")));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("label {other:?} is not 0 or 1"))),
        };
        if fields.len() - 2 != len {
            return Err(Error::SeriesLength {
                subject: subject.to_string(),
                expected: len,
                found: fields.len() - 2,
            });
        }
        let values = fields[2..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("value {f:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample::new(subject, label, values)?);
    }
    Ok(Dataset::new(samples))
}

/// Canonical CSV encoding. All series must share one length.
pub fn to_csv(dataset: &Dataset) -> Result<String> {
    let len = dataset.series_len().ok_or_else(|| invalid("to_csv", "empty dataset"))?;
    let mut out = String::from("subject_id,label");
    for i in 0..len {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for s in &dataset.samples {
        if s.len() != len {
            return Err(Error::SeriesLength {
                subject: s.subject_id.clone(),
                expected: len,
                found: s.len(),
            });
        }
        if !valid_subject_id(&s.subject_id) {
            return Err(invalid(
                "to_csv",
                format!("subject id {:?} cannot be written", s.subject_id),
            ));
        }
        let _ = write!(out, "{},{}", s.subject_id, s.label);
        for v in s.values() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(min_max_normalize(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[5.0, 5.0, 5.0]), vec![0.5; 3]);
        assert_eq!(min_max_normalize(&[-2.0, 0.0, 2.0]), vec![0.0, 0.5, 1.0]);
    }

    const GOLDEN: &str = "subject_id,label,v0,v1,v2\na01,0,0.5,1,-2.25\nb02,1,3,0.125,1e-7\n";

    #[test]
    fn golden_file_parses() {
        let d = parse_csv(GOLDEN).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples[1].values(), &[3.0, 0.125, 1e-7]);
        let m = d.manifest();
        assert_eq!(m.len(), 2);
        assert_eq!(m[&(Split::Train, 0, "a01".to_string())], 1);
        assert_eq!(m[&(Split::Train, 1, "b02".to_string())], 1);
    }

    #[test]
    fn canonical_round_trip() {
        let d = synth_generate(&SynthConfig {
            n_subjects: 2,
            samples_per_subject: 3,
            length: 16,
            ..Default::default()
        })
        .unwrap();
        let text = to_csv(&d).unwrap();
        assert_eq!(to_csv(&parse_csv(&text).unwrap()).unwrap(), text);
        assert_eq!(parse_csv(&text).unwrap(), d);
    }

    #[test]
    fn bad_label_reports_line() {
        let bad = "subject_id,label,v0\na,0,1\na,2,1\n";
        assert!(matches!(parse_csv(bad), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn ragged_row_names_subject() {
        let bad = "subject_id,label,v0,v1\na,0,1,2\nb,1,1\n";
        match parse_csv(bad) {
            Err(Error::SeriesLength {
                subject,
                expected,
                found,
            }) => {
                assert_eq!((subject.as_str(), expected, found), ("b", 2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv("id,label,v0\n").is_err());
        assert!(matches!(
            parse_csv("subject_id,label,v0\na,0,x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_partitions_subjects() {
        let d = synth_generate(&SynthConfig {
            n_subjects: 5,
            samples_per_subject: 4,
            length: 8,
            ..Default::default()
        })
        .unwrap();
        let ids = d.subjects();
        let (train, test) = split_by_subject(&d, &ids[..3]).unwrap();
        assert_eq!(train.len() + test.len(), d.len());
        assert_eq!(train.subjects(), ids[..3].to_vec());
        assert_eq!(test.subjects(), ids[3..].to_vec());
        assert!(test.samples.iter().all(|s| s.split == Split::Test));
        let (train, test) = split_by_subject(&d, &[]).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), d.len());
        assert!(matches!(
            split_by_subject(&d, &["zz".into()]),
            Err(Error::UnknownSubject(_))
        ));
    }

    #[test]
    fn fifty_eight_subject_partition() {
        let d = synth_generate(&SynthConfig {
            n_subjects: 58,
            samples_per_subject: 1,
            length: 4,
            ..Default::default()
        })
        .unwrap();
        let ids = d.subjects();
        let (train, test) = split_by_subject(&d, &ids[..45]).unwrap();
        assert_eq!((train.subjects().len(), test.subjects().len()), (45, 13));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let cfg = SynthConfig {
            class_ratio: 0.25,
            samples_per_subject: 20,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        for id in a.subjects() {
            let ones = a.subject(&id).labels().iter().filter(|&&l| l == 1).count();
            assert_eq!(ones, 5);
        }
        assert!(synth_generate(&SynthConfig {
            class_freqs: (2.0, 2.0),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn offsets_separate_subject_means() {
        let cfg = SynthConfig {
            n_subjects: 2,
            samples_per_subject: 10,
            length: 64,
            subject_shift_scale: 3.0,
            noise_sd: 0.0,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        let mean = |id: &str| {
            let s = d.subject(id);
            s.samples.iter().flat_map(|x| x.values().to_vec()).sum::<f64>() / (s.len() * 64) as f64
        };
        let gap = (mean("s01") - mean("s02")).abs();
        assert!(gap >= 6.0 - 1e-9, "{gap}");
    }

    #[test]
    fn no_shift_no_noise_subjects_match_up_to_phase() {
        let cfg = SynthConfig {
            subject_shift_scale: 0.0,
            amplitude_jitter: 0.0,
            noise_sd: 0.0,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        // same class, same frequency and amplitude: identical energy
        let energy = |s: &Sample| s.values().iter().map(|v| v * v).sum::<f64>();
        let e0: Vec<f64> = d.samples.iter().filter(|s| s.label == 0).map(energy).collect();
        assert!(e0.iter().all(|e| (e - e0[0]).abs() < 1e-9));
    }
}
