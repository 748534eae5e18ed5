use proptest::prelude::*;

use pirl_core::data::{min_max_normalize, split_by_subject, synth_generate, Dataset, Sample, SynthConfig};
use pirl_core::losses::{self, KernelConfig};
use pirl_core::models::{self, ModelSpec, Preset};
use pirl_core::ops::{self, conv_out_len};
use pirl_core::{Graph, Tensor};

fn values(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn matrix(rows: std::ops::Range<usize>, width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, width), rows)
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let width = rows[0].len();
    Tensor::new(vec![rows.len(), width], rows.concat()).unwrap()
}

fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(to_tensor(a)), g.leaf(to_tensor(b)));
    let v = losses::mmd_rbf(&mut g, av, bv, &KernelConfig::fixed(sigma)).unwrap();
    g.value(v).item()
}

proptest! {
    #[test]
    fn conv_length_formula(len in 1usize..=16, k_frac in 0.0f64..1.0, stride in 1usize..=3, padding in 0usize..=2, cin in 1usize..3, cout in 1usize..3) {
        let kernel = 1 + ((len as f64 * k_frac) as usize).min(len - 1);
        let x = Tensor::full(&[cin, len], 0.5);
        let k = Tensor::full(&[cout, cin, kernel], 0.1);
        let b = Tensor::zeros(&[cout]);
        let y = ops::conv1d(&x, &k, &b, stride, padding).unwrap();
        let expected = (len + 2 * padding - kernel) / stride + 1;
        prop_assert_eq!(y.shape(), &[cout, expected]);
        prop_assert_eq!(conv_out_len(len, kernel, stride, padding), Some(expected));
    }

    #[test]
    fn normalization_bounded_and_idempotent(x in values(1..40)) {
        let once = min_max_normalize(&x);
        prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
        let twice = min_max_normalize(&once);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn relu_is_nonnegative_and_fixes_the_positive_part(x in values(1..30)) {
        let t = Tensor::vector(x.clone());
        let y = ops::relu(&t);
        for (a, b) in x.iter().zip(y.data()) {
            prop_assert_eq!(*b, a.max(0.0));
        }
    }

    #[test]
    fn upsample_repeats(x in values(1..10), factor in 1usize..4) {
        let t = Tensor::new(vec![1, x.len()], x.clone()).unwrap();
        let y = ops::upsample_nearest(&t, factor).unwrap();
        prop_assert_eq!(y.shape(), &[1, x.len() * factor]);
        for (i, v) in y.data().iter().enumerate() {
            prop_assert_eq!(*v, x[i / factor]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in values(1..12)) {
        let y = ops::softmax(&Tensor::vector(x));
        prop_assert!((y.sum() - 1.0).abs() < 1e-9);
        prop_assert!(y.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn mmd_is_symmetric_nonnegative_and_zero_on_self(a in matrix(1..6, 3), b in matrix(1..6, 3), sigma in 0.3f64..3.0) {
        let ab = mmd(&a, &b, sigma);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mmd(&b, &a, sigma)).abs() < 1e-12);
        prop_assert!(mmd(&a, &a, sigma) <= 1e-9);
    }

    #[test]
    fn triplet_loss_nonnegative(e in matrix(3..8, 2), margin in 0.1f64..2.0) {
        let n = e.len();
        let triples: Vec<_> = (0..n).map(|a| (a, (a + 1) % n, (a + 2) % n)).collect();
        let mut g = Graph::new();
        let ev = g.leaf(to_tensor(&e));
        let v = losses::triplet_loss(&mut g, ev, &triples, margin).unwrap();
        prop_assert!(g.value(v).item() >= 0.0);
    }

    #[test]
    fn split_preserves_samples(n_subjects in 1usize..6, per in 1usize..5, take in 0usize..6) {
        let samples = (0..n_subjects * per)
            .map(|i| Sample::new(format!("p{}", i / per), (i % 2) as u8, vec![i as f64, 0.0]).unwrap())
            .collect();
        let data = Dataset::new(samples);
        let ids = data.subjects();
        let chosen = &ids[..take.min(ids.len())];
        let (train, test) = split_by_subject(&data, chosen).unwrap();
        prop_assert_eq!(train.len() + test.len(), data.len());
        let train_ids = train.subjects();
        prop_assert!(test.subjects().iter().all(|s| !train_ids.contains(s)));
    }

    #[test]
    fn synth_label_balance(per in 1usize..30, ratio in 0.0f64..=1.0, seed in 0u64..50) {
        let cfg = SynthConfig { n_subjects: 2, samples_per_subject: per, length: 8, class_ratio: ratio, seed, ..Default::default() };
        let data = synth_generate(&cfg).unwrap();
        let expected = (per as f64 * ratio).round() as usize;
        for id in data.subjects() {
            let ones = data.subject(&id).labels().iter().filter(|&&y| y == 1).count();
            prop_assert_eq!(ones, expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_shape_and_latent_width(h in 0usize..5, batch in 1usize..3, seed in 0u64..100) {
        let len = 8 << h;
        let spec = ModelSpec::preset(Preset::Clas, len, 3).unwrap();
        let params = models::build(&spec, seed).unwrap();
        let x = Tensor::full(&[batch, 1, len], 0.3);
        let e = params.encode_tensor(&x).unwrap();
        prop_assert_eq!(e.shape(), &[batch, 8]);
        let x_hat = params.decode_tensor(&e).unwrap();
        prop_assert_eq!(x_hat.shape(), x.shape());
    }
}
