use pirl_core::gradcheck::{check_coordinates, suite};
use pirl_core::losses::{self, recon_loss};
use pirl_core::models::{
    self, classify, classify_domain, decode, encode, ConvLayer, ModelParams, ModelSpec, Preset, UpsampleStage,
};
use pirl_core::{Graph, Rng, Tensor};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
/// Deep ReLU stacks have kinks within 1e-3 of a random point in some
/// coordinate, so whole-model checks use a smaller step.
const H_MODEL: f64 = 1e-5;

#[test]
fn every_primitive_and_loss_matches_central_differences() {
    let entries = suite(20, 11, H).unwrap();
    assert!(entries.len() >= 20);
    for e in &entries {
        assert_eq!(e.trials, 20);
        assert!(e.passed(TOL), "{} max rel error {:e}", e.name, e.max_rel_error);
    }
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(suite(3, 5, H).unwrap(), suite(3, 5, H).unwrap());
}

fn small_spec() -> ModelSpec {
    let conv = |out_channels, stride| ConvLayer {
        out_channels,
        kernel: 3,
        stride,
        padding: 1,
    };
    let up = |factor, out_channels| UpsampleStage {
        factor,
        out_channels,
        kernel: 3,
        padding: 1,
    };
    ModelSpec {
        preset: Preset::Custom,
        input_len: 16,
        latent_dim: 8,
        encoder: vec![conv(3, 2), conv(4, 2), conv(2, 1)],
        decoder: vec![up(2, 3), up(2, 1)],
        classifier: vec![4, 1],
        domain_head: vec![4, 3],
    }
}

/// Fresh parameters with random biases. Zero biases put dead receptive
/// fields exactly on a ReLU kink, where one-sided derivatives disagree.
fn off_kink(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut params = models::build(spec, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            for v in t.data_mut() {
                *v = rng.uniform(-0.2, 0.2);
            }
        }
    }
    params
}

fn series(rng: &mut Rng, batch: usize, len: usize) -> Tensor {
    let data = (0..batch * len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::new(vec![batch, 1, len], data).unwrap()
}

/// Objective touching every parameter: reconstruction plus both heads. The
/// reversal layer is left out so the forward value matches the gradient.
fn objective(
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
    subjects: &[usize],
    g: &mut Graph,
) -> (pirl_core::Var, models::BoundParams) {
    let bound = params.bind(g);
    let xv = g.leaf(x.clone());
    let e = encode(g, params, &bound, xv).unwrap();
    let x_hat = decode(g, params, &bound, e).unwrap();
    let recon = recon_loss(g, xv, x_hat).unwrap();
    let p = classify(g, params, &bound, e).unwrap();
    let cls = losses::classification_loss(g, p, labels).unwrap();
    let d = classify_domain(g, params, &bound, e).unwrap();
    let targets = losses::DomainTarget::batch(subjects, params.spec.n_domains()).unwrap();
    let dom = losses::domain_loss(g, d, &targets).unwrap();
    let a = g.add(recon, cls).unwrap();
    (g.add(a, dom).unwrap(), bound)
}

/// Largest relative error over a random `fraction` of parameter coordinates.
fn max_error(params: &ModelParams, x: &Tensor, fraction: f64, seed: u64) -> (f64, usize) {
    let labels: Vec<u8> = (0..x.shape()[0]).map(|i| (i % 2) as u8).collect();
    let subjects: Vec<usize> = (0..x.shape()[0]).map(|i| i % params.spec.n_domains()).collect();
    let mut g = Graph::new();
    let (obj, bound) = objective(params, x, &labels, &subjects, &mut g);
    let grads = g.backward(obj).unwrap();
    let analytic = bound.gradients(&grads);
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, t) in params.tensors().iter().enumerate() {
        let coords: Vec<usize> = (0..t.len())
            .filter(|_| fraction >= 1.0 || rng.uniform(0.0, 1.0) < fraction)
            .collect();
        if coords.is_empty() {
            continue;
        }
        let a = analytic[k].clone().unwrap_or_else(|| Tensor::zeros_like(t));
        let value = |p: &Tensor| {
            let mut q = params.clone();
            *q.tensors_mut()[k] = p.clone();
            let mut g = Graph::new();
            let (obj, _) = objective(&q, x, &labels, &subjects, &mut g);
            Ok(g.value(obj).item())
        };
        let report = check_coordinates(value, &a, t, &coords, H_MODEL, TOL).unwrap();
        worst = worst.max(report.max_rel_error);
        checked += coords.len();
    }
    (worst, checked)
}

#[test]
fn small_model_every_parameter() {
    let spec = small_spec();
    spec.validate().unwrap();
    let params = off_kink(&spec, 3);
    let x = series(&mut Rng::new(4), 3, spec.input_len);
    let (worst, checked) = max_error(&params, &x, 1.0, 0);
    assert_eq!(checked, params.parameter_count());
    assert!(worst <= TOL, "max rel error {worst:e}");
}

#[test]
fn preset_parameter_sample() {
    let spec = ModelSpec::preset(Preset::Clas, 32, 4).unwrap();
    let params = off_kink(&spec, 5);
    let x = series(&mut Rng::new(6), 2, spec.input_len);
    let (worst, checked) = max_error(&params, &x, 0.05, 7);
    assert!(
        checked * 25 >= params.parameter_count(),
        "{checked} of {}",
        params.parameter_count()
    );
    assert!(worst <= TOL, "max rel error {worst:e}");
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let spec = small_spec();
    let params = models::build(&spec, 9).unwrap();
    let x = series(&mut Rng::new(10), 2, spec.input_len);
    let run = || {
        let mut g = Graph::new();
        let (obj, bound) = objective(&params, &x, &[0, 1], &[0, 2], &mut g);
        let grads = g.backward(obj).unwrap();
        (g.value(obj).item().to_bits(), bound.gradients(&grads))
    };
    assert_eq!(run(), run());
}
