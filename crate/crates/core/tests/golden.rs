use pirl_core::models::{self, ModelParams, ModelSpec, Preset};
use pirl_core::Tensor;

fn fixture() -> (ModelParams, Tensor) {
    let spec = ModelSpec::preset(Preset::Clas, 32, 3).unwrap();
    let params = models::build(&spec, 42).unwrap();
    let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.4).sin() + 0.1 * t as f64).collect();
    (params, Tensor::new(vec![1, 32], x).unwrap())
}

const LATENT: [f64; 8] = [
    0.01817038085242163,
    0.029690690827928176,
    0.03578124706596882,
    0.008309473462049605,
    0.0021729513420521845,
    0.03143876865320108,
    0.014955070436793033,
    0.016752447147144217,
];
const RECON_HEAD: [f64; 6] = [
    5.241678738418217e-5,
    -0.00012275705318662376,
    3.108035619848316e-5,
    -0.0002112540783737963,
    -7.928504658075624e-5,
    -0.0002349374955304776,
];
const CLASS: f64 = 0.4988523315087598;
const DOMAIN: [f64; 3] = [0.3366085751164808, 0.3315827791919884, 0.3318086456915308];

fn close(actual: &[f64], expected: &[f64]) {
    assert_eq!(actual.len(), expected.len());
    for (a, e) in actual.iter().zip(expected) {
        assert!((a - e).abs() <= 1e-12 * e.abs().max(1e-3), "{a} vs {e}");
    }
}

#[test]
fn encoder_regression() {
    let (p, x) = fixture();
    close(p.encode_tensor(&x).unwrap().data(), &LATENT);
}

#[test]
fn decoder_regression() {
    let (p, _) = fixture();
    let e = Tensor::vector(LATENT.to_vec());
    close(&p.decode_tensor(&e).unwrap().data()[..6], &RECON_HEAD);
}

#[test]
fn classifier_regression() {
    let (p, _) = fixture();
    let e = Tensor::vector(LATENT.to_vec());
    close(p.classify_tensor(&e).unwrap().data(), &[CLASS]);
}

#[test]
fn domain_head_regression() {
    let (p, _) = fixture();
    let e = Tensor::vector(LATENT.to_vec());
    let d = p.classify_domain_tensor(&e).unwrap();
    close(d.data(), &DOMAIN);
    assert!((d.sum() - 1.0).abs() < 1e-9);
}
