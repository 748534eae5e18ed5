//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of a coordinate is `|a - n| / max(1, |a|, |n|)` for
//! analytic `a` and numeric `n`, so tiny gradients are compared absolutely
//! and large ones relatively.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against central differences of `value` on the
/// listed coordinates of `point`.
pub fn check_coordinates<F>(
    mut value: F,
    analytic: &Tensor,
    point: &Tensor,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
        return Err(invalid("finite_difference_check", "step h must be positive"));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            left: analytic.shape().to_vec(),
            right: point.shape().to_vec(),
        });
    }
    let mut coordinates = Vec::with_capacity(coords.len());
    let mut probe = point.clone();
    for &i in coords {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = value(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let minus = value(&probe)?;
        probe.data_mut()[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} perturbed by ±{h}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        coordinates.push(CoordinateCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        coordinates,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Checks every coordinate of `point` for the scalar objective built by `build`.
pub fn finite_difference_check<B>(build: B, point: &Tensor, h: f64, tol: f64) -> Result<FdReport>
where
    B: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<(Graph, Var, Var)> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone());
        let out = build(&mut g, input)?;
        Ok((g, input, out))
    };
    let (g, input, out) = eval(point)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(input).cloned().unwrap_or_else(|| Tensor::zeros_like(point));
    let coords: Vec<usize> = (0..point.len()).collect();
    check_coordinates(
        |x| {
            let (g, _, out) = eval(x)?;
            Ok(g.value(out).item())
        },
        &analytic,
        point,
        &coords,
        h,
        tol,
    )
}

/// Worst result of one operation over a batch of randomized trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Draws `n` values in `[-1, 1]` keeping `|x| >= gap`, so piecewise rules
/// are never probed within `gap` of a kink.
fn draw(rng: &mut Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = rng.uniform(-1.0, 1.0);
            if x.abs() >= gap {
                break x;
            }
        })
        .collect()
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), draw(rng, n, 0.0)).expect("shape matches data")
}

/// Splits the flat leaf `x` into consecutive pieces of the given shapes.
fn unpack(g: &mut Graph, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let total = g.value(x).len();
    let col = g.reshape(x, &[total, 1])?;
    let mut start = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let rows: Vec<usize> = (start..start + n).collect();
        let piece = g.select_rows(col, &rows)?;
        out.push(g.reshape(piece, shape)?);
        start += n;
    }
    Ok(out)
}

/// Contracts a tensor output with fixed random weights into a scalar, so
/// the whole Jacobian is exercised.
fn contract(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.leaf(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn pack(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::vector(data)
}

fn shapes(parts: &[&Tensor]) -> Vec<Vec<usize>> {
    parts.iter().map(|t| t.shape().to_vec()).collect()
}

/// Runs central-difference checks for every differentiable primitive and
/// every objective term, `trials` randomized draws each, inputs in
/// `[-1, 1]`, step `h`.
pub fn suite(trials: usize, seed: u64, h: f64) -> Result<Vec<SuiteEntry>> {
    use crate::losses::{self, KernelConfig, PretrainMode};

    type Case = fn(&mut Rng, f64) -> Result<f64>;

    fn check<B>(build: B, point: &Tensor, h: f64) -> Result<f64>
    where
        B: Fn(&mut Graph, Var) -> Result<Var>,
    {
        Ok(finite_difference_check(build, point, h, f64::INFINITY)?.max_rel_error)
    }

    fn elementwise(rng: &mut Rng, h: f64, gap: f64, op: fn(&mut Graph, Var) -> Var) -> Result<f64> {
        let shape = [1 + rng.index(3), 1 + rng.index(5)];
        let n = shape[0] * shape[1];
        let x = Tensor::new(shape.to_vec(), draw(rng, n, gap))?;
        let w = random(rng, &shape);
        check(
            |g, v| {
                let y = op(g, v);
                contract(g, y, &w)
            },
            &x,
            h,
        )
    }

    fn binary(rng: &mut Rng, h: f64, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
        let shape = vec![1 + rng.index(3), 1 + rng.index(4)];
        let (a, b, w) = (random(rng, &shape), random(rng, &shape), random(rng, &shape));
        let sh = [shape.clone(), shape];
        check(
            |g, v| {
                let p = unpack(g, v, &sh)?;
                let y = op(g, p[0], p[1])?;
                contract(g, y, &w)
            },
            &pack(&[&a, &b]),
            h,
        )
    }

    let cases: Vec<(&'static str, Case)> = vec![
        ("add", |r, h| binary(r, h, |g, a, b| g.add(a, b))),
        ("sub", |r, h| binary(r, h, |g, a, b| g.sub(a, b))),
        ("mul", |r, h| binary(r, h, |g, a, b| g.mul(a, b))),
        ("scale", |r, h| elementwise(r, h, 0.0, |g, x| g.scale(x, -1.7))),
        ("sum", |r, h| {
            let x = {
                let s = [1 + r.index(4), 1 + r.index(4)];
                random(r, &s)
            };
            check(|g, v| Ok(g.sum(v)), &x, h)
        }),
        ("mean", |r, h| {
            let x = {
                let s = [1 + r.index(4), 1 + r.index(4)];
                random(r, &s)
            };
            check(|g, v| Ok(g.mean(v)), &x, h)
        }),
        ("reshape", |r, h| {
            let x = random(r, &[2, 3]);
            let w = random(r, &[3, 2]);
            check(
                |g, v| {
                    let y = g.reshape(v, &[3, 2])?;
                    contract(g, y, &w)
                },
                &x,
                h,
            )
        }),
        ("relu", |r, h| elementwise(r, h, 10.0 * h, |g, x| g.relu(x))),
        ("sigmoid", |r, h| elementwise(r, h, 0.0, |g, x| g.sigmoid(x))),
        ("softmax", |r, h| elementwise(r, h, 0.0, |g, x| g.softmax(x))),
        ("conv1d", |r, h| {
            let batched = r.index(2) == 1;
            let (cin, cout, k) = (1 + r.index(3), 1 + r.index(3), 1 + r.index(3));
            let len = k + r.index(6);
            let (stride, padding) = (1 + r.index(3), r.index(3));
            let xs: Vec<usize> = if batched {
                vec![1 + r.index(3), cin, len]
            } else {
                vec![cin, len]
            };
            let x = random(r, &xs);
            let kw = random(r, &[cout, cin, k]);
            let b = random(r, &[cout]);
            let mut probe = Graph::new();
            let (xv, kv, bv) = (probe.leaf(x.clone()), probe.leaf(kw.clone()), probe.leaf(b.clone()));
            let out = probe.conv1d(xv, kv, bv, stride, padding)?;
            let w = random(r, probe.value(out).shape());
            let sh = shapes(&[&x, &kw, &b]);
            check(
                |g, v| {
                    let p = unpack(g, v, &sh)?;
                    let y = g.conv1d(p[0], p[1], p[2], stride, padding)?;
                    contract(g, y, &w)
                },
                &pack(&[&x, &kw, &b]),
                h,
            )
        }),
        ("dense", |r, h| {
            let (n, m) = (1 + r.index(4), 1 + r.index(4));
            let xs: Vec<usize> = if r.index(2) == 1 {
                vec![1 + r.index(3), n]
            } else {
                vec![n]
            };
            let x = random(r, &xs);
            let wt = random(r, &[m, n]);
            let b = random(r, &[m]);
            let mut os = xs.clone();
            *os.last_mut().unwrap() = m;
            let w = random(r, &os);
            let sh = shapes(&[&x, &wt, &b]);
            check(
                |g, v| {
                    let p = unpack(g, v, &sh)?;
                    let y = g.dense(p[0], p[1], p[2])?;
                    contract(g, y, &w)
                },
                &pack(&[&x, &wt, &b]),
                h,
            )
        }),
        ("upsample_nearest", |r, h| {
            let (c, len, f) = (1 + r.index(3), 1 + r.index(4), 1 + r.index(3));
            let x = random(r, &[c, len]);
            let w = random(r, &[c, len * f]);
            check(
                |g, v| {
                    let y = g.upsample_nearest(v, f)?;
                    contract(g, y, &w)
                },
                &x,
                h,
            )
        }),
        ("select_rows", |r, h| {
            let n = 2 + r.index(4);
            let x = random(r, &[n, 3]);
            let rows: Vec<usize> = (0..1 + r.index(5)).map(|_| r.index(n)).collect();
            let w = random(r, &[rows.len(), 3]);
            check(
                |g, v| {
                    let y = g.select_rows(v, &rows)?;
                    contract(g, y, &w)
                },
                &x,
                h,
            )
        }),
        ("gradient_reversal", |r, h| {
            // the reported error compares the reversed analytic gradient
            // with the numeric gradient of the (identity) forward pass
            let scale = r.uniform(0.1, 2.0);
            let x = {
                let s = [1 + r.index(5)];
                random(r, &s)
            };
            let w = random(r, x.shape());
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let y = g.gradient_reversal(v, scale);
            let obj = contract(&mut g, y, &w)?;
            let analytic = g
                .backward(obj)?
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(&x));
            let expected = analytic.map(|a| -a / scale);
            let coords: Vec<usize> = (0..x.len()).collect();
            let value = |p: &Tensor| Ok(p.data().iter().zip(w.data()).map(|(a, b)| a * b).sum());
            Ok(check_coordinates(value, &expected, &x, &coords, h, f64::INFINITY)?.max_rel_error)
        }),
        ("recon_loss", |r, h| {
            let shape = [1 + r.index(3), 1, 2 + r.index(6)];
            let (x, y) = (random(r, &shape), random(r, &shape));
            let sh = shapes(&[&x, &y]);
            check(
                |g, v| {
                    let p = unpack(g, v, &sh)?;
                    losses::recon_loss(g, p[0], p[1])
                },
                &pack(&[&x, &y]),
                h,
            )
        }),
        ("mmd_rbf", |r, h| {
            let d = 1 + r.index(4);
            let a = {
                let s = [1 + r.index(4), d];
                random(r, &s)
            };
            let b = {
                let s = [1 + r.index(4), d];
                random(r, &s)
            };
            let kernel = KernelConfig::fixed(r.uniform(0.5, 2.0));
            let sh = shapes(&[&a, &b]);
            check(
                |g, v| {
                    let p = unpack(g, v, &sh)?;
                    losses::mmd_rbf(g, p[0], p[1], &kernel)
                },
                &pack(&[&a, &b]),
                h,
            )
        }),
        ("mmd_pairwise", |r, h| {
            let rows = 4 + r.index(6);
            let subjects: Vec<usize> = (0..rows).map(|i| if i < 2 { i } else { r.index(3) }).collect();
            let x = {
                let s = [rows, 1 + r.index(4)];
                random(r, &s)
            };
            let kernel = KernelConfig::fixed(r.uniform(0.5, 2.0));
            check(|g, v| losses::mmd_pairwise(g, v, &subjects, &kernel), &x, h)
        }),
        ("domain_loss", |r, h| {
            let (b, n) = (1 + r.index(4), 2 + r.index(4));
            let x = random(r, &[b, n]);
            let targets = losses::DomainTarget::batch(&(0..b).map(|_| r.index(n)).collect::<Vec<_>>(), n)?;
            check(
                |g, v| {
                    let p = g.softmax(v);
                    losses::domain_loss(g, p, &targets)
                },
                &x,
                h,
            )
        }),
        ("triplet_loss", |r, h| {
            let (b, d) = (3 + r.index(4), 1 + r.index(4));
            let triples: Vec<losses::TripletIndex> = (0..1 + r.index(4))
                .map(|_| {
                    let a = r.index(b);
                    let p = (a + 1 + r.index(b - 1)) % b;
                    let mut n = r.index(b);
                    while n == a || n == p {
                        n = r.index(b);
                    }
                    (a, p, n)
                })
                .collect();
            let margin = r.uniform(0.2, 1.5);
            // redraw until every hinge argument sits clear of its kink
            let x = loop {
                let x = random(r, &[b, d]);
                let dist = |i: usize, j: usize| -> f64 {
                    libm::sqrt(
                        x.row(i)
                            .iter()
                            .zip(x.row(j))
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum::<f64>(),
                    )
                };
                let clear = triples.iter().all(|&(a, p, n)| {
                    (dist(a, p) - dist(a, n) + margin).abs() > 0.05 && dist(a, p) > 0.05 && dist(a, n) > 0.05
                });
                if clear {
                    break x;
                }
            };
            check(|g, v| losses::triplet_loss(g, v, &triples, margin), &x, h)
        }),
        ("classification_loss", |r, h| {
            let n = 1 + r.index(6);
            let x = random(r, &[n]);
            let labels: Vec<u8> = (0..n).map(|_| r.index(2) as u8).collect();
            check(
                |g, v| {
                    let p = g.sigmoid(v);
                    losses::classification_loss(g, p, &labels)
                },
                &x,
                h,
            )
        }),
        ("combined_pretrain_loss", |r, h| {
            let lambda = r.uniform(0.0, 1.0);
            let mode = if r.index(2) == 1 {
                PretrainMode::Mmd
            } else {
                PretrainMode::Dann
            };
            let x = random(r, &[2]);
            check(
                |g, v| {
                    let p = unpack(g, v, &[vec![1], vec![1]])?;
                    let (a, b) = (g.mul(p[0], p[0])?, g.mul(p[1], p[1])?);
                    let (a, b) = (g.sum(a), g.sum(b));
                    losses::combined_pretrain_loss(g, a, Some(b), mode, lambda)
                },
                &x,
                h,
            )
        }),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, case)) in cases.into_iter().enumerate() {
        let mut rng = Rng::with_stream(seed, 1000 + i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max(case(&mut rng, h)?);
        }
        out.push(SuiteEntry {
            name,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::boxed::Box;
    use alloc::vec;

    #[test]
    fn square_passes() {
        let report = finite_difference_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-3, 1e-4).unwrap();
        assert!(report.passed);
        let c = &report.coordinates[0];
        assert_eq!(c.analytic, 6.0);
        assert!((c.numeric - 6.0).abs() < 1e-9);
    }

    /// Cube with a deliberately wrong derivative rule (2x instead of 3x^2).
    struct BrokenCube;

    impl crate::graph::Function for BrokenCube {
        fn name(&self) -> &'static str {
            "broken_cube"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|x| x * x * x))
        }
        fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Tensor> {
            vec![inputs[0].zip_map(grad, |x, g| 2.0 * x * g)]
        }
    }

    #[test]
    fn corrupted_rule_fails() {
        let report = finite_difference_check(
            |g, x| {
                let c = g.custom(&[x], Box::new(BrokenCube))?;
                Ok(g.sum(c))
            },
            &Tensor::vector(vec![0.7, -1.3]),
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &Tensor::scalar(1.0), 0.0, 1e-4).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = check_coordinates(
            |x| Ok(1.0 / x.item()),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &[0],
            1e-3,
            1e-4,
        );
        assert!(r.is_ok());
        let r = check_coordinates(
            |_| Ok(f64::NAN),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &[0],
            1e-3,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
