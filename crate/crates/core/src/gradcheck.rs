//! Finite-difference checks of every differentiable piece, from single
//! tensor ops up to the full warp-and-classify objective.

use std::rc::Rc;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::model::{cross_entropy, entropy, semantic_distance, BoundClassifier, Classifier};
use crate::signal::{warp_apply, StftBasis};
use crate::tensor::{gradient_pair_on, scaled_max_error, OpKind, Tape, Tensor, TensorError, Var};
use crate::warp::make_path_var;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub points: usize,
    pub h: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Sign-flip this op's backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            points: 20,
            h: 1e-5,
            threshold: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

/// Result for one checked item: the worst scaled error (see
/// [`scaled_max_error`]) over all points.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Objective = Box<dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>>;

/// One random instance: the input point and the scalar function of it.
struct Case {
    x: Tensor,
    f: Objective,
}

struct Item {
    name: &'static str,
    make: fn(&mut Xoshiro256PlusPlus) -> Case,
}

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
fn off_zero(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_range(0..2) == 0 {
            *v = -*v;
        }
    }
    t
}

/// Weighted sum `Σ r·v` with fresh random weights, so every output
/// coordinate contributes with a distinct slope.
fn weights(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

fn wsum<'t>(v: Var<'t>, r: &Tensor) -> Result<Var<'t>, TensorError> {
    v.mul(v.tape().constant(r.clone()))?.sum()
}

fn unary(rng: &mut Xoshiro256PlusPlus, x: Tensor, op: fn(Var<'_>) -> Result<Var<'_>, TensorError>) -> Case {
    let r = weights(rng, x.shape());
    Case {
        x,
        f: Box::new(move |v| wsum(op(v)?, &r)),
    }
}

fn binary(
    rng: &mut Xoshiro256PlusPlus,
    x: Tensor,
    other: Tensor,
    x_left: bool,
    op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
) -> Case {
    let shape = {
        let tape = Tape::new();
        let (a, b) = (tape.constant(x.clone()), tape.constant(other.clone()));
        let out = if x_left { op(a, b) } else { op(b, a) };
        out.expect("operand shapes").shape()
    };
    let r = weights(rng, &shape);
    Case {
        x,
        f: Box::new(move |v| {
            let c = v.tape().constant(other.clone());
            let out = if x_left { op(v, c)? } else { op(c, v)? };
            wsum(out, &r)
        }),
    }
}

const S: [usize; 2] = [3, 4];

fn items() -> Vec<Item> {
    vec![
        Item {
            name: "add",
            make: |r| {
                let (x, c) = (uniform(r, &S, -1.0, 1.0), uniform(r, &S, -1.0, 1.0));
                binary(r, x, c, true, |a, b| a.add(b))
            },
        },
        Item {
            name: "add (scalar broadcast)",
            make: |r| {
                let (x, c) = (uniform(r, &[], -1.0, 1.0), uniform(r, &S, -1.0, 1.0));
                binary(r, x, c, true, |a, b| a.add(b))
            },
        },
        Item {
            name: "sub",
            make: |r| {
                let (x, c) = (uniform(r, &S, -1.0, 1.0), uniform(r, &S, -1.0, 1.0));
                binary(r, x, c, false, |a, b| a.sub(b))
            },
        },
        Item {
            name: "mul",
            make: |r| {
                let (x, c) = (uniform(r, &S, -1.0, 1.0), uniform(r, &S, -1.0, 1.0));
                binary(r, x, c, true, |a, b| a.mul(b))
            },
        },
        Item {
            name: "div (numerator)",
            make: |r| {
                let (x, c) = (uniform(r, &S, -1.0, 1.0), off_zero(r, &S));
                binary(r, x, c, true, |a, b| a.div(b))
            },
        },
        Item {
            name: "div (denominator)",
            make: |r| {
                let (x, c) = (off_zero(r, &S), uniform(r, &S, -1.0, 1.0));
                binary(r, x, c, false, |a, b| a.div(b))
            },
        },
        Item {
            name: "add_scalar",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                unary(r, x, |v| v.add_scalar(0.7))
            },
        },
        Item {
            name: "mul_scalar",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                unary(r, x, |v| v.mul_scalar(-1.3))
            },
        },
        Item {
            name: "neg",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                unary(r, x, |v| v.neg())
            },
        },
        Item {
            name: "relu",
            make: |r| {
                let x = off_zero(r, &S);
                unary(r, x, |v| v.relu())
            },
        },
        Item {
            name: "abs",
            make: |r| {
                let x = off_zero(r, &S);
                unary(r, x, |v| v.abs())
            },
        },
        Item {
            name: "cos",
            make: |r| {
                let x = uniform(r, &S, -3.0, 3.0);
                unary(r, x, |v| v.cos())
            },
        },
        Item {
            name: "sin",
            make: |r| {
                let x = uniform(r, &S, -3.0, 3.0);
                unary(r, x, |v| v.sin())
            },
        },
        Item {
            name: "exp",
            make: |r| {
                let x = uniform(r, &S, -2.0, 2.0);
                unary(r, x, |v| v.exp())
            },
        },
        Item {
            name: "log",
            make: |r| {
                let x = uniform(r, &S, 0.2, 3.0);
                unary(r, x, |v| v.log())
            },
        },
        Item {
            name: "sum",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                let w = weights(r, &S);
                Case {
                    x,
                    f: Box::new(move |v| v.mul(v.tape().constant(w.clone()))?.sum()?.mul_scalar(1.0)),
                }
            },
        },
        Item {
            name: "mean",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                let w = weights(r, &S);
                Case {
                    x,
                    f: Box::new(move |v| v.mul(v.tape().constant(w.clone()))?.mean()),
                }
            },
        },
        Item {
            name: "min_reduce",
            make: |r| {
                let x = distinct(r, 12);
                let w = weights(r, &[12]);
                Case {
                    x,
                    f: Box::new(move |v| v.mul(v.tape().constant(w.clone()))?.min_reduce()),
                }
            },
        },
        Item {
            name: "max_reduce",
            make: |r| {
                let x = distinct(r, 12);
                let w = weights(r, &[12]);
                Case {
                    x,
                    f: Box::new(move |v| v.mul(v.tape().constant(w.clone()))?.max_reduce()),
                }
            },
        },
        Item {
            name: "cumsum",
            make: |r| {
                let x = uniform(r, &[10], -1.0, 1.0);
                unary(r, x, |v| v.cumsum())
            },
        },
        Item {
            name: "reshape",
            make: |r| {
                let x = uniform(r, &S, -1.0, 1.0);
                let w = weights(r, &[2, 6]);
                Case {
                    x,
                    f: Box::new(move |v| wsum(v.reshape([2, 6])?, &w)),
                }
            },
        },
        Item {
            name: "gather",
            make: |r| {
                let x = uniform(r, &[6], -1.0, 1.0);
                let idx: Rc<[usize]> = (0..15).map(|_| r.random_range(0..6)).collect();
                let w = weights(r, &[3, 5]);
                Case {
                    x,
                    f: Box::new(move |v| wsum(v.gather(Rc::clone(&idx), [3, 5])?, &w)),
                }
            },
        },
        Item {
            name: "matmul (lhs)",
            make: |r| {
                let (x, c) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0));
                binary(r, x, c, true, |a, b| a.matmul(b))
            },
        },
        Item {
            name: "matmul (rhs)",
            make: |r| {
                let (x, c) = (uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0));
                let w = weights(r, &[3, 2]);
                Case {
                    x,
                    f: Box::new(move |v| wsum(v.tape().constant(c.clone()).matmul(v)?, &w)),
                }
            },
        },
        Item {
            name: "conv1d (input)",
            make: |r| {
                let x = uniform(r, &[2, 11], -1.0, 1.0);
                let (k, b) = (uniform(r, &[3, 2, 5], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0));
                let w = weights(r, &[3, 6]);
                Case {
                    x,
                    f: Box::new(move |v| {
                        let t = v.tape();
                        wsum(v.conv1d(t.constant(k.clone()), Some(t.constant(b.clone())), 2, 2)?, &w)
                    }),
                }
            },
        },
        Item {
            name: "conv1d (kernels)",
            make: |r| {
                let k = uniform(r, &[3, 2, 5], -1.0, 1.0);
                let inp = uniform(r, &[2, 11], -1.0, 1.0);
                let w = weights(r, &[3, 6]);
                Case {
                    x: k,
                    f: Box::new(move |v| wsum(v.tape().constant(inp.clone()).conv1d(v, None, 2, 2)?, &w)),
                }
            },
        },
        Item {
            name: "conv1d (bias)",
            make: |r| {
                let b = uniform(r, &[3], -1.0, 1.0);
                let (inp, k) = (uniform(r, &[2, 11], -1.0, 1.0), uniform(r, &[3, 2, 5], -1.0, 1.0));
                let w = weights(r, &[3, 6]);
                Case {
                    x: b,
                    f: Box::new(move |v| {
                        let t = v.tape();
                        wsum(t.constant(inp.clone()).conv1d(t.constant(k.clone()), Some(v), 2, 2)?, &w)
                    }),
                }
            },
        },
        Item {
            name: "warp path h3∘h2∘h1 (∇φ)",
            make: |r| {
                let phi = uniform(r, &[24], -0.5, 0.5);
                let w = weights(r, &[24]);
                let phi_max = r.random_range(1.0..4.0);
                Case {
                    x: phi,
                    f: Box::new(move |v| {
                        let path = make_path_var(v, phi_max, 5).map_err(warp_err)?;
                        wsum(path, &w)
                    }),
                }
            },
        },
        Item {
            name: "phase-shift warp (∇δ)",
            make: |r| {
                let delta = uniform(r, &[24], -3.0, 3.0);
                let sig = uniform(r, &[2, 24], -1.0, 1.0);
                let w = weights(r, &[2, 24]);
                Case {
                    x: delta,
                    f: Box::new(move |v| {
                        let basis = StftBasis::new(5);
                        let out = warp_apply(&basis, v.tape().constant(sig.clone()), v).map_err(signal_err)?;
                        wsum(out, &w)
                    }),
                }
            },
        },
        Item {
            name: "end-to-end objective (∇φ)",
            make: |r| end_to_end(r, true),
        },
        Item {
            name: "end-to-end loss (∇x)",
            make: |r| end_to_end(r, false),
        },
    ]
}

fn distinct(rng: &mut Xoshiro256PlusPlus, n: usize) -> Tensor {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.2 + rng.random_range(0.0..0.1)).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::vector(v)
}

fn warp_err(e: crate::warp::WarpError) -> TensorError {
    match e {
        crate::warp::WarpError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "make_path",
            msg: other.to_string(),
        },
    }
}

fn signal_err(e: crate::signal::SignalError) -> TensorError {
    match e {
        crate::signal::SignalError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "warp_apply",
            msg: other.to_string(),
        },
    }
}

fn model_err(e: crate::model::ModelError) -> TensorError {
    TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    }
}

const E2E_N: usize = 32;
const E2E_M: usize = 5;

struct EndToEnd {
    params: Vec<Tensor>,
    z0: Tensor,
    label: usize,
}

impl EndToEnd {
    fn objective<'t>(&self, x: Var<'t>, p: Var<'t>) -> Result<Var<'t>, TensorError> {
        let tape = x.tape();
        let bound = BoundClassifier::from_params(self.params.iter().map(|w| tape.constant(w.clone())).collect(), 1, E2E_N);
        let path = make_path_var(p, 3.0, E2E_M).map_err(warp_err)?;
        let warped = warp_apply(&StftBasis::new(E2E_M), x, path).map_err(signal_err)?;
        let out = bound.forward(warped).map_err(model_err)?;
        let ce = cross_entropy(out.logits, self.label).map_err(model_err)?;
        let h = entropy(out.logits).map_err(model_err)?;
        let d = semantic_distance(out.z, tape.constant(self.z0.clone())).map_err(model_err)?;
        ce.add(h.mul_scalar(0.1)?)?.sub(d.mul_scalar(0.5)?)
    }
}

/// `CE + β·H − γ·‖z − z₀‖²` of a random classifier on a warped random
/// series, as a function of either the warp parameters or the series.
fn end_to_end(rng: &mut Xoshiro256PlusPlus, wrt_phi: bool) -> Case {
    let model = Classifier::new(1, E2E_N, 3, rng.random_range(0..u64::MAX)).expect("model");
    let series = uniform(rng, &[1, E2E_N], -1.0, 1.0);
    let phi = uniform(rng, &[E2E_N], -0.5, 0.5);
    let label = rng.random_range(0..3);
    let z0 = {
        let tape = Tape::new();
        let out = model.bind(&tape, false).forward(tape.constant(series.clone())).expect("forward");
        (*out.z.value()).clone()
    };
    let e = Rc::new(EndToEnd {
        params: model.params().to_vec(),
        z0,
        label,
    });
    if wrt_phi {
        Case {
            x: phi,
            f: Box::new(move |v| e.objective(v.tape().constant(series.clone()), v)),
        }
    } else {
        Case {
            x: series,
            f: Box::new(move |v| e.objective(v, v.tape().constant(phi.clone()))),
        }
    }
}

/// Names of all checked items, in report order.
pub fn item_names() -> Vec<&'static str> {
    items().iter().map(|i| i.name).collect()
}

/// Runs every item at `cfg.points` random points.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, TensorError> {
    let mut out = Vec::new();
    for (k, item) in items().into_iter().enumerate() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ ((k as u64 + 1) << 32));
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.points {
            let case = (item.make)(&mut rng);
            let tape = cfg.fault.map_or_else(Tape::new, Tape::with_fault);
            let (a, n) = gradient_pair_on(tape, &case.f, &case.x, cfg.h)?;
            worst = worst.max(scaled_max_error(&a, &n));
        }
        out.push(CheckResult {
            name: item.name,
            points: cfg.points,
            max_rel_error: worst,
            passed: worst < cfg.threshold,
        });
    }
    Ok(out)
}

/// Fixed-width table of results.
pub fn format_table(results: &[CheckResult], threshold: f64) -> String {
    let mut s = format!("{:<32} {:>6} {:>12}  status\n", "item", "points", "max error");
    for r in results {
        s.push_str(&format!(
            "{:<32} {:>6} {:>12.3e}  {}\n",
            r.name,
            r.points,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!(
        "{} items, {} failed, threshold {threshold:e}\n",
        results.len(),
        failed
    ));
    s
}
