// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks for every differentiable op, shared by
//! the numkit test suite and the workspace acceptance run.
//!
//! The oracle perturbs one input element by ±h, re-runs the forward pass on a
//! fresh graph and reduces the op output against a fixed random weighting in
//! f64. It never touches a backward rule.

use numkit::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 24;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, || rng.gen_range(-1.0f32..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, || {
        let mag = rng.gen_range(0.1f32..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn weighted_output(inputs: &[Tensor], weights: &Tensor, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars);
    g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

/// Relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over all
/// inputs jointly.
fn grad_rel_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = rand_tensor(&mut rng, g.value(out).shape());
    let w = g.constant(weights.clone()).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut diff_sq = 0.0f64;
    let mut a_sq = 0.0f64;
    let mut n_sq = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            // Divide by the step actually taken after f32 rounding.
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let numeric = (weighted_output(&plus, &weights, build)
                - weighted_output(&minus, &weights, build))
                / step;
            let a = analytic.data()[j] as f64;
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
    }
    let scale = a_sq.sqrt().max(n_sq.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff_sq.sqrt() / scale
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn square(r: &mut ChaCha8Rng) -> Tensor {
    let s = [dim(r), dim(r)];
    rand_tensor(r, &s)
}

fn square_away(r: &mut ChaCha8Rng) -> Tensor {
    let s = [dim(r), dim(r)];
    rand_away_from_zero(r, &s)
}

type Make = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>);

/// One op: draws an instance (inputs plus the graph to build) from a seeded
/// generator.
pub struct OpCase {
    pub name: &'static str,
    make: Make,
}

impl OpCase {
    /// Relative error of instance `seed`.
    pub fn error(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + self.name.len() as u64);
        let (inputs, build) = (self.make)(&mut rng);
        grad_rel_error(&inputs, &*build, seed)
    }

    /// Worst relative error over `instances` seeds and the seed that hit it.
    pub fn worst(&self, instances: u64) -> (f64, u64) {
        (0..instances).map(|s| (self.error(s), s)).fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
    }
}

macro_rules! case {
    ($name:literal, |$r:ident| $inputs:expr, |$g:ident, $v:ident| $build:expr) => {
        OpCase {
            name: $name,
            make: |$r| {
                let inputs = $inputs;
                let build: Box<Build> = Box::new(|$g: &mut Graph, $v: &[Var]| $build);
                (inputs, build)
            },
        }
    };
}

pub fn cases() -> Vec<OpCase> {
    vec![
        case!("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])]
        }, |g, v| g.matmul(v[0], v[1]).unwrap()),
        case!("matmul_vec", |r| {
            let (m, k) = (dim(r), dim(r));
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k])]
        }, |g, v| g.matmul(v[0], v[1]).unwrap()),
        case!("matmul_nt", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[n, k])]
        }, |g, v| g.matmul_nt(v[0], v[1]).unwrap()),
        case!("transpose", |r| vec![square(r)], |g, v| g.transpose(v[0]).unwrap()),
        case!("add", |r| {
            let s = [dim(r), dim(r)];
            vec![rand_tensor(r, &s), rand_tensor(r, &s)]
        }, |g, v| g.add(v[0], v[1]).unwrap()),
        case!("sub", |r| {
            let s = [dim(r), dim(r)];
            vec![rand_tensor(r, &s), rand_tensor(r, &s)]
        }, |g, v| g.sub(v[0], v[1]).unwrap()),
        case!("mul", |r| {
            let s = [dim(r), dim(r)];
            vec![rand_tensor(r, &s), rand_tensor(r, &s)]
        }, |g, v| g.mul(v[0], v[1]).unwrap()),
        case!("add_row", |r| {
            let (m, n) = (dim(r), dim(r));
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])]
        }, |g, v| g.add_row(v[0], v[1]).unwrap()),
        case!("scale", |r| vec![square(r)], |g, v| g.scale(v[0], -1.7).unwrap()),
        case!("relu", |r| vec![square_away(r)], |g, v| g.relu(v[0]).unwrap()),
        // Width 2 is degenerate: the normalized row is always (±1, ∓1).
        case!("layer_norm", |r| {
            let (m, n) = (dim(r), r.gen_range(3..=6));
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n]), rand_tensor(r, &[n])]
        }, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        case!("softmax", |r| {
            let s = [r.gen_range(3..=6), r.gen_range(3..=6)];
            vec![rand_tensor(r, &s)]
        }, |g, v| g.softmax(v[0]).unwrap()),
        case!("causal_softmax", |r| {
            let s = r.gen_range(3..=6);
            vec![rand_tensor(r, &[s, s])]
        }, |g, v| g.causal_softmax(v[0]).unwrap()),
        OpCase {
            name: "cross_entropy",
            make: |r| {
                let (m, c) = (dim(r), r.gen_range(2..=6));
                let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..c)).collect();
                let build: Box<Build> = Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets).unwrap());
                (vec![rand_tensor(r, &[m, c])], build)
            },
        },
        case!("l1", |r| vec![square_away(r)], |g, v| g.l1(v[0]).unwrap()),
        case!("sq_l2", |r| vec![square(r)], |g, v| g.sq_l2(v[0]).unwrap()),
        case!("l2", |r| vec![square_away(r)], |g, v| g.l2(v[0]).unwrap()),
        case!("sum", |r| vec![square(r)], |g, v| g.sum(v[0]).unwrap()),
        case!("mean", |r| vec![square(r)], |g, v| g.mean(v[0]).unwrap()),
        case!("mean_axis0", |r| vec![square(r)], |g, v| g.mean_axis(v[0], 0).unwrap()),
        case!("mean_axis1", |r| {
            let s = [dim(r), dim(r), dim(r)];
            vec![rand_tensor(r, &s)]
        }, |g, v| g.mean_axis(v[0], 1).unwrap()),
        case!("concat_axis1", |r| {
            let m = dim(r);
            (0..3).map(|_| { let s = [m, dim(r)]; rand_tensor(r, &s) }).collect::<Vec<_>>()
        }, |g, v| g.concat(v, 1).unwrap()),
        case!("concat_axis0", |r| {
            let n = dim(r);
            (0..2).map(|_| { let s = [dim(r), n]; rand_tensor(r, &s) }).collect::<Vec<_>>()
        }, |g, v| g.concat(v, 0).unwrap()),
        case!("narrow", |r| vec![{ let s = [dim(r), 6]; rand_tensor(r, &s) }], |g, v| g.narrow(v[0], 1, 2, 3).unwrap()),
        case!("gather_rows", |r| vec![{ let s = [4, dim(r)]; rand_tensor(r, &s) }], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()),
        case!("rope", |r| vec![{ let s = [dim(r), 2 * dim(r)]; rand_tensor(r, &s) }], |g, v| g.rope(v[0], 10_000.0).unwrap()),
        case!("col_normalize", |r| vec![{ let s = [dim(r) + 1, dim(r)]; rand_away_from_zero(r, &s) }], |g, v| g.col_normalize(v[0], 1e-8).unwrap()),
        // Random compositions drawn from a pool of shape-preserving unary ops.
        OpCase {
            name: "three_op_chain",
            make: |r| {
                let ops: Vec<u32> = (0..3).map(|_| r.gen_range(0..4)).collect();
                let s = [r.gen_range(2..=5), r.gen_range(2..=5)];
                let inputs = vec![rand_tensor(r, &s), rand_tensor(r, &[s[1], s[1]])];
                let build: Box<Build> = Box::new(move |g: &mut Graph, v: &[Var]| {
                    let mut x = v[0];
                    for &op in &ops {
                        x = match op {
                            0 => g.matmul(x, v[1]).unwrap(),
                            1 => g.softmax(x).unwrap(),
                            2 => {
                                let y = g.scale(x, 0.5).unwrap();
                                g.mul(y, x).unwrap()
                            }
                            _ => g.add(x, v[0]).unwrap(),
                        };
                    }
                    x
                });
                (inputs, build)
            },
        },
    ]
}
