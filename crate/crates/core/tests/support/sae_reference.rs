// SPDX-License-Identifier: MIT OR Apache-2.0

//! f64 reimplementation of the SAE loss that shares no code with the graph
//! engine, and a finite-difference check of the analytic gradients against it.

use numkit::Tensor;
use protosteer::sae::{sae_loss_grads, Penalty, SaeConfig, SaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Ref {
    d: usize,
    h: usize,
    w_e: Vec<f64>,
    b_e: Vec<f64>,
    w_d: Vec<f64>,
}

impl Ref {
    pub fn from(p: &SaeParams) -> Self {
        let f = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        Ref {
            d: p.w_e.shape()[1],
            h: p.w_e.shape()[0],
            w_e: f(&p.w_e),
            b_e: f(&p.b_e),
            w_d: f(&p.w_d),
        }
    }

    pub fn pre(&self, q: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|j| self.b_e[j] + (0..self.d).map(|i| self.w_e[j * self.d + i] * q[i]).sum::<f64>())
            .collect()
    }

    /// (total, recon, sparsity, bias) with per-example terms averaged.
    pub fn loss(&self, q: &[Vec<f64>], cfg: &SaeConfig) -> (f64, f64, f64, f64) {
        let (d, h) = (self.d, self.h);
        let norms: Vec<f64> = (0..h)
            .map(|j| {
                let n = (0..d).map(|i| self.w_d[i * h + j].powi(2)).sum::<f64>().sqrt();
                n.max(cfg.norm_eps as f64)
            })
            .collect();
        let mut recon = 0.0;
        let mut sparsity = 0.0;
        for row in q {
            let z: Vec<f64> = self.pre(row).into_iter().map(|v| v.max(0.0)).collect();
            for i in 0..d {
                let qh: f64 = (0..h).map(|j| self.w_d[i * h + j] / norms[j] * z[j]).sum();
                recon += (qh - row[i]).powi(2);
            }
            sparsity += match cfg.penalty {
                Penalty::L1 => z.iter().map(|v| v.abs()).sum::<f64>(),
                Penalty::L2 => z.iter().map(|v| v * v).sum::<f64>(),
            };
        }
        let n = q.len() as f64;
        recon /= n;
        sparsity /= n;
        let bias = self.b_e.iter().map(|v| v * v).sum::<f64>().sqrt();
        (recon + cfg.alpha as f64 * sparsity + cfg.beta as f64 * bias, recon, sparsity, bias)
    }
}

pub fn rows(q: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = q.dims2().unwrap();
    (0..n).map(|r| q.data()[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect()).collect()
}

pub fn instance(seed: u64, penalty: Penalty) -> (SaeParams, Tensor, SaeConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let d = rng.gen_range(2..6);
        let h = rng.gen_range(d + 1..3 * d + 2);
        let n = rng.gen_range(1..6);
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, || rng.gen_range(-1.0f32..1.0));
        let params = SaeParams {
            w_e: u(&[h, d]),
            b_e: u(&[h]),
            w_d: u(&[d, h]),
        };
        let q = u(&[n, d]);
        let cfg = SaeConfig {
            latent: h,
            alpha: 0.3,
            beta: 0.2,
            penalty,
            ..SaeConfig::default()
        };
        // Central differences straddling a ReLU kink are meaningless.
        let r = Ref::from(&params);
        let clear = rows(&q).iter().all(|row| r.pre(row).iter().all(|v| v.abs() > 1e-3));
        if clear {
            return (params, q, cfg);
        }
    }
}

pub fn rel_error(params: &SaeParams, q: &Tensor, cfg: &SaeConfig) -> f64 {
    let (_, grads) = sae_loss_grads(params, q, cfg).unwrap();
    let qr = rows(q);
    let h = 1e-6;
    let (mut diff, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (k, grad) in grads.iter().enumerate() {
        let len = grad.numel();
        for j in 0..len {
            let bump = |delta: f64| {
                let mut r = Ref::from(params);
                match k {
                    0 => r.w_e[j] += delta,
                    1 => r.b_e[j] += delta,
                    _ => r.w_d[j] += delta,
                }
                r.loss(&qr, cfg).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = grad.data()[j] as f64;
            diff += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    diff.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12)
}
