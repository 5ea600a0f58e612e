// SPDX-License-Identifier: MIT OR Apache-2.0

//! Class prototypes in code space, softmax-over-distance classification and
//! gradient steering of a code toward a target class.
//!
//! With `d_k = ‖z − μ_k‖` and `p = softmax(−d)`, the steering objective is
//! `log p_t`, whose gradient is `−u_t + Σ_k p_k u_k` where
//! `u_k = (z − μ_k) / max(‖z − μ_k‖, δ)`. For the squared distance the unit
//! vectors become `2(z − μ_k)`.

use serde::{Deserialize, Serialize};

use numkit::Tensor;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const SINGULAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    L2,
    SquaredL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    SaeQuery,
    RawQuery,
    SaeResidual,
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceKind::SaeQuery => "sae-query",
            SourceKind::RawQuery => "raw-query",
            SourceKind::SaeResidual => "sae-residual",
        })
    }
}

impl SourceKind {
    pub fn uses_sae(self) -> bool {
        !matches!(self, SourceKind::RawQuery)
    }
}

/// Where the codes of a bank came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDescriptor {
    pub kind: SourceKind,
    pub layer: usize,
    pub positions: crate::acts::Positions,
    /// Number of code slices (heads) and the width of each.
    pub slices: usize,
    pub slice_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub source: SourceDescriptor,
    pub support: usize,
    /// One mean code per class.
    pub prototypes: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankMeta {
    source: SourceDescriptor,
    classes: usize,
    support: usize,
    width: usize,
}

impl PrototypeBank {
    /// Mean code of each class, accumulated in f64. Classes are `0..classes`.
    pub fn from_codes(source: SourceDescriptor, codes: &[(usize, Vec<f32>)], classes: usize, names: &[String]) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let width = source.slices * source.slice_width;
        let mut sums = vec![vec![0.0f64; width]; classes];
        let mut counts = vec![0usize; classes];
        for (label, code) in codes {
            if *label >= classes {
                return Err(Error::Config(format!("support label {label} outside 0..{classes}")));
            }
            if code.len() != width {
                return Err(Error::Width {
                    what: "support code",
                    expected: width,
                    actual: code.len(),
                });
            }
            counts[*label] += 1;
            for (s, &v) in sums[*label].iter_mut().zip(code) {
                *s += v as f64;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(names.get(k).cloned().unwrap_or_else(|| k.to_string())));
        }
        let prototypes: Vec<Vec<f32>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| (v / c as f64) as f32).collect())
            .collect();
        let bank = Self {
            source,
            support: counts.iter().copied().min().unwrap_or(0),
            prototypes,
        };
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<()> {
        if self.prototypes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype"));
        }
        let distinct = self.prototypes.iter().any(|p| p != &self.prototypes[0]);
        if !distinct {
            return Err(Error::Config("all prototypes coincide".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn width(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BankMeta {
            source: self.source.clone(),
            classes: self.classes(),
            support: self.support,
            width: self.width(),
        };
        let mut ck = Checkpoint::new("prototypes", serde_json::to_value(meta).expect("meta serializes"));
        for (k, p) in self.prototypes.iter().enumerate() {
            ck.push(format!("class.{k}"), Tensor::vector(p.clone()).expect("non-empty prototype"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("prototypes")?;
        let meta: BankMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if meta.classes < 2 || ck.tensors.len() != meta.classes || meta.width != meta.source.slices * meta.source.slice_width {
            return Err(Error::format("checkpoint", "prototype bank header does not match its tensors"));
        }
        let prototypes = (0..meta.classes)
            .map(|k| Ok(ck.take_shaped(&format!("class.{k}"), &[meta.width])?.into_data()))
            .collect::<Result<Vec<_>>>()?;
        let bank = Self {
            source: meta.source,
            support: meta.support,
            prototypes,
        };
        bank.check().map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(bank)
    }
}

fn check_code(code: &[f64], bank: &PrototypeBank) -> Result<()> {
    if code.len() != bank.width() {
        return Err(Error::Width {
            what: "code",
            expected: bank.width(),
            actual: code.len(),
        });
    }
    if code.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("code"));
    }
    Ok(())
}

pub fn distances(code: &[f64], bank: &PrototypeBank, distance: Distance) -> Result<Vec<f64>> {
    check_code(code, bank)?;
    Ok(bank
        .prototypes
        .iter()
        .map(|mu| {
            let sq: f64 = code.iter().zip(mu).map(|(z, &m)| (z - m as f64).powi(2)).sum();
            match distance {
                Distance::L2 => sq.sqrt(),
                Distance::SquaredL2 => sq,
            }
        })
        .collect())
}

/// `softmax(−d)`, computed after subtracting the smallest distance.
pub fn softmax_neg(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|&x| (-(x - min)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `log softmax(−d)[t]`.
fn log_prob(d: &[f64], t: usize) -> f64 {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let lse = d.iter().map(|&x| (-(x - min)).exp()).sum::<f64>().ln();
    -(d[t] - min) - lse
}

pub fn classify(code: &[f64], bank: &PrototypeBank, distance: Distance) -> Result<Vec<f64>> {
    Ok(softmax_neg(&distances(code, bank, distance)?))
}

pub fn log_prob_target(code: &[f64], bank: &PrototypeBank, target: usize, distance: Distance) -> Result<f64> {
    check_target(bank, target)?;
    Ok(log_prob(&distances(code, bank, distance)?, target))
}

/// Index of the largest probability; ties go to the lowest class.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

fn check_target(bank: &PrototypeBank, target: usize) -> Result<()> {
    if target >= bank.classes() {
        return Err(Error::Config(format!("target class {target} outside 0..{}", bank.classes())));
    }
    Ok(())
}

/// `∇_z log p(target | z)`.
pub fn steer_grad(z: &[f64], bank: &PrototypeBank, target: usize, distance: Distance) -> Result<Vec<f64>> {
    Ok(grad_and_logp(z, bank, target, distance)?.0)
}

fn grad_and_logp(z: &[f64], bank: &PrototypeBank, target: usize, distance: Distance) -> Result<(Vec<f64>, f64)> {
    check_target(bank, target)?;
    let d = distances(z, bank, distance)?;
    let p = softmax_neg(&d);
    let mut grad = vec![0.0f64; z.len()];
    for (k, mu) in bank.prototypes.iter().enumerate() {
        let coeff = p[k] - if k == target { 1.0 } else { 0.0 };
        let scale = match distance {
            Distance::L2 => {
                if d[k] == 0.0 {
                    // Subgradient 0 at the prototype itself.
                    continue;
                }
                coeff / d[k].max(SINGULAR_FLOOR)
            }
            Distance::SquaredL2 => 2.0 * coeff,
        };
        for (g, (zi, &m)) in grad.iter_mut().zip(z.iter().zip(mu)) {
            *g += scale * (zi - m as f64);
        }
    }
    Ok((grad, log_prob(&d, target)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub eta: f64,
    pub eps_stop: f64,
    pub max_iters: usize,
    pub distance: Distance,
    /// Clamp the code to be nonnegative after each step. `None` picks by
    /// source: on for SAE codes, off for raw queries.
    pub project: Option<bool>,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            eta: 0.8,
            eps_stop: 1e-4,
            max_iters: 200,
            distance: Distance::L2,
            project: None,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be nonnegative", self.eta)));
        }
        if !(self.eps_stop > 0.0) {
            return Err(Error::Config(format!("eps_stop {} must be positive", self.eps_stop)));
        }
        Ok(())
    }

    pub fn projects(&self, kind: SourceKind) -> bool {
        self.project.unwrap_or(kind.uses_sae())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerTrace {
    pub target: usize,
    pub log_prob: Vec<f64>,
    pub grad_sq_norm: Vec<f64>,
    pub steps: usize,
    pub termination: Termination,
}

/// Gradient ascent on `log p(target | z)` from `z0`.
///
/// Each entry of the trace is taken at an iterate before the loop guard is
/// checked, so a trace always holds `steps + 1` entries.
pub fn steer(z0: &[f64], bank: &PrototypeBank, target: usize, config: &SteerConfig, project: bool) -> Result<(Vec<f64>, SteerTrace)> {
    config.validate()?;
    let mut z = z0.to_vec();
    let mut trace = SteerTrace {
        target,
        log_prob: Vec::new(),
        grad_sq_norm: Vec::new(),
        steps: 0,
        termination: Termination::MaxIters,
    };
    loop {
        let (grad, lp) = grad_and_logp(&z, bank, target, config.distance)?;
        let gn: f64 = grad.iter().map(|g| g * g).sum();
        trace.log_prob.push(lp);
        trace.grad_sq_norm.push(gn);
        if gn <= config.eps_stop {
            trace.termination = Termination::Converged;
            break;
        }
        if trace.steps == config.max_iters {
            break;
        }
        for (zi, g) in z.iter_mut().zip(&grad) {
            *zi += config.eta * g;
            if project && *zi < 0.0 {
                *zi = 0.0;
            }
        }
        trace.steps += 1;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: trace.steps,
                cause: format!("non-finite steering iterate; trace {:?}", trace.log_prob),
            });
        }
    }
    Ok((z, trace))
}

/// The target prototype, whatever the input.
pub fn direct_assign(_z: &[f64], bank: &PrototypeBank, target: usize) -> Result<Vec<f64>> {
    check_target(bank, target)?;
    Ok(bank.prototypes[target].iter().map(|&v| v as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Nearest-prototype evaluation of labeled codes.
pub fn fewshot_eval(codes: &[(usize, Vec<f32>)], bank: &PrototypeBank, distance: Distance) -> Result<FewshotResult> {
    let c = bank.classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for (label, code) in codes {
        let z: Vec<f64> = code.iter().map(|&v| v as f64).collect();
        let pred = argmax(&classify(&z, bank, distance)?);
        if *label >= c {
            return Err(Error::Config(format!("test label {label} outside 0..{c}")));
        }
        confusion[*label][pred] += 1;
    }
    let n = codes.len();
    let hits: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[k] as f64 / total as f64
            }
        })
        .collect();
    Ok(FewshotResult {
        accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        per_class,
        confusion,
        n,
    })
}

/// One-sided binomial tail `P(X ≥ k)` for `X ~ Bin(n, p)`, summed in log
/// space.
pub fn binomial_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln_choose = |n: usize, i: usize| -> f64 {
        (1..=i).map(|j| ((n - i + j) as f64).ln() - (j as f64).ln()).sum()
    };
    (k..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum::<f64>()
        .min(1.0)
}
