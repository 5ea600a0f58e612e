// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head sparse autoencoders over hook-site activations.
//!
//! `z = ReLU(W_e q + b_e)`, `q̂ = W̃_d z` where `W̃_d` divides every decoder
//! column by `max(‖column‖₂, ε)`. The per-example loss is
//! `‖q̂ − q‖² + α·P(z) + β‖b_e‖₂` with `P` the L1 norm or the squared L2 norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use numkit::{adam_step, kernels, AdamState, Graph, LrSchedule, Tensor, Var};

use crate::acts::{ActivationDump, Positions};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::microlm::HookSite;
use crate::seeds;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    L1,
    L2,
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Penalty::L1 => "l1",
            Penalty::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub latent: usize,
    pub alpha: f32,
    pub beta: f32,
    pub penalty: Penalty,
    pub norm_eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub positions: Positions,
    /// Every n-th dump record is held out of training for evaluation.
    pub holdout_every: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            latent: 512,
            alpha: 3e-3,
            beta: 1e-4,
            penalty: Penalty::L1,
            norm_eps: 1e-8,
            epochs: 40,
            batch_size: 64,
            lr: 3e-5,
            warmup_frac: 0.1,
            positions: Positions::All,
            holdout_every: 20,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.latent <= d_in {
            return Err(Error::Config(format!(
                "latent width {} must exceed input width {d_in}",
                self.latent
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if self.holdout_every < 2 || self.batch_size == 0 {
            return Err(Error::Config("holdout_every must be ≥ 2 and batch_size ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// `[H×d_in]`
    pub w_e: Tensor,
    /// `[H]`
    pub b_e: Tensor,
    /// `[d_in×H]`, unnormalized.
    pub w_d: Tensor,
}

/// Column-normalized copy of a decoder matrix.
pub fn normalize_decoder(w_d: &Tensor, eps: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.constant(w_d.clone())?;
    let n = g.col_normalize(w, eps)?;
    Ok(g.value(n).clone())
}

impl SaeParams {
    pub fn init(d_in: usize, latent: usize, seed: u64, tag: &str) -> Self {
        let mut rng = seeds::rng(seed, tag);
        let bound = 1.0 / (d_in as f32).sqrt();
        let w_e = Tensor::from_fn(&[latent, d_in], || rng.gen_range(-bound..bound));
        let w_d = Tensor::from_fn(&[d_in, latent], || rng.gen_range(-bound..bound));
        Self {
            w_e,
            b_e: Tensor::zeros(&[latent]),
            w_d,
        }
    }

    pub fn zeros(d_in: usize, latent: usize) -> Self {
        Self {
            w_e: Tensor::zeros(&[latent, d_in]),
            b_e: Tensor::zeros(&[latent]),
            w_d: Tensor::zeros(&[d_in, latent]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_e.shape()[1]
    }

    pub fn latent(&self) -> usize {
        self.w_e.shape()[0]
    }

    pub fn encode(&self, q: &[f32]) -> Result<Vec<f32>> {
        if q.len() != self.d_in() {
            return Err(Error::Width {
                what: "sae input",
                expected: self.d_in(),
                actual: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sae input"));
        }
        let d = self.d_in();
        Ok((0..self.latent())
            .map(|j| (kernels::dot(&self.w_e.data()[j * d..(j + 1) * d], q) + self.b_e.data()[j]).max(0.0))
            .collect())
    }

    /// Inference view with the normalized decoder precomputed.
    pub fn prepared(&self, eps: f32) -> Result<PreparedSae> {
        let norm = normalize_decoder(&self.w_d, eps)?;
        let (d, h) = (self.d_in(), self.latent());
        Ok(PreparedSae {
            params: self.clone(),
            atoms: kernels::transpose(norm.data(), d, h),
        })
    }
}

/// Trained SAE with decoder atoms stored row-wise for sparse decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSae {
    pub params: SaeParams,
    /// `[H×d_in]`, row j is normalized decoder column j.
    atoms: Vec<f32>,
}

impl PreparedSae {
    pub fn encode(&self, q: &[f32]) -> Result<Vec<f32>> {
        self.params.encode(q)
    }

    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        let (d, h) = (self.params.d_in(), self.params.latent());
        if z.len() != h {
            return Err(Error::Width {
                what: "sae code",
                expected: h,
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sae code"));
        }
        let mut out = vec![0.0f32; d];
        for (j, &zj) in z.iter().enumerate() {
            if zj != 0.0 {
                for (o, a) in out.iter_mut().zip(&self.atoms[j * d..(j + 1) * d]) {
                    *o += zj * a;
                }
            }
        }
        Ok(out)
    }

    /// Column `j` of the normalized decoder.
    pub fn atom(&self, j: usize) -> &[f32] {
        let d = self.params.d_in();
        &self.atoms[j * d..(j + 1) * d]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
    pub bias: f64,
}

struct LossVars {
    total: Var,
    recon: Var,
    sparsity: Var,
    bias: Var,
}

/// Records the batch loss: per-example terms averaged over the batch, plus
/// the bias decay once.
fn record_loss(g: &mut Graph, w_e: Var, b_e: Var, w_d: Var, q: Var, config: &SaeConfig) -> Result<LossVars> {
    let n = g.value(q).shape()[0] as f32;
    let pre = g.matmul_nt(q, w_e)?;
    let pre = g.add_row(pre, b_e)?;
    let z = g.relu(pre)?;
    let dec = g.col_normalize(w_d, config.norm_eps)?;
    let q_hat = g.matmul_nt(z, dec)?;
    let diff = g.sub(q_hat, q)?;
    let recon = g.sq_l2(diff)?;
    let recon = g.scale(recon, 1.0 / n)?;
    let sparsity = match config.penalty {
        Penalty::L1 => g.l1(z)?,
        Penalty::L2 => g.sq_l2(z)?,
    };
    let sparsity = g.scale(sparsity, 1.0 / n)?;
    let bias = g.l2(b_e)?;
    let s_term = g.scale(sparsity, config.alpha)?;
    let b_term = g.scale(bias, config.beta)?;
    let total = g.add(recon, s_term)?;
    let total = g.add(total, b_term)?;
    Ok(LossVars {
        total,
        recon,
        sparsity,
        bias,
    })
}

/// Loss terms of `params` on the rows of `q [n×d_in]`; `sparsity` and `bias`
/// are the unweighted penalties.
pub fn sae_loss(params: &SaeParams, q: &Tensor, config: &SaeConfig) -> Result<LossTerms> {
    let mut g = Graph::new();
    let w_e = g.constant(params.w_e.clone())?;
    let b_e = g.constant(params.b_e.clone())?;
    let w_d = g.constant(params.w_d.clone())?;
    let qv = g.constant(q.clone())?;
    let v = record_loss(&mut g, w_e, b_e, w_d, qv, config)?;
    let get = |var: Var| g.value(var).item().unwrap_or(f32::NAN) as f64;
    Ok(LossTerms {
        total: get(v.total),
        recon: get(v.recon),
        sparsity: get(v.sparsity),
        bias: get(v.bias),
    })
}

/// Gradients of the batch loss with respect to `(W_e, b_e, W_d)`.
pub fn sae_loss_grads(params: &SaeParams, q: &Tensor, config: &SaeConfig) -> Result<(f32, [Tensor; 3])> {
    let mut g = Graph::new();
    let w_e = g.param(params.w_e.clone())?;
    let b_e = g.param(params.b_e.clone())?;
    let w_d = g.param(params.w_d.clone())?;
    let qv = g.constant(q.clone())?;
    let v = record_loss(&mut g, w_e, b_e, w_d, qv, config)?;
    let grads = g.backward(v.total)?;
    Ok((
        g.value(v.total).item().unwrap_or(f32::NAN),
        [
            grads.get_or_zeros(w_e, &params.w_e),
            grads.get_or_zeros(b_e, &params.b_e),
            grads.get_or_zeros(w_d, &params.w_d),
        ],
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub heldout: LossTerms,
    pub max_column_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub head: usize,
    pub steps: usize,
    pub train_vectors: usize,
    pub heldout_vectors: usize,
    /// Held-out loss at step 0 and after every epoch.
    pub curve: Vec<CurvePoint>,
}

impl SaeTrainReport {
    pub fn initial(&self) -> &LossTerms {
        &self.curve[0].heldout
    }

    pub fn last(&self) -> &LossTerms {
        &self.curve[self.curve.len() - 1].heldout
    }
}

fn max_column_norm(w_d: &Tensor, eps: f32) -> Result<f64> {
    let n = normalize_decoder(w_d, eps)?;
    let (d, h) = n.dims2().expect("rank 2");
    Ok((0..h)
        .map(|j| (0..d).map(|i| (n.data()[i * h + j] as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

pub(crate) fn split_records(n: usize, holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % holdout_every != holdout_every - 1)
}

/// Trains the SAE of one head with Adam and a warmup/cosine schedule.
pub fn train_sae(dump: &ActivationDump, config: &SaeConfig, head: usize, seed: u64) -> Result<(SaeParams, SaeTrainReport)> {
    config.validate(dump.head_width)?;
    let (train_idx, held_idx) = split_records(dump.records.len(), config.holdout_every);
    if held_idx.is_empty() {
        return Err(Error::Config(format!(
            "dump of {} records leaves no held-out records at holdout_every = {}",
            dump.records.len(),
            config.holdout_every
        )));
    }
    let train = dump.head_matrix(head, config.positions, train_idx.into_iter())?;
    let held = dump.head_matrix(head, config.positions, held_idx.into_iter())?;
    let (n, d) = train.dims2().expect("rank 2");
    let mut params = SaeParams::init(d, config.latent, seed, &format!("sae-init-{head}"));
    let bs = config.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let schedule = LrSchedule {
        base: config.lr,
        warmup_frac: config.warmup_frac,
        total: per_epoch * config.epochs,
        floor: 0.0,
    };
    let mut states = [
        AdamState::for_param(format!("head{head}.w_e"), &params.w_e),
        AdamState::for_param(format!("head{head}.b_e"), &params.b_e),
        AdamState::for_param(format!("head{head}.w_d"), &params.w_d),
    ];
    let mut curve = vec![CurvePoint {
        step: 0,
        heldout: sae_loss(&params, &held, config)?,
        max_column_norm: max_column_norm(&params.w_d, config.norm_eps)?,
    }];
    let mut rng = seeds::rng(seed, &format!("sae-shuffle-{head}"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut batch = vec![0.0f32; bs * d];
    for _ in 0..config.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(bs) {
            batch.clear();
            for &r in chunk {
                batch.extend_from_slice(train.row(r));
            }
            let q = Tensor::matrix(chunk.len(), d, batch.clone())?;
            let diverged = |cause: String| Error::Diverged { step, cause };
            let (loss, grads) = sae_loss_grads(&params, &q, config).map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            let lr = schedule.lr_at(step + 1)? as f32;
            let slots = [&mut params.w_e, &mut params.b_e, &mut params.w_d];
            for ((p, s), g) in slots.into_iter().zip(states.iter_mut()).zip(&grads) {
                adam_step(s, p, g, lr).map_err(|e| diverged(e.to_string()))?;
            }
            step += 1;
        }
        curve.push(CurvePoint {
            step,
            heldout: sae_loss(&params, &held, config)?,
            max_column_norm: max_column_norm(&params.w_d, config.norm_eps)?,
        });
    }
    Ok((
        params,
        SaeTrainReport {
            head,
            steps: step,
            train_vectors: n,
            heldout_vectors: held.shape()[0],
            curve,
        },
    ))
}

/// One SAE per hook-site head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBank {
    pub layer: usize,
    pub site: HookSite,
    pub config: SaeConfig,
    pub heads: Vec<SaeParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankMeta {
    layer: usize,
    site: HookSite,
    heads: usize,
    d_in: usize,
    config: SaeConfig,
}

impl HeadBank {
    pub fn d_in(&self) -> usize {
        self.heads[0].d_in()
    }

    pub fn latent(&self) -> usize {
        self.heads[0].latent()
    }

    pub fn prepared(&self) -> Result<Vec<PreparedSae>> {
        self.heads.iter().map(|p| p.prepared(self.config.norm_eps)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BankMeta {
            layer: self.layer,
            site: self.site,
            heads: self.heads.len(),
            d_in: self.d_in(),
            config: self.config.clone(),
        };
        let mut ck = Checkpoint::new("sae-bank", serde_json::to_value(meta).expect("meta serializes"));
        for (i, p) in self.heads.iter().enumerate() {
            ck.push(format!("heads.{i}.w_e"), p.w_e.clone());
            ck.push(format!("heads.{i}.b_e"), p.b_e.clone());
            ck.push(format!("heads.{i}.w_d"), p.w_d.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("sae-bank")?;
        let meta: BankMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let h = meta.config.latent;
        if meta.heads == 0 || ck.tensors.len() != 3 * meta.heads {
            return Err(Error::format("checkpoint", "sae bank head count does not match its tensors"));
        }
        let heads = (0..meta.heads)
            .map(|i| {
                Ok(SaeParams {
                    w_e: ck.take_shaped(&format!("heads.{i}.w_e"), &[h, meta.d_in])?,
                    b_e: ck.take_shaped(&format!("heads.{i}.b_e"), &[h])?,
                    w_d: ck.take_shaped(&format!("heads.{i}.w_d"), &[meta.d_in, h])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer: meta.layer,
            site: meta.site,
            config: meta.config,
            heads,
        })
    }
}

/// Trains every head of the dump, at most `jobs` heads at a time.
pub fn train_bank(dump: &ActivationDump, config: &SaeConfig, seed: u64, jobs: usize) -> Result<(HeadBank, Vec<SaeTrainReport>)> {
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<(SaeParams, SaeTrainReport)>>> = (0..dump.heads).map(|_| None).collect();
    for start in (0..dump.heads).step_by(jobs) {
        let end = (start + jobs).min(dump.heads);
        if end - start == 1 {
            results[start] = Some(train_sae(dump, config, start, seed));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = (start..end)
                .map(|h| s.spawn(move || train_sae(dump, config, h, seed)))
                .collect();
            for (h, handle) in (start..end).zip(handles) {
                results[h] = Some(handle.join().expect("sae trainer panicked"));
            }
        });
    }
    let mut heads = Vec::with_capacity(dump.heads);
    let mut reports = Vec::with_capacity(dump.heads);
    for r in results {
        let (p, rep) = r.expect("every head trained")?;
        heads.push(p);
        reports.push(rep);
    }
    Ok((
        HeadBank {
            layer: dump.layer,
            site: dump.site,
            config: config.clone(),
            heads,
        },
        reports,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Mean fraction of strictly positive latents per code.
    pub active_fraction: f64,
    /// Fraction of latents never active over the selection.
    pub dead_fraction: f64,
    /// Mean squared reconstruction error per vector.
    pub recon_error: f64,
}

/// Sparsity of one head's codes over the held-out or full dump selection.
pub fn sparsity_stats(params: &SaeParams, eps: f32, q: &Tensor) -> Result<SparsityStats> {
    let (n, d) = q.dims2().ok_or(Error::Empty("activation selection"))?;
    if n == 0 {
        return Err(Error::Empty("activation selection"));
    }
    if d != params.d_in() {
        return Err(Error::Width {
            what: "sae input",
            expected: params.d_in(),
            actual: d,
        });
    }
    let sae = params.prepared(eps)?;
    let h = params.latent();
    let mut ever = vec![false; h];
    let (mut active, mut err) = (0usize, 0.0f64);
    for i in 0..n {
        let z = sae.encode(q.row(i))?;
        for (j, &v) in z.iter().enumerate() {
            if v > 0.0 {
                active += 1;
                ever[j] = true;
            }
        }
        let rec = sae.decode(&z)?;
        err += rec.iter().zip(q.row(i)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    Ok(SparsityStats {
        active_fraction: active as f64 / (n * h) as f64,
        dead_fraction: ever.iter().filter(|&&e| !e).count() as f64 / h as f64,
        recon_error: err / n as f64,
    })
}

/// Mean of per-head stats over a bank, on the held-out records.
pub fn bank_sparsity(bank: &HeadBank, dump: &ActivationDump) -> Result<SparsityStats> {
    let (_, held) = split_records(dump.records.len(), bank.config.holdout_every);
    let sel: Vec<usize> = if held.is_empty() { (0..dump.records.len()).collect() } else { held };
    let mut acc = SparsityStats {
        active_fraction: 0.0,
        dead_fraction: 0.0,
        recon_error: 0.0,
    };
    for (h, p) in bank.heads.iter().enumerate() {
        let q = dump.head_matrix(h, bank.config.positions, sel.iter().copied())?;
        let s = sparsity_stats(p, bank.config.norm_eps, &q)?;
        acc.active_fraction += s.active_fraction;
        acc.dead_fraction += s.dead_fraction;
        acc.recon_error += s.recon_error;
    }
    let k = bank.heads.len() as f64;
    Ok(SparsityStats {
        active_fraction: acc.active_fraction / k,
        dead_fraction: acc.dead_fraction / k,
        recon_error: acc.recon_error / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_params() -> SaeParams {
        SaeParams {
            w_e: Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0]).unwrap(),
            b_e: Tensor::zeros(&[3]),
            w_d: Tensor::matrix(2, 3, vec![3.0, 1.0, 0.0, 4.0, 0.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn encode_hand_example() {
        assert_eq!(hand_params().encode(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(hand_params().encode(&[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert!(hand_params().encode(&[1.0]).is_err());
    }

    #[test]
    fn normalize_columns() {
        let n = normalize_decoder(&hand_params().w_d, 1e-8).unwrap();
        // Columns [3,4] → [0.6,0.8], [1,0] unchanged, [0,0] stays zero.
        assert_eq!(n.data(), &[0.6, 1.0, 0.0, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn decode_selects_atoms() {
        let sae = hand_params().prepared(1e-8).unwrap();
        assert_eq!(sae.decode(&[1.0, 0.0, 0.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(sae.decode(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
        assert!(sae.decode(&[1.0]).is_err());
    }

    #[test]
    fn zero_everything_gives_zero_loss() {
        let p = SaeParams::zeros(2, 3);
        let q = Tensor::zeros(&[1, 2]);
        let t = sae_loss(&p, &q, &SaeConfig::default()).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn hand_computed_loss() {
        // q = [1, 2]: z = relu([1, -1, 4] + b) with b = [0.5, 0, -1] → [1.5, 0, 3].
        // q̂ = 1.5·[0.6, 0.8] + 3·[0, 0] = [0.9, 1.2]; recon = 0.01 + 0.64 = 0.65.
        // L1 = 4.5; ‖b‖ = √1.25.
        let mut p = hand_params();
        p.b_e = Tensor::vector(vec![0.5, 0.0, -1.0]).unwrap();
        let q = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let cfg = SaeConfig {
            alpha: 0.1,
            beta: 0.2,
            ..SaeConfig::default()
        };
        let t = sae_loss(&p, &q, &cfg).unwrap();
        let want = 0.65 + 0.1 * 4.5 + 0.2 * 1.25f64.sqrt();
        assert!((t.total - want).abs() < 1e-6, "{t:?}");
        assert!((t.recon - 0.65).abs() < 1e-6);
        assert!((t.sparsity - 4.5).abs() < 1e-6);
        let sq = sae_loss(&p, &q, &SaeConfig { penalty: Penalty::L2, ..cfg }).unwrap();
        assert!((sq.sparsity - 11.25).abs() < 1e-5);
    }

    #[test]
    fn zero_params_are_all_dead() {
        let q = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let s = sparsity_stats(&SaeParams::zeros(2, 4), 1e-8, &q).unwrap();
        assert_eq!((s.active_fraction, s.dead_fraction), (0.0, 1.0));
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let bank = HeadBank {
            layer: 2,
            site: HookSite::Query,
            config: SaeConfig {
                latent: 5,
                ..SaeConfig::default()
            },
            heads: vec![SaeParams::init(3, 5, 1, "a"), SaeParams::init(3, 5, 1, "b")],
        };
        let back = HeadBank::from_checkpoint(&Checkpoint::decode(&bank.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back, bank);
    }
}
