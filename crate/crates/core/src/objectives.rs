//! ELBO, IWAE and FIVO estimators over any [`StepModel`], Adam, and the
//! minibatch training and evaluation loops.
//!
//! Batches hold `B` equal-length sequences with `K` particles each; row
//! `b*K + k` is particle `k` of sequence `b`. Standard-normal noise for every
//! step is drawn up front so different estimators can share draws exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelError, StepModel};
use crate::tensor::{logsumexp, Graph, Tensor, TensorError, Var};

pub mod lgssm;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("sequences in a batch must share a length: {0} vs {1}")]
    RaggedBatch(usize, usize),
    #[error("all particle weights underflowed at step {step} (sequence {seq})")]
    WeightUnderflow { step: usize, seq: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("parameter/gradient shape mismatch at index {0}")]
    ShapeMismatch(usize),
    #[error("particle count must be at least 1")]
    NoParticles,
    #[error("epoch hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Single-sample bound with the sampled log-weight `log p(x,z) - log q(z)`.
    Elbo,
    /// ELBO with the closed-form Gaussian KL in place of the sampled latent terms.
    ElboKl,
    Iwae,
    #[default]
    Fivo,
}

impl std::str::FromStr for BoundKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "elbo" => Ok(Self::Elbo),
            "elbo-kl" => Ok(Self::ElboKl),
            "iwae" => Ok(Self::Iwae),
            "fivo" => Ok(Self::Fivo),
            other => Err(format!("unknown bound `{other}` (expected elbo, elbo-kl, iwae or fivo)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum Resample {
    Never,
    /// Resample when ESS falls below `fraction * K`.
    Ess { fraction: f64 },
    Always,
}

impl Default for Resample {
    fn default() -> Self {
        Resample::Ess { fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub kind: BoundKind,
    pub particles: usize,
    pub resample: Resample,
}

impl BoundConfig {
    pub fn new(kind: BoundKind, particles: usize) -> Self {
        Self {
            kind,
            particles,
            resample: Resample::default(),
        }
    }
}

/// Per-step log importance weight `log p(x_t|·) + log p(z_t|·) - log q(z_t|·)`.
pub fn log_weight(g: &mut Graph, log_px: Var, log_pz: Var, log_qz: Var) -> std::result::Result<Var, TensorError> {
    let joint = g.add(log_px, log_pz)?;
    g.sub(joint, log_qz)
}

/// Effective sample size `(Σw)² / Σw²` from unnormalized log-weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    (2.0 * logsumexp(log_weights) - logsumexp(&doubled)).exp()
}

/// Ancestor indices drawn iid from the normalized weights.
pub fn resample_multinomial(log_weights: &[f64], rng: &mut dyn RngCore) -> Vec<usize> {
    let k = log_weights.len();
    let lse = logsumexp(log_weights);
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for w in log_weights {
        acc += (w - lse).exp();
        cdf.push(acc);
    }
    (0..k)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(k - 1)
        })
        .collect()
}

/// Standard-normal noise per step, `[rows, dim]` each; empty when `dim == 0`.
pub fn draw_noise(rng: &mut dyn RngCore, steps: usize, rows: usize, dim: usize) -> Vec<Tensor> {
    if dim == 0 {
        return Vec::new();
    }
    (0..steps)
        .map(|_| {
            let data = crate::distributions::standard_normal(rng, rows * dim);
            Tensor::matrix(rows, dim, data).expect("positive dims")
        })
        .collect()
}

/// One resampling event: ancestors of every row of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleEvent {
    pub step: usize,
    pub sequences: Vec<usize>,
    pub ancestors: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchBound {
    /// Bound per sequence, `[B, 1]`.
    pub per_seq: Var,
    /// Sum over sequences, scalar.
    pub total: Var,
    pub ancestry: Vec<ResampleEvent>,
}

/// Per-step observation rows, each sequence repeated `k` times.
fn step_rows(batch: &[&[Vec<f64>]], t: usize, k: usize) -> Result<Tensor> {
    let d = batch[0][0].len();
    let mut data = Vec::with_capacity(batch.len() * k * d);
    for seq in batch {
        for _ in 0..k {
            data.extend_from_slice(&seq[t]);
        }
    }
    Ok(Tensor::matrix(batch.len() * k, d, data)?)
}

fn logmeanexp_rows(g: &mut Graph, w: Var, b: usize, k: usize) -> std::result::Result<Var, TensorError> {
    let r = g.reshape(w, vec![b, k])?;
    let l = g.logsumexp_cols(r)?;
    g.offset(l, -(k as f64).ln())
}

fn mean_rows(g: &mut Graph, w: Var, b: usize, k: usize) -> std::result::Result<Var, TensorError> {
    let r = g.reshape(w, vec![b, k])?;
    let s = g.sum_cols(r)?;
    g.scale(s, 1.0 / k as f64)
}

/// Bound for a batch of equal-length sequences on graph `g` with bound
/// parameters `p`. `noise` must come from [`draw_noise`] with
/// `rows = B*K`; `rng` drives resampling only.
pub fn batch_bound<M: StepModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    p: &[Var],
    batch: &[&[Vec<f64>]],
    cfg: &BoundConfig,
    noise: &[Tensor],
    rng: &mut dyn RngCore,
) -> Result<BatchBound> {
    let b = batch.len();
    if b == 0 {
        return Err(ObjectiveError::Empty("batch"));
    }
    let t_len = batch[0].len();
    if t_len == 0 {
        return Err(ObjectiveError::Empty("sequence"));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != t_len) {
        return Err(ObjectiveError::RaggedBatch(t_len, s.len()));
    }
    let k = cfg.particles;
    if k == 0 {
        return Err(ObjectiveError::NoParticles);
    }
    let rows = b * k;
    let mut state = model.init_state(g, p, rows)?;
    let zero = g.constant(Tensor::zeros(vec![rows, 1]));
    let mut cum = zero;
    let mut bound = g.constant(Tensor::zeros(vec![b, 1]));
    let mut ancestry = Vec::new();
    for t in 0..t_len {
        let x = g.constant(step_rows(batch, t, k)?);
        let eps = noise.get(t).map(|e| g.constant(e.clone()));
        let out = model.step(g, p, &state, x, eps)?;
        state = out.next;
        let inc = match cfg.kind {
            BoundKind::ElboKl => g.sub(out.log_px, out.kl)?,
            _ => log_weight(g, out.log_px, out.log_pz, out.log_qz)?,
        };
        cum = g.add(cum, inc)?;
        if cfg.kind != BoundKind::Fivo {
            continue;
        }
        let last = t + 1 == t_len;
        let vals = g.value(cum).data().to_vec();
        let mut chosen = Vec::new();
        for s in 0..b {
            let w = &vals[s * k..(s + 1) * k];
            if !w.iter().any(|v| v.is_finite()) {
                return Err(ObjectiveError::WeightUnderflow { step: t, seq: s });
            }
            let fire = !last
                && match cfg.resample {
                    Resample::Never => false,
                    Resample::Always => true,
                    Resample::Ess { fraction } => ess(w) < fraction * k as f64,
                };
            if fire {
                chosen.push(s);
            }
        }
        if last {
            let l = logmeanexp_rows(g, cum, b, k)?;
            bound = g.add(bound, l)?;
        } else if !chosen.is_empty() {
            let mut seq_mask = vec![0.0; b];
            let mut keep = vec![1.0; rows];
            let mut idx: Vec<usize> = (0..rows).collect();
            for &s in &chosen {
                seq_mask[s] = 1.0;
                let anc = resample_multinomial(&vals[s * k..(s + 1) * k], rng);
                for (j, a) in anc.into_iter().enumerate() {
                    idx[s * k + j] = s * k + a;
                    keep[s * k + j] = 0.0;
                }
            }
            let l = logmeanexp_rows(g, cum, b, k)?;
            let m = g.constant(Tensor::matrix(b, 1, seq_mask)?);
            let l = g.mul(l, m)?;
            bound = g.add(bound, l)?;
            let keep = g.constant(Tensor::matrix(rows, 1, keep)?);
            cum = g.mul(cum, keep)?;
            cum = g.gather_rows(cum, idx.clone())?;
            state = state
                .into_iter()
                .map(|v| g.gather_rows(v, idx.clone()))
                .collect::<std::result::Result<_, _>>()?;
            ancestry.push(ResampleEvent {
                step: t,
                sequences: chosen,
                ancestors: idx,
            });
        }
    }
    let per_seq = match cfg.kind {
        BoundKind::Fivo => bound,
        BoundKind::Iwae => logmeanexp_rows(g, cum, b, k)?,
        BoundKind::Elbo | BoundKind::ElboKl => mean_rows(g, cum, b, k)?,
    };
    let total = g.sum(per_seq)?;
    Ok(BatchBound {
        per_seq,
        total,
        ancestry,
    })
}

/// Value of a bound on one sequence.
pub fn sequence_bound<M: StepModel + ?Sized>(
    model: &M,
    seq: &[Vec<f64>],
    cfg: &BoundConfig,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<ResampleEvent>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let noise = draw_noise(rng, seq.len(), cfg.particles, model.noise_dim());
    let out = batch_bound(&mut g, model, &p, &[seq], cfg, &noise, rng)?;
    Ok((g.value(out.total).item(), out.ancestry))
}

pub fn elbo<M: StepModel + ?Sized>(model: &M, seq: &[Vec<f64>], rng: &mut dyn RngCore) -> Result<f64> {
    Ok(sequence_bound(model, seq, &BoundConfig::new(BoundKind::Elbo, 1), rng)?.0)
}

pub fn iwae<M: StepModel + ?Sized>(model: &M, seq: &[Vec<f64>], k: usize, rng: &mut dyn RngCore) -> Result<f64> {
    Ok(sequence_bound(model, seq, &BoundConfig::new(BoundKind::Iwae, k), rng)?.0)
}

pub fn fivo<M: StepModel + ?Sized>(
    model: &M,
    seq: &[Vec<f64>],
    k: usize,
    resample: Resample,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<ResampleEvent>)> {
    let cfg = BoundConfig {
        kind: BoundKind::Fivo,
        particles: k,
        resample,
    };
    sequence_bound(model, seq, &cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        Self {
            cfg,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// Bias-corrected Adam step after global-norm clipping. Returns the
/// pre-clipping gradient norm.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], st: &mut OptimState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(ObjectiveError::ShapeMismatch(params.len().min(grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || st.m[i].shape() != p.shape() {
            return Err(ObjectiveError::ShapeMismatch(i));
        }
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let c = st.cfg;
    let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
        c.clip_norm / norm
    } else {
        1.0
    };
    st.step += 1;
    let bc1 = 1.0 - c.beta1.powi(st.step as i32);
    let bc2 = 1.0 - c.beta2.powi(st.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv * scale;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *pv -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub bound: BoundKind,
    pub train_particles: usize,
    pub valid_particles: usize,
    pub resample: Resample,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            bound: BoundKind::Fivo,
            train_particles: 4,
            valid_particles: 16,
            resample: Resample::default(),
            patience: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_per_step: f64,
    pub valid_per_step: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub best_params: Vec<Tensor>,
    pub stopped_early: bool,
}

/// Groups sequence indices into equal-length batches after shuffling.
pub fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut buckets: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        match buckets.iter_mut().find(|(l, _)| *l == lengths[i]) {
            Some((_, v)) => v.push(i),
            None => buckets.push((lengths[i], vec![i])),
        }
    }
    buckets
        .into_iter()
        .flat_map(|(_, v)| v.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Hook called after each epoch with the metrics row, the current model and
/// optimizer state, and whether this epoch improved validation.
pub type EpochHook<'a> = dyn FnMut(&EpochMetrics, &Model, &OptimState, bool) -> std::result::Result<(), String> + 'a;

/// Where a training run starts: epoch numbering and the best validation
/// value seen so far, for resumed runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resume {
    pub start_epoch: usize,
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl Default for Resume {
    fn default() -> Self {
        Self {
            start_epoch: 0,
            best_epoch: 0,
            best_valid: f64::NEG_INFINITY,
        }
    }
}

/// Minibatch gradient ascent on the configured bound with early stopping.
///
/// Runs epochs `resume.start_epoch..resume.start_epoch + cfg.epochs`; the rng
/// stream for epoch `e` depends only on `(cfg.seed, e)`.
pub fn train(
    model: &mut Model,
    train_set: &[Vec<Vec<f64>>],
    valid_set: &[Vec<Vec<f64>>],
    cfg: &TrainConfig,
    optim: &mut OptimState,
    resume: Resume,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainReport> {
    let start_epoch = resume.start_epoch;
    if train_set.is_empty() {
        return Err(ObjectiveError::Empty("training set"));
    }
    if valid_set.is_empty() {
        return Err(ObjectiveError::Empty("validation set"));
    }
    let bound_cfg = BoundConfig {
        kind: cfg.bound,
        particles: cfg.train_particles,
        resample: cfg.resample,
    };
    let valid_cfg = BoundConfig {
        kind: cfg.bound,
        particles: cfg.valid_particles,
        resample: cfg.resample,
    };
    let lengths: Vec<usize> = train_set.iter().map(Vec::len).collect();
    let mut metrics = Vec::new();
    let mut best_valid = resume.best_valid;
    let mut best_epoch = resume.best_epoch;
    let mut best_params = model.params().tensors().to_vec();
    let mut since_best = if resume.best_valid.is_finite() {
        start_epoch.saturating_sub(resume.best_epoch + 1)
    } else {
        0
    };
    let mut stopped_early = false;
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let batches = make_batches(&lengths, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        let mut norm_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&[Vec<f64>]> = idx.iter().map(|&i| train_set[i].as_slice()).collect();
            let n_steps: usize = batch.iter().map(|s| s.len()).sum();
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let noise = draw_noise(&mut rng, batch[0].len(), batch.len() * cfg.train_particles, model.noise_dim());
            let out = batch_bound(&mut g, model, &p, &batch, &bound_cfg, &noise, &mut rng)?;
            let value = g.value(out.total).item();
            if !value.is_finite() {
                return Err(ObjectiveError::NonFinite { epoch, batch: bi });
            }
            let objective = g.scale(out.total, -1.0 / n_steps as f64)?;
            let grads = g.backward(objective)?;
            let grads: Vec<Tensor> = p.iter().map(|v| grads.wrt(*v)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(ObjectiveError::NonFinite { epoch, batch: bi });
            }
            norm_sum += adam_update(model.params_mut().tensors_mut(), &grads, optim)?;
            total += value;
            steps += n_steps;
        }
        let valid = evaluate(model, valid_set, &valid_cfg, cfg.seed ^ 0x5eed_0fa1, 1)?;
        let row = EpochMetrics {
            epoch,
            train_per_step: total / steps as f64,
            valid_per_step: valid.per_step,
            grad_norm: norm_sum / batches.len() as f64,
        };
        let improved = valid.per_step > best_valid;
        if improved {
            best_valid = valid.per_step;
            best_epoch = epoch;
            best_params = model.params().tensors().to_vec();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(h) = hook.as_mut() {
            h(&row, model, optim, improved).map_err(ObjectiveError::Hook)?;
        }
        metrics.push(row);
        if cfg.patience > 0 && since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_valid,
        best_params,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_seq: Vec<f64>,
    pub total: f64,
    pub steps: usize,
    pub per_step: f64,
    /// Standard error of `per_step` across sequences.
    pub stderr: f64,
}

/// Evaluates a bound over a dataset. Sequence `i` uses its own rng stream
/// derived from `(seed, i)`, so results do not depend on `workers`.
pub fn evaluate<M: StepModel + Sync + ?Sized>(
    model: &M,
    seqs: &[Vec<Vec<f64>>],
    cfg: &BoundConfig,
    seed: u64,
    workers: usize,
) -> Result<EvalResult> {
    if seqs.is_empty() {
        return Err(ObjectiveError::Empty("evaluation set"));
    }
    let eval_one = |i: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        Ok(sequence_bound(model, &seqs[i], cfg, &mut rng)?.0)
    };
    let workers = workers.clamp(1, seqs.len());
    let per_seq: Vec<f64> = if workers == 1 {
        (0..seqs.len()).map(eval_one).collect::<Result<_>>()?
    } else {
        let chunk = seqs.len().div_ceil(workers);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let eval_one = &eval_one;
                    s.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(seqs.len()))
                            .map(eval_one)
                            .collect::<Result<Vec<f64>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(seqs.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };
    let steps: usize = seqs.iter().map(Vec::len).sum();
    let total: f64 = per_seq.iter().sum();
    let n = per_seq.len() as f64;
    let mean = total / n;
    let var = if per_seq.len() > 1 {
        per_seq.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(EvalResult {
        per_step: total / steps as f64,
        stderr: var.sqrt() * n.sqrt() / steps as f64,
        total,
        steps,
        per_seq,
    })
}
