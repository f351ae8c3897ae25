//! Diagonal Gaussian, Bernoulli-logit and Gaussian-mixture kernels.
//!
//! Every kernel exists twice: a plain `f64` form over slices, used by tests,
//! diagnostics and generation, and a graph form over batched rows `[n, d]`
//! that returns one log-density per row as `[n, 1]`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{self, Graph, Tensor, TensorError, Var};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 20.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of log-std entries clamped so far in this process.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn count_clamped(values: &[f64]) {
    let n = values
        .iter()
        .filter(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(*v))
        .count();
    if n > 0 {
        CLAMP_EVENTS.fetch_add(n as u64, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("{what}: dimension mismatch {left} vs {right}")]
    DimMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("bernoulli observation at index {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f64 },
    #[error("mixture log-weights do not normalize (logsumexp = {0})")]
    Unnormalized(f64),
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_dims(what: &'static str, left: usize, right: usize) -> Result<(), DistError> {
    if left != right {
        return Err(DistError::DimMismatch { what, left, right });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Builds the distribution, clamping `log_std` into `[-20, 20]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, DistError> {
        check_dims("diag_gaussian", mean.len(), log_std.len())?;
        count_clamped(&log_std);
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }
}

pub fn gaussian_log_prob(x: &[f64], d: &DiagGaussian) -> Result<f64, DistError> {
    check_dims("gaussian_log_prob", x.len(), d.dim())?;
    Ok(x.iter()
        .zip(&d.mean)
        .zip(&d.log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) * (-ls).exp();
            -HALF_LN_2PI - ls - 0.5 * z * z
        })
        .sum())
}

pub fn gaussian_sample(d: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>, DistError> {
    check_dims("gaussian_sample", eps.len(), d.dim())?;
    Ok(d.mean
        .iter()
        .zip(&d.log_std)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, DistError> {
    check_dims("gaussian_kl", q.dim(), p.dim())?;
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_std[i], p.log_std[i]);
        let diff = q.mean[i] - p.mean[i];
        kl += lp - lq + ((2.0 * (lq - lp)).exp() + diff * diff * (-2.0 * lp).exp()) / 2.0 - 0.5;
    }
    Ok(kl.max(0.0))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliLogits {
    pub logits: Vec<f64>,
}

pub fn bernoulli_log_prob(x: &[f64], b: &BernoulliLogits) -> Result<f64, DistError> {
    check_dims("bernoulli_log_prob", x.len(), b.logits.len())?;
    let mut total = 0.0;
    for (i, (&xi, &l)) in x.iter().zip(&b.logits).enumerate() {
        if xi != 0.0 && xi != 1.0 {
            return Err(DistError::NonBinary { index: i, value: xi });
        }
        total += xi * l - tensor::softplus(l);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussMixture {
    log_weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl GaussMixture {
    /// Log-weights must already be normalized within 1e-9.
    pub fn new(log_weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self, DistError> {
        if components.is_empty() {
            return Err(DistError::NoComponents);
        }
        check_dims("gauss_mixture", log_weights.len(), components.len())?;
        let dim = components[0].dim();
        for c in &components {
            check_dims("gauss_mixture", c.dim(), dim)?;
        }
        let lse = tensor::logsumexp(&log_weights);
        if (lse.abs() > 1e-9) || !lse.is_finite() {
            return Err(DistError::Unnormalized(lse));
        }
        Ok(Self {
            log_weights,
            components,
        })
    }

    /// Normalizes unconstrained mixture logits.
    pub fn from_logits(logits: &[f64], components: Vec<DiagGaussian>) -> Result<Self, DistError> {
        let lse = tensor::logsumexp(logits);
        Self::new(logits.iter().map(|l| l - lse).collect(), components)
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            let w = lw.exp();
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += w * m;
            }
        }
        out
    }
}

pub fn gmm_log_prob(x: &[f64], m: &GaussMixture) -> Result<f64, DistError> {
    check_dims("gmm_log_prob", x.len(), m.dim())?;
    let terms = m
        .log_weights
        .iter()
        .zip(&m.components)
        .map(|(lw, c)| Ok(lw + gaussian_log_prob(x, c)?))
        .collect::<Result<Vec<f64>, DistError>>()?;
    Ok(tensor::logsumexp(&terms))
}

/// Batched diagonal Gaussian on the tape: `mean` and `log_std` are `[n, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVar {
    /// Clamps a raw log-std head into `[-20, 20]`, counting clamped entries.
    pub fn new(g: &mut Graph, mean: Var, raw_log_std: Var) -> Result<Self, DistError> {
        if g.shape(mean) != g.shape(raw_log_std) {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_var",
                left: g.shape(mean).to_vec(),
                right: g.shape(raw_log_std).to_vec(),
            }
            .into());
        }
        count_clamped(g.value(raw_log_std).data());
        let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(Self { mean, log_std })
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.shape(self.mean)[0]
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.mean)[1]
    }

    /// Plain copy of row `r`.
    pub fn row(&self, g: &Graph, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row(r).to_vec(),
            log_std: g.value(self.log_std).row(r).to_vec(),
        }
    }
}

/// Per-row Gaussian log-density, `[n, 1]`.
pub fn gaussian_log_prob_rows(g: &mut Graph, x: Var, d: &GaussianVar) -> Result<Var, DistError> {
    let dim = d.dim(g);
    let diff = g.sub(x, d.mean)?;
    let neg = g.neg(d.log_std)?;
    let inv = g.exp(neg)?;
    let z = g.mul(diff, inv)?;
    let sq = g.square(z)?;
    let quad = g.sum_cols(sq)?;
    let quad = g.scale(quad, -0.5)?;
    let ls = g.sum_cols(d.log_std)?;
    let out = g.sub(quad, ls)?;
    Ok(g.offset(out, -HALF_LN_2PI * dim as f64)?)
}

/// Reparameterized draw `mean + exp(log_std) * eps`.
pub fn gaussian_sample_rows(g: &mut Graph, d: &GaussianVar, eps: Var) -> Result<Var, DistError> {
    let std = g.exp(d.log_std)?;
    let noise = g.mul(std, eps)?;
    Ok(g.add(d.mean, noise)?)
}

/// Closed-form per-row `KL(q || p)`, `[n, 1]`.
pub fn gaussian_kl_rows(g: &mut Graph, q: &GaussianVar, p: &GaussianVar) -> Result<Var, DistError> {
    let dim = q.dim(g);
    check_dims("gaussian_kl_rows", dim, p.dim(g))?;
    let dls = g.sub(q.log_std, p.log_std)?;
    let two_dls = g.scale(dls, 2.0)?;
    let ratio = g.exp(two_dls)?;
    let diff = g.sub(q.mean, p.mean)?;
    let neg = g.neg(p.log_std)?;
    let inv = g.exp(neg)?;
    let z = g.mul(diff, inv)?;
    let zsq = g.square(z)?;
    let inner = g.add(ratio, zsq)?;
    let inner = g.scale(inner, 0.5)?;
    let inner = g.sub(inner, dls)?;
    let total = g.sum_cols(inner)?;
    Ok(g.offset(total, -0.5 * dim as f64)?)
}

/// Per-row Bernoulli log-mass in logits form `x*l - softplus(l)`, `[n, 1]`.
/// Observations are assumed binary; validate with [`bernoulli_log_prob`] or at load time.
pub fn bernoulli_log_prob_rows(g: &mut Graph, x: Var, logits: Var) -> Result<Var, DistError> {
    let xl = g.mul(x, logits)?;
    let sp = g.softplus(logits)?;
    let d = g.sub(xl, sp)?;
    Ok(g.sum_cols(d)?)
}

/// Batched mixture head: `logits` is `[n, m]`, `means`/`raw_log_std` are
/// `[n, m*d]` with component `k` in columns `k*d..(k+1)*d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureVar {
    pub logits: Var,
    pub means: Var,
    pub log_std: Var,
    pub components: usize,
}

impl MixtureVar {
    pub fn new(
        g: &mut Graph,
        logits: Var,
        means: Var,
        raw_log_std: Var,
        components: usize,
    ) -> Result<Self, DistError> {
        if components == 0 {
            return Err(DistError::NoComponents);
        }
        check_dims("mixture_var", g.shape(logits)[1], components)?;
        count_clamped(g.value(raw_log_std).data());
        let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(Self {
            logits,
            means,
            log_std,
            components,
        })
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.means)[1] / self.components
    }

    pub fn component(&self, g: &mut Graph, k: usize) -> Result<GaussianVar, DistError> {
        let d = self.dim(g);
        let mean = g.slice(self.means, k * d, (k + 1) * d)?;
        let log_std = g.slice(self.log_std, k * d, (k + 1) * d)?;
        Ok(GaussianVar { mean, log_std })
    }

    /// Plain copy of row `r`.
    pub fn row(&self, g: &Graph, r: usize) -> Result<GaussMixture, DistError> {
        let d = self.dim(g);
        let means = g.value(self.means).row(r);
        let ls = g.value(self.log_std).row(r);
        let comps = (0..self.components)
            .map(|k| DiagGaussian {
                mean: means[k * d..(k + 1) * d].to_vec(),
                log_std: ls[k * d..(k + 1) * d].to_vec(),
            })
            .collect();
        GaussMixture::from_logits(g.value(self.logits).row(r), comps)
    }
}

/// Per-row mixture log-density, `[n, 1]`.
pub fn gmm_log_prob_rows(g: &mut Graph, x: Var, m: &MixtureVar) -> Result<Var, DistError> {
    let mut parts = Vec::with_capacity(m.components);
    for k in 0..m.components {
        let c = m.component(g, k)?;
        parts.push(gaussian_log_prob_rows(g, x, &c)?);
    }
    let comp = g.concat(&parts)?;
    let joint = g.add(m.logits, comp)?;
    let num = g.logsumexp_cols(joint)?;
    let norm = g.logsumexp_cols(m.logits)?;
    Ok(g.sub(num, norm)?)
}

/// Row tensor helper used by tests and callers feeding plain vectors.
pub fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).expect("non-empty row")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(mean: &[f64], log_std: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), log_std.to_vec()).unwrap()
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let lp = gaussian_log_prob(&[0.0], &DiagGaussian::standard(1)).unwrap();
        assert!((lp + 0.918_938_5).abs() < 1e-7);
        let lp2 = gaussian_log_prob(&[0.3, -2.0], &gauss(&[0.3, -2.0], &[0.0, 0.0])).unwrap();
        assert!((lp2 + 1.837_877_1).abs() < 1e-7);
    }

    #[test]
    fn density_integrates_to_one() {
        let d = gauss(&[0.7], &[0.4]);
        let s = 0.4f64.exp();
        let n = 200_000;
        let (a, b) = (0.7 - 10.0 * s, 0.7 + 10.0 * s);
        let h = (b - a) / n as f64;
        let f = |x: f64| gaussian_log_prob(&[x], &d).unwrap().exp();
        let mut total = 0.5 * (f(a) + f(b));
        for i in 1..n {
            total += f(a + i as f64 * h);
        }
        assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sample_is_reparameterized() {
        let d = gauss(&[1.5, -0.5], &[0.3, 0.1]);
        assert_eq!(gaussian_sample(&d, &[0.0, 0.0]).unwrap(), vec![1.5, -0.5]);
        let unit = gauss(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(gaussian_sample(&unit, &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn sample_variance_matches() {
        let d = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = standard_normal(&mut rng, 2);
            let s = gaussian_sample(&d, &eps).unwrap();
            sq[0] += s[0] * s[0];
            sq[1] += s[1] * s[1];
        }
        let target = std::f64::consts::E.powi(2);
        for v in sq {
            assert!((v / n as f64 / target - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        let p = gauss(&[0.3, -1.0], &[0.2, -0.4]);
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        let kl = gaussian_kl(&gauss(&[1.0], &[0.0]), &gauss(&[0.0], &[0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = gauss(&[0.2, -0.5, 1.0, 0.0], &[-0.3, 0.1, 0.2, -0.1]);
        let p = gauss(&[0.0, 0.3, 0.5, -0.4], &[0.1, 0.0, -0.2, 0.3]);
        let exact = gaussian_kl(&q, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = standard_normal(&mut rng, 4);
            let z = gaussian_sample(&q, &eps).unwrap();
            acc += gaussian_log_prob(&z, &q).unwrap() - gaussian_log_prob(&z, &p).unwrap();
        }
        let mc = acc / n as f64;
        assert!((mc / exact - 1.0).abs() < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn bernoulli_cases() {
        let b = BernoulliLogits { logits: vec![0.0] };
        assert!((bernoulli_log_prob(&[1.0], &b).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        let b = BernoulliLogits { logits: vec![-20.0] };
        let v = bernoulli_log_prob(&[0.0], &b).unwrap();
        assert!((v + 2.061_153_6e-9).abs() < 1e-15);
        assert!(matches!(
            bernoulli_log_prob(&[0.5], &BernoulliLogits { logits: vec![0.0] }),
            Err(DistError::NonBinary { index: 0, .. })
        ));
    }

    #[test]
    fn bernoulli_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..88).map(|_| rng.random_range(-9.9..9.9)).collect();
        let x: Vec<f64> = (0..88).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let naive: f64 = x
            .iter()
            .zip(&logits)
            .map(|(&xi, &l)| {
                let p = 1.0 / (1.0 + (-l).exp());
                xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
            })
            .sum();
        let fast = bernoulli_log_prob(&x, &BernoulliLogits { logits }).unwrap();
        assert!((fast - naive).abs() < 1e-9);
    }

    #[test]
    fn gmm_reductions() {
        let c = gauss(&[0.5, -0.2], &[0.1, 0.3]);
        let x = [0.1, 0.4];
        let single = GaussMixture::new(vec![0.0], vec![c.clone()]).unwrap();
        let direct = gaussian_log_prob(&x, &c).unwrap();
        assert!((gmm_log_prob(&x, &single).unwrap() - direct).abs() < 1e-15);
        let half = 0.5f64.ln();
        let twin = GaussMixture::new(vec![half, half], vec![c.clone(), c]).unwrap();
        assert!((gmm_log_prob(&x, &twin).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn gmm_matches_direct_sum() {
        let comps = vec![
            gauss(&[0.0, 1.0], &[0.2, -0.1]),
            gauss(&[-1.0, 0.5], &[0.0, 0.4]),
            gauss(&[2.0, -0.3], &[-0.5, 0.1]),
        ];
        let m = GaussMixture::from_logits(&[0.3, -1.2, 0.8], comps.clone()).unwrap();
        let x = [0.4, 0.2];
        let direct: f64 = m
            .log_weights()
            .iter()
            .zip(&comps)
            .map(|(lw, c)| lw.exp() * gaussian_log_prob(&x, c).unwrap().exp())
            .sum::<f64>()
            .ln();
        assert!((gmm_log_prob(&x, &m).unwrap() - direct).abs() < 1e-12);
        assert!(GaussMixture::new(vec![0.0, 0.0], comps[..2].to_vec()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(gaussian_log_prob(&[0.0, 1.0], &DiagGaussian::standard(1)).is_err());
        assert!(gaussian_kl(&DiagGaussian::standard(2), &DiagGaussian::standard(3)).is_err());
        assert!(gaussian_sample(&DiagGaussian::standard(2), &[0.0]).is_err());
    }

    #[test]
    fn clamping_is_counted() {
        let before = clamp_events();
        let d = DiagGaussian::new(vec![0.0, 0.0], vec![-25.0, 3.0]).unwrap();
        assert_eq!(d.log_std, vec![-20.0, 3.0]);
        assert!(clamp_events() > before);
    }

    #[test]
    fn graph_kernels_match_plain() {
        let q = gauss(&[0.2, -0.5, 1.0], &[-0.3, 0.1, 0.2]);
        let p = gauss(&[0.0, 0.3, 0.5], &[0.1, 0.0, -0.2]);
        let x = [0.1, 0.9, -0.4];
        let mut g = Graph::new();
        let qm = g.param(row_tensor(&q.mean));
        let qs = g.param(row_tensor(&q.log_std));
        let pm = g.param(row_tensor(&p.mean));
        let ps = g.param(row_tensor(&p.log_std));
        let xv = g.constant(row_tensor(&x));
        let qv = GaussianVar::new(&mut g, qm, qs).unwrap();
        let pv = GaussianVar::new(&mut g, pm, ps).unwrap();
        let lp = gaussian_log_prob_rows(&mut g, xv, &qv).unwrap();
        let kl = gaussian_kl_rows(&mut g, &qv, &pv).unwrap();
        assert!((g.value(lp).item() - gaussian_log_prob(&x, &q).unwrap()).abs() < 1e-12);
        assert!((g.value(kl).item() - gaussian_kl(&q, &p).unwrap()).abs() < 1e-12);

        let logits = [1.5, -0.7, 0.2];
        let bx = [1.0, 0.0, 1.0];
        let lv = g.param(row_tensor(&logits));
        let bv = g.constant(row_tensor(&bx));
        let blp = bernoulli_log_prob_rows(&mut g, bv, lv).unwrap();
        let plain = bernoulli_log_prob(&bx, &BernoulliLogits { logits: logits.to_vec() }).unwrap();
        assert!((g.value(blp).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn graph_mixture_matches_plain() {
        let mut g = Graph::new();
        let logits = g.param(row_tensor(&[0.3, -0.4]));
        let means = g.param(row_tensor(&[0.0, 1.0, -1.0, 0.5]));
        let ls = g.param(row_tensor(&[0.2, -0.1, 0.0, 0.4]));
        let x = g.constant(row_tensor(&[0.3, 0.2]));
        let m = MixtureVar::new(&mut g, logits, means, ls, 2).unwrap();
        let lp = gmm_log_prob_rows(&mut g, x, &m).unwrap();
        let plain = m.row(&g, 0).unwrap();
        let expect = gmm_log_prob(&[0.3, 0.2], &plain).unwrap();
        assert!((g.value(lp).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn reparameterized_gradient_passes_fd() {
        let eps = [0.4, -1.1];
        let err = tensor::finite_difference_check(
            &[row_tensor(&[0.3, -0.2]), row_tensor(&[0.1, -0.4])],
            |g, v| {
                let d = GaussianVar {
                    mean: v[0],
                    log_std: v[1],
                };
                let e = g.constant(row_tensor(&eps));
                let z = gaussian_sample_rows(g, &d, e)?;
                let sq = g.square(z)?;
                Ok::<_, DistError>(g.sum(sq)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
