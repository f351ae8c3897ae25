//! One-dimensional linear-Gaussian state-space model with an exact Kalman
//! likelihood, used as a ground-truth oracle for the particle estimators.
//!
//! `z_0 = 0`, `z_t = a z_{t-1} + N(0, q)`, `x_t = z_t + N(0, r)`. The proposal
//! is the locally optimal `p(z_t | z_{t-1}, x_t)`.

use rand::RngCore;

use crate::distributions::{gaussian_kl_rows, gaussian_log_prob_rows, gaussian_sample_rows, standard_normal, GaussianVar};
use crate::models::{DecoderVar, ModelError, ParamStore, StepModel, StepOutput};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Lgssm {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    params: ParamStore,
}

impl Lgssm {
    pub fn new(a: f64, q: f64, r: f64) -> Self {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::vector(vec![a]));
        params.insert("log_std_q", Tensor::vector(vec![0.5 * q.ln()]));
        params.insert("log_std_r", Tensor::vector(vec![0.5 * r.ln()]));
        Self { a, q, r, params }
    }

    /// Draws one observation sequence of length `t`.
    pub fn simulate(&self, t: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        let mut z = 0.0;
        let noise = standard_normal(rng, 2 * t);
        (0..t)
            .map(|i| {
                z = self.a * z + self.q.sqrt() * noise[2 * i];
                vec![z + self.r.sqrt() * noise[2 * i + 1]]
            })
            .collect()
    }

    /// Exact `log p(x_{1:T})` by the Kalman filter.
    pub fn log_likelihood(&self, xs: &[Vec<f64>]) -> f64 {
        let (mut m, mut p) = (0.0, 0.0);
        let mut ll = 0.0;
        for x in xs {
            let mp = self.a * m;
            let pp = self.a * self.a * p + self.q;
            let s = pp + self.r;
            let innov = x[0] - mp;
            ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
            let gain = pp / s;
            m = mp + gain * innov;
            p = (1.0 - gain) * pp;
        }
        ll
    }
}

impl StepModel for Lgssm {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn data_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn init_state(&self, g: &mut Graph, _p: &[Var], rows: usize) -> Result<Vec<Var>, ModelError> {
        Ok(vec![g.constant(Tensor::zeros(vec![rows, 1]))])
    }

    fn step(&self, g: &mut Graph, p: &[Var], state: &[Var], x: Var, eps: Option<Var>) -> Result<StepOutput, ModelError> {
        let eps = eps.ok_or(ModelError::DimMismatch {
            what: "latent noise",
            expected: 1,
            got: 0,
        })?;
        let rows = g.shape(x)[0];
        let (a, ls_q, ls_r) = (p[0], p[1], p[2]);
        let z_prev = state[0];
        let prior_mean = g.mul_scalar(z_prev, a)?;
        let ls_q = g.broadcast_rows(ls_q, rows)?;
        let ls_r = g.broadcast_rows(ls_r, rows)?;
        let prior = GaussianVar::new(g, prior_mean, ls_q)?;

        // Posterior precision 1/q + 1/r and mean s²(a z/q + x/r).
        let nq = g.scale(ls_q, -2.0)?;
        let inv_q = g.exp(nq)?;
        let nr = g.scale(ls_r, -2.0)?;
        let inv_r = g.exp(nr)?;
        let prec = g.add(inv_q, inv_r)?;
        let log_prec = g.log(prec)?;
        let post_ls = g.scale(log_prec, -0.5)?;
        let t1 = g.mul(prior_mean, inv_q)?;
        let t2 = g.mul(x, inv_r)?;
        let num = g.add(t1, t2)?;
        let post_mean = g.div(num, prec)?;
        let post = GaussianVar::new(g, post_mean, post_ls)?;

        let z = gaussian_sample_rows(g, &post, eps)?;
        let dec = GaussianVar::new(g, z, ls_r)?;
        let log_px = gaussian_log_prob_rows(g, x, &dec)?;
        let log_pz = gaussian_log_prob_rows(g, z, &prior)?;
        let log_qz = gaussian_log_prob_rows(g, z, &post)?;
        let kl = gaussian_kl_rows(g, &post, &prior)?;
        Ok(StepOutput {
            prior: Some(prior),
            posterior: Some(post),
            decoder: DecoderVar::Gaussian(dec),
            z: Some(z),
            log_px,
            log_pz,
            log_qz,
            kl,
            next: vec![z],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{elbo, fivo, iwae, Resample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kalman_single_step_is_marginal_gaussian() {
        let m = Lgssm::new(0.9, 0.5, 0.3);
        let x = 0.4;
        let s: f64 = 0.8;
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + x * x / s);
        assert!((m.log_likelihood(&[vec![x]]) - expect).abs() < 1e-14);
    }

    #[test]
    fn optimal_proposal_gives_exact_single_step_weight() {
        // With one step the optimal proposal weight equals p(x_1) exactly.
        let m = Lgssm::new(0.8, 1.0, 0.5);
        let xs = vec![vec![1.3]];
        let exact = m.log_likelihood(&xs);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert!((elbo(&m, &xs, &mut rng).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn estimators_bracket_exact_likelihood() {
        let m = Lgssm::new(0.1, 0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = m.simulate(10, &mut rng);
        let exact = m.log_likelihood(&xs);
        let n = 200;
        let (mut e, mut i, mut f) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            e += elbo(&m, &xs, &mut rng).unwrap();
            i += iwae(&m, &xs, 64, &mut rng).unwrap();
            f += fivo(&m, &xs, 32, Resample::default(), &mut rng).unwrap().0;
        }
        let (e, i, f) = (e / n as f64, i / n as f64, f / n as f64);
        assert!(e <= exact + 1e-3, "elbo {e} exact {exact}");
        assert!((i - exact).abs() < 0.01, "iwae {i} exact {exact}");
        assert!((f - exact).abs() < 0.01, "fivo {f} exact {exact}");
    }
}
