//! VRNN, VHRNN and HyperLSTM sequence models with a single-step interface.
//!
//! Parameters live in a [`ParamStore`] under stable dotted names and are bound
//! onto a fresh [`Graph`] for every step batch. Rows of every batched tensor
//! are (sequence, particle) pairs.
//!
//! | symbol | home |
//! |---|---|
//! | `x_t` | observation row passed to [`StepModel::step`] |
//! | `z_t` | [`StepOutput::z`] |
//! | `h_t` | first entry of the state vector returned in [`StepOutput::next`] |
//! | `θ` | hyper cell (`theta.*`) or hyper MLP, [`HyperKind`] |
//! | `ω` | per-layer decoder modulation MLPs (`omega.*`) |
//! | `g` | primary cell (`rnn.*`), [`CellKind`] |
//! | `φ^prior`, `φ^enc`, `φ^dec` | `prior.*`, `enc.*`, `dec.*` |
//! | `μ, Σ` triplets | [`StepOutput::prior`], [`StepOutput::posterior`], [`StepOutput::decoder`] |

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{self, CellKind, CellState, CellWeights, GateScales};
use crate::distributions::{
    self, bernoulli_log_prob_rows, gaussian_kl_rows, gaussian_log_prob_rows, gaussian_sample_rows,
    gmm_log_prob_rows, DistError, GaussianVar, MixtureVar,
};
use crate::tensor::{sigmoid, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vrnn,
    #[default]
    Vhrnn,
    HyperLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HyperInput {
    LatentOnly,
    HiddenOnly,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HyperKind {
    #[default]
    Recurrent,
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Gaussian,
    Bernoulli,
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub cell: CellKind,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub hyper_dim: usize,
    pub hyper_input: HyperInput,
    pub hyper_kind: HyperKind,
    pub head: HeadKind,
    pub gmm_components: usize,
    /// Output width of the x and z feature extractors.
    pub feature_dim: usize,
    pub feature_width: usize,
    pub feature_layers: usize,
    pub encoder_width: usize,
    pub encoder_layers: usize,
    pub prior_width: usize,
    pub prior_layers: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    /// Hidden width of each decoder-modulation MLP.
    pub omega_width: usize,
    /// Separate mean and log-std networks for the encoder and prior.
    pub split_heads: bool,
    /// Separate mean and log-std decoder networks (VRNN only).
    pub decoder_split_heads: bool,
    /// Condition the prior on the LSTM cell state as well as `h`.
    pub prior_uses_cell: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::synthetic(ModelKind::Vhrnn, 4)
    }
}

impl ModelConfig {
    /// Recipe for the 2-D synthetic benchmark: every width equals the latent
    /// dimension, two hidden layers for encoder, prior and decoder.
    pub fn synthetic(kind: ModelKind, z: usize) -> Self {
        Self {
            kind,
            cell: CellKind::Lstm,
            data_dim: 2,
            latent_dim: z,
            hidden_dim: z,
            hyper_dim: z,
            hyper_input: HyperInput::Both,
            hyper_kind: HyperKind::Recurrent,
            head: HeadKind::Gaussian,
            gmm_components: 1,
            feature_dim: z,
            feature_width: z,
            feature_layers: 1,
            encoder_width: z,
            encoder_layers: 2,
            prior_width: z,
            prior_layers: 2,
            decoder_width: z,
            decoder_layers: 2,
            omega_width: 8,
            split_heads: true,
            decoder_split_heads: kind == ModelKind::Vrnn,
            prior_uses_cell: true,
        }
    }

    /// Recipe for real-valued or binary data: one hidden layer everywhere,
    /// modulation MLP width 64.
    pub fn real(kind: ModelKind, data_dim: usize, z: usize, head: HeadKind) -> Self {
        Self {
            data_dim,
            head,
            encoder_layers: 1,
            prior_layers: 1,
            decoder_layers: 1,
            omega_width: 64,
            split_heads: false,
            decoder_split_heads: false,
            prior_uses_cell: false,
            ..Self::synthetic(kind, z)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let dims = [
            ("data_dim", self.data_dim),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("hyper_dim", self.hyper_dim),
            ("feature_dim", self.feature_dim),
            ("feature_width", self.feature_width),
            ("encoder_width", self.encoder_width),
            ("prior_width", self.prior_width),
            ("decoder_width", self.decoder_width),
            ("omega_width", self.omega_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.head == HeadKind::Gmm && self.gmm_components == 0 {
            return bad("gmm_components must be at least 1");
        }
        if self.kind == ModelKind::Vhrnn && self.decoder_split_heads {
            return bad("the modulated VHRNN decoder is a single network; set decoder_split_heads = false");
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        let d = self.data_dim;
        match self.head {
            HeadKind::Gaussian => 2 * d,
            HeadKind::Bernoulli => d,
            HeadKind::Gmm => self.gmm_components * (1 + 2 * d),
        }
    }

    fn hyper_input_dim(&self) -> usize {
        let (z, h) = match self.kind {
            ModelKind::HyperLstm => (self.data_dim, self.hidden_dim),
            _ => (self.latent_dim, self.hidden_dim),
        };
        match self.hyper_input {
            HyperInput::LatentOnly => z,
            HyperInput::HiddenOnly => h,
            HyperInput::Both => z + h,
        }
    }
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: self.tensors[i].shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Overwrites every parameter from `other`; names must match exactly.
    /// The first expected name absent from `other` is reported before any
    /// unknown name.
    pub fn load_from<'a>(&mut self, other: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let other: Vec<(&str, &Tensor)> = other.into_iter().collect();
        if let Some(missing) = self.names.iter().find(|n| !other.iter().any(|(o, _)| o == n)) {
            return Err(ModelError::MissingParam(missing.clone()));
        }
        for (name, t) in other {
            if self.index_of(name).is_none() {
                return Err(ModelError::UnknownParam(name.to_string()));
            }
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter onto `g` as a differentiable or constant leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    /// Apply tanh after the last layer too.
    final_act: bool,
}

#[derive(Debug, Clone)]
enum Head {
    Joint(Mlp),
    Split { mean: Mlp, log_std: Mlp },
}

#[derive(Debug, Clone, Copy)]
struct CellParams {
    w: usize,
    u: usize,
    b: usize,
}

#[derive(Debug, Clone)]
enum Theta {
    Recurrent { cell: CellParams, out: Linear },
    Feedforward(Mlp),
}

#[derive(Debug, Clone)]
struct HyperDecoder {
    base: Mlp,
    /// One modulation MLP per base layer, emitting (Δscale, bias).
    omega: Vec<Mlp>,
    widths: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Decoder {
    Plain(Head),
    Hyper(HyperDecoder),
}

#[derive(Debug, Clone)]
enum Arch {
    Latent {
        phi_x: Mlp,
        phi_z: Mlp,
        enc: Head,
        prior: Head,
        dec: Decoder,
        rnn: CellParams,
        theta: Option<Theta>,
    },
    HyperLstm {
        rnn: CellParams,
        theta: Theta,
        head: Linear,
    },
}

struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut dyn RngCore>,
}

impl Builder<'_> {
    fn tensor(&mut self, shape: Vec<usize>, fan_in: usize, zero: bool) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let (false, Some(rng)) = (zero, self.rng.as_mut()) {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        t
    }

    fn linear(&mut self, name: &str, input: usize, out: usize, zero: bool) -> Linear {
        let w = self.tensor(vec![input, out], input, zero);
        let b = self.tensor(vec![out], input, zero);
        Linear {
            w: self.store.insert(format!("{name}.w"), w),
            b: self.store.insert(format!("{name}.b"), b),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: &[usize], out: usize, final_act: bool, zero_last: bool) -> Mlp {
        let mut layers = Vec::new();
        let mut prev = input;
        for (i, &w) in hidden.iter().enumerate() {
            layers.push(self.linear(&format!("{name}.{i}"), prev, w, false));
            prev = w;
        }
        layers.push(self.linear(&format!("{name}.{}", hidden.len()), prev, out, zero_last));
        Mlp { layers, final_act }
    }

    fn head(&mut self, name: &str, input: usize, hidden: &[usize], out: usize, split: bool) -> Head {
        if split {
            Head::Split {
                mean: self.mlp(&format!("{name}.mean"), input, hidden, out, false, false),
                log_std: self.mlp(&format!("{name}.log_std"), input, hidden, out, false, false),
            }
        } else {
            Head::Joint(self.mlp(name, input, hidden, 2 * out, false, false))
        }
    }

    fn cell(&mut self, name: &str, kind: CellKind, input: usize, h: usize) -> CellParams {
        let gates = kind.gates() * h;
        let w = self.tensor(vec![input, gates], input, false);
        let u = self.tensor(vec![h, gates], h, false);
        let b = self.tensor(vec![gates], input, false);
        CellParams {
            w: self.store.insert(format!("{name}.w"), w),
            u: self.store.insert(format!("{name}.u"), u),
            b: self.store.insert(format!("{name}.b"), b),
        }
    }

    fn theta(&mut self, cfg: &ModelConfig, input: usize) -> Theta {
        let out = 3 * cfg.cell.gates() * cfg.hidden_dim;
        match cfg.hyper_kind {
            HyperKind::Recurrent => Theta::Recurrent {
                cell: self.cell("theta.rnn", cfg.cell, input, cfg.hyper_dim),
                out: self.linear("theta.out", cfg.hyper_dim, out, true),
            },
            HyperKind::Feedforward => {
                Theta::Feedforward(self.mlp("theta.mlp", input, &[cfg.hyper_dim], out, false, true))
            }
        }
    }
}

fn build_arch(cfg: &ModelConfig, rng: Option<&mut dyn RngCore>) -> Result<(Arch, ParamStore)> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let (d, z, h) = (cfg.data_dim, cfg.latent_dim, cfg.hidden_dim);
    let arch = match cfg.kind {
        ModelKind::HyperLstm => {
            let rnn = b.cell("rnn", cfg.cell, d, h);
            let theta = b.theta(cfg, cfg.hyper_input_dim());
            let head = b.linear("head", h, cfg.head_width(), false);
            Arch::HyperLstm { rnn, theta, head }
        }
        ModelKind::Vrnn | ModelKind::Vhrnn => {
            let f = cfg.feature_dim;
            let fw = vec![cfg.feature_width; cfg.feature_layers];
            let phi_x = b.mlp("phi_x", d, &fw, f, true, false);
            let phi_z = b.mlp("phi_z", z, &fw, f, true, false);
            let ew = vec![cfg.encoder_width; cfg.encoder_layers];
            let enc = b.head("enc", f + h, &ew, z, cfg.split_heads);
            let prior_in = if cfg.prior_uses_cell && cfg.cell.has_cell_state() {
                2 * h
            } else {
                h
            };
            let pw = vec![cfg.prior_width; cfg.prior_layers];
            let prior = b.head("prior", prior_in, &pw, z, cfg.split_heads);
            let dw = vec![cfg.decoder_width; cfg.decoder_layers];
            let dec_in = f + h;
            let dec = if cfg.kind == ModelKind::Vrnn {
                if cfg.decoder_split_heads && cfg.head == HeadKind::Gaussian {
                    Decoder::Plain(b.head("dec", dec_in, &dw, d, true))
                } else {
                    Decoder::Plain(Head::Joint(b.mlp("dec", dec_in, &dw, cfg.head_width(), false, false)))
                }
            } else {
                let base = b.mlp("dec", dec_in, &dw, cfg.head_width(), false, false);
                let mut widths = dw.clone();
                widths.push(cfg.head_width());
                let hin = cfg.hyper_input_dim();
                let omega = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| b.mlp(&format!("omega.{i}"), hin, &[cfg.omega_width], 2 * w, false, true))
                    .collect();
                Decoder::Hyper(HyperDecoder { base, omega, widths })
            };
            let rnn = b.cell("rnn", cfg.cell, 2 * f, h);
            let theta = (cfg.kind == ModelKind::Vhrnn).then(|| b.theta(cfg, cfg.hyper_input_dim()));
            Arch::Latent {
                phi_x,
                phi_z,
                enc,
                prior,
                dec,
                rnn,
                theta,
            }
        }
    };
    Ok((arch, b.store))
}

/// Decoder or predictive distribution for one step, batched over rows.
#[derive(Debug, Clone, Copy)]
pub enum DecoderVar {
    Gaussian(GaussianVar),
    Bernoulli(Var),
    Mixture(MixtureVar),
}

impl DecoderVar {
    pub fn log_prob_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(match self {
            DecoderVar::Gaussian(d) => gaussian_log_prob_rows(g, x, d)?,
            DecoderVar::Bernoulli(l) => bernoulli_log_prob_rows(g, x, *l)?,
            DecoderVar::Mixture(m) => gmm_log_prob_rows(g, x, m)?,
        })
    }

    /// Predictive mean of row `r`.
    pub fn mean_row(&self, g: &Graph, r: usize) -> Result<Vec<f64>> {
        Ok(match self {
            DecoderVar::Gaussian(d) => g.value(d.mean).row(r).to_vec(),
            DecoderVar::Bernoulli(l) => g.value(*l).row(r).iter().map(|&v| sigmoid(v)).collect(),
            DecoderVar::Mixture(m) => m.row(g, r)?.mean(),
        })
    }

    /// Mean over dimensions of the predicted log-variance of row `r`
    /// (Gaussian heads only).
    pub fn mean_log_var_row(&self, g: &Graph, r: usize) -> Option<f64> {
        match self {
            DecoderVar::Gaussian(d) => {
                let ls = g.value(d.log_std).row(r);
                Some(2.0 * ls.iter().sum::<f64>() / ls.len() as f64)
            }
            _ => None,
        }
    }

    /// Draws one observation per row outside the graph.
    pub fn sample(&self, g: &Graph, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        let rows = match self {
            DecoderVar::Gaussian(d) => d.rows(g),
            DecoderVar::Bernoulli(l) => g.value(*l).rows(),
            DecoderVar::Mixture(m) => g.value(m.logits).rows(),
        };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(match self {
                DecoderVar::Gaussian(d) => {
                    let dist = d.row(g, r);
                    let eps = distributions::standard_normal(rng, dist.dim());
                    distributions::gaussian_sample(&dist, &eps)?
                }
                DecoderVar::Bernoulli(l) => g
                    .value(*l)
                    .row(r)
                    .iter()
                    .map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(v))))
                    .collect(),
                DecoderVar::Mixture(m) => {
                    let mix = m.row(g, r)?;
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = mix.components().len() - 1;
                    for (k, lw) in mix.log_weights().iter().enumerate() {
                        acc += lw.exp();
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    let c = &mix.components()[pick];
                    let eps = distributions::standard_normal(rng, c.dim());
                    distributions::gaussian_sample(c, &eps)?
                }
            });
        }
        Ok(out)
    }
}

/// Everything one step of a model produces. Log-density terms are `[n, 1]`.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub prior: Option<GaussianVar>,
    pub posterior: Option<GaussianVar>,
    pub decoder: DecoderVar,
    pub z: Option<Var>,
    pub log_px: Var,
    pub log_pz: Var,
    pub log_qz: Var,
    pub kl: Var,
    pub next: Vec<Var>,
}

/// Single-step interface shared by the estimators.
///
/// State is a list of row tensors `[n, *]`; resampling gathers every entry by
/// row. `eps` is standard-normal noise `[n, noise_dim]`.
pub trait StepModel {
    fn params(&self) -> &ParamStore;
    fn data_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn init_state(&self, g: &mut Graph, p: &[Var], rows: usize) -> Result<Vec<Var>>;
    fn step(&self, g: &mut Graph, p: &[Var], state: &[Var], x: Var, eps: Option<Var>) -> Result<StepOutput>;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params().bind(g, trainable)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

fn mlp_fwd(g: &mut Graph, p: &[Var], mlp: &Mlp, mut x: Var) -> Result<Var> {
    let n = mlp.layers.len();
    for (i, l) in mlp.layers.iter().enumerate() {
        x = g.affine(x, p[l.w], p[l.b])?;
        if i + 1 < n || mlp.final_act {
            x = g.tanh(x)?;
        }
    }
    Ok(x)
}

fn gaussian_head(g: &mut Graph, p: &[Var], head: &Head, x: Var, dim: usize) -> Result<GaussianVar> {
    let (mean, raw) = match head {
        Head::Joint(m) => {
            let out = mlp_fwd(g, p, m, x)?;
            (g.slice(out, 0, dim)?, g.slice(out, dim, 2 * dim)?)
        }
        Head::Split { mean, log_std } => (mlp_fwd(g, p, mean, x)?, mlp_fwd(g, p, log_std, x)?),
    };
    Ok(GaussianVar::new(g, mean, raw)?)
}

fn hyper_mlp_fwd(g: &mut Graph, p: &[Var], dec: &HyperDecoder, mut x: Var, hin: Var) -> Result<Var> {
    let n = dec.base.layers.len();
    for (i, (l, om)) in dec.base.layers.iter().zip(&dec.omega).enumerate() {
        let w = dec.widths[i];
        let mod_out = mlp_fwd(g, p, om, hin)?;
        let delta_scale = g.slice(mod_out, 0, w)?;
        let scale = g.offset(delta_scale, 1.0)?;
        let bias = g.slice(mod_out, w, 2 * w)?;
        x = cells::hyper_linear(g, x, p[l.w], p[l.b], scale, bias)?;
        if i + 1 < n {
            x = g.tanh(x)?;
        }
    }
    Ok(x)
}

impl Model {
    pub fn build(cfg: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let (arch, params) = build_arch(&cfg, Some(rng))?;
        Ok(Self { cfg, params, arch })
    }

    /// Model with the layout of `cfg` and parameters loaded by name.
    pub fn from_params<'a>(
        cfg: ModelConfig,
        params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        let (arch, mut store) = build_arch(&cfg, None)?;
        store.load_from(params)?;
        Ok(Self {
            cfg,
            params: store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total()
    }

    /// Parameter totals grouped by network (name prefix before the first dot,
    /// with `omega`/`enc`/`prior`/`dec` kept at two levels).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts[0] {
                "enc" | "prior" | "dec" if matches!(parts[1], "mean" | "log_std") => {
                    format!("{}.{}", parts[0], parts[1])
                }
                "theta" | "omega" => format!("{}.{}", parts[0], parts[1]),
                _ => parts[0].to_string(),
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => groups.push((key, t.numel())),
            }
        }
        groups
    }

    fn cell_weights(&self, p: &[Var], c: &CellParams) -> CellWeights {
        CellWeights {
            w: p[c.w],
            u: p[c.u],
            b: p[c.b],
        }
    }

    fn hyper_input(&self, g: &mut Graph, z: Var, h: Var) -> Result<Var> {
        Ok(match self.cfg.hyper_input {
            HyperInput::LatentOnly => z,
            HyperInput::HiddenOnly => h,
            HyperInput::Both => g.concat(&[z, h])?,
        })
    }

    /// Runs θ on the hyper input. Returns gate modulation and the next hyper state.
    fn theta_fwd(
        &self,
        g: &mut Graph,
        p: &[Var],
        theta: &Theta,
        hin: Var,
        hyper_state: &[Var],
    ) -> Result<(GateScales, Vec<Var>)> {
        let (raw, next) = match theta {
            Theta::Recurrent { cell, out } => {
                let s = CellState {
                    h: hyper_state[0],
                    c: hyper_state.get(1).copied(),
                };
                let w = self.cell_weights(p, cell);
                let ns = cells::cell_step(g, self.cfg.cell, hin, &s, &w, None)?;
                let raw = g.affine(ns.h, p[out.w], p[out.b])?;
                let mut next = vec![ns.h];
                next.extend(ns.c);
                (raw, next)
            }
            Theta::Feedforward(mlp) => (mlp_fwd(g, p, mlp, hin)?, Vec::new()),
        };
        let width = self.cfg.cell.gates() * self.cfg.hidden_dim;
        let dx = g.slice(raw, 0, width)?;
        let dx = g.offset(dx, 1.0)?;
        let dh = g.slice(raw, width, 2 * width)?;
        let dh = g.offset(dh, 1.0)?;
        let bias = g.slice(raw, 2 * width, 3 * width)?;
        Ok((GateScales { d_x: dx, d_h: dh, bias }, next))
    }

    fn head_dist(&self, g: &mut Graph, out: Var) -> Result<DecoderVar> {
        let d = self.cfg.data_dim;
        Ok(match self.cfg.head {
            HeadKind::Gaussian => {
                let mean = g.slice(out, 0, d)?;
                let raw = g.slice(out, d, 2 * d)?;
                DecoderVar::Gaussian(GaussianVar::new(g, mean, raw)?)
            }
            HeadKind::Bernoulli => DecoderVar::Bernoulli(out),
            HeadKind::Gmm => {
                let m = self.cfg.gmm_components;
                let logits = g.slice(out, 0, m)?;
                let means = g.slice(out, m, m + m * d)?;
                let raw = g.slice(out, m + m * d, m + 2 * m * d)?;
                DecoderVar::Mixture(MixtureVar::new(g, logits, means, raw, m)?)
            }
        })
    }

    fn check_rows(&self, g: &Graph, x: Var, what: &'static str, dim: usize) -> Result<()> {
        let got = *g.shape(x).last().unwrap_or(&0);
        if g.shape(x).len() != 2 || got != dim {
            return Err(ModelError::DimMismatch {
                what,
                expected: dim,
                got,
            });
        }
        Ok(())
    }

    fn primary_state(&self, state: &[Var]) -> CellState {
        CellState {
            h: state[0],
            c: self.cfg.cell.has_cell_state().then(|| state[1]),
        }
    }

    fn primary_len(&self) -> usize {
        if self.cfg.cell.has_cell_state() {
            2
        } else {
            1
        }
    }

    fn prior_dist(&self, g: &mut Graph, p: &[Var], prior: &Head, s: &CellState) -> Result<GaussianVar> {
        let input = match (self.cfg.prior_uses_cell, s.c) {
            (true, Some(c)) => g.concat(&[s.h, c])?,
            _ => s.h,
        };
        gaussian_head(g, p, prior, input, self.cfg.latent_dim)
    }

    fn decode(&self, g: &mut Graph, p: &[Var], dec: &Decoder, fz: Var, z: Var, h: Var) -> Result<DecoderVar> {
        let input = g.concat(&[fz, h])?;
        match dec {
            Decoder::Plain(Head::Split { .. }) => {
                let Decoder::Plain(head) = dec else { unreachable!() };
                Ok(DecoderVar::Gaussian(gaussian_head(g, p, head, input, self.cfg.data_dim)?))
            }
            Decoder::Plain(Head::Joint(mlp)) => {
                let out = mlp_fwd(g, p, mlp, input)?;
                self.head_dist(g, out)
            }
            Decoder::Hyper(hd) => {
                let hin = self.hyper_input(g, z, h)?;
                let out = hyper_mlp_fwd(g, p, hd, input, hin)?;
                self.head_dist(g, out)
            }
        }
    }

    /// Advances the primary (and hyper) recurrence after observing `fx`, `fz`.
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        g: &mut Graph,
        p: &[Var],
        rnn: &CellParams,
        theta: Option<&Theta>,
        state: &[Var],
        fx: Var,
        fz: Var,
        z: Var,
    ) -> Result<Vec<Var>> {
        let s = self.primary_state(state);
        let y = g.concat(&[fx, fz])?;
        let w = self.cell_weights(p, rnn);
        let (ns, hyper_next) = match theta {
            Some(theta) => {
                let hin = self.hyper_input(g, z, s.h)?;
                let (m, hn) = self.theta_fwd(g, p, theta, hin, &state[self.primary_len()..])?;
                (cells::cell_step(g, self.cfg.cell, y, &s, &w, Some(&m))?, hn)
            }
            None => (cells::cell_step(g, self.cfg.cell, y, &s, &w, None)?, Vec::new()),
        };
        let mut next = vec![ns.h];
        next.extend(ns.c);
        next.extend(hyper_next);
        Ok(next)
    }

    fn zeros_col(g: &mut Graph, rows: usize) -> Var {
        g.constant(Tensor::zeros(vec![rows, 1]))
    }

    /// Ancestral sampling of `steps` observations for a single sequence.
    pub fn generate(&self, steps: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        let mut state_vals: Option<Vec<Tensor>> = None;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            // A fresh tape per step keeps memory flat over long rollouts.
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let state = match state_vals.take() {
                Some(vals) => vals.into_iter().map(|t| g.constant(t)).collect(),
                None => self.init_state(&mut g, &p, 1)?,
            };
            let (x, next) = self.generate_step(&mut g, &p, &state, rng)?;
            out.push(x);
            state_vals = Some(next.iter().map(|v| g.value(*v).clone()).collect());
        }
        Ok(out)
    }

    /// One generative step: latent from the prior (or none), observation from
    /// the decoder, then the recurrence consumes the sampled observation.
    pub fn generate_step(
        &self,
        g: &mut Graph,
        p: &[Var],
        state: &[Var],
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Vec<Var>)> {
        match &self.arch {
            Arch::Latent {
                phi_x,
                phi_z,
                prior,
                dec,
                rnn,
                theta,
                ..
            } => {
                let s = self.primary_state(state);
                let pr = self.prior_dist(g, p, prior, &s)?;
                let eps = distributions::standard_normal(rng, self.cfg.latent_dim);
                let eps = g.constant(Tensor::matrix(1, eps.len(), eps)?);
                let z = gaussian_sample_rows(g, &pr, eps)?;
                let fz = mlp_fwd(g, p, phi_z, z)?;
                let dist = self.decode(g, p, dec, fz, z, s.h)?;
                let x = dist.sample(g, rng)?.remove(0);
                let xv = g.constant(Tensor::matrix(1, x.len(), x.clone())?);
                let fx = mlp_fwd(g, p, phi_x, xv)?;
                let next = self.advance(g, p, rnn, theta.as_ref(), state, fx, fz, z)?;
                Ok((x, next))
            }
            Arch::HyperLstm { head, .. } => {
                let s = self.primary_state(state);
                let out = g.affine(s.h, p[head.w], p[head.b])?;
                let dist = self.head_dist(g, out)?;
                let x = dist.sample(g, rng)?.remove(0);
                let xv = g.constant(Tensor::matrix(1, x.len(), x.clone())?);
                let next = self.hyper_lstm_advance(g, p, state, xv)?;
                Ok((x, next))
            }
        }
    }

    fn hyper_lstm_advance(&self, g: &mut Graph, p: &[Var], state: &[Var], x: Var) -> Result<Vec<Var>> {
        let Arch::HyperLstm { rnn, theta, .. } = &self.arch else {
            unreachable!("hyper_lstm_advance on latent model")
        };
        let s = self.primary_state(state);
        let hin = self.hyper_input(g, x, s.h)?;
        let (m, hn) = self.theta_fwd(g, p, theta, hin, &state[self.primary_len()..])?;
        let w = self.cell_weights(p, rnn);
        let ns = cells::cell_step(g, self.cfg.cell, x, &s, &w, Some(&m))?;
        let mut next = vec![ns.h];
        next.extend(ns.c);
        next.extend(hn);
        Ok(next)
    }

    /// Gate modulation θ would produce for the given primary `h`, latent `z`
    /// and hyper state, exposed for inspection.
    pub fn gate_scales(&self, g: &mut Graph, p: &[Var], z: Var, h: Var, hyper_state: &[Var]) -> Result<Option<GateScales>> {
        let theta = match &self.arch {
            Arch::Latent { theta: Some(t), .. } => t,
            Arch::HyperLstm { theta, .. } => theta,
            _ => return Ok(None),
        };
        let hin = self.hyper_input(g, z, h)?;
        Ok(Some(self.theta_fwd(g, p, theta, hin, hyper_state)?.0))
    }
}

impl StepModel for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn data_dim(&self) -> usize {
        self.cfg.data_dim
    }

    fn noise_dim(&self) -> usize {
        match self.cfg.kind {
            ModelKind::HyperLstm => 0,
            _ => self.cfg.latent_dim,
        }
    }

    fn init_state(&self, g: &mut Graph, _p: &[Var], rows: usize) -> Result<Vec<Var>> {
        let h = self.cfg.hidden_dim;
        let mut state = vec![g.constant(Tensor::zeros(vec![rows, h]))];
        if self.cfg.cell.has_cell_state() {
            state.push(g.constant(Tensor::zeros(vec![rows, h])));
        }
        let recurrent_hyper = match &self.arch {
            Arch::Latent { theta, .. } => matches!(theta, Some(Theta::Recurrent { .. })),
            Arch::HyperLstm { theta, .. } => matches!(theta, Theta::Recurrent { .. }),
        };
        if recurrent_hyper {
            let hh = self.cfg.hyper_dim;
            state.push(g.constant(Tensor::zeros(vec![rows, hh])));
            if self.cfg.cell.has_cell_state() {
                state.push(g.constant(Tensor::zeros(vec![rows, hh])));
            }
        }
        Ok(state)
    }

    fn step(&self, g: &mut Graph, p: &[Var], state: &[Var], x: Var, eps: Option<Var>) -> Result<StepOutput> {
        self.check_rows(g, x, "observation", self.cfg.data_dim)?;
        let rows = g.shape(x)[0];
        match &self.arch {
            Arch::Latent {
                phi_x,
                phi_z,
                enc,
                prior,
                dec,
                rnn,
                theta,
            } => {
                let eps = eps.ok_or(ModelError::DimMismatch {
                    what: "latent noise",
                    expected: self.cfg.latent_dim,
                    got: 0,
                })?;
                self.check_rows(g, eps, "latent noise", self.cfg.latent_dim)?;
                let s = self.primary_state(state);
                let pr = self.prior_dist(g, p, prior, &s)?;
                let fx = mlp_fwd(g, p, phi_x, x)?;
                let enc_in = g.concat(&[fx, s.h])?;
                let post = gaussian_head(g, p, enc, enc_in, self.cfg.latent_dim)?;
                let z = gaussian_sample_rows(g, &post, eps)?;
                let fz = mlp_fwd(g, p, phi_z, z)?;
                let dist = self.decode(g, p, dec, fz, z, s.h)?;
                let log_px = dist.log_prob_rows(g, x)?;
                let log_pz = gaussian_log_prob_rows(g, z, &pr)?;
                let log_qz = gaussian_log_prob_rows(g, z, &post)?;
                let kl = gaussian_kl_rows(g, &post, &pr)?;
                let next = self.advance(g, p, rnn, theta.as_ref(), state, fx, fz, z)?;
                Ok(StepOutput {
                    prior: Some(pr),
                    posterior: Some(post),
                    decoder: dist,
                    z: Some(z),
                    log_px,
                    log_pz,
                    log_qz,
                    kl,
                    next,
                })
            }
            Arch::HyperLstm { head, .. } => {
                let s = self.primary_state(state);
                let out = g.affine(s.h, p[head.w], p[head.b])?;
                let dist = self.head_dist(g, out)?;
                let log_px = dist.log_prob_rows(g, x)?;
                let zero = Self::zeros_col(g, rows);
                let next = self.hyper_lstm_advance(g, p, state, x)?;
                Ok(StepOutput {
                    prior: None,
                    posterior: None,
                    decoder: dist,
                    z: None,
                    log_px,
                    log_pz: zero,
                    log_qz: zero,
                    kl: zero,
                    next,
                })
            }
        }
    }
}
