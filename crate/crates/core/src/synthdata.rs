//! Synthetic switching linear dynamics, `x_t = W x_{t-1} + sigma_t eps_t`,
//! and its systematic-generalization variants.
//!
//! Each sequence stores the rule, start point and noise schedule of every
//! segment plus a noise seed, so it can be re-simulated exactly.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dataio::{Sequence, SequenceDataset};
use crate::distributions::standard_normal;

pub const SIGMA_LEVELS: [f64; 3] = [0.25, 1.0, 4.0];
pub const MIN_SEGMENT: usize = 5;

pub type Mat2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("matrix bank needs at least 2 matrices, got {0}")]
    BankSize(usize),
    #[error("schedule of length {t} cannot hold {switches} switches with segments of at least {MIN_SEGMENT}")]
    TooShort { t: usize, switches: usize },
    #[error("unknown setting {0:?}")]
    UnknownSetting(String),
    #[error("zero-shot bank seed equals the training bank seed {0}")]
    SameBank(u64),
    #[error("spectral radius cap must exceed 1, got {0}")]
    MaxRadius(f64),
    #[error("sequence metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub fn mat_vec(w: &Mat2, x: &Vec2) -> Vec2 {
    [w[0][0] * x[0] + w[0][1] * x[1], w[1][0] * x[0] + w[1][1] * x[1]]
}

/// Largest eigenvalue modulus of a 2x2 matrix.
pub fn spectral_radius(w: &Mat2) -> f64 {
    let half_tr = 0.5 * (w[0][0] + w[1][1]);
    let det = w[0][0] * w[1][1] - w[0][1] * w[1][0];
    let disc = half_tr * half_tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (half_tr + s).abs().max((half_tr - s).abs())
    } else {
        det.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixBank {
    pub id: String,
    pub seed: u64,
    pub matrices: Vec<Mat2>,
}

/// Draws `count` matrices with entries uniform in `(-range, range)`,
/// redrawing the whole bank until it holds both a growing (`rho > 1`) and
/// a decaying (`rho < 1`) matrix. Single matrices with `rho > max_radius`
/// are redrawn.
pub fn make_matrix_bank_with(seed: u64, count: usize, range: f64, max_radius: f64) -> Result<MatrixBank> {
    if count < 2 {
        return Err(SynthError::BankSize(count));
    }
    if !(max_radius > 1.0) {
        return Err(SynthError::MaxRadius(max_radius));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let matrices: Vec<Mat2> = (0..count)
            .map(|_| loop {
                let mut e = || rng.random_range(-range..range);
                let w = [[e(), e()], [e(), e()]];
                if spectral_radius(&w) <= max_radius {
                    break w;
                }
            })
            .collect();
        let radii: Vec<f64> = matrices.iter().map(spectral_radius).collect();
        if radii.iter().any(|&r| r > 1.0) && radii.iter().any(|&r| r < 1.0) {
            return Ok(MatrixBank {
                id: format!("bank-{seed:016x}"),
                seed,
                matrices,
            });
        }
    }
}

pub fn make_matrix_bank(seed: u64, count: usize) -> Result<MatrixBank> {
    make_matrix_bank_with(seed, count, 1.2, f64::INFINITY)
}

/// Per-step noise standard deviations `sigma_1..sigma_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SigmaSchedule(pub Vec<f64>);

impl SigmaSchedule {
    pub fn constant(t: usize, sigma: f64) -> Self {
        Self(vec![sigma; t])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices `i` with `sigma[i] != sigma[i - 1]`.
    pub fn change_points(&self) -> Vec<usize> {
        (1..self.0.len()).filter(|&i| self.0[i] != self.0[i - 1]).collect()
    }
}

/// Piecewise-constant schedule with exactly `n_switches` changes. Segment
/// lengths are uniform over all compositions with every segment at least
/// [`MIN_SEGMENT`] long; consecutive levels differ.
pub fn gen_sigma_schedule(t: usize, n_switches: usize, rng: &mut dyn RngCore) -> Result<SigmaSchedule> {
    let parts = n_switches + 1;
    if t < MIN_SEGMENT * parts {
        return Err(SynthError::TooShort { t, switches: n_switches });
    }
    let extra = t - MIN_SEGMENT * parts;
    let mut bars = index::sample(rng, extra + n_switches, n_switches).into_vec();
    bars.sort_unstable();
    let mut lengths = Vec::with_capacity(parts);
    let mut prev = 0;
    for (j, &b) in bars.iter().enumerate() {
        // Bar j sits at position b among extra + n_switches slots.
        lengths.push(MIN_SEGMENT + b - j - prev);
        prev = b - j;
    }
    lengths.push(MIN_SEGMENT + extra - prev);
    let mut level = rng.random_range(0..SIGMA_LEVELS.len());
    let mut values = Vec::with_capacity(t);
    for (j, len) in lengths.into_iter().enumerate() {
        if j > 0 {
            level = (level + rng.random_range(1..SIGMA_LEVELS.len())) % SIGMA_LEVELS.len();
        }
        values.extend(std::iter::repeat_n(SIGMA_LEVELS[level], len));
    }
    Ok(SigmaSchedule(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum Rule {
    /// `x_t = W x_{t-1}`; `index` points into the bank, `None` for the
    /// identity walk.
    Linear { index: Option<usize>, w: Mat2 },
    /// `x_t = x_{t-1} + b`.
    Add { b: Vec2 },
}

impl Rule {
    fn apply(&self, x: &Vec2) -> Vec2 {
        match self {
            Rule::Linear { w, .. } => mat_vec(w, x),
            Rule::Add { b } => [x[0] + b[0], x[1] + b[1]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub rule: Rule,
    pub x0: Vec2,
    pub sigma: SigmaSchedule,
}

/// Simulates `x_0..x_T` for one segment. Two standard normals are drawn per
/// step whatever `sigma_t` is, so noise streams stay aligned across settings.
pub fn simulate_segment(seg: &Segment, noise: &mut dyn RngCore) -> Vec<Vec2> {
    let mut x = seg.x0;
    let mut out = Vec::with_capacity(seg.sigma.len() + 1);
    out.push(x);
    for &s in &seg.sigma.0 {
        let eps = standard_normal(noise, 2);
        let m = seg.rule.apply(&x);
        x = if s == 0.0 {
            m
        } else {
            [m[0] + s * eps[0], m[1] + s * eps[1]]
        };
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Train,
    Valid,
    Test,
    Noiseless,
    Switch,
    Long,
    Zeroshot,
    Add,
    Rand,
}

impl Setting {
    pub const ALL: [Setting; 9] = [
        Setting::Train,
        Setting::Valid,
        Setting::Test,
        Setting::Noiseless,
        Setting::Switch,
        Setting::Long,
        Setting::Zeroshot,
        Setting::Add,
        Setting::Rand,
    ];

    /// Evaluation columns in table order.
    pub const BATTERY: [Setting; 7] = [
        Setting::Test,
        Setting::Noiseless,
        Setting::Switch,
        Setting::Long,
        Setting::Zeroshot,
        Setting::Add,
        Setting::Rand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Train => "train",
            Setting::Valid => "valid",
            Setting::Test => "test",
            Setting::Noiseless => "noiseless",
            Setting::Switch => "switch",
            Setting::Long => "long",
            Setting::Zeroshot => "zeroshot",
            Setting::Add => "add",
            Setting::Rand => "rand",
        }
    }

    fn code(self) -> u64 {
        Setting::ALL.iter().position(|&s| s == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| SynthError::UnknownSetting(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub bank_seed: u64,
    pub zeroshot_bank_seed: u64,
    pub bank_size: usize,
    pub entry_range: f64,
    /// Upper bound on the spectral radius of each bank matrix.
    pub max_radius: f64,
    /// Number of transitions `T`; sequences hold `T + 1` points.
    pub base_len: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    /// Sequence count for every generalization setting.
    pub eval_count: usize,
    pub train_switches: usize,
    pub rand_len: usize,
    pub rand_max_switches: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bank_seed: 1,
            zeroshot_bank_seed: 2,
            bank_size: 10,
            entry_range: 1.2,
            max_radius: f64::INFINITY,
            base_len: 30,
            train_count: 800,
            valid_count: 100,
            test_count: 100,
            eval_count: 100,
            train_switches: 2,
            rand_len: 60,
            rand_max_switches: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub setting: Setting,
    pub noise_seed: u64,
    pub segments: Vec<Segment>,
    /// Indices into the observed points where a regime or noise level changes.
    pub switches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub x: Vec<Vec2>,
    pub meta: SynthMeta,
}

impl SynthMeta {
    /// Replays the stored segments with the stored noise seed.
    pub fn resimulate(&self) -> Vec<Vec2> {
        let mut noise = ChaCha8Rng::seed_from_u64(self.noise_seed);
        self.segments
            .iter()
            .flat_map(|s| simulate_segment(s, &mut noise))
            .collect()
    }

    pub fn from_json(meta: &Map<String, Value>) -> Result<Self> {
        serde_json::from_value(Value::Object(meta.clone())).map_err(|e| SynthError::Meta(e.to_string()))
    }

    pub fn to_json(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("metadata serializes to an object"),
        }
    }
}

/// One sequence from the linear rule. Draws `x_0` uniformly from
/// `[-1, 1]^2` when not supplied, then the step noise, from `rng`.
pub fn gen_sequence(w: &Mat2, x0: Option<Vec2>, schedule: &SigmaSchedule, rng: &mut dyn RngCore) -> Vec<Vec2> {
    let x0 = x0.unwrap_or_else(|| uniform2(rng, -1.0, 1.0));
    let seg = Segment {
        rule: Rule::Linear { index: None, w: *w },
        x0,
        sigma: schedule.clone(),
    };
    simulate_segment(&seg, rng)
}

fn uniform2(rng: &mut dyn RngCore, lo: f64, hi: f64) -> Vec2 {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn bank_rule(bank: &MatrixBank, rng: &mut dyn RngCore) -> Rule {
    let i = rng.random_range(0..bank.matrices.len());
    Rule::Linear {
        index: Some(i),
        w: bank.matrices[i],
    }
}

fn plan(setting: Setting, cfg: &SynthConfig, bank: &MatrixBank, rng: &mut dyn RngCore) -> Result<Vec<Segment>> {
    let t = cfg.base_len;
    let segment = |rule, x0, sigma| Segment { rule, x0, sigma };
    Ok(match setting {
        Setting::Train | Setting::Valid | Setting::Test => {
            let rule = bank_rule(bank, rng);
            let x0 = uniform2(rng, -1.0, 1.0);
            vec![segment(rule, x0, gen_sigma_schedule(t, cfg.train_switches, rng)?)]
        }
        Setting::Noiseless | Setting::Zeroshot | Setting::Long => {
            let len = if setting == Setting::Long { 2 * t } else { t };
            let rule = bank_rule(bank, rng);
            let x0 = uniform2(rng, -1.0, 1.0);
            vec![segment(rule, x0, SigmaSchedule::constant(len, 0.0))]
        }
        Setting::Switch => (0..3)
            .map(|_| {
                let rule = bank_rule(bank, rng);
                let x0 = uniform2(rng, -1.0, 1.0);
                segment(rule, x0, SigmaSchedule::constant(t, 0.0))
            })
            .collect(),
        Setting::Add => {
            let b = uniform2(rng, 0.0, 1.0);
            let x0 = uniform2(rng, 0.0, 1.0);
            vec![segment(Rule::Add { b }, x0, SigmaSchedule::constant(t, 0.0))]
        }
        Setting::Rand => {
            let n = rng.random_range(1..=cfg.rand_max_switches.max(1));
            let rule = Rule::Linear {
                index: None,
                w: IDENTITY,
            };
            let x0 = uniform2(rng, -1.0, 1.0);
            vec![segment(rule, x0, gen_sigma_schedule(cfg.rand_len, n, rng)?)]
        }
    })
}

fn switch_points(setting: Setting, segments: &[Segment]) -> Vec<usize> {
    if setting == Setting::Switch {
        let mut at = 0;
        return segments[..segments.len() - 1]
            .iter()
            .map(|s| {
                at += s.sigma.len() + 1;
                at
            })
            .collect();
    }
    // sigma[i] drives the step into point i + 1.
    segments[0].sigma.change_points().into_iter().map(|i| i + 1).collect()
}

pub fn bank_for(setting: Setting, cfg: &SynthConfig) -> Result<MatrixBank> {
    if setting == Setting::Zeroshot {
        if cfg.zeroshot_bank_seed == cfg.bank_seed {
            return Err(SynthError::SameBank(cfg.bank_seed));
        }
        make_matrix_bank_with(cfg.zeroshot_bank_seed, cfg.bank_size, cfg.entry_range, cfg.max_radius)
    } else {
        make_matrix_bank_with(cfg.bank_seed, cfg.bank_size, cfg.entry_range, cfg.max_radius)
    }
}

pub fn setting_count(setting: Setting, cfg: &SynthConfig) -> usize {
    match setting {
        Setting::Train => cfg.train_count,
        Setting::Valid => cfg.valid_count,
        Setting::Test => cfg.test_count,
        _ => cfg.eval_count,
    }
}

/// Generates the sequences of one setting. Sequence `i` draws its rule,
/// start and schedule from rng stream `(seed, setting, i)` and its noise
/// from a stored per-sequence seed.
pub fn gen_synth(setting: Setting, cfg: &SynthConfig, seed: u64) -> Result<(MatrixBank, Vec<SynthSequence>)> {
    let bank = bank_for(setting, cfg)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    seeds.set_stream(setting.code());
    let mut out = Vec::with_capacity(setting_count(setting, cfg));
    for _ in 0..setting_count(setting, cfg) {
        let seq_seed = seeds.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
        let segments = plan(setting, cfg, &bank, &mut rng)?;
        let noise_seed = rng.next_u64();
        let meta = SynthMeta {
            setting,
            noise_seed,
            switches: switch_points(setting, &segments),
            segments,
        };
        out.push(SynthSequence {
            x: meta.resimulate(),
            meta,
        });
    }
    Ok((bank, out))
}

/// [`gen_synth`] packaged as a dataset with bank and seed provenance.
pub fn gen_dataset(setting: Setting, cfg: &SynthConfig, seed: u64) -> Result<SequenceDataset> {
    let (bank, seqs) = gen_synth(setting, cfg, seed)?;
    let mut ds = SequenceDataset::new(2);
    ds.meta.insert("setting".into(), Value::from(setting.name()));
    ds.meta.insert("seed".into(), Value::from(seed));
    ds.meta.insert("bank_id".into(), Value::from(bank.id.clone()));
    ds.meta.insert(
        "bank".into(),
        serde_json::to_value(&bank.matrices).map_err(|e| SynthError::Meta(e.to_string()))?,
    );
    for (i, s) in seqs.into_iter().enumerate() {
        let mut seq = Sequence::new(
            format!("{}-{i:04}", setting.name()),
            s.x.iter().map(|p| p.to_vec()).collect(),
        );
        seq.meta = s.meta.to_json();
        ds.push(seq)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_matches_known_cases() {
        assert!((spectral_radius(&[[2.0, 0.0], [0.0, -3.0]]) - 3.0).abs() < 1e-15);
        // Rotation by 90 degrees scaled by 0.5 has eigenvalues +-0.5i.
        assert!((spectral_radius(&[[0.0, -0.5], [0.5, 0.0]]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bank_is_deterministic_and_mixed() {
        let a = make_matrix_bank(5, 10).unwrap();
        assert_eq!(a, make_matrix_bank(5, 10).unwrap());
        assert_eq!(a.matrices.len(), 10);
        let r: Vec<f64> = a.matrices.iter().map(spectral_radius).collect();
        assert!(r.iter().any(|&v| v > 1.0) && r.iter().any(|&v| v < 1.0));
        assert!(a.matrices.iter().flatten().flatten().all(|v| v.abs() < 1.2));
    }

    #[test]
    fn different_seeds_give_disjoint_banks() {
        let a = make_matrix_bank(1, 10).unwrap();
        let b = make_matrix_bank(2, 10).unwrap();
        assert!(a.matrices.iter().all(|m| !b.matrices.contains(m)));
        assert!(make_matrix_bank(0, 1).is_err());
    }

    #[test]
    fn identity_without_noise_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = gen_sequence(&IDENTITY, Some([1.0, 1.0]), &SigmaSchedule::constant(10, 0.0), &mut rng);
        assert_eq!(xs, vec![[1.0, 1.0]; 11]);
    }

    #[test]
    fn doubling_without_noise_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = gen_sequence(&[[2.0, 0.0], [0.0, 2.0]], Some([1.0, 0.0]), &SigmaSchedule::constant(12, 0.0), &mut rng);
        for (t, x) in xs.iter().enumerate() {
            assert_eq!(*x, [2f64.powi(t as i32), 0.0]);
        }
    }

    #[test]
    fn residuals_are_standard_normal() {
        let bank = make_matrix_bank(3, 10).unwrap();
        let w = bank.matrices.iter().find(|m| spectral_radius(m) < 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = gen_sequence(w, None, &SigmaSchedule::constant(100_000, 1.0), &mut rng);
        let res: Vec<Vec2> = xs
            .windows(2)
            .map(|p| {
                let m = mat_vec(w, &p[0]);
                [p[1][0] - m[0], p[1][1] - m[1]]
            })
            .collect();
        let n = res.len() as f64;
        for d in 0..2 {
            let mean = res.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = res.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.03, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
        let cov = res.iter().map(|r| r[0] * r[1]).sum::<f64>() / n;
        assert!(cov.abs() < 0.03, "cov {cov}");
    }

    #[test]
    fn schedule_has_exact_switches_and_long_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 0..=3 {
            for _ in 0..200 {
                let s = gen_sigma_schedule(30, n, &mut rng).unwrap();
                assert_eq!(s.len(), 30);
                let cps = s.change_points();
                assert_eq!(cps.len(), n);
                let mut bounds = vec![0];
                bounds.extend(&cps);
                bounds.push(30);
                assert!(bounds.windows(2).all(|w| w[1] - w[0] >= MIN_SEGMENT));
                assert!(s.0.iter().all(|v| SIGMA_LEVELS.contains(v)));
            }
        }
        assert!(matches!(
            gen_sigma_schedule(14, 2, &mut rng),
            Err(SynthError::TooShort { .. })
        ));
    }

    #[test]
    fn first_segment_level_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = gen_sigma_schedule(30, 2, &mut rng).unwrap();
            counts[SIGMA_LEVELS.iter().position(|&v| v == s.0[0]).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn train_set_has_paper_counts_and_two_switches() {
        let ds = gen_dataset(Setting::Train, &SynthConfig::default(), 7).unwrap();
        assert_eq!(ds.len(), 800);
        for s in &ds.sequences {
            let m = SynthMeta::from_json(&s.meta).unwrap();
            assert_eq!(m.segments[0].sigma.change_points().len(), 2);
            assert_eq!(m.switches.len(), 2);
            assert_eq!(s.data.len(), 31);
        }
    }

    #[test]
    fn add_sequences_have_constant_increment() {
        let (_, seqs) = gen_synth(Setting::Add, &SynthConfig::default(), 3).unwrap();
        for s in seqs {
            let Rule::Add { b } = s.meta.segments[0].rule else {
                panic!("add rule expected")
            };
            assert!(b.iter().chain(&s.meta.segments[0].x0).all(|v| (0.0..1.0).contains(v)));
            for p in s.x.windows(2) {
                assert_eq!(p[1], [p[0][0] + b[0], p[0][1] + b[1]]);
            }
        }
    }

    #[test]
    fn switch_thirds_resimulate_from_their_own_segment() {
        let cfg = SynthConfig::default();
        let (bank, seqs) = gen_synth(Setting::Switch, &cfg, 5).unwrap();
        for s in seqs {
            assert_eq!(s.x.len(), 3 * (cfg.base_len + 1));
            assert_eq!(s.meta.switches, vec![31, 62]);
            for (k, seg) in s.meta.segments.iter().enumerate() {
                let Rule::Linear { index: Some(i), w } = seg.rule else {
                    panic!("bank rule expected")
                };
                assert_eq!(w, bank.matrices[i]);
                // Independent replay of the noiseless recurrence.
                let mut x = seg.x0;
                for t in 0..=cfg.base_len {
                    assert_eq!(s.x[k * 31 + t], x);
                    x = mat_vec(&w, &x);
                }
            }
        }
    }

    #[test]
    fn rand_is_identity_walk_with_up_to_three_switches() {
        let cfg = SynthConfig::default();
        let (_, seqs) = gen_synth(Setting::Rand, &cfg, 2).unwrap();
        for s in seqs {
            assert_eq!(s.x.len(), cfg.rand_len + 1);
            let seg = &s.meta.segments[0];
            assert_eq!(seg.rule, Rule::Linear { index: None, w: IDENTITY });
            assert!((1..=3).contains(&s.meta.switches.len()));
        }
    }

    #[test]
    fn zeroshot_bank_is_disjoint_from_training_bank() {
        let cfg = SynthConfig::default();
        let train = bank_for(Setting::Train, &cfg).unwrap();
        let zs = bank_for(Setting::Zeroshot, &cfg).unwrap();
        assert!(zs.matrices.iter().all(|m| !train.matrices.contains(m)));
        let bad = SynthConfig {
            zeroshot_bank_seed: cfg.bank_seed,
            ..cfg
        };
        assert!(bank_for(Setting::Zeroshot, &bad).is_err());
    }

    #[test]
    fn long_is_twice_base_length() {
        let cfg = SynthConfig::default();
        let (_, seqs) = gen_synth(Setting::Long, &cfg, 1).unwrap();
        assert!(seqs.iter().all(|s| s.x.len() == 2 * cfg.base_len + 1 && s.meta.switches.is_empty()));
    }

    #[test]
    fn every_setting_resimulates_from_metadata() {
        let cfg = SynthConfig {
            train_count: 20,
            valid_count: 5,
            test_count: 5,
            eval_count: 10,
            ..SynthConfig::default()
        };
        for setting in Setting::ALL {
            let ds = gen_dataset(setting, &cfg, 13).unwrap();
            for s in &ds.sequences {
                let m = SynthMeta::from_json(&s.meta).unwrap();
                let xs: Vec<Vec<f64>> = m.resimulate().iter().map(|p| p.to_vec()).collect();
                assert_eq!(xs, s.data, "{setting}");
            }
        }
    }

    #[test]
    fn settings_parse_case_insensitively() {
        assert_eq!("ZERO-SHOT".parse::<Setting>().unwrap(), Setting::Zeroshot);
        assert_eq!("noiseless".parse::<Setting>().unwrap(), Setting::Noiseless);
        assert!("bogus".parse::<Setting>().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            gen_dataset(Setting::Test, &cfg, 4).unwrap(),
            gen_dataset(Setting::Test, &cfg, 4).unwrap()
        );
    }
}
