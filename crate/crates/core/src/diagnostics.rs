//! Per-step traces of a filtering pass: posterior-prior KL, reconstruction
//! error of the decoder mean and predicted log-variance, with CSV and SVG
//! output.

use std::fmt::Write as _;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::distributions::standard_normal;
use crate::models::{ModelError, StepModel};
use crate::tensor::{Graph, Tensor, TensorError};

pub const PANEL_WIDTH: f64 = 800.0;
pub const PANEL_HEIGHT: f64 = 300.0;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("observation row {row} has {got} values, model expects {expected}")]
    DimMismatch { row: usize, expected: usize, got: usize },
    #[error("sequence of length {0} is too short (need at least {1})")]
    TooShort(usize, usize),
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("switch marker {0} outside sequence of length {1}")]
    SwitchRange(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Per-step series for one sequence; all share the sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub kl: Vec<f64>,
    pub recon_l2: Vec<f64>,
    /// Predicted log-variance averaged over output dimensions; NaN for
    /// non-Gaussian heads.
    pub mean_logvar: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub switches: Vec<usize>,
}

impl TraceBundle {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    pub n_samples: usize,
    /// Use the posterior mean instead of a sampled latent.
    pub posterior_mean: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            n_samples: 1,
            posterior_mean: false,
        }
    }
}

/// Runs the filtering pass with `n_samples` independent latent paths and
/// averages each per-step statistic over them.
pub fn trace<M: StepModel + ?Sized>(
    model: &M,
    seq: &[Vec<f64>],
    switches: &[usize],
    opts: TraceOptions,
    rng: &mut dyn RngCore,
) -> Result<TraceBundle> {
    let n = opts.n_samples;
    if n == 0 {
        return Err(DiagError::NoSamples);
    }
    let d = model.data_dim();
    if let Some(row) = seq.iter().position(|r| r.len() != d) {
        return Err(DiagError::DimMismatch {
            row,
            expected: d,
            got: seq[row].len(),
        });
    }
    if let Some(&s) = switches.iter().find(|&&s| s >= seq.len()) {
        return Err(DiagError::SwitchRange(s, seq.len()));
    }
    let zdim = model.noise_dim();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let mut state = model.init_state(&mut g, &p, n)?;
    let mut out = TraceBundle {
        kl: Vec::with_capacity(seq.len()),
        recon_l2: Vec::with_capacity(seq.len()),
        mean_logvar: Vec::with_capacity(seq.len()),
        x: seq.to_vec(),
        switches: switches.to_vec(),
    };
    for row in seq {
        let x = g.constant(Tensor::matrix(n, d, row.repeat(n))?);
        let eps = (zdim > 0).then(|| {
            let e = if opts.posterior_mean {
                vec![0.0; n * zdim]
            } else {
                standard_normal(rng, n * zdim)
            };
            g.constant(Tensor::matrix(n, zdim, e).expect("noise shape"))
        });
        let step = model.step(&mut g, &p, &state, x, eps)?;
        let (mut kl, mut l2, mut lv) = (0.0, 0.0, 0.0);
        for r in 0..n {
            kl += g.value(step.kl).get2(r, 0);
            let mean = step.decoder.mean_row(&g, r)?;
            l2 += mean.iter().zip(row).map(|(m, v)| (m - v) * (m - v)).sum::<f64>().sqrt();
            lv += step.decoder.mean_log_var_row(&g, r).unwrap_or(f64::NAN);
        }
        out.kl.push(kl / n as f64);
        out.recon_l2.push(l2 / n as f64);
        out.mean_logvar.push(lv / n as f64);
        state = step.next;
    }
    Ok(out)
}

/// Traces many sequences; sequence `i` uses rng stream `(seed, i)`, so the
/// result does not depend on `workers`.
pub fn trace_many<M: StepModel + Sync + ?Sized>(
    model: &M,
    seqs: &[(Vec<Vec<f64>>, Vec<usize>)],
    opts: TraceOptions,
    seed: u64,
    workers: usize,
) -> Result<Vec<TraceBundle>> {
    let one = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        trace(model, &seqs[i].0, &seqs[i].1, opts, &mut rng)
    };
    let workers = workers.clamp(1, seqs.len().max(1));
    if workers == 1 {
        return (0..seqs.len()).map(one).collect();
    }
    let chunk = seqs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<TraceBundle>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(seqs.len())).map(one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trace worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean KL over the first and last thirds of the sequence.
pub fn kl_trend_stat(bundle: &TraceBundle) -> Result<(f64, f64)> {
    let t = bundle.kl.len();
    if t < 6 {
        return Err(DiagError::TooShort(t, 6));
    }
    let third = t / 3;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&bundle.kl[..third]), mean(&bundle.kl[t - third..])))
}

pub fn csv_header(dim: usize) -> String {
    let xs: Vec<String> = (0..dim).map(|i| format!("x_{i}")).collect();
    format!("step,kl,recon_l2,mean_logvar,{},is_switch", xs.join(","))
}

/// One row per step. Floats use the shortest round-trip representation.
pub fn write_csv<W: Write>(b: &TraceBundle, mut w: W) -> Result<()> {
    let dim = b.x.first().map_or(0, Vec::len);
    writeln!(w, "{}", csv_header(dim))?;
    for t in 0..b.len() {
        let xs: Vec<String> = b.x[t].iter().map(|v| format!("{v:?}")).collect();
        writeln!(
            w,
            "{t},{:?},{:?},{:?},{},{}",
            b.kl[t],
            b.recon_l2[t],
            b.mean_logvar[t],
            xs.join(","),
            u8::from(b.switches.contains(&t))
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(b: &TraceBundle, path: impl AsRef<std::path::Path>) -> Result<()> {
    write_csv(b, std::io::BufWriter::new(std::fs::File::create(path)?))
}

const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#17becf"];

fn panel(out: &mut String, index: usize, title: &str, series: &[(String, &[f64])], switches: &[usize], len: usize) {
    let (w, h, pad) = (PANEL_WIDTH, PANEL_HEIGHT, 30.0);
    let finite = || series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let sx = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (len.max(2) - 1) as f64;
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let _ = writeln!(
        out,
        r#"<svg x="0" y="{}" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        index as f64 * h
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="#cccccc"/>"##);
    let _ = writeln!(out, r#"<text x="{pad}" y="20" font-size="14" font-family="sans-serif">{title}</text>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-size="11" font-family="sans-serif" text-anchor="end">[{lo:.3}, {hi:.3}]</text>"#,
        w - pad
    );
    for &s in switches {
        let x = sx(s);
        let _ = writeln!(
            out,
            r#"<line class="switch" x1="{x:.2}" y1="{pad}" x2="{x:.2}" y2="{}" stroke="red" stroke-width="1"/>"#,
            h - pad
        );
    }
    for (k, (name, s)) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(t, &v)| format!("{:.2},{:.2}", sx(t), sy(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-series="{name}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[k % COLORS.len()],
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
}

/// Stacked panels (observations, KL, reconstruction error, log-variance),
/// each 800x300, with switch positions as red vertical lines.
pub fn render_svg(b: &TraceBundle) -> String {
    let dim = b.x.first().map_or(0, Vec::len);
    let cols: Vec<Vec<f64>> = (0..dim).map(|i| b.x.iter().map(|r| r[i]).collect()).collect();
    let obs: Vec<(String, &[f64])> = cols.iter().enumerate().map(|(i, c)| (format!("x_{i}"), c.as_slice())).collect();
    let panels: [(&str, Vec<(String, &[f64])>); 4] = [
        ("observations", obs),
        ("KL(posterior || prior)", vec![("kl".into(), b.kl.as_slice())]),
        ("L2 error of decoder mean", vec![("recon_l2".into(), b.recon_l2.as_slice())]),
        ("mean predicted log-variance", vec![("mean_logvar".into(), b.mean_logvar.as_slice())]),
    ];
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_WIDTH}" height="{}" viewBox="0 0 {PANEL_WIDTH} {}">"#,
        PANEL_HEIGHT * panels.len() as f64,
        PANEL_HEIGHT * panels.len() as f64
    );
    for (i, (title, series)) in panels.iter().enumerate() {
        panel(&mut out, i, title, series, &b.switches, b.len());
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_svg(b: &TraceBundle, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, render_svg(b))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelConfig, ModelKind};

    fn bundle(kl: Vec<f64>) -> TraceBundle {
        let t = kl.len();
        TraceBundle {
            kl,
            recon_l2: vec![0.5; t],
            mean_logvar: vec![-1.0; t],
            x: (0..t).map(|i| vec![i as f64, 0.1 * i as f64]).collect(),
            switches: vec![2],
        }
    }

    #[test]
    fn trend_of_constant_series_is_flat() {
        let (a, b) = kl_trend_stat(&bundle(vec![0.7; 9])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trend_of_decreasing_series_drops() {
        let (a, b) = kl_trend_stat(&bundle((0..12).map(|i| 12.0 - i as f64).collect())).unwrap();
        assert!(a > b);
        assert!(kl_trend_stat(&bundle(vec![1.0; 5])).is_err());
    }

    #[test]
    fn csv_round_trips_exactly() {
        let b = bundle(vec![0.1 + 0.2, 1e-17, 3.0, std::f64::consts::E]);
        let mut buf = Vec::new();
        write_csv(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,kl,recon_l2,mean_logvar,x_0,x_1,is_switch");
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 4);
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(r[1].to_bits(), b.kl[t].to_bits());
            assert_eq!(r[4], b.x[t][0]);
            assert_eq!(r[6], if t == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn svg_has_one_polyline_per_series_and_switch_lines() {
        let svg = render_svg(&bundle(vec![1.0, 2.0, 0.5, 0.2]));
        assert_eq!(svg.matches("<polyline").count(), 3 + 2);
        assert_eq!(svg.matches(r#"class="switch""#).count(), 4);
        assert_eq!(svg.matches("<svg").count(), svg.matches("</svg>").count());
    }

    fn zeroed(kind: ModelKind, prefixes: &[&str]) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::build(ModelConfig::synthetic(kind, 2), &mut rng).unwrap();
        let names: Vec<String> = m.params().names().to_vec();
        for n in names {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                let shape = m.params().get(&n).unwrap().shape().to_vec();
                m.params_mut().set(&n, Tensor::zeros(shape)).unwrap();
            }
        }
        m
    }

    #[test]
    fn posterior_equal_to_prior_gives_zero_kl() {
        let m = zeroed(ModelKind::Vhrnn, &["enc", "prior"]);
        let seq: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64 * 0.3, -1.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = trace(&m, &seq, &[], TraceOptions::default(), &mut rng).unwrap();
        assert!(b.kl.iter().all(|&k| k.abs() < 1e-12), "{:?}", b.kl);
    }

    #[test]
    fn matched_decoder_mean_gives_zero_error() {
        let mut m = zeroed(ModelKind::Vrnn, &["dec"]);
        let last = m
            .params()
            .names()
            .iter()
            .filter(|n| n.starts_with("dec.mean.") && n.ends_with(".b"))
            .max()
            .unwrap()
            .clone();
        m.params_mut().set(&last, Tensor::vector(vec![1.5, -0.5])).unwrap();
        let seq = vec![vec![1.5, -0.5]; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = trace(&m, &seq, &[3], TraceOptions { n_samples: 3, posterior_mean: false }, &mut rng).unwrap();
        assert!(b.recon_l2.iter().all(|&e| e < 1e-12), "{:?}", b.recon_l2);
        assert!(b.mean_logvar.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn same_seed_gives_identical_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::build(ModelConfig::synthetic(ModelKind::Vhrnn, 3), &mut rng).unwrap();
        let seq: Vec<Vec<f64>> = (0..12).map(|t| vec![(t as f64).sin(), 0.2]).collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            trace(&m, &seq, &[4, 8], TraceOptions::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
        assert!(run().kl.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn trace_many_is_worker_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::build(ModelConfig::synthetic(ModelKind::Vrnn, 2), &mut rng).unwrap();
        let seqs: Vec<(Vec<Vec<f64>>, Vec<usize>)> = (0..5)
            .map(|i| ((0..7).map(|t| vec![(t * i) as f64 * 0.1, 1.0]).collect(), vec![]))
            .collect();
        let a = trace_many(&m, &seqs, TraceOptions::default(), 9, 1).unwrap();
        let b = trace_many(&m, &seqs, TraceOptions::default(), 9, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::build(ModelConfig::synthetic(ModelKind::Vrnn, 2), &mut rng).unwrap();
        let opts = TraceOptions::default();
        assert!(matches!(
            trace(&m, &[vec![1.0]], &[], opts, &mut rng),
            Err(DiagError::DimMismatch { .. })
        ));
        assert!(matches!(
            trace(&m, &[vec![1.0, 2.0]], &[1], opts, &mut rng),
            Err(DiagError::SwitchRange(1, 1))
        ));
        let none = TraceOptions { n_samples: 0, ..opts };
        assert!(matches!(trace(&m, &[vec![1.0, 2.0]], &[], none, &mut rng), Err(DiagError::NoSamples)));
    }
}
