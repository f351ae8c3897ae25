//! Sequence datasets: JSONL interchange, preprocessing transforms and splits.
//!
//! A dataset file starts with one header object, followed by one object per
//! sequence: `{"id": .., "data": [[..], ..], "meta": {..}}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const FORMAT: &str = "vhrnn-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: sequence {id:?} row {row} has {got} values, expected {expected}")]
    RowWidth {
        line: usize,
        id: String,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("sequence {id:?} row {row} has {got} values, expected {expected}")]
    DimMismatch {
        id: String,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported dataset format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("header declares {expected} sequences but file has {got}")]
    Count { expected: usize, got: usize },
    #[error("log ratio needs positive values; sequence {id:?} row {row} has {value}")]
    NonPositive { id: String, row: usize, value: f64 },
    #[error("{0} needs statistics fitted on the training split")]
    MissingStats(&'static str),
    #[error("statistics have dimension {got}, dataset has {expected}")]
    StatsDim { expected: usize, got: usize },
    #[error("downsample rate must be at least 1")]
    ZeroRate,
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("cannot fit statistics on an empty dataset")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub data: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, data: Vec<Vec<f64>>) -> Self {
        Self {
            id: id.into(),
            data,
            meta: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub dim: usize,
    pub binary: bool,
    pub stats: Option<NormStats>,
    /// Dataset-level provenance, stored in the header.
    pub meta: Map<String, Value>,
    pub sequences: Vec<Sequence>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    binary: bool,
    stats: Option<NormStats>,
    count: usize,
    #[serde(default)]
    meta: Map<String, Value>,
}

impl SequenceDataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            binary: false,
            stats: None,
            meta: Map::new(),
            sequences: Vec::new(),
        }
    }

    /// Appends a sequence after checking every row has width `dim`.
    pub fn push(&mut self, seq: Sequence) -> Result<()> {
        check_rows(&seq, self.dim)?;
        self.sequences.push(seq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.data.len()).sum()
    }

    /// The raw observation matrices, in order.
    pub fn data(&self) -> Vec<Vec<Vec<f64>>> {
        self.sequences.iter().map(|s| s.data.clone()).collect()
    }

    fn with_sequences(&self, sequences: Vec<Sequence>) -> Self {
        Self {
            dim: self.dim,
            binary: self.binary,
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            sequences,
        }
    }
}

fn check_rows(seq: &Sequence, dim: usize) -> Result<()> {
    match seq.data.iter().position(|r| r.len() != dim) {
        Some(row) => Err(DataError::DimMismatch {
            id: seq.id.clone(),
            row,
            expected: dim,
            got: seq.data[row].len(),
        }),
        None => Ok(()),
    }
}

pub fn write_jsonl<W: Write>(ds: &SequenceDataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dim: ds.dim,
        binary: ds.binary,
        stats: ds.stats.clone(),
        count: ds.len(),
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &ds.sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(r: R) -> Result<SequenceDataset> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| DataError::Parse {
                    line: i + 1,
                    msg: format!("bad header: {e}"),
                })?;
            }
            None => {
                return Err(DataError::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        }
    };
    if header.format != FORMAT || header.version != VERSION {
        return Err(DataError::Format {
            format: header.format,
            version: header.version,
        });
    }
    let mut ds = SequenceDataset {
        dim: header.dim,
        binary: header.binary,
        stats: header.stats,
        meta: header.meta,
        sequences: Vec::with_capacity(header.count),
    };
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Sequence = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(row) = seq.data.iter().position(|r| r.len() != ds.dim) {
            return Err(DataError::RowWidth {
                line: i + 1,
                got: seq.data[row].len(),
                id: seq.id,
                row,
                expected: ds.dim,
            });
        }
        ds.sequences.push(seq);
    }
    if ds.len() != header.count {
        return Err(DataError::Count {
            expected: header.count,
            got: ds.len(),
        });
    }
    Ok(ds)
}

pub fn save_jsonl(ds: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(ds, BufWriter::new(File::create(path)?))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    read_jsonl(File::open(path)?)
}

/// Flat CSV export: `id,step,x_0,..,x_{D-1}`.
pub fn write_csv<W: Write>(ds: &SequenceDataset, mut w: W) -> Result<()> {
    let cols: Vec<String> = (0..ds.dim).map(|d| format!("x_{d}")).collect();
    writeln!(w, "id,step,{}", cols.join(","))?;
    for s in &ds.sequences {
        for (t, row) in s.data.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{t},{}", s.id, vals.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preprocess {
    MeanCenter,
    ZScore,
    LogRatio,
    Downsample(usize),
}

/// Per-dimension mean and population standard deviation over all rows.
pub fn fit_stats(train: &SequenceDataset) -> Result<NormStats> {
    let n = train.total_steps();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let d = train.dim;
    let mut mean = vec![0.0; d];
    for row in train.sequences.iter().flat_map(|s| &s.data) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in train.sequences.iter().flat_map(|s| &s.data) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(NormStats { mean, std })
}

fn map_rows(ds: &SequenceDataset, f: impl Fn(&[f64]) -> Vec<f64>) -> SequenceDataset {
    let seqs = ds
        .sequences
        .iter()
        .map(|s| Sequence {
            id: s.id.clone(),
            data: s.data.iter().map(|r| f(r)).collect(),
            meta: s.meta.clone(),
        })
        .collect();
    ds.with_sequences(seqs)
}

/// Applies one transform. The normalizing modes require `stats`, which must
/// come from [`fit_stats`] on the training split; they are recorded on the
/// output so valid and test splits can reuse them.
pub fn preprocess(ds: &SequenceDataset, mode: Preprocess, stats: Option<&NormStats>) -> Result<SequenceDataset> {
    let need = |what| -> Result<&NormStats> {
        let st = stats.ok_or(DataError::MissingStats(what))?;
        if st.mean.len() != ds.dim || st.std.len() != ds.dim {
            return Err(DataError::StatsDim {
                expected: ds.dim,
                got: st.mean.len(),
            });
        }
        Ok(st)
    };
    match mode {
        Preprocess::MeanCenter => {
            let st = need("mean_center")?;
            let mut out = map_rows(ds, |r| r.iter().zip(&st.mean).map(|(v, m)| v - m).collect());
            out.stats = Some(st.clone());
            Ok(out)
        }
        Preprocess::ZScore => {
            let st = need("zscore")?;
            let scale: Vec<f64> = st.std.iter().map(|&s| if s > 1e-12 { s } else { 1.0 }).collect();
            let mut out = map_rows(ds, |r| {
                r.iter()
                    .zip(&st.mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            });
            out.stats = Some(st.clone());
            Ok(out)
        }
        Preprocess::LogRatio => {
            let mut seqs = Vec::with_capacity(ds.len());
            for s in &ds.sequences {
                for (row, r) in s.data.iter().enumerate() {
                    if let Some(&value) = r.iter().find(|v| !(**v > 0.0)) {
                        return Err(DataError::NonPositive {
                            id: s.id.clone(),
                            row,
                            value,
                        });
                    }
                }
                let data = s
                    .data
                    .windows(2)
                    .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b / a).ln()).collect())
                    .collect();
                seqs.push(Sequence {
                    id: s.id.clone(),
                    data,
                    meta: s.meta.clone(),
                });
            }
            Ok(ds.with_sequences(seqs))
        }
        Preprocess::Downsample(k) => {
            if k == 0 {
                return Err(DataError::ZeroRate);
            }
            let seqs = ds
                .sequences
                .iter()
                .map(|s| Sequence {
                    id: s.id.clone(),
                    data: s.data.iter().step_by(k).cloned().collect(),
                    meta: s.meta.clone(),
                })
                .collect();
            Ok(ds.with_sequences(seqs))
        }
    }
}

/// Shuffled partition into train, valid and test. Valid and test get
/// `floor(fraction * N)` sequences; the remainder goes to train.
pub fn split(
    ds: &SequenceDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(SequenceDataset, SequenceDataset, SequenceDataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (fractions[1] * n as f64).floor() as usize;
    let n_test = (fractions[2] * n as f64).floor() as usize;
    let n_train = n - n_valid - n_test;
    let take = |idx: &[usize]| ds.with_sequences(idx.iter().map(|&i| ds.sequences[i].clone()).collect());
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_valid]),
        take(&order[n_train + n_valid..]),
    ))
}
