//! Label-invariant summaries of sampler output.
//!
//! Association matrices record which data share a cluster, so they do not
//! depend on what the clusters are called. Averaging them over a chain
//! estimates posterior co-clustering probabilities; their spread across
//! independent runs shows how well the chains mix.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{config, Error, Result};

/// One recorded iteration of a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub log_joint: f64,
    /// Number of occupied clusters.
    pub occupied: usize,
    pub moves_proposed: usize,
    pub moves_accepted: usize,
}

/// Symmetric matrix of co-clustering indicators or frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    pub values: DMatrix<f64>,
}

impl AssociationMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Mean association between datum `i` and the data in `group`.
    pub fn mean_with(&self, i: usize, group: impl IntoIterator<Item = usize>) -> f64 {
        let (sum, n) = group.into_iter().fold((0.0, 0usize), |(s, n), j| (s + self.values[(i, j)], n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Which pairs of a time-sliced sample count as associated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SliceScope {
    /// Only pairs within a slice; cross-slice entries are 0, giving a
    /// block-diagonal matrix.
    #[default]
    PerSlice,
    /// Every pair; data in different slices associate when their labels
    /// match.
    Global,
}

fn accumulate(acc: &mut DMatrix<f64>, z: &[usize], block: Option<&[usize]>) {
    let n = z.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if z[i] == z[j] && block.is_none_or(|b| b[i] == b[j]) {
                acc[(i, j)] += 1.0;
            }
        }
    }
}

fn finish(mut acc: DMatrix<f64>, samples: usize) -> AssociationMatrix {
    let n = acc.nrows();
    let scale = 1.0 / samples as f64;
    for i in 0..n {
        acc[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = acc[(i, j)] * scale;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    AssociationMatrix { values: acc }
}

/// Entry `(i, j)` is 1 when `z[i] == z[j]` and 0 otherwise.
pub fn association_matrix(z: &[usize]) -> AssociationMatrix {
    let mut acc = DMatrix::zeros(z.len(), z.len());
    accumulate(&mut acc, z, None);
    finish(acc, 1)
}

/// Element-wise mean of the association matrices of `samples`.
pub fn mean_association<S: AsRef<[usize]>>(samples: &[S]) -> Result<AssociationMatrix> {
    let first = samples.first().ok_or_else(|| config("mean association needs at least one sample"))?;
    let n = first.as_ref().len();
    let mut acc = DMatrix::zeros(n, n);
    for (k, s) in samples.iter().enumerate() {
        let z = s.as_ref();
        if z.len() != n {
            return Err(config(format!("sample {k} has {} labels, sample 0 has {n}", z.len())));
        }
        accumulate(&mut acc, z, None);
    }
    Ok(finish(acc, samples.len()))
}

/// Labels of a time-sliced sample in slice order, with the slice (0-based)
/// of each entry.
pub fn flatten_slices(labels: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let flat = labels.iter().flatten().copied().collect();
    let slice = labels.iter().enumerate().flat_map(|(t, z)| std::iter::repeat_n(t, z.len())).collect();
    (flat, slice)
}

/// Mean association of time-sliced samples over the concatenation of all
/// slices.
pub fn mean_slice_association<S: AsRef<[Vec<usize>]>>(samples: &[S], scope: SliceScope) -> Result<AssociationMatrix> {
    let first = samples.first().ok_or_else(|| config("mean association needs at least one sample"))?;
    let shape: Vec<usize> = first.as_ref().iter().map(Vec::len).collect();
    let (_, block) = flatten_slices(first.as_ref());
    let n = block.len();
    let mut acc = DMatrix::zeros(n, n);
    for (k, s) in samples.iter().enumerate() {
        let labels = s.as_ref();
        if !labels.iter().map(Vec::len).eq(shape.iter().copied()) {
            return Err(config(format!("sample {k} has a different slice layout from sample 0")));
        }
        let (flat, _) = flatten_slices(labels);
        let mask = (scope == SliceScope::PerSlice).then_some(block.as_slice());
        accumulate(&mut acc, &flat, mask);
    }
    Ok(finish(acc, samples.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceKind {
    /// Divide by the number of runs.
    #[default]
    Population,
    /// Divide by the number of runs minus one.
    Sample,
}

/// Element-wise variance across runs of their mean association matrices.
pub fn association_variance(run_means: &[AssociationMatrix], kind: VarianceKind) -> Result<DMatrix<f64>> {
    if run_means.len() < 2 {
        return Err(config(format!("association variance needs at least 2 runs, got {}", run_means.len())));
    }
    let shape = run_means[0].values.shape();
    if let Some(k) = run_means.iter().position(|m| m.values.shape() != shape) {
        return Err(config(format!(
            "run {k} has a {:?} association matrix, run 0 has {shape:?}",
            run_means[k].values.shape()
        )));
    }
    // Welford updates keep identical runs at exactly zero variance
    let mut mean = DMatrix::zeros(shape.0, shape.1);
    let mut ss = DMatrix::zeros(shape.0, shape.1);
    for (k, m) in run_means.iter().enumerate() {
        let delta = &m.values - &mean;
        mean += &delta / (k + 1) as f64;
        ss += delta.component_mul(&(&m.values - &mean));
    }
    let r = run_means.len() as f64;
    let denom = match kind {
        VarianceKind::Population => r,
        VarianceKind::Sample => r - 1.0,
    };
    Ok(ss / denom)
}

/// Histogram with explicit bin edges plus underflow and overflow counts.
///
/// Bin `k` holds values in `(edges[k], edges[k + 1]]`; values at or below
/// `edges[0]` go to `underflow`, values above the last edge to `overflow`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

pub const DEFAULT_HIST_BINS: usize = 30;
pub const DEFAULT_HIST_LO: f64 = 1e-6;
pub const DEFAULT_HIST_HI: f64 = 0.25;

impl Histogram {
    pub fn with_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config("histogram edges must be at least two strictly increasing values"));
        }
        let bins = edges.len() - 1;
        Ok(Histogram { edges, counts: vec![0; bins], underflow: 0, overflow: 0 })
    }

    /// `bins` log-spaced bins over `(lo, hi]`.
    pub fn log_spaced(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
            return Err(config(format!("bad log-spaced histogram: {bins} bins over ({lo}, {hi}]")));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let mut edges: Vec<f64> = (0..=bins).map(|k| (a + (b - a) * k as f64 / bins as f64).exp()).collect();
        edges[0] = lo;
        edges[bins] = hi;
        Histogram::with_edges(edges)
    }

    pub fn insert(&mut self, v: f64) {
        if v <= self.edges[0] {
            self.underflow += 1;
        } else if v > *self.edges.last().expect("edges") {
            self.overflow += 1;
        } else {
            // first edge >= v closes the bin
            let k = self.edges.partition_point(|&e| e < v);
            self.counts[k - 1] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.underflow + self.overflow + self.counts.iter().sum::<usize>()
    }

    /// Rows `(bin_lo, bin_hi, count)`, starting with the underflow bin
    /// `(0, edges[0])` and ending with the overflow bin `(last edge, inf)`.
    pub fn rows(&self) -> Vec<(f64, f64, usize)> {
        let mut out = vec![(0.0, self.edges[0], self.underflow)];
        out.extend(self.edges.windows(2).zip(&self.counts).map(|(w, &c)| (w[0], w[1], c)));
        out.push((*self.edges.last().expect("edges"), f64::INFINITY, self.overflow));
        out
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram::log_spaced(DEFAULT_HIST_BINS, DEFAULT_HIST_LO, DEFAULT_HIST_HI).expect("valid defaults")
    }
}

/// Histogram of the strict upper triangle of `m`, restricted to pairs
/// accepted by `keep`.
pub fn upper_triangle_histogram(m: &DMatrix<f64>, mut hist: Histogram, keep: impl Fn(usize, usize) -> bool) -> Histogram {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if keep(i, j) {
                hist.insert(m[(i, j)]);
            }
        }
    }
    hist
}

/// Mean of the strict upper triangle of `m`.
pub fn mean_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += m[(i, j)];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Scalar summary of a chain trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub iterations: usize,
    pub final_log_joint: f64,
    /// Mean log joint over iterations after `burn_in`.
    pub mean_log_joint: f64,
    pub mean_occupied: f64,
    pub moves_proposed: usize,
    pub moves_accepted: usize,
}

impl TraceSummary {
    pub fn acceptance_rate(&self) -> f64 {
        if self.moves_proposed == 0 {
            0.0
        } else {
            self.moves_accepted as f64 / self.moves_proposed as f64
        }
    }
}

/// Summarizes a per-iteration trace, averaging over iterations after
/// `burn_in` (over all of them if none remain).
pub fn trace_stats(trace: &[TraceRow], burn_in: usize) -> TraceSummary {
    let kept: Vec<&TraceRow> = trace.iter().filter(|r| r.iter > burn_in).collect();
    let kept = if kept.is_empty() { trace.iter().collect() } else { kept };
    let n = kept.len().max(1) as f64;
    TraceSummary {
        iterations: trace.len(),
        final_log_joint: trace.last().map_or(f64::NAN, |r| r.log_joint),
        mean_log_joint: kept.iter().map(|r| r.log_joint).sum::<f64>() / n,
        mean_occupied: kept.iter().map(|r| r.occupied as f64).sum::<f64>() / n,
        moves_proposed: trace.iter().map(|r| r.moves_proposed).sum(),
        moves_accepted: trace.iter().map(|r| r.moves_accepted).sum(),
    }
}

/// Dense matrix as headerless CSV.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a square headerless CSV matrix.
pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad matrix entry {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if let Some(k) = rows.iter().position(|r| r.len() != n) {
        return Err(Error::Parse(format!("matrix row {k} has {} entries, expected {n}", rows[k].len())));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.into_iter().flatten()))
}

pub fn write_histogram_csv<W: Write>(hist: &Histogram, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (lo, hi, c) in hist.rows() {
        w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Trace rows as `iter,log_joint,k,proposed,accepts`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "log_joint", "k", "proposed", "accepts"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.log_joint.to_string(),
            r.occupied.to_string(),
            r.moves_proposed.to_string(),
            r.moves_accepted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
