//! Multivariate fixed-vs-random t-tests on mean-centred products of sample
//! points.
//!
//! The combined ("artificial") traces are never stored. Traces are consumed
//! in chunks; each chunk is centred per class and every work unit folds the
//! products of its own combination indices into private per-class moments.
//! The accumulation order of every index is fixed (chunk order, then lane
//! order inside a chunk), so results do not depend on the thread count.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{corrected_threshold, welch_unchecked, Moments, WelchResult};
use crate::tracestore::{Label, TraceFile, TraceSet};

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_ALPHA: f64 = 1e-5;
pub const DEFAULT_SPLITS: usize = 4;
const DEFAULT_CHUNK: usize = 8192;

/// Row-oriented access to a labelled trace collection.
pub trait TraceSource: Sync {
    fn n_traces(&self) -> usize;
    fn n_samples(&self) -> usize;
    fn label(&self, trace: usize) -> Label;
    fn read_row(&self, trace: usize, out: &mut [f32]);
}

impl TraceSource for TraceSet {
    fn n_traces(&self) -> usize {
        self.n_traces
    }
    fn n_samples(&self) -> usize {
        self.n_samples
    }
    fn label(&self, trace: usize) -> Label {
        self.labels[trace]
    }
    fn read_row(&self, trace: usize, out: &mut [f32]) {
        out.copy_from_slice(self.row(trace));
    }
}

impl TraceSource for TraceFile {
    fn n_traces(&self) -> usize {
        self.n_traces
    }
    fn n_samples(&self) -> usize {
        self.n_samples
    }
    fn label(&self, trace: usize) -> Label {
        self.labels[trace]
    }
    fn read_row(&self, trace: usize, out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.sample(trace, j);
        }
    }
}

/// Two single-class sets viewed as one labelled collection (fixed traces
/// first). Labels stored in the sets themselves are ignored.
struct ClassPair<'a> {
    fixed: &'a TraceSet,
    random: &'a TraceSet,
}

impl TraceSource for ClassPair<'_> {
    fn n_traces(&self) -> usize {
        self.fixed.n_traces + self.random.n_traces
    }
    fn n_samples(&self) -> usize {
        self.fixed.n_samples
    }
    fn label(&self, trace: usize) -> Label {
        if trace < self.fixed.n_traces {
            Label::Fixed
        } else {
            Label::Random
        }
    }
    fn read_row(&self, trace: usize, out: &mut [f32]) {
        if trace < self.fixed.n_traces {
            out.copy_from_slice(self.fixed.row(trace));
        } else {
            out.copy_from_slice(self.random.row(trace - self.fixed.n_traces));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Order {
    Bivariate,
    Trivariate,
}

impl Order {
    pub fn arity(self) -> usize {
        match self {
            Order::Bivariate => 2,
            Order::Trivariate => 3,
        }
    }
}

impl TryFrom<u8> for Order {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            2 => Ok(Order::Bivariate),
            3 => Ok(Order::Trivariate),
            other => Err(Error::invalid(format!("order {other} must be 2 or 3"))),
        }
    }
}

impl From<Order> for u8 {
    fn from(o: Order) -> u8 {
        o.arity() as u8
    }
}

/// A tuple of sample points combined by one mean-centred product,
/// non-decreasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CombinationIndex(pub Vec<usize>);

impl CombinationIndex {
    pub fn new(mut points: Vec<usize>) -> Self {
        points.sort_unstable();
        Self(points)
    }

    pub fn points(&self) -> &[usize] {
        &self.0
    }

    /// Distinct sample points of the index, ascending.
    pub fn distinct(&self) -> Vec<usize> {
        let mut p = self.0.clone();
        p.dedup();
        p
    }
}

impl std::fmt::Display for CombinationIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakPoint {
    pub index: CombinationIndex,
    pub t_value: f64,
    pub dof: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub order: Order,
    /// Trivariate only: largest index minus smallest index stays below this.
    pub window: usize,
    pub alpha: f64,
    pub include_diagonal: bool,
    /// Equal-width splits of the sample axis; work units are block pairs.
    pub splits: usize,
    /// Traces centred and folded per step.
    pub chunk_traces: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            order: Order::Bivariate,
            window: DEFAULT_WINDOW,
            alpha: DEFAULT_ALPHA,
            include_diagonal: true,
            splits: DEFAULT_SPLITS,
            chunk_traces: DEFAULT_CHUNK,
        }
    }
}

impl AnalysisConfig {
    pub fn bivariate() -> Self {
        Self::default()
    }

    pub fn trivariate(window: usize) -> Self {
        Self {
            order: Order::Trivariate,
            window,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseEntry {
    pub index: CombinationIndex,
    pub t: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeatmapData {
    /// `n_samples × n_samples`, symmetric; untested cells hold 0.
    Dense(Vec<f32>),
    Sparse(Vec<SparseEntry>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub order: Order,
    pub n_samples: usize,
    pub threshold: f64,
    pub data: HeatmapData,
}

impl Heatmap {
    /// Order-2 cell value.
    pub fn get(&self, j1: usize, j2: usize) -> Option<f32> {
        match &self.data {
            HeatmapData::Dense(v) => v.get(j1 * self.n_samples + j2).copied(),
            HeatmapData::Sparse(_) => None,
        }
    }

    pub fn max_abs(&self) -> f32 {
        match &self.data {
            HeatmapData::Dense(v) => v.iter().fold(0.0f32, |m, t| m.max(t.abs())),
            HeatmapData::Sparse(v) => v.iter().fold(0.0f32, |m, e| m.max(e.t.abs())),
        }
    }

    /// `j1,j2[,j3],t` rows; order 2 lists the upper triangle.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        match &self.data {
            HeatmapData::Dense(v) => {
                writeln!(w, "j1,j2,t")?;
                for j1 in 0..self.n_samples {
                    for j2 in j1..self.n_samples {
                        writeln!(w, "{},{},{}", j1, j2, v[j1 * self.n_samples + j2])?;
                    }
                }
            }
            HeatmapData::Sparse(entries) => {
                writeln!(w, "j1,j2,j3,t")?;
                for e in entries {
                    writeln!(w, "{},{}", e.index, e.t)?;
                }
            }
        }
        Ok(())
    }

    /// Binary 16-bit PGM of `|t|` clipped at twice the threshold. Order 2
    /// only.
    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        let HeatmapData::Dense(v) = &self.data else {
            return Err(Error::invalid("PGM export needs an order-2 heatmap"));
        };
        let clip = (2.0 * self.threshold).max(f64::MIN_POSITIVE);
        let m = self.n_samples;
        let mut out = format!("P5\n{m} {m}\n65535\n").into_bytes();
        out.reserve(2 * m * m);
        for t in v {
            let level = ((t.abs() as f64 / clip).min(1.0) * 65535.0).round() as u16;
            out.extend_from_slice(&level.to_be_bytes());
        }
        w.write_all(&out).map_err(|e| Error::io("<pgm>", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub heatmap: Heatmap,
    /// Sorted by descending `|t|`.
    pub leaks: Vec<LeakPoint>,
    pub threshold: f64,
    pub n_indices: u64,
    /// Smallest Welch dof over all tested indices; feeds the threshold.
    pub min_dof: f64,
    pub max_abs_t: f64,
}

/// Per-point means of a trace collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Centering {
    pub means: Vec<f64>,
}

impl Centering {
    #[inline]
    pub fn centered(&self, set: &TraceSet, trace: usize, point: usize) -> f64 {
        set.samples[trace * set.n_samples + point] as f64 - self.means[point]
    }
}

pub fn center(set: &TraceSet) -> Result<Centering> {
    if set.n_traces < 2 {
        return Err(Error::invalid("centring needs at least two traces"));
    }
    let mut sums = vec![0.0f64; set.n_samples];
    for i in 0..set.n_traces {
        for (s, &x) in sums.iter_mut().zip(set.row(i)) {
            *s += x as f64;
        }
    }
    let n = set.n_traces as f64;
    Ok(Centering {
        means: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// Mean-centred product of the points of `idx` for one trace.
pub fn combined_value(set: &TraceSet, centering: &Centering, trace: usize, idx: &CombinationIndex) -> f64 {
    idx.points()
        .iter()
        .map(|&j| centering.centered(set, trace, j))
        .product()
}

/// One work unit: a pair of sample-axis blocks (`first.start <= second.start`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkUnit {
    pub first: Range<usize>,
    pub second: Range<usize>,
}

impl WorkUnit {
    /// Pairs `(j1, j2)` owned by this unit, `j1 <= j2` (strict without the
    /// diagonal).
    pub fn pairs(&self, include_diagonal: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let same = self.first == self.second;
        for j1 in self.first.clone() {
            for j2 in self.second.clone() {
                if same && (j2 < j1 || (j2 == j1 && !include_diagonal)) {
                    continue;
                }
                out.push((j1, j2));
            }
        }
        out
    }
}

fn blocks(n_samples: usize, splits: usize) -> Vec<Range<usize>> {
    (0..splits)
        .map(|k| (k * n_samples / splits)..((k + 1) * n_samples / splits))
        .collect()
}

/// Splits the order-2 index space into `S(S+1)/2` block-pair units.
pub fn partition_workload(n_samples: usize, splits: usize) -> Result<Vec<WorkUnit>> {
    if splits == 0 || splits > n_samples {
        return Err(Error::invalid(format!(
            "splits {splits} must lie in [1, {n_samples}]"
        )));
    }
    let b = blocks(n_samples, splits);
    let mut units = Vec::with_capacity(splits * (splits + 1) / 2);
    for a in 0..splits {
        for c in a..splits {
            units.push(WorkUnit {
                first: b[a].clone(),
                second: b[c].clone(),
            });
        }
    }
    Ok(units)
}

fn triples_from(j1: usize, n_samples: usize, window: usize, diag: bool) -> impl Iterator<Item = [usize; 3]> {
    let stop = (j1 + window).min(n_samples);
    (j1..stop).flat_map(move |j2| {
        (j2..stop).filter_map(move |j3| {
            let distinct = j1 < j2 && j2 < j3;
            (diag || distinct).then_some([j1, j2, j3])
        })
    })
}

/// Number of combination indices tested for a configuration.
pub fn index_count(n_samples: usize, cfg: &AnalysisConfig) -> u64 {
    let m = n_samples as u64;
    match cfg.order {
        Order::Bivariate if cfg.include_diagonal => m * (m + 1) / 2,
        Order::Bivariate => m * m.saturating_sub(1) / 2,
        Order::Trivariate => {
            let w = cfg.window.min(n_samples);
            (0..n_samples)
                .map(|j1| triples_from(j1, n_samples, w, cfg.include_diagonal).count() as u64)
                .sum()
        }
    }
}

#[derive(Clone, Copy, Default)]
struct ClassAcc {
    fixed: Moments,
    random: Moments,
}

/// Indices and accumulators owned by one worker.
struct UnitState {
    /// Flattened combination indices (arity entries each).
    idx: Vec<usize>,
    acc: Vec<ClassAcc>,
}

/// A chunk of traces centred per class, column-major per class.
struct CenteredChunk {
    m: usize,
    fixed: Vec<f64>,
    nf: usize,
    random: Vec<f64>,
    nr: usize,
}

impl CenteredChunk {
    #[inline]
    fn col(&self, label: Label, j: usize) -> &[f64] {
        match label {
            Label::Fixed => &self.fixed[j * self.nf..(j + 1) * self.nf],
            Label::Random => &self.random[j * self.nr..(j + 1) * self.nr],
        }
    }
}

const LANES: usize = 8;

#[inline]
fn product_sums2(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut q = [0.0f64; LANES];
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..LANES {
            let p = a[k] * b[k];
            s[k] += p;
            q[k] += p * p;
        }
    }
    for (k, (a, b)) in xr.iter().zip(yr).enumerate() {
        let p = a * b;
        s[k] += p;
        q[k] += p * p;
    }
    (s.iter().sum(), q.iter().sum())
}

impl UnitState {
    fn fold(&mut self, chunk: &CenteredChunk, arity: usize, scratch: &mut Vec<f64>) {
        for label in [Label::Fixed, Label::Random] {
            let n = match label {
                Label::Fixed => chunk.nf,
                Label::Random => chunk.nr,
            } as u64;
            if n == 0 {
                continue;
            }
            let mut last_pair = usize::MAX;
            for (k, idx) in self.idx.chunks_exact(arity).enumerate() {
                let (sum, sum_sq) = if arity == 2 {
                    product_sums2(chunk.col(label, idx[0]), chunk.col(label, idx[1]))
                } else {
                    let key = idx[0] * chunk.m + idx[1];
                    if key != last_pair {
                        let (a, b) = (chunk.col(label, idx[0]), chunk.col(label, idx[1]));
                        scratch.clear();
                        scratch.extend(a.iter().zip(b).map(|(x, y)| x * y));
                        last_pair = key;
                    }
                    product_sums2(scratch, chunk.col(label, idx[2]))
                };
                let part = Moments::from_sums(n, sum, sum_sq);
                let slot = &mut self.acc[k];
                match label {
                    Label::Fixed => slot.fixed = slot.fixed.merge(&part),
                    Label::Random => slot.random = slot.random.merge(&part),
                }
            }
        }
    }
}

fn build_units(m: usize, cfg: &AnalysisConfig) -> Result<Vec<UnitState>> {
    let splits = cfg.splits.clamp(1, m);
    let mut units = Vec::new();
    match cfg.order {
        Order::Bivariate => {
            for unit in partition_workload(m, splits)? {
                let pairs = unit.pairs(cfg.include_diagonal);
                let idx = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
                units.push(UnitState {
                    idx,
                    acc: vec![ClassAcc::default(); pairs.len()],
                });
            }
        }
        Order::Trivariate => {
            let window = cfg.window.min(m);
            // Finer than the pair partition: first-index ranges, roughly
            // balanced by triple count.
            let pieces = (splits * (splits + 1) / 2).min(m);
            for range in blocks(m, pieces) {
                let idx: Vec<usize> = range
                    .flat_map(|j1| triples_from(j1, m, window, cfg.include_diagonal))
                    .flatten()
                    .collect();
                let count = idx.len() / 3;
                units.push(UnitState {
                    idx,
                    acc: vec![ClassAcc::default(); count],
                });
            }
        }
    }
    Ok(units)
}

fn class_means(src: &dyn TraceSource) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let m = src.n_samples();
    let mut sf = vec![0.0f64; m];
    let mut sr = vec![0.0f64; m];
    let (mut nf, mut nr) = (0usize, 0usize);
    let mut row = vec![0f32; m];
    for i in 0..src.n_traces() {
        src.read_row(i, &mut row);
        let (acc, n) = match src.label(i) {
            Label::Fixed => (&mut sf, &mut nf),
            Label::Random => (&mut sr, &mut nr),
        };
        *n += 1;
        for (a, &x) in acc.iter_mut().zip(&row) {
            *a += x as f64;
        }
    }
    let div = |v: Vec<f64>, n: usize| v.into_iter().map(|s| s / n.max(1) as f64).collect::<Vec<_>>();
    (div(sf, nf), div(sr, nr), nf, nr)
}

fn centered_chunk(src: &dyn TraceSource, rows: Range<usize>, mf: &[f64], mr: &[f64]) -> CenteredChunk {
    let m = src.n_samples();
    let (mut fixed_rows, mut random_rows) = (Vec::new(), Vec::new());
    for i in rows {
        match src.label(i) {
            Label::Fixed => fixed_rows.push(i),
            Label::Random => random_rows.push(i),
        }
    }
    let mut row = vec![0f32; m];
    let mut fill = |ids: &[usize], means: &[f64]| {
        let n = ids.len();
        let mut out = vec![0.0f64; n * m];
        for (k, &i) in ids.iter().enumerate() {
            src.read_row(i, &mut row);
            for j in 0..m {
                out[j * n + k] = row[j] as f64 - means[j];
            }
        }
        out
    };
    let fixed = fill(&fixed_rows, mf);
    let random = fill(&random_rows, mr);
    CenteredChunk {
        m,
        fixed,
        nf: fixed_rows.len(),
        random,
        nr: random_rows.len(),
    }
}

/// Runs the multivariate test over any labelled source.
pub fn analyze_source(src: &dyn TraceSource, cfg: &AnalysisConfig) -> Result<Analysis> {
    let results = combination_tests(src, cfg)?;
    finish(results, src.n_samples(), cfg)
}

/// Welch result of every combination index, sorted by index.
pub fn combination_tests(src: &dyn TraceSource, cfg: &AnalysisConfig) -> Result<Vec<(CombinationIndex, WelchResult)>> {
    let m = src.n_samples();
    if m == 0 {
        return Err(Error::invalid("traces have no sample points"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {} outside (0, 1)", cfg.alpha)));
    }
    if cfg.order == Order::Trivariate && cfg.window == 0 {
        return Err(Error::invalid("trivariate window must be positive"));
    }
    if cfg.order == Order::Trivariate && cfg.window > m {
        log::info!("window {} exceeds {} samples; testing every triple", cfg.window, m);
    }
    let (mf, mr, nf, nr) = class_means(src);
    if nf < 2 || nr < 2 {
        return Err(Error::invalid(format!(
            "need at least two traces per class (fixed {nf}, random {nr})"
        )));
    }
    let arity = cfg.order.arity();
    let mut units = build_units(m, cfg)?;
    let chunk = cfg.chunk_traces.max(LANES);
    let n = src.n_traces();
    let mut start = 0;
    while start < n {
        let stop = (start + chunk).min(n);
        let c = centered_chunk(src, start..stop, &mf, &mr);
        units
            .par_iter_mut()
            .for_each_init(Vec::new, |scratch, u| u.fold(&c, arity, scratch));
        start = stop;
    }
    let mut results: Vec<(CombinationIndex, WelchResult)> = units
        .into_iter()
        .flat_map(|u| {
            u.idx
                .chunks_exact(arity)
                .zip(u.acc)
                .map(|(idx, acc)| (CombinationIndex(idx.to_vec()), welch_unchecked(&acc.fixed, &acc.random)))
                .collect::<Vec<_>>()
        })
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(results)
}

fn finish(results: Vec<(CombinationIndex, WelchResult)>, m: usize, cfg: &AnalysisConfig) -> Result<Analysis> {
    let n_indices = results.len() as u64;
    if n_indices == 0 {
        return Err(Error::invalid("no combination indices to test"));
    }
    let min_dof = results
        .iter()
        .map(|(_, r)| r.dof)
        .filter(|d| d.is_finite() && *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let dof_for_threshold = if min_dof.is_finite() { min_dof } else { f64::INFINITY };
    let threshold = corrected_threshold(n_indices, cfg.alpha, dof_for_threshold)?;

    let mut leaks: Vec<LeakPoint> = results
        .iter()
        .filter(|(_, r)| r.t.abs() >= threshold)
        .map(|(idx, r)| LeakPoint {
            index: idx.clone(),
            t_value: r.t,
            dof: r.dof,
        })
        .collect();
    leaks.sort_by(|a, b| {
        b.t_value
            .abs()
            .partial_cmp(&a.t_value.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.index.cmp(&b.index))
    });
    let max_abs_t = results.iter().map(|(_, r)| r.t.abs()).fold(0.0, f64::max);

    let data = match cfg.order {
        Order::Bivariate => {
            let mut dense = vec![0f32; m * m];
            for (idx, r) in &results {
                let (a, b) = (idx.0[0], idx.0[1]);
                dense[a * m + b] = r.t as f32;
                dense[b * m + a] = r.t as f32;
            }
            HeatmapData::Dense(dense)
        }
        Order::Trivariate => HeatmapData::Sparse(
            results
                .into_iter()
                .map(|(index, r)| SparseEntry { index, t: r.t as f32 })
                .collect(),
        ),
    };
    Ok(Analysis {
        heatmap: Heatmap {
            order: cfg.order,
            n_samples: m,
            threshold,
            data,
        },
        leaks,
        threshold,
        n_indices,
        min_dof,
        max_abs_t,
    })
}

/// Fixed-vs-random multivariate t-test of two single-class sets.
pub fn multivariate_ttest(fixed: &TraceSet, random: &TraceSet, cfg: &AnalysisConfig) -> Result<Analysis> {
    if fixed.n_samples != random.n_samples {
        return Err(Error::Dimension(format!(
            "fixed traces have {} samples, random traces {}",
            fixed.n_samples, random.n_samples
        )));
    }
    analyze_source(&ClassPair { fixed, random }, cfg)
}

/// Multivariate t-test of a set whose labels separate the classes.
pub fn analyze_set(set: &TraceSet, cfg: &AnalysisConfig) -> Result<Analysis> {
    set.check_shape()?;
    set.check_classes()?;
    analyze_source(set, cfg)
}

pub fn analyze_file(path: impl AsRef<Path>, cfg: &AnalysisConfig) -> Result<Analysis> {
    let file = TraceFile::open(path)?;
    analyze_source(&file, cfg)
}

pub fn write_leaks_json(leaks: &[LeakPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(leaks)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn labels(n: usize) -> Vec<Label> {
        (0..n).map(|i| if i % 2 == 0 { Label::Fixed } else { Label::Random }).collect()
    }

    fn gaussian_set(seed: u64, n: usize, m: usize) -> TraceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n * m).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        TraceSet::new(m, samples, labels(n), seed).unwrap()
    }

    /// Materialise every combined trace, then run a textbook two-pass Welch
    /// test per index.
    fn brute_force(set: &TraceSet, indices: &[Vec<usize>]) -> Vec<f64> {
        let class_mean = |label: Label, j: usize| {
            let xs: Vec<f64> = (0..set.n_traces)
                .filter(|&i| set.labels[i] == label)
                .map(|i| set.row(i)[j] as f64)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let m = set.n_samples;
        let mf: Vec<f64> = (0..m).map(|j| class_mean(Label::Fixed, j)).collect();
        let mr: Vec<f64> = (0..m).map(|j| class_mean(Label::Random, j)).collect();
        indices
            .iter()
            .map(|idx| {
                let mut f = Vec::new();
                let mut r = Vec::new();
                for i in 0..set.n_traces {
                    let means = if set.labels[i] == Label::Fixed { &mf } else { &mr };
                    let p: f64 = idx.iter().map(|&j| set.row(i)[j] as f64 - means[j]).product();
                    if set.labels[i] == Label::Fixed { f.push(p) } else { r.push(p) }
                }
                let stats = |v: &[f64]| {
                    let n = v.len() as f64;
                    let mu = v.iter().sum::<f64>() / n;
                    (mu, v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0), n)
                };
                let ((a, va, na), (b, vb, nb)) = (stats(&f), stats(&r));
                (a - b) / (va / na + vb / nb).sqrt()
            })
            .collect()
    }

    #[test]
    fn constant_column_centres_to_zero() {
        let set = TraceSet::new(1, vec![3.0; 4], labels(4), 0).unwrap();
        let c = center(&set).unwrap();
        assert!((0..4).all(|i| c.centered(&set, i, 0) == 0.0));
    }

    #[test]
    fn two_value_column_centres_symmetrically() {
        let set = TraceSet::new(1, vec![1.0, 3.0], labels(2), 0).unwrap();
        let c = center(&set).unwrap();
        assert_eq!((c.centered(&set, 0, 0), c.centered(&set, 1, 0)), (-1.0, 1.0));
    }

    #[test]
    fn centred_columns_have_zero_mean() {
        let set = gaussian_set(5, 100, 10);
        let c = center(&set).unwrap();
        for j in 0..10 {
            let mean: f64 = (0..100).map(|i| c.centered(&set, i, j)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn combined_value_products() {
        // centred values (2, -3) and (1, 2, 3) via means of zero
        let set = TraceSet::new(3, vec![2.0, -3.0, 5.0, -2.0, 3.0, -5.0], labels(2), 0).unwrap();
        let c = center(&set).unwrap();
        assert_eq!(c.means, vec![0.0, 0.0, 0.0]);
        assert_eq!(combined_value(&set, &c, 0, &CombinationIndex::new(vec![0, 1])), -6.0);
        let set3 = TraceSet::new(3, vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0], labels(2), 0).unwrap();
        let c3 = center(&set3).unwrap();
        assert_eq!(combined_value(&set3, &c3, 0, &CombinationIndex::new(vec![0, 1, 2])), 6.0);
        // a factor equal to its mean zeroes the product
        let flat = TraceSet::new(2, vec![4.0, 1.0, 4.0, 7.0], labels(2), 0).unwrap();
        let cf = center(&flat).unwrap();
        assert_eq!(combined_value(&flat, &cf, 1, &CombinationIndex::new(vec![0, 1])), 0.0);
    }

    #[test]
    fn pair_count_with_diagonal() {
        let set = gaussian_set(1, 40, 3);
        let a = analyze_set(&set, &AnalysisConfig::default()).unwrap();
        assert_eq!(a.n_indices, 6);
        let no_diag = AnalysisConfig { include_diagonal: false, ..AnalysisConfig::default() };
        assert_eq!(analyze_set(&set, &no_diag).unwrap().n_indices, 3);
        assert_eq!(index_count(1000, &AnalysisConfig::default()), 1000 * 999 / 2 + 1000);
    }

    #[test]
    fn partition_counts() {
        assert_eq!(partition_workload(100, 4).unwrap().len(), 10);
        let one = partition_workload(7, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].pairs(true).len(), 28);
        assert!(partition_workload(5, 0).is_err());
        assert!(partition_workload(5, 6).is_err());
    }

    #[test]
    fn partition_covers_pairs_exactly_once() {
        for m in 1..=100usize {
            for s in [1usize, 2, 3, 4, 7, 10].into_iter().filter(|&s| s <= m) {
                let units = partition_workload(m, s).unwrap();
                assert_eq!(units.len(), s * (s + 1) / 2);
                let mut seen = vec![0u8; m * m];
                for u in &units {
                    for (a, b) in u.pairs(true) {
                        seen[a * m + b] += 1;
                    }
                }
                for a in 0..m {
                    for b in 0..m {
                        assert_eq!(seen[a * m + b], u8::from(a <= b), "m={m} s={s} ({a},{b})");
                    }
                }
            }
        }
    }

    #[test]
    fn streaming_matches_brute_force_bivariate() {
        let set = gaussian_set(9, 300, 12);
        let cfg = AnalysisConfig { chunk_traces: 64, splits: 3, ..AnalysisConfig::default() };
        let a = analyze_set(&set, &cfg).unwrap();
        let mut indices = Vec::new();
        for j1 in 0..12 {
            for j2 in j1..12 {
                indices.push(vec![j1, j2]);
            }
        }
        let oracle = brute_force(&set, &indices);
        for (idx, t) in indices.iter().zip(oracle) {
            let got = a.heatmap.get(idx[0], idx[1]).unwrap() as f64;
            assert!((got - t).abs() <= 1e-6 * t.abs().max(1.0), "{idx:?}: {got} vs {t}");
        }
    }

    #[test]
    fn streaming_matches_brute_force_trivariate() {
        let set = gaussian_set(10, 200, 9);
        let cfg = AnalysisConfig { chunk_traces: 50, ..AnalysisConfig::trivariate(4) };
        let a = analyze_set(&set, &cfg).unwrap();
        let HeatmapData::Sparse(entries) = &a.heatmap.data else { panic!() };
        let indices: Vec<Vec<usize>> = entries.iter().map(|e| e.index.0.clone()).collect();
        assert!(indices.iter().all(|i| i[2] - i[0] < 4));
        let oracle = brute_force(&set, &indices);
        for (e, t) in entries.iter().zip(oracle) {
            assert!((e.t as f64 - t).abs() <= 1e-5 * t.abs().max(1.0));
        }
    }

    #[test]
    fn heatmap_is_symmetric_and_label_flip_negates() {
        let set = gaussian_set(2, 200, 8);
        let a = analyze_set(&set, &AnalysisConfig::default()).unwrap();
        let b = analyze_set(&set.with_flipped_labels(), &AnalysisConfig::default()).unwrap();
        for j1 in 0..8 {
            for j2 in 0..8 {
                assert_eq!(a.heatmap.get(j1, j2), a.heatmap.get(j2, j1));
                assert_eq!(a.heatmap.get(j1, j2).unwrap(), -b.heatmap.get(j1, j2).unwrap());
            }
        }
    }

    #[test]
    fn planted_pair_is_the_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m) = (20_000, 10);
        let mut samples = vec![0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                samples[i * m + j] = rng.sample(StandardNormal);
            }
            let s: f32 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let sign = if i % 2 == 0 { s } else if rng.random::<bool>() { s } else { -s };
            samples[i * m + 2] += s;
            samples[i * m + 7] += sign;
        }
        let set = TraceSet::new(m, samples, labels(n), 0).unwrap();
        let a = analyze_set(&set, &AnalysisConfig::default()).unwrap();
        assert_eq!(a.leaks[0].index, CombinationIndex::new(vec![2, 7]));
        assert!(a.leaks[0].t_value.abs() as f32 >= a.heatmap.max_abs());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let set = gaussian_set(3, 3000, 20);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| analyze_set(&set, &AnalysisConfig::default()).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn errors_on_mismatch() {
        let a = gaussian_set(1, 10, 4).subset(Label::Fixed);
        let b = gaussian_set(1, 10, 5).subset(Label::Random);
        assert!(matches!(
            multivariate_ttest(&a, &b, &AnalysisConfig::default()),
            Err(Error::Dimension(_))
        ));
        let one_class = a.clone();
        assert!(analyze_set(&one_class, &AnalysisConfig::default()).is_err());
    }

    #[test]
    fn pgm_and_csv_exports() {
        let set = gaussian_set(8, 100, 4);
        let a = analyze_set(&set, &AnalysisConfig::default()).unwrap();
        let mut pgm = Vec::new();
        a.heatmap.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n4 4\n65535\n"));
        assert_eq!(pgm.len(), b"P5\n4 4\n65535\n".len() + 32);
        let mut csv = Vec::new();
        a.heatmap.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 10);
    }
}
