//! Flat binary storage for trace sets and component matrices.
//!
//! Trace file (`HLTR`): magic, `u32` version, `u64` trace count, `u64`
//! sample count, one label byte per trace (0 = fixed, 1 = random), then
//! row-major little-endian `f32` samples.
//!
//! Component file (`HLCM`): the same header followed by a `u32` component
//! count and a name table (`u32` byte length + UTF-8 per name), then
//! little-endian `f32` values laid out sample-major: for every sample point
//! a `n_traces × n_components` block.
//!
//! Experiment configuration lives in a JSON sidecar ([`DatasetManifest`]).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"HLTR";
pub const COMPONENT_MAGIC: &[u8; 4] = b"HLCM";
pub const FORMAT_VERSION: u32 = 1;

const FIXED_HEADER: usize = 4 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fixed,
    Random,
}

impl Label {
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Fixed => 0,
            Label::Random => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Label::Fixed),
            1 => Ok(Label::Random),
            other => Err(Error::Format(format!("invalid label byte {other}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Fixed => Label::Random,
            Label::Random => Label::Fixed,
        }
    }
}

/// Power traces (`n_traces × n_samples`, row-major) with class labels.
///
/// The generating seed is not part of the binary format; it travels in the
/// manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub n_traces: usize,
    pub n_samples: usize,
    pub samples: Vec<f32>,
    pub labels: Vec<Label>,
    pub seed: u64,
}

impl TraceSet {
    pub fn new(n_samples: usize, samples: Vec<f32>, labels: Vec<Label>, seed: u64) -> Result<Self> {
        let set = Self {
            n_traces: labels.len(),
            n_samples,
            samples,
            labels,
            seed,
        };
        set.check_shape()?;
        Ok(set)
    }

    pub fn zeros(n_traces: usize, n_samples: usize, labels: Vec<Label>) -> Result<Self> {
        Self::new(n_samples, vec![0.0; n_traces * n_samples], labels, 0)
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.labels.len() != self.n_traces {
            return Err(Error::Dimension(format!(
                "{} labels for {} traces",
                self.labels.len(),
                self.n_traces
            )));
        }
        if self.samples.len() != self.n_traces * self.n_samples {
            return Err(Error::Dimension(format!(
                "{} samples for a {}x{} set",
                self.samples.len(),
                self.n_traces,
                self.n_samples
            )));
        }
        Ok(())
    }

    /// Fixed-vs-random analysis needs both classes present.
    pub fn check_classes(&self) -> Result<()> {
        let fixed = self.count(Label::Fixed);
        if fixed == 0 || fixed == self.n_traces {
            return Err(Error::invalid(
                "trace set must contain both fixed and random traces",
            ));
        }
        Ok(())
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.n_traces).map(|i| self.samples[i * self.n_samples + j]).collect()
    }

    /// Traces carrying `label`, in their original order.
    pub fn subset(&self, label: Label) -> TraceSet {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == label {
                samples.extend_from_slice(self.row(i));
                labels.push(l);
            }
        }
        TraceSet {
            n_traces: labels.len(),
            n_samples: self.n_samples,
            samples,
            labels,
            seed: self.seed,
        }
    }

    pub fn with_flipped_labels(&self) -> TraceSet {
        let mut out = self.clone();
        out.labels.iter_mut().for_each(|l| *l = l.flipped());
        out
    }
}

fn write_header(
    w: &mut impl Write,
    magic: &[u8; 4],
    n_traces: usize,
    n_samples: usize,
    labels: &[Label],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(n_traces as u64).to_le_bytes())?;
    w.write_all(&(n_samples as u64).to_le_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|l| l.to_byte()).collect();
    w.write_all(&bytes)
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 * 4096);
    for chunk in values.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_traceset(set: &TraceSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.check_shape()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, TRACE_MAGIC, set.n_traces, set.n_samples, &set.labels)
        .and_then(|_| write_f32s(&mut w, &set.samples))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Header {
    n_traces: usize,
    n_samples: usize,
    labels: Vec<Label>,
    end: usize,
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

fn u64_at(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

fn parse_header(bytes: &[u8], magic: &[u8; 4]) -> Result<Header> {
    if bytes.len() < FIXED_HEADER || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32_at(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n_traces = usize::try_from(u64_at(bytes, 8)?)
        .map_err(|_| Error::Format("trace count overflows".into()))?;
    let n_samples = usize::try_from(u64_at(bytes, 16)?)
        .map_err(|_| Error::Format("sample count overflows".into()))?;
    let end = FIXED_HEADER
        .checked_add(n_traces)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated label block".into()))?;
    let labels = bytes[FIXED_HEADER..end]
        .iter()
        .map(|&b| Label::from_byte(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        n_traces,
        n_samples,
        labels,
        end,
    })
}

fn map_file(path: &Path) -> Result<Mmap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // SAFETY: trace files are treated as immutable while mapped.
    unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))
}

#[inline]
fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Read-only memory-mapped view of a trace file. Safe to share across
/// threads.
pub struct TraceFile {
    path: PathBuf,
    map: Mmap,
    pub n_traces: usize,
    pub n_samples: usize,
    pub labels: Vec<Label>,
    data_offset: usize,
}

impl TraceFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let map = map_file(&path)?;
        let h = parse_header(&map, TRACE_MAGIC)?;
        let expected = h
            .n_traces
            .checked_mul(h.n_samples)
            .and_then(|c| c.checked_mul(4))
            .and_then(|b| b.checked_add(h.end))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if expected != map.len() {
            return Err(Error::Dimension(format!(
                "{}: header declares {}x{} samples ({} bytes) but file holds {} bytes",
                path.display(),
                h.n_traces,
                h.n_samples,
                expected,
                map.len()
            )));
        }
        Ok(Self {
            path,
            map,
            n_traces: h.n_traces,
            n_samples: h.n_samples,
            labels: h.labels,
            data_offset: h.end,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    #[inline]
    pub fn sample(&self, trace: usize, point: usize) -> f32 {
        f32_at(&self.map, self.data_offset + 4 * (trace * self.n_samples + point))
    }

    pub fn to_traceset(&self) -> TraceSet {
        let body = &self.map[self.data_offset..];
        let samples = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        TraceSet {
            n_traces: self.n_traces,
            n_samples: self.n_samples,
            samples,
            labels: self.labels.clone(),
            seed: 0,
        }
    }

    /// Column-major copy of `range` (one contiguous run of `n_traces` values
    /// per sample point).
    pub fn read_columns(&self, range: Range<usize>) -> Result<ColumnBlock> {
        if range.start > range.end || range.end > self.n_samples {
            return Err(Error::invalid(format!(
                "column range {:?} outside [0, {})",
                range, self.n_samples
            )));
        }
        let width = range.len();
        let mut data = vec![0f32; width * self.n_traces];
        for i in 0..self.n_traces {
            for (k, j) in range.clone().enumerate() {
                data[k * self.n_traces + i] = self.sample(i, j);
            }
        }
        Ok(ColumnBlock {
            start: range.start,
            width,
            n_traces: self.n_traces,
            data,
        })
    }
}

pub fn read_traceset(path: impl AsRef<Path>) -> Result<TraceSet> {
    Ok(TraceFile::open(path)?.to_traceset())
}

/// A run of consecutive sample-point columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnBlock {
    pub start: usize,
    pub width: usize,
    pub n_traces: usize,
    pub data: Vec<f32>,
}

impl ColumnBlock {
    pub fn column(&self, k: usize) -> &[f32] {
        &self.data[k * self.n_traces..(k + 1) * self.n_traces]
    }

    pub fn columns(&self) -> impl Iterator<Item = (usize, &[f32])> {
        (0..self.width).map(move |k| (self.start + k, self.column(k)))
    }
}

/// Iterator over column blocks of a mapped trace file; holds at most one
/// block of `block_width × n_traces` values at a time.
pub struct ColumnBlocks {
    file: TraceFile,
    next: usize,
    end: usize,
    block_width: usize,
}

impl Iterator for ColumnBlocks {
    type Item = ColumnBlock;

    fn next(&mut self) -> Option<ColumnBlock> {
        if self.next >= self.end {
            return None;
        }
        let stop = (self.next + self.block_width).min(self.end);
        let block = self.file.read_columns(self.next..stop).ok()?;
        self.next = stop;
        Some(block)
    }
}

pub const DEFAULT_BLOCK_WIDTH: usize = 64;

pub fn stream_columns(path: impl AsRef<Path>, column_range: Range<usize>) -> Result<ColumnBlocks> {
    stream_columns_with(path, column_range, DEFAULT_BLOCK_WIDTH)
}

pub fn stream_columns_with(
    path: impl AsRef<Path>,
    column_range: Range<usize>,
    block_width: usize,
) -> Result<ColumnBlocks> {
    if block_width == 0 {
        return Err(Error::invalid("block width must be positive"));
    }
    let file = TraceFile::open(path)?;
    if column_range.start > column_range.end || column_range.end > file.n_samples {
        return Err(Error::invalid(format!(
            "column range {:?} outside [0, {})",
            column_range, file.n_samples
        )));
    }
    Ok(ColumnBlocks {
        next: column_range.start,
        end: column_range.end,
        block_width,
        file,
    })
}

/// Per-instruction model component values for a selection of sample points.
///
/// Values are stored sample-major: `values[(p * n_traces + i) * n_components + c]`
/// for the `p`-th recorded point, trace `i` and component `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMatrix {
    pub n_traces: usize,
    /// Sample count of the full trace the points were taken from.
    pub n_samples: usize,
    pub n_components: usize,
    /// Recorded sample points (program instruction indices), ascending.
    pub points: Vec<usize>,
    pub values: Vec<f32>,
    pub component_names: Vec<String>,
    pub labels: Vec<Label>,
}

impl ComponentMatrix {
    pub fn zeros(
        n_samples: usize,
        points: Vec<usize>,
        component_names: Vec<String>,
        labels: Vec<Label>,
    ) -> Self {
        let n_traces = labels.len();
        let n_components = component_names.len();
        Self {
            n_traces,
            n_samples,
            n_components,
            values: vec![0.0; points.len() * n_traces * n_components],
            points,
            component_names,
            labels,
        }
    }

    pub fn is_full(&self) -> bool {
        self.points.len() == self.n_samples && self.points.iter().enumerate().all(|(k, &p)| k == p)
    }

    /// Local slot of a program sample index.
    pub fn slot(&self, sample: usize) -> Option<usize> {
        self.points.binary_search(&sample).ok()
    }

    #[inline]
    pub fn component_row(&self, slot: usize, trace: usize) -> &[f32] {
        let at = (slot * self.n_traces + trace) * self.n_components;
        &self.values[at..at + self.n_components]
    }

    #[inline]
    pub fn component_row_mut(&mut self, slot: usize, trace: usize) -> &mut [f32] {
        let at = (slot * self.n_traces + trace) * self.n_components;
        &mut self.values[at..at + self.n_components]
    }

    /// The values of one sample point: `n_traces × n_components`.
    pub fn point_block(&self, slot: usize) -> &[f32] {
        let len = self.n_traces * self.n_components;
        &self.values[slot * len..(slot + 1) * len]
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.labels.len() != self.n_traces
            || self.component_names.len() != self.n_components
            || self.values.len() != self.points.len() * self.n_traces * self.n_components
        {
            return Err(Error::Dimension("component matrix shape is inconsistent".into()));
        }
        if self.points.windows(2).any(|w| w[0] >= w[1]) || self.points.iter().any(|&p| p >= self.n_samples) {
            return Err(Error::Dimension("component points must be ascending and in range".into()));
        }
        Ok(())
    }
}

pub fn write_component_matrix(cm: &ComponentMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    cm.check_shape()?;
    if !cm.is_full() {
        return Err(Error::invalid(
            "only matrices covering every sample point can be written",
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let body = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write_header(w, COMPONENT_MAGIC, cm.n_traces, cm.n_samples, &cm.labels)?;
        w.write_all(&(cm.n_components as u32).to_le_bytes())?;
        for name in &cm.component_names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        write_f32s(w, &cm.values)?;
        w.flush()
    };
    body(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_component_matrix(path: impl AsRef<Path>) -> Result<ComponentMatrix> {
    let path = path.as_ref();
    let map = map_file(path)?;
    let h = parse_header(&map, COMPONENT_MAGIC)?;
    let mut at = h.end;
    let n_components = u32_at(&map, at)? as usize;
    at += 4;
    let mut names = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let len = u32_at(&map, at)? as usize;
        at += 4;
        let raw = map
            .get(at..at + len)
            .ok_or_else(|| Error::Format("truncated name table".into()))?;
        names.push(
            String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("component name is not UTF-8".into()))?,
        );
        at += len;
    }
    let count = h.n_traces * h.n_samples * n_components;
    if map.len() != at + 4 * count {
        return Err(Error::Dimension(format!(
            "{}: expected {} component values, file holds {} bytes of data",
            path.display(),
            count,
            map.len() - at
        )));
    }
    let values = map[at..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ComponentMatrix {
        n_traces: h.n_traces,
        n_samples: h.n_samples,
        n_components,
        points: (0..h.n_samples).collect(),
        values,
        component_names: names,
        labels: h.labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gaussian standard deviation as a percentage of the set's amplitude.
    pub sigma_pct: f64,
    pub seed: u64,
}

/// JSON sidecar describing how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kernel: String,
    pub order: u8,
    /// Fixed secret as lowercase hex.
    pub fixed_input: String,
    pub mask_width: u32,
    pub n_traces: u64,
    pub n_samples: u64,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub traces_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl DatasetManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that the referenced files exist and agree with the recorded
    /// dimensions.
    pub fn validate(&self, base_dir: impl AsRef<Path>) -> Result<()> {
        let base = base_dir.as_ref();
        if !(self.order == 2 || self.order == 3) {
            return Err(Error::invalid(format!("order {} must be 2 or 3", self.order)));
        }
        let traces = TraceFile::open(base.join(&self.traces_file))?;
        if traces.n_traces as u64 != self.n_traces || traces.n_samples as u64 != self.n_samples {
            return Err(Error::Dimension(format!(
                "manifest says {}x{}, trace file holds {}x{}",
                self.n_traces, self.n_samples, traces.n_traces, traces.n_samples
            )));
        }
        if let Some(c) = &self.components_file {
            let cm = read_component_matrix(base.join(c))?;
            if cm.n_traces as u64 != self.n_traces || cm.n_samples as u64 != self.n_samples {
                return Err(Error::Dimension(format!(
                    "manifest says {}x{}, component file holds {}x{}",
                    self.n_traces, self.n_samples, cm.n_traces, cm.n_samples
                )));
            }
        }
        Ok(())
    }
}
