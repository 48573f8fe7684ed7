//! Fixed-vs-random experiments over an emulated kernel.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::isa::{PointerTarget, Program};
use super::machine::MachineState;
use super::model::LeakageModel;
use crate::error::{Error, Result};
use crate::stats::Moments;
use crate::tracestore::{ComponentMatrix, Label, TraceSet};

pub const MEMORY_SIZE: usize = 1024;
/// Address of the share region; the stack grows down from `MEMORY_SIZE`.
pub const INPUT_BASE: u32 = 0x100;
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7631;
const BLOCK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub program: Program,
    /// Secret of the fixed class; `layout.width` bytes.
    pub fixed_secret: Vec<u8>,
    pub n_traces: usize,
    /// Gaussian noise σ in percent of the clean set's amplitude; 0 disables.
    pub noise_sigma_pct: f64,
    pub seed: u64,
    /// Every trace draws a random secret and is labelled random.
    pub all_random: bool,
}

impl ExperimentSpec {
    /// All-zero fixed secret, no noise.
    pub fn new(program: Program, n_traces: usize, seed: u64) -> Self {
        let width = program.layout.width;
        Self {
            program,
            fixed_secret: vec![0; width],
            n_traces,
            noise_sigma_pct: 0.0,
            seed,
            all_random: false,
        }
    }

    /// Masking order d (shares minus one).
    pub fn order(&self) -> usize {
        self.program.layout.n_shares.saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        let layout = &self.program.layout;
        if self.fixed_secret.len() != layout.width && layout.n_shares > 0 {
            return Err(Error::invalid(format!(
                "fixed secret has {} bytes, layout expects {}",
                self.fixed_secret.len(),
                layout.width
            )));
        }
        if INPUT_BASE as usize + layout.region_len() > MEMORY_SIZE / 2 {
            return Err(Error::invalid("share region does not fit below the stack"));
        }
        if self.n_traces == 0 {
            return Err(Error::invalid("trace count must be positive"));
        }
        if !(self.noise_sigma_pct >= 0.0 && self.noise_sigma_pct.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be >= 0", self.noise_sigma_pct)));
        }
        Ok(())
    }
}

/// Per-trace inputs, reproducible from `(seed, trace index)` alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceInput {
    pub label: Label,
    pub secret: Vec<u8>,
    pub shares: Vec<Vec<u8>>,
    pub r7: u32,
}

pub fn label_of(trace: usize) -> Label {
    if trace % 2 == 0 {
        Label::Fixed
    } else {
        Label::Random
    }
}

/// Counter-based stream: key from the seed, stream id from the trace index.
pub fn trace_rng(seed: u64, trace: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trace as u64);
    rng
}

/// Boolean masking: `(v ⊕ m1 ⊕ … ⊕ m_d, m1, …, m_d)` with fresh masks.
pub fn split_secret(secret: &[u8], n_shares: usize, rng: &mut impl RngCore) -> Vec<Vec<u8>> {
    if n_shares == 0 {
        return Vec::new();
    }
    let mut shares = vec![secret.to_vec()];
    for _ in 1..n_shares {
        let mut mask = vec![0u8; secret.len()];
        rng.fill_bytes(&mut mask);
        for (s, m) in shares[0].iter_mut().zip(&mask) {
            *s ^= m;
        }
        shares.push(mask);
    }
    shares
}

pub fn trace_input(spec: &ExperimentSpec, trace: usize) -> TraceInput {
    let layout = &spec.program.layout;
    let mut rng = trace_rng(spec.seed, trace);
    let r7 = rng.next_u32();
    let label = if spec.all_random { Label::Random } else { label_of(trace) };
    let secret = match label {
        Label::Fixed => spec.fixed_secret.clone(),
        Label::Random => {
            let mut s = vec![0u8; layout.width];
            rng.fill_bytes(&mut s);
            s
        }
    };
    let shares = split_secret(&secret, layout.n_shares, &mut rng);
    TraceInput { label, secret, shares, r7 }
}

/// Machine state with shares in memory, pointer registers set and r7 random.
pub fn initial_state(program: &Program, input: &TraceInput) -> MachineState {
    let layout = &program.layout;
    let mut st = MachineState::new(MEMORY_SIZE);
    for (share, &off) in input.shares.iter().zip(&layout.offsets) {
        let at = INPUT_BASE as usize + off;
        st.memory[at..at + share.len()].copy_from_slice(share);
    }
    for &(reg, target) in &layout.pointers {
        let addr = match target {
            PointerTarget::Base(off) => INPUT_BASE + off as u32,
            PointerTarget::Share(k) => INPUT_BASE + layout.offsets[k] as u32,
        };
        st.set_reg(reg, addr);
    }
    st.regs[7] = input.r7;
    st
}

/// Which component values to keep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Recording {
    PowerOnly,
    Points(Vec<usize>),
    Full,
}

struct BlockOut {
    samples: Vec<f32>,
    /// `[trace][point][component]` for the recorded points.
    components: Vec<f32>,
}

fn run_block(
    spec: &ExperimentSpec,
    model: &LeakageModel,
    traces: std::ops::Range<usize>,
    points: &[usize],
) -> Result<BlockOut> {
    let program = &spec.program;
    let nc = model.n_components();
    let mut samples = Vec::with_capacity(traces.len() * program.len());
    let mut components = Vec::with_capacity(traces.len() * points.len() * nc);
    let mut row = vec![0f32; nc];
    for i in traces {
        let input = trace_input(spec, i);
        let mut st = initial_state(program, &input);
        let mut next = 0;
        for (j, ins) in program.instructions.iter().enumerate() {
            let step = st.step(ins).map_err(|message| Error::Trace {
                trace: i,
                source: Box::new(Error::Execution { index: j, text: ins.to_string(), message }),
            })?;
            model.evaluate(&step, &mut row);
            samples.push(model.power(&row) as f32);
            if points.get(next) == Some(&j) {
                components.extend_from_slice(&row);
                next += 1;
            }
        }
    }
    Ok(BlockOut { samples, components })
}

pub fn run_experiment(spec: &ExperimentSpec, model: &LeakageModel) -> Result<(TraceSet, ComponentMatrix)> {
    let (set, cm) = run_experiment_with(spec, model, Recording::Full)?;
    Ok((set, cm.expect("full recording")))
}

/// Generates the traces, optionally keeping component values at some points.
/// Noise (if configured) is added to the power samples only.
pub fn run_experiment_with(
    spec: &ExperimentSpec,
    model: &LeakageModel,
    recording: Recording,
) -> Result<(TraceSet, Option<ComponentMatrix>)> {
    spec.validate()?;
    let m = spec.program.len();
    let n = spec.n_traces;
    let nc = model.n_components();
    let points: Vec<usize> = match &recording {
        Recording::PowerOnly => Vec::new(),
        Recording::Full => (0..m).collect(),
        Recording::Points(p) => {
            let mut p = p.clone();
            p.sort_unstable();
            p.dedup();
            if p.last().is_some_and(|&j| j >= m) {
                return Err(Error::invalid(format!("recorded point outside the {m} samples")));
            }
            p
        }
    };
    let blocks: Vec<BlockOut> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| run_block(spec, model, b * BLOCK..((b + 1) * BLOCK).min(n), &points))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(n * m);
    for b in &blocks {
        samples.extend_from_slice(&b.samples);
    }
    let labels: Vec<Label> = (0..n)
        .map(|i| if spec.all_random { Label::Random } else { label_of(i) })
        .collect();
    let cm = (recording != Recording::PowerOnly).then(|| {
        let mut cm = ComponentMatrix::zeros(m, points.clone(), model.names(), labels.clone());
        let np = points.len();
        for (b, block) in blocks.iter().enumerate() {
            for (k, per_trace) in block.components.chunks_exact(np * nc).enumerate() {
                let i = b * BLOCK + k;
                for slot in 0..np {
                    cm.component_row_mut(slot, i).copy_from_slice(&per_trace[slot * nc..(slot + 1) * nc]);
                }
            }
        }
        cm
    });
    drop(blocks);
    let set = TraceSet::new(m, samples, labels, spec.seed)?;
    let set = if spec.noise_sigma_pct > 0.0 {
        add_noise(&set, spec.noise_sigma_pct, spec.seed ^ NOISE_SALT)
    } else {
        set
    };
    Ok((set, cm))
}

/// Max minus min over every sample of the set.
pub fn amplitude(set: &TraceSet) -> f64 {
    let (lo, hi) = set
        .samples
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo.is_finite() {
        (hi - lo) as f64
    } else {
        0.0
    }
}

/// Adds N(0, σ²) with `σ = sigma_pct / 100 × amplitude(set)`. Trace `i`
/// draws from its own stream, so the result does not depend on threading.
pub fn add_noise(set: &TraceSet, sigma_pct: f64, seed: u64) -> TraceSet {
    let sigma = sigma_pct / 100.0 * amplitude(set);
    let mut out = set.clone();
    if sigma <= 0.0 || set.n_samples == 0 {
        return out;
    }
    out.samples
        .par_chunks_mut(set.n_samples)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = trace_rng(seed, i);
            for x in row {
                let z: f64 = rng.sample(StandardNormal);
                *x = (*x as f64 + sigma * z) as f32;
            }
        });
    out
}

/// Per-sample SNR: trace-weighted variance of the group means over the mean
/// within-group variance, grouping traces by `targets`. Infinite where the
/// groups are noise-free but separated.
pub fn snr(set: &TraceSet, targets: &[u32]) -> Result<Vec<f64>> {
    if targets.len() != set.n_traces {
        return Err(Error::Dimension(format!(
            "{} targets for {} traces",
            targets.len(),
            set.n_traces
        )));
    }
    let mut groups: std::collections::BTreeMap<u32, Vec<Moments>> = Default::default();
    for (i, &t) in targets.iter().enumerate() {
        let g = groups
            .entry(t)
            .or_insert_with(|| vec![Moments::default(); set.n_samples]);
        for (mo, &x) in g.iter_mut().zip(set.row(i)) {
            mo.push(x as f64);
        }
    }
    if let Some((t, g)) = groups.iter().find(|(_, g)| g[0].n < 2) {
        return Err(Error::invalid(format!(
            "target group {t} has {} trace(s); need at least 2",
            g[0].n
        )));
    }
    let total = set.n_traces as f64;
    Ok((0..set.n_samples)
        .map(|j| {
            let grand = groups.values().map(|g| g[j].mean * g[j].n as f64).sum::<f64>() / total;
            let signal = groups
                .values()
                .map(|g| g[j].n as f64 * (g[j].mean - grand).powi(2))
                .sum::<f64>()
                / total;
            let noise = groups.values().map(|g| g[j].m2 / (g[j].n as f64 - 1.0) * g[j].n as f64).sum::<f64>() / total;
            if noise > 0.0 {
                signal / noise
            } else if signal > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect())
}
