//! The detect, root-cause, fix loop over growing trace counts, and the
//! report bundle written at the end of a run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::combiner::{analyze_set, Analysis, AnalysisConfig, Heatmap, HeatmapData, LeakPoint, Order};
use crate::emulator::{run_experiment_with, ExperimentSpec, LeakageModel, Program, Recording};
use crate::error::{Error, Result};
use crate::rewriter::{apply_fixes, overhead, overhead_table, plan_fixes, CycleTable, Overhead, RewriteAction};
use crate::rootcause::{analyze_leaks, RootCause, RootCauseConfig, RootCauseReport};

pub const MAX_FIX_ITERATIONS: usize = 20;
const COMPANION_SALT: u64 = 0x636f_6d70_616e_696f;

/// JSON schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// 20k to 500k traces in steps of 20k.
pub fn full_schedule() -> Vec<usize> {
    (1..=25).map(|k| k * 20_000).collect()
}

/// 5k to 50k traces in steps of 5k.
pub fn desk_schedule() -> Vec<usize> {
    (1..=10).map(|k| k * 5_000).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub schedule: Vec<usize>,
    pub analysis: AnalysisConfig,
    /// `threshold` and `seed` are replaced per iteration.
    pub rootcause: RootCauseConfig,
    pub noise_sigma_pct: f64,
    pub seed: u64,
    pub max_fix_iterations: usize,
    /// Companion run size is the trace count divided by this.
    pub companion_divisor: usize,
    /// Defaults to all zeros.
    pub fixed_secret: Option<Vec<u8>>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            schedule: full_schedule(),
            analysis: AnalysisConfig::default(),
            rootcause: RootCauseConfig::default(),
            noise_sigma_pct: 0.0,
            seed: 0,
            max_fix_iterations: MAX_FIX_ITERATIONS,
            companion_divisor: 8,
            fixed_secret: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub n_traces: usize,
    pub n_samples: usize,
    pub threshold: f64,
    pub max_abs_t: f64,
    pub discovered: usize,
    /// Leaks with at least one planned barrier.
    pub fixed: usize,
    pub remaining: usize,
    pub actions: usize,
    pub emulation_secs: f64,
    pub analysis_secs: f64,
    pub rootcause_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopOutcome {
    pub initial: Program,
    pub program: Program,
    pub records: Vec<IterationRecord>,
    pub causes: Vec<Vec<RootCause>>,
    pub plans: Vec<Vec<RewriteAction>>,
    pub first_heatmap: Option<Heatmap>,
    pub last_heatmap: Option<Heatmap>,
    /// Leaks of the last iteration that no barrier addressed, or that were
    /// patched without a later clean check.
    pub residual: Vec<RootCause>,
    /// The last iteration ran at the largest scheduled count and found
    /// nothing.
    pub clean: bool,
}

fn check_schedule(schedule: &[usize]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::invalid("trace schedule is empty"));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("trace schedule must be strictly increasing"));
    }
    if schedule[0] < 4 {
        return Err(Error::invalid("every iteration needs at least 4 traces"));
    }
    Ok(())
}

fn leak_points(leaks: &[LeakPoint]) -> Vec<usize> {
    let mut p: Vec<usize> = leaks.iter().flat_map(|l| l.index.points().iter().copied()).collect();
    p.sort_unstable();
    p.dedup();
    p
}

fn is_addressed(cause: &RootCause, plan: &[RewriteAction]) -> bool {
    plan.iter().any(|a| a.culprits.iter().any(|c| cause.culprits.contains(c)))
}

/// Re-emulates `spec` recording component values at the leak points, runs
/// the all-random companion experiment, and attributes every leak.
pub fn root_causes(
    spec: &ExperimentSpec,
    model: &LeakageModel,
    analysis: &Analysis,
    cfg: &RootCauseConfig,
    companion_divisor: usize,
) -> Result<Vec<RootCause>> {
    if analysis.leaks.is_empty() {
        return Ok(Vec::new());
    }
    let points = leak_points(&analysis.leaks);
    let (_, l) = run_experiment_with(spec, model, Recording::Points(points.clone()))?;
    let cspec = ExperimentSpec {
        n_traces: (spec.n_traces / companion_divisor.max(1)).max(20 * cfg.tost_blocks),
        seed: spec.seed ^ COMPANION_SALT,
        all_random: true,
        ..spec.clone()
    };
    let (_, companion) = run_experiment_with(&cspec, model, Recording::Points(points))?;
    let (l, companion) = (l.expect("points recorded"), companion.expect("points recorded"));
    analyze_leaks(&l, &companion, &model.coefficients, &analysis.leaks, cfg)
}

/// Runs iterations through the schedule. A clean iteration below the
/// largest count jumps straight to the largest count; once there, patched
/// programs are re-checked at that count until clean, out of rules, or out
/// of fix budget.
pub fn run_loop(kernel: &Program, model: &LeakageModel, cfg: &LoopConfig) -> Result<LoopOutcome> {
    check_schedule(&cfg.schedule)?;
    let last = cfg.schedule.len() - 1;
    let max = cfg.schedule[last];
    let mut out = LoopOutcome {
        initial: kernel.clone(),
        program: kernel.clone(),
        records: Vec::new(),
        causes: Vec::new(),
        plans: Vec::new(),
        first_heatmap: None,
        last_heatmap: None,
        residual: Vec::new(),
        clean: false,
    };
    let mut k = 0;
    let mut fix_iterations = 0;
    loop {
        let iteration = out.records.len();
        let n = cfg.schedule[k];
        let seed = cfg.seed.wrapping_add(iteration as u64);
        let mut spec = ExperimentSpec::new(out.program.clone(), n, seed);
        spec.noise_sigma_pct = cfg.noise_sigma_pct;
        if let Some(s) = &cfg.fixed_secret {
            spec.fixed_secret = s.clone();
        }
        let t0 = Instant::now();
        let (set, _) = run_experiment_with(&spec, model, Recording::PowerOnly)?;
        let emulation_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let analysis = analyze_set(&set, &cfg.analysis)?;
        drop(set);
        let analysis_secs = t1.elapsed().as_secs_f64();
        log::info!(
            "iteration {iteration}: {n} traces, {} samples, threshold {:.3}, {} leaks",
            spec.program.len(),
            analysis.threshold,
            analysis.leaks.len()
        );
        if out.first_heatmap.is_none() {
            out.first_heatmap = Some(analysis.heatmap.clone());
        }
        out.last_heatmap = Some(analysis.heatmap.clone());
        let mut record = IterationRecord {
            iteration,
            n_traces: n,
            n_samples: spec.program.len(),
            threshold: analysis.threshold,
            max_abs_t: analysis.max_abs_t,
            discovered: analysis.leaks.len(),
            fixed: 0,
            remaining: 0,
            actions: 0,
            emulation_secs,
            analysis_secs,
            rootcause_secs: 0.0,
        };
        if analysis.leaks.is_empty() {
            out.records.push(record);
            out.causes.push(Vec::new());
            out.plans.push(Vec::new());
            out.residual.clear();
            if n == max {
                out.clean = true;
                break;
            }
            k = last;
            continue;
        }

        let t2 = Instant::now();
        let rc_cfg = RootCauseConfig { threshold: analysis.threshold, seed, ..cfg.rootcause.clone() };
        let causes = root_causes(&spec, model, &analysis, &rc_cfg, cfg.companion_divisor)?;
        let plan = plan_fixes(&out.program, model, &causes)?;
        record.rootcause_secs = t2.elapsed().as_secs_f64();
        record.fixed = causes.iter().filter(|c| is_addressed(c, &plan)).count();
        record.remaining = record.discovered - record.fixed;
        record.actions = plan.len();
        out.records.push(record);

        if plan.is_empty() {
            log::warn!("{} leaks left and no rewrite rule applies", causes.len());
            out.residual = causes.clone();
            out.causes.push(causes);
            out.plans.push(plan);
            break;
        }
        out.program = apply_fixes(&out.program, &plan)?;
        fix_iterations += 1;
        out.residual = causes.clone();
        out.causes.push(causes);
        out.plans.push(plan);
        if fix_iterations >= cfg.max_fix_iterations {
            log::warn!("fix budget of {} iterations used up", cfg.max_fix_iterations);
            break;
        }
        k = (k + 1).min(last);
    }
    Ok(out)
}

/// Machine-readable run summary, `report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kernel: String,
    pub order: u8,
    pub schedule: Vec<usize>,
    pub clean: bool,
    pub iterations: Vec<IterationRecord>,
    /// Root causes per iteration.
    pub causes: Vec<Vec<RootCauseReport>>,
    pub residual: Vec<RootCauseReport>,
    pub overhead: Option<Overhead>,
    pub fixed_program: String,
}

impl Report {
    pub fn empty(kernel: &str, order: Order, schedule: &[usize]) -> Self {
        Self { kernel: kernel.into(), order: order.arity() as u8, schedule: schedule.to_vec(), ..Self::default() }
    }

    pub fn from_outcome(kernel: &str, cfg: &LoopConfig, outcome: &LoopOutcome, table: &CycleTable) -> Self {
        Self {
            kernel: kernel.into(),
            order: cfg.analysis.order.arity() as u8,
            schedule: cfg.schedule.clone(),
            clean: outcome.clean,
            iterations: outcome.records.clone(),
            causes: outcome.causes.iter().map(|cs| cs.iter().map(RootCause::report).collect()).collect(),
            residual: outcome.residual.iter().map(RootCause::report).collect(),
            overhead: Some(overhead(&outcome.initial, &outcome.program, table)),
            fixed_program: outcome.program.emit(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_heatmap(h: &Heatmap, dir: &Path, stem: &str) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = create(&csv)?;
    h.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&csv, e))?;
    if matches!(h.data, HeatmapData::Dense(_)) {
        let pgm = dir.join(format!("{stem}.pgm"));
        let mut w = create(&pgm)?;
        h.write_pgm(&mut w)?;
        w.flush().map_err(|e| Error::io(&pgm, e))?;
    }
    Ok(())
}

/// Writes `report.json`, `fixed.s`, `overhead.md` and the first and last
/// heatmaps (`heatmap_before`, `heatmap_after`) into `dir`.
pub fn write_report(report: &Report, outcome: Option<&LoopOutcome>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let mut w = create(&json)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&json, e))?;
    let rows: Vec<(String, Overhead)> = report.overhead.iter().map(|o| (report.kernel.clone(), *o)).collect();
    let md = dir.join("overhead.md");
    fs::write(&md, overhead_table(&rows)).map_err(|e| Error::io(&md, e))?;
    if let Some(o) = outcome {
        let fixed = dir.join("fixed.s");
        fs::write(&fixed, o.program.emit()).map_err(|e| Error::io(&fixed, e))?;
        if let Some(h) = &o.first_heatmap {
            write_heatmap(h, dir, "heatmap_before")?;
        }
        if let Some(h) = &o.last_heatmap {
            write_heatmap(h, dir, "heatmap_after")?;
        }
    }
    Ok(())
}
