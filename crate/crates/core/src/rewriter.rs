//! Barrier insertion: turns root causes into `mov r7, r7` and
//! `push {r7}` / `pop {r7}` insertions and re-emits the kernel.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::emulator::isa::{InstrClass, Item};
use crate::emulator::{initial_state, run_plain, trace_input, ExperimentSpec, MEMORY_SIZE, Instruction, LeakageModel, Program, Transition};
use crate::error::{Error, Result};
use crate::rootcause::{Culprit, Method, RootCause};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FixKind {
    /// `mov r7, r7`
    PipelineFlush,
    /// `push {r7}` then `pop {r7}`
    MemoryWipe,
}

impl FixKind {
    pub fn instructions(self) -> Vec<Instruction> {
        match self {
            FixKind::PipelineFlush => vec![Instruction::pipeline_flush()],
            FixKind::MemoryWipe => vec![Instruction::push_r7(), Instruction::pop_r7()],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FixKind::PipelineFlush => "pipeline_flush",
            FixKind::MemoryWipe => "memory_wipe",
        }
    }

    pub fn for_transition(t: Transition) -> FixKind {
        match t {
            Transition::Pipeline => FixKind::PipelineFlush,
            Transition::MemoryBus => FixKind::MemoryWipe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteAction {
    pub kind: FixKind,
    /// Instruction index the fix goes in front of.
    pub position: usize,
    /// The instruction at `position` when the plan was made.
    pub anchor: Instruction,
    pub leak: Vec<usize>,
    pub culprits: Vec<Culprit>,
}

/// Maps root causes to barrier insertions. Each culprit asks for a fix in
/// front of its own instruction; at most one fix of each kind per position.
/// Culprits sitting on barrier instructions and components without a
/// transition class are skipped.
pub fn plan_fixes(program: &Program, model: &LeakageModel, causes: &[RootCause]) -> Result<Vec<RewriteAction>> {
    let extractors = model.extractors();
    let mut plan: BTreeMap<(usize, FixKind), RewriteAction> = BTreeMap::new();
    for cause in causes {
        if cause.method == Method::Unresolved {
            log::warn!("leak ({}) unresolved, no fix", cause.leak.index);
            continue;
        }
        for c in &cause.culprits {
            let ins = program.instructions.get(c.sample).ok_or_else(|| {
                Error::invalid(format!("culprit sample {} beyond the {} instructions", c.sample, program.len()))
            })?;
            if ins.is_barrier() {
                log::debug!("culprit {} at barrier sample {}, skipped", c.name, c.sample);
                continue;
            }
            let kind = match extractors.get(c.component).and_then(|e| e.transition()) {
                Some(t) => FixKind::for_transition(t),
                None => {
                    log::debug!("no rewrite rule for {} at sample {}", c.name, c.sample);
                    continue;
                }
            };
            let action = plan.entry((c.sample, kind)).or_insert_with(|| RewriteAction {
                kind,
                position: c.sample,
                anchor: ins.clone(),
                leak: cause.leak.index.points().to_vec(),
                culprits: Vec::new(),
            });
            if !action.culprits.contains(c) {
                action.culprits.push(c.clone());
            }
        }
    }
    Ok(plan.into_values().collect())
}

fn points_text(points: &[usize]) -> String {
    points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

/// Inserts the planned barriers. Fixes at one position go flush first, then
/// wipe. Line numbers are renumbered so the result equals a re-parse of its
/// own emitted text.
pub fn apply_fixes(program: &Program, plan: &[RewriteAction]) -> Result<Program> {
    let mut by_item: BTreeMap<usize, Vec<&RewriteAction>> = BTreeMap::new();
    for a in plan {
        match program.instructions.get(a.position) {
            Some(ins) if same_instruction(ins, &a.anchor) => {}
            _ => return Err(Error::StalePlan(format!("no {} at sample {}", a.anchor, a.position))),
        }
        let origin = program.origins[a.position];
        if origin.sub != 0 || !matches!(program.items[origin.item], Item::Instr { .. }) {
            return Err(Error::invalid(format!("cannot insert inside padding at sample {}", a.position)));
        }
        by_item.entry(origin.item).or_default().push(a);
    }
    let mut items = program.items.clone();
    for (item, mut actions) in by_item.into_iter().rev() {
        actions.sort_by_key(|a| a.kind);
        let indent = match &items[item] {
            Item::Instr { text, .. } => text[..text.len() - text.trim_start().len()].to_string(),
            _ => String::new(),
        };
        let mut new = Vec::new();
        for a in actions {
            new.push(Item::Other(format!("{indent}; hileak fix: {} for leak ({})", a.kind.label(), points_text(&a.leak))));
            for ins in a.kind.instructions() {
                let text = format!("{indent}{ins}");
                new.push(Item::Instr { instr: ins, text });
            }
        }
        items.splice(item..item, new);
    }
    for (k, item) in items.iter_mut().enumerate() {
        if let Item::Instr { instr, .. } = item {
            instr.line = k + 1;
        }
    }
    Program::from_items(items, program.layout.clone())
}

fn same_instruction(a: &Instruction, b: &Instruction) -> bool {
    Instruction { line: 0, ..a.clone() } == Instruction { line: 0, ..b.clone() }
}

/// Cycles per instruction, by class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleTable {
    pub load: u64,
    pub store: u64,
    /// Per register of a push or pop.
    pub stack_per_reg: u64,
    pub other: u64,
}

impl Default for CycleTable {
    fn default() -> Self {
        Self { load: 2, store: 2, stack_per_reg: 2, other: 1 }
    }
}

impl CycleTable {
    pub fn cost(&self, ins: &Instruction) -> u64 {
        match ins.class() {
            InstrClass::Load => self.load,
            InstrClass::Store => self.store,
            InstrClass::Stack => self.stack_per_reg * ins.regs.len() as u64,
            _ => self.other,
        }
    }

    pub fn cycles(&self, program: &Program) -> u64 {
        program.instructions.iter().map(|i| self.cost(i)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub before: u64,
    pub after: u64,
    pub increase_pct: f64,
}

pub fn overhead(before: &Program, after: &Program, table: &CycleTable) -> Overhead {
    let (b, a) = (table.cycles(before), table.cycles(after));
    let increase_pct = if b == 0 { 0.0 } else { 100.0 * (a as f64 - b as f64) / b as f64 };
    Overhead { before: b, after: a, increase_pct }
}

/// Markdown table: kernel, unprotected and protected size, increase.
pub fn overhead_table(rows: &[(String, Overhead)]) -> String {
    let mut out = String::from("| Kernel | Unprotected size (cycles) | Protected size (cycles) | Increase |\n");
    out.push_str("|---|---:|---:|---:|\n");
    for (name, o) in rows {
        let _ = writeln!(out, "| {name} | {} | {} | {:.1}% |", o.before, o.after, o.increase_pct);
    }
    out
}

/// First input on which the two programs disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub what: String,
}

/// Runs both programs on `n_inputs` random inputs and compares r0–r6, sp
/// and memory. Stack bytes below the final stack pointer are dead and
/// ignored.
pub fn check_equivalence(before: &Program, after: &Program, n_inputs: usize, seed: u64) -> Result<Option<Mismatch>> {
    if before.layout != after.layout {
        return Ok(Some(Mismatch { input: 0, what: "input layouts differ".into() }));
    }
    let spec = ExperimentSpec { all_random: true, ..ExperimentSpec::new(before.clone(), n_inputs.max(1), seed) };
    for i in 0..n_inputs {
        let input = trace_input(&spec, i);
        let mut a = initial_state(before, &input);
        let mut b = initial_state(after, &input);
        run_plain(before, &mut a)?;
        run_plain(after, &mut b)?;
        if a.regs[..7] != b.regs[..7] {
            return Ok(Some(Mismatch { input: i, what: format!("registers {:x?} vs {:x?}", &a.regs[..7], &b.regs[..7]) }));
        }
        if a.sp != b.sp {
            return Ok(Some(Mismatch { input: i, what: format!("sp {:#x} vs {:#x}", a.sp, b.sp) }));
        }
        // the stack lives in the upper half; below sp it is dead
        let dead = (MEMORY_SIZE / 2).min(a.sp as usize)..a.sp as usize;
        if let Some(at) = (0..a.memory.len()).find(|&k| !dead.contains(&k) && a.memory[k] != b.memory[k]) {
            return Ok(Some(Mismatch { input: i, what: format!("memory at {at:#x}") }));
        }
    }
    Ok(None)
}
