//! Instruction-level power emulation.
//!
//! A kernel is parsed into a [`Program`], executed on a [`MachineState`] and
//! every executed instruction yields one sample point whose power is the
//! coefficient-weighted sum of the [`LeakageModel`] components.

pub mod harness;
pub mod isa;
pub mod machine;
pub mod model;

pub use harness::{
    add_noise, amplitude, initial_state, run_experiment, run_experiment_with, snr, split_secret, trace_input,
    ExperimentSpec, Recording, TraceInput, INPUT_BASE, MEMORY_SIZE,
};
pub use isa::{parse_instruction, parse_program, parse_program_with, Instruction, Item, Op, ParseOptions, Program, Reg};
pub use machine::{hd, hw, run_plain, MachineState, Shadow, Step};
pub use model::{Extractor, LeakageModel, Transition};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionRecord {
    pub n_components: usize,
    /// `[instruction][component]`.
    pub components: Vec<f32>,
    pub power: Vec<f64>,
    pub final_state: MachineState,
}

impl ExecutionRecord {
    pub fn component_row(&self, j: usize) -> &[f32] {
        &self.components[j * self.n_components..(j + 1) * self.n_components]
    }
}

/// Runs `program` from `state`; one sample per executed instruction.
pub fn execute(program: &Program, state: MachineState, model: &LeakageModel) -> Result<ExecutionRecord> {
    let nc = model.n_components();
    let mut st = state;
    let mut components = vec![0f32; program.len() * nc];
    let mut power = Vec::with_capacity(program.len());
    for (index, ins) in program.instructions.iter().enumerate() {
        let step = st.step(ins).map_err(|message| Error::Execution {
            index,
            text: ins.to_string(),
            message,
        })?;
        let row = &mut components[index * nc..(index + 1) * nc];
        model.evaluate(&step, row);
        power.push(model.power(row));
    }
    Ok(ExecutionRecord { n_components: nc, components, power, final_state: st })
}
