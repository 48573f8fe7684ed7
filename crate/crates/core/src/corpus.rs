//! Kernels shipped with the crate.

use crate::emulator::{parse_program, Program};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Kernel {
    pub name: &'static str,
    pub source: &'static str,
    /// Order of the analysis the kernel is built for.
    pub order: u8,
    pub leaky: bool,
}

pub const KERNELS: &[Kernel] = &[
    Kernel { name: "toy_order2", source: include_str!("../kernels/toy_order2.s"), order: 2, leaky: true },
    Kernel { name: "toy_order2_fixed", source: include_str!("../kernels/toy_order2_fixed.s"), order: 2, leaky: false },
    Kernel { name: "toy_order3", source: include_str!("../kernels/toy_order3.s"), order: 3, leaky: true },
    Kernel { name: "alu_pipeline", source: include_str!("../kernels/alu_pipeline.s"), order: 2, leaky: true },
    Kernel { name: "isolated", source: include_str!("../kernels/isolated.s"), order: 2, leaky: false },
    // Leaks only through the address bus, which the default model ignores.
    Kernel { name: "table_index", source: include_str!("../kernels/table_index.s"), order: 2, leaky: false },
];

pub fn kernel(name: &str) -> Result<&'static Kernel> {
    KERNELS
        .iter()
        .find(|k| k.name == name)
        .ok_or_else(|| Error::invalid(format!("no bundled kernel named '{name}'")))
}

pub fn program(name: &str) -> Result<Program> {
    parse_program(kernel(name)?.source)
}
