//! Architectural state and single-instruction semantics.

use serde::{Deserialize, Serialize};

use super::isa::{Address, InstrClass, Instruction, Op, Operand, Program, Reg};
use crate::error::{Error, Result};

/// Micro-architectural latches whose transitions leak.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shadow {
    pub op1: u32,
    pub op2: u32,
    pub result: u32,
    pub bus: u32,
    pub address: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    pub regs: [u32; 8],
    pub sp: u32,
    /// `pop` may not raise sp above this.
    pub stack_top: u32,
    pub memory: Vec<u8>,
    pub shadow: Shadow,
}

/// Data words moved over the memory bus by one instruction, in order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BusTransfers {
    pub len: u8,
    pub values: [u32; 8],
}

impl BusTransfers {
    fn push(&mut self, v: u32) {
        self.values[self.len as usize] = v;
        self.len += 1;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.values[..self.len as usize]
    }
}

/// Everything the leakage extractors may look at for one executed
/// instruction. Operand latches an instruction does not drive are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub class: InstrClass,
    pub before: Shadow,
    pub op1: Option<u32>,
    pub op2: Option<u32>,
    pub result: Option<u32>,
    pub bus: BusTransfers,
    pub address: Option<u32>,
}

impl MachineState {
    pub fn new(memory_size: usize) -> Self {
        Self {
            regs: [0; 8],
            sp: memory_size as u32,
            stack_top: memory_size as u32,
            memory: vec![0; memory_size],
            shadow: Shadow::default(),
        }
    }

    pub fn reg(&self, r: Reg) -> u32 {
        match r {
            Reg::R(n) => self.regs[n as usize],
            Reg::Sp => self.sp,
        }
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        match r {
            Reg::R(n) => self.regs[n as usize] = v,
            Reg::Sp => self.sp = v,
        }
    }

    fn check(&self, addr: u32, len: u32) -> std::result::Result<usize, String> {
        let end = addr as u64 + len as u64;
        if end > self.memory.len() as u64 {
            return Err(format!("memory access at {addr:#x} out of bounds ({} bytes)", self.memory.len()));
        }
        Ok(addr as usize)
    }

    pub fn read32(&self, addr: u32) -> std::result::Result<u32, String> {
        if addr % 4 != 0 {
            return Err(format!("unaligned word access at {addr:#x}"));
        }
        let a = self.check(addr, 4)?;
        Ok(u32::from_le_bytes(self.memory[a..a + 4].try_into().unwrap()))
    }

    pub fn write32(&mut self, addr: u32, v: u32) -> std::result::Result<(), String> {
        if addr % 4 != 0 {
            return Err(format!("unaligned word access at {addr:#x}"));
        }
        let a = self.check(addr, 4)?;
        self.memory[a..a + 4].copy_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn effective(&self, addr: &Address) -> u32 {
        match *addr {
            Address::Offset { base, offset } => self.reg(base).wrapping_add(offset),
            Address::Indexed { base, index } => self.reg(base).wrapping_add(self.reg(index)),
        }
    }

    fn operand(&self, o: &Operand) -> u32 {
        match *o {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(v) => v,
        }
    }

    /// Executes one instruction, updating registers, memory and latches.
    pub fn step(&mut self, ins: &Instruction) -> std::result::Result<Step, String> {
        let before = self.shadow;
        let mut step = Step {
            class: ins.class(),
            before,
            op1: None,
            op2: None,
            result: None,
            bus: BusTransfers::default(),
            address: None,
        };
        match ins.op {
            Op::Ldr | Op::Ldrb => {
                let addr = self.effective(ins.addr.as_ref().unwrap());
                let (word, value) = if ins.op == Op::Ldr {
                    let w = self.read32(addr)?;
                    (w, w)
                } else {
                    self.check(addr, 1)?;
                    let w = self.read32(addr & !3)?;
                    (w, (w >> (8 * (addr & 3))) & 0xff)
                };
                self.set_reg(ins.dst.unwrap(), value);
                step.result = Some(value);
                step.bus.push(word);
                step.address = Some(addr);
            }
            Op::Str | Op::Strb => {
                let addr = self.effective(ins.addr.as_ref().unwrap());
                let data = self.reg(ins.dst.unwrap());
                let bus = if ins.op == Op::Str {
                    self.write32(addr, data)?;
                    data
                } else {
                    let a = self.check(addr, 1)?;
                    let byte = data & 0xff;
                    self.memory[a] = byte as u8;
                    byte * 0x0101_0101
                };
                step.op1 = Some(if ins.op == Op::Str { data } else { data & 0xff });
                step.bus.push(bus);
                step.address = Some(addr);
            }
            Op::Push => {
                let n = ins.regs.len() as u32;
                let base = self
                    .sp
                    .checked_sub(4 * n)
                    .ok_or_else(|| "stack overflow on push".to_string())?;
                for (k, r) in ins.regs.iter().enumerate() {
                    let v = self.reg(*r);
                    let addr = base + 4 * k as u32;
                    self.write32(addr, v)?;
                    step.bus.push(v);
                    step.op1 = Some(v);
                    step.address = Some(addr);
                }
                self.sp = base;
            }
            Op::Pop => {
                let n = ins.regs.len() as u32;
                if self.sp as u64 + 4 * n as u64 > self.stack_top as u64 {
                    return Err("stack underflow on pop".to_string());
                }
                let base = self.sp;
                for (k, r) in ins.regs.iter().enumerate() {
                    let addr = base + 4 * k as u32;
                    let v = self.read32(addr)?;
                    self.set_reg(*r, v);
                    step.bus.push(v);
                    step.result = Some(v);
                    step.address = Some(addr);
                }
                self.sp = base + 4 * n;
            }
            Op::Mov | Op::Movs | Op::Mvns => {
                let v = self.operand(&ins.srcs[0]);
                let r = if ins.op == Op::Mvns { !v } else { v };
                step.op1 = Some(v);
                step.op2 = Some(v);
                step.result = Some(r);
                self.set_reg(ins.dst.unwrap(), r);
            }
            Op::Lsls | Op::Lsrs => {
                let a = self.operand(&ins.srcs[0]);
                let b = self.operand(&ins.srcs[1]);
                let amount = b & 0xff;
                let r = match (ins.op, amount) {
                    (_, s) if s >= 32 => 0,
                    (Op::Lsls, s) => a << s,
                    (_, s) => a >> s,
                };
                step.op1 = Some(a);
                step.op2 = Some(b);
                step.result = Some(r);
                self.set_reg(ins.dst.unwrap(), r);
            }
            Op::Adds | Op::Subs | Op::Eors | Op::Ands | Op::Orrs | Op::Bics => {
                let a = self.operand(&ins.srcs[0]);
                let b = self.operand(&ins.srcs[1]);
                let r = match ins.op {
                    Op::Adds => a.wrapping_add(b),
                    Op::Subs => a.wrapping_sub(b),
                    Op::Eors => a ^ b,
                    Op::Ands => a & b,
                    Op::Orrs => a | b,
                    _ => a & !b,
                };
                step.op1 = Some(a);
                step.op2 = Some(b);
                step.result = Some(r);
                self.set_reg(ins.dst.unwrap(), r);
            }
        }
        let s = &mut self.shadow;
        s.op1 = step.op1.unwrap_or(s.op1);
        s.op2 = step.op2.unwrap_or(s.op2);
        s.result = step.result.unwrap_or(s.result);
        if let Some(&last) = step.bus.as_slice().last() {
            s.bus = last;
        }
        s.address = step.address.unwrap_or(s.address);
        Ok(step)
    }
}

/// Runs a program for its architectural effect only.
pub fn run_plain(program: &Program, state: &mut MachineState) -> Result<()> {
    for (index, ins) in program.instructions.iter().enumerate() {
        state.step(ins).map_err(|message| Error::Execution {
            index,
            text: ins.to_string(),
            message,
        })?;
    }
    Ok(())
}

#[inline]
pub fn hw(v: u32) -> u32 {
    v.count_ones()
}

#[inline]
pub fn hd(a: u32, b: u32) -> u32 {
    (a ^ b).count_ones()
}
