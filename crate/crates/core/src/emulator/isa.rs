//! Parser and printer for the supported Thumb subset.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PADDING: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reg {
    R(u8),
    Sp,
}

impl Reg {
    pub const R7: Reg = Reg::R(7);

    fn parse(s: &str) -> Option<Reg> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "sp" | "r13" => Some(Reg::Sp),
            _ => {
                let n: u8 = s.strip_prefix('r')?.parse().ok()?;
                (n <= 7).then_some(Reg::R(n))
            }
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::R(n) => write!(f, "r{n}"),
            Reg::Sp => write!(f, "sp"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Ldr,
    Ldrb,
    Str,
    Strb,
    Push,
    Pop,
    Mov,
    Movs,
    Lsls,
    Lsrs,
    Adds,
    Subs,
    Eors,
    Ands,
    Orrs,
    Bics,
    Mvns,
}

impl Op {
    fn parse(s: &str) -> Option<Op> {
        Some(match s {
            "ldr" => Op::Ldr,
            "ldrb" => Op::Ldrb,
            "str" => Op::Str,
            "strb" => Op::Strb,
            "push" => Op::Push,
            "pop" => Op::Pop,
            "mov" => Op::Mov,
            "movs" => Op::Movs,
            "lsls" => Op::Lsls,
            "lsrs" => Op::Lsrs,
            "adds" => Op::Adds,
            "subs" => Op::Subs,
            "eors" => Op::Eors,
            "ands" => Op::Ands,
            "orrs" => Op::Orrs,
            "bics" => Op::Bics,
            "mvns" => Op::Mvns,
            _ => return None,
        })
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Op::Ldr => "ldr",
            Op::Ldrb => "ldrb",
            Op::Str => "str",
            Op::Strb => "strb",
            Op::Push => "push",
            Op::Pop => "pop",
            Op::Mov => "mov",
            Op::Movs => "movs",
            Op::Lsls => "lsls",
            Op::Lsrs => "lsrs",
            Op::Adds => "adds",
            Op::Subs => "subs",
            Op::Eors => "eors",
            Op::Ands => "ands",
            Op::Orrs => "orrs",
            Op::Bics => "bics",
            Op::Mvns => "mvns",
        }
    }

    pub fn class(self) -> InstrClass {
        match self {
            Op::Ldr | Op::Ldrb => InstrClass::Load,
            Op::Str | Op::Strb => InstrClass::Store,
            Op::Push | Op::Pop => InstrClass::Stack,
            Op::Mov | Op::Movs | Op::Mvns => InstrClass::Move,
            Op::Lsls | Op::Lsrs => InstrClass::Shift,
            Op::Adds | Op::Subs => InstrClass::Arith,
            Op::Eors | Op::Ands | Op::Orrs | Op::Bics => InstrClass::Logic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstrClass {
    Arith,
    Logic,
    Shift,
    Move,
    Load,
    Store,
    Stack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(u32),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "#{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Address {
    Offset { base: Reg, offset: u32 },
    Indexed { base: Reg, index: Reg },
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::Offset { base, offset: 0 } => write!(f, "[{base}]"),
            Address::Offset { base, offset } => write!(f, "[{base}, #{offset}]"),
            Address::Indexed { base, index } => write!(f, "[{base}, {index}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Op,
    /// Written register (loaded register for loads, stored register for
    /// stores).
    pub dst: Option<Reg>,
    pub srcs: Vec<Operand>,
    pub addr: Option<Address>,
    /// Register list of push/pop, ascending.
    pub regs: Vec<Reg>,
    /// 1-based source line, 0 for synthesised instructions.
    pub line: usize,
}

impl Instruction {
    pub fn new(op: Op, dst: Option<Reg>, srcs: Vec<Operand>) -> Self {
        Self { op, dst, srcs, addr: None, regs: Vec::new(), line: 0 }
    }

    /// `mov r7, r7`.
    pub fn pipeline_flush() -> Self {
        Self::new(Op::Mov, Some(Reg::R7), vec![Operand::Reg(Reg::R7)])
    }

    pub fn push_r7() -> Self {
        Self { regs: vec![Reg::R7], ..Self::new(Op::Push, None, Vec::new()) }
    }

    pub fn pop_r7() -> Self {
        Self { regs: vec![Reg::R7], ..Self::new(Op::Pop, None, Vec::new()) }
    }

    /// Instructions that only move r7 around and touch no secret state.
    pub fn is_barrier(&self) -> bool {
        match self.op {
            Op::Mov => self.dst == Some(Reg::R7) && self.srcs == [Operand::Reg(Reg::R7)],
            Op::Push | Op::Pop => self.regs == [Reg::R7],
            _ => false,
        }
    }

    pub fn class(&self) -> InstrClass {
        self.op.class()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op.mnemonic();
        match self.op {
            Op::Push | Op::Pop => {
                let regs: Vec<String> = self.regs.iter().map(|r| r.to_string()).collect();
                write!(f, "{m} {{{}}}", regs.join(", "))
            }
            Op::Ldr | Op::Ldrb | Op::Str | Op::Strb => {
                let rt = self.dst.expect("memory instruction without register");
                write!(f, "{m} {rt}, {}", self.addr.expect("memory instruction without address"))
            }
            _ => {
                write!(f, "{m} {}", self.dst.expect("data instruction without destination"))?;
                for s in &self.srcs {
                    write!(f, ", {s}")?;
                }
                Ok(())
            }
        }
    }
}

/// Kernel input layout declared by `; @shares` and `; @ptr` directives.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub n_shares: usize,
    /// Bytes per share.
    pub width: usize,
    /// Byte offset of each share inside the input region.
    pub offsets: Vec<usize>,
    pub pointers: Vec<(Reg, PointerTarget)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointerTarget {
    Share(usize),
    /// Input region base plus a byte offset.
    Base(usize),
}

impl Layout {
    pub fn region_len(&self) -> usize {
        self.offsets
            .iter()
            .map(|o| o + self.width)
            .max()
            .unwrap_or(0)
    }
}

/// One line of kernel source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Item {
    Instr { instr: Instruction, text: String },
    /// `; nop padding`, expanded into `count` barrier moves.
    Padding { count: usize, text: String },
    /// Comment, directive, label, assembler directive or blank line.
    Other(String),
}

/// Where an executed instruction came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub item: usize,
    /// Position inside a padding block, 0 for plain instructions.
    pub sub: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub items: Vec<Item>,
    pub layout: Layout,
    /// Executed instruction sequence; sample point `j` is `instructions[j]`.
    pub instructions: Vec<Instruction>,
    pub origins: Vec<Origin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseOptions {
    pub padding: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { padding: DEFAULT_PADDING }
    }
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn split_comment(line: &str) -> (&str, Option<&str>) {
    match line.find(';').or_else(|| line.find("//")) {
        Some(at) => {
            let comment = line[at..].trim_start_matches(['/', ';']);
            (&line[..at], Some(comment.trim()))
        }
        None => (line, None),
    }
}

fn parse_reg(s: &str, line: usize) -> Result<Reg> {
    Reg::parse(s).ok_or_else(|| perr(line, format!("register '{}' not in r0-r7, sp", s.trim())))
}

fn parse_imm(s: &str, line: usize) -> Result<u32> {
    let s = s.trim();
    let body = s
        .strip_prefix('#')
        .ok_or_else(|| perr(line, format!("malformed operand '{s}'")))?
        .trim();
    let parsed = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16)
    } else {
        body.parse::<u32>()
    };
    parsed.map_err(|_| perr(line, format!("malformed immediate '{s}'")))
}

fn parse_operand(s: &str, line: usize) -> Result<Operand> {
    if s.trim_start().starts_with('#') {
        parse_imm(s, line).map(Operand::Imm)
    } else {
        parse_reg(s, line).map(Operand::Reg)
    }
}

fn check_range(v: u32, max: u32, step: u32, what: &str, line: usize) -> Result<()> {
    if v > max || v % step != 0 {
        let extra = if step > 1 { format!(", multiple of {step}") } else { String::new() };
        return Err(perr(line, format!("{what} #{v} out of range [0, {max}]{extra}")));
    }
    Ok(())
}

fn low(r: Reg, line: usize) -> Result<Reg> {
    match r {
        Reg::Sp => Err(perr(line, "sp not allowed here")),
        r => Ok(r),
    }
}

/// Splits on commas outside brackets and braces.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_address(s: &str, op: Op, line: usize) -> Result<Address> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| perr(line, format!("malformed address '{s}'")))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    let base = parse_reg(parts[0], line)?;
    let byte = matches!(op, Op::Ldrb | Op::Strb);
    match parts.len() {
        1 => Ok(Address::Offset { base, offset: 0 }),
        2 if parts[1].starts_with('#') => {
            let offset = parse_imm(parts[1], line)?;
            match (byte, base) {
                (true, Reg::Sp) => return Err(perr(line, "byte access cannot use sp as base")),
                (true, _) => check_range(offset, 31, 1, "offset", line)?,
                (false, Reg::Sp) => check_range(offset, 1020, 4, "offset", line)?,
                (false, _) => check_range(offset, 124, 4, "offset", line)?,
            }
            Ok(Address::Offset { base, offset })
        }
        2 => Ok(Address::Indexed {
            base: low(base, line)?,
            index: low(parse_reg(parts[1], line)?, line)?,
        }),
        _ => Err(perr(line, format!("malformed address '{s}'"))),
    }
}

fn parse_reglist(s: &str, line: usize) -> Result<Vec<Reg>> {
    let inner = s
        .trim()
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .ok_or_else(|| perr(line, format!("malformed register list '{s}'")))?;
    let mut regs = Vec::new();
    for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (Reg::R(a), Reg::R(b)) = (parse_reg(a, line)?, parse_reg(b, line)?) else {
                return Err(perr(line, "sp not allowed in register lists"));
            };
            if a > b {
                return Err(perr(line, format!("descending register range '{part}'")));
            }
            regs.extend((a..=b).map(Reg::R));
        } else {
            regs.push(low(parse_reg(part, line)?, line)?);
        }
    }
    regs.sort();
    regs.dedup();
    if regs.is_empty() {
        return Err(perr(line, "empty register list"));
    }
    Ok(regs)
}

/// Parses one instruction (no comment).
pub fn parse_instruction(text: &str, line: usize) -> Result<Instruction> {
    let text = text.trim();
    let split = text
        .find(|c: char| !c.is_ascii_alphanumeric())
        .unwrap_or(text.len());
    let (mnemonic, rest) = text.split_at(split);
    let mnemonic = mnemonic.to_ascii_lowercase();
    if mnemonic == "nop" {
        if !rest.trim().is_empty() {
            return Err(perr(line, "nop takes no operands"));
        }
        return Ok(Instruction { line, ..Instruction::pipeline_flush() });
    }
    let op = Op::parse(&mnemonic).ok_or_else(|| perr(line, format!("unknown mnemonic '{mnemonic}'")))?;
    let ops = split_operands(rest);
    let want = |n: &[usize]| -> Result<()> {
        if n.contains(&ops.len()) {
            Ok(())
        } else {
            Err(perr(line, format!("'{}' takes {:?} operands, got {}", op.mnemonic(), n, ops.len())))
        }
    };
    let mut ins = Instruction::new(op, None, Vec::new());
    ins.line = line;
    match op {
        Op::Ldr | Op::Ldrb | Op::Str | Op::Strb => {
            want(&[2])?;
            ins.dst = Some(low(parse_reg(&ops[0], line)?, line)?);
            ins.addr = Some(parse_address(&ops[1], op, line)?);
        }
        Op::Push | Op::Pop => {
            want(&[1])?;
            ins.regs = parse_reglist(&ops[0], line)?;
        }
        Op::Mov => {
            want(&[2])?;
            ins.dst = Some(parse_reg(&ops[0], line)?);
            match parse_operand(&ops[1], line)? {
                Operand::Imm(v) => {
                    check_range(v, 255, 1, "immediate", line)?;
                    ins.op = Op::Movs;
                    ins.dst = Some(low(ins.dst.unwrap(), line)?);
                    ins.srcs = vec![Operand::Imm(v)];
                }
                src => ins.srcs = vec![src],
            }
        }
        Op::Movs | Op::Mvns => {
            want(&[2])?;
            ins.dst = Some(low(parse_reg(&ops[0], line)?, line)?);
            let src = parse_operand(&ops[1], line)?;
            match src {
                Operand::Imm(v) if op == Op::Movs => check_range(v, 255, 1, "immediate", line)?,
                Operand::Imm(_) => return Err(perr(line, "mvns takes a register")),
                Operand::Reg(r) => {
                    low(r, line)?;
                }
            }
            ins.srcs = vec![src];
        }
        Op::Lsls | Op::Lsrs => {
            want(&[2, 3])?;
            ins.dst = Some(low(parse_reg(&ops[0], line)?, line)?);
            if ops.len() == 3 {
                let rm = low(parse_reg(&ops[1], line)?, line)?;
                let imm = parse_imm(&ops[2], line)?;
                let max = if op == Op::Lsls { 31 } else { 32 };
                check_range(imm, max, 1, "shift", line)?;
                ins.srcs = vec![Operand::Reg(rm), Operand::Imm(imm)];
            } else {
                let rs = low(parse_reg(&ops[1], line)?, line)?;
                ins.srcs = vec![Operand::Reg(ins.dst.unwrap()), Operand::Reg(rs)];
            }
        }
        Op::Adds | Op::Subs => {
            want(&[2, 3])?;
            let rd = low(parse_reg(&ops[0], line)?, line)?;
            ins.dst = Some(rd);
            if ops.len() == 2 {
                let src = parse_operand(&ops[1], line)?;
                if let Operand::Imm(v) = src {
                    check_range(v, 255, 1, "immediate", line)?;
                }
                ins.srcs = vec![Operand::Reg(rd), src];
            } else {
                let rn = low(parse_reg(&ops[1], line)?, line)?;
                let src = parse_operand(&ops[2], line)?;
                match src {
                    Operand::Imm(v) => check_range(v, 7, 1, "immediate", line)?,
                    Operand::Reg(r) => {
                        low(r, line)?;
                    }
                }
                ins.srcs = vec![Operand::Reg(rn), src];
            }
        }
        Op::Eors | Op::Ands | Op::Orrs | Op::Bics => {
            want(&[2, 3])?;
            let rd = low(parse_reg(&ops[0], line)?, line)?;
            ins.dst = Some(rd);
            let regs: Vec<Reg> = ops[1..]
                .iter()
                .map(|o| parse_reg(o, line).and_then(|r| low(r, line)))
                .collect::<Result<_>>()?;
            ins.srcs = match regs.as_slice() {
                [rm] => vec![Operand::Reg(rd), Operand::Reg(*rm)],
                [rn, rm] if *rn == rd => vec![Operand::Reg(rd), Operand::Reg(*rm)],
                _ => return Err(perr(line, format!("'{}' destination must equal the first source", op.mnemonic()))),
            };
        }
    }
    Ok(ins)
}

fn parse_directive(body: &str, line: usize, layout: &mut Layout) -> Result<()> {
    let mut words = body.split_whitespace();
    match words.next() {
        Some("@shares") => {
            let n: usize = words
                .next()
                .and_then(|w| w.parse().ok())
                .filter(|&n| n >= 1)
                .ok_or_else(|| perr(line, "@shares needs a positive share count"))?;
            let mut width = 1usize;
            let mut offsets = None;
            for w in words {
                if let Some(v) = w.strip_prefix("width=") {
                    width = v.parse().ok().filter(|&v| v >= 1).ok_or_else(|| perr(line, "bad width"))?;
                } else if let Some(v) = w.strip_prefix("offsets=") {
                    let list: std::result::Result<Vec<usize>, _> = v.split(',').map(str::parse).collect();
                    offsets = Some(list.map_err(|_| perr(line, "bad offsets list"))?);
                } else {
                    return Err(perr(line, format!("unknown @shares option '{w}'")));
                }
            }
            let stride = width.div_ceil(4) * 4;
            let offsets = offsets.unwrap_or_else(|| (0..n).map(|k| k * stride).collect());
            if offsets.len() != n {
                return Err(perr(line, format!("{} offsets for {n} shares", offsets.len())));
            }
            layout.n_shares = n;
            layout.width = width;
            layout.offsets = offsets;
        }
        Some("@ptr") => {
            let reg = low(parse_reg(words.next().unwrap_or(""), line)?, line)?;
            let target = match words.next() {
                Some("base") => PointerTarget::Base(0),
                Some(w) if w.starts_with("base+") => PointerTarget::Base(
                    w["base+".len()..]
                        .parse()
                        .map_err(|_| perr(line, format!("bad pointer target '{w}'")))?,
                ),
                Some(w) => PointerTarget::Share(
                    w.strip_prefix("share")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| perr(line, format!("bad pointer target '{w}'")))?,
                ),
                None => return Err(perr(line, "@ptr needs a target")),
            };
            layout.pointers.push((reg, target));
        }
        _ => {}
    }
    Ok(())
}

pub fn parse_program(text: &str) -> Result<Program> {
    parse_program_with(text, ParseOptions::default())
}

pub fn parse_program_with(text: &str, opts: ParseOptions) -> Result<Program> {
    if text.trim().is_empty() {
        return Err(perr(0, "empty program"));
    }
    let mut items = Vec::new();
    let mut layout = Layout::default();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let (code, comment) = split_comment(raw);
        let code = code.trim();
        if code.is_empty() {
            match comment {
                Some(c) if c.eq_ignore_ascii_case("nop padding") => {
                    items.push(Item::Padding { count: opts.padding, text: raw.to_string() })
                }
                Some(c) if c.starts_with('@') => {
                    parse_directive(c, line, &mut layout)?;
                    items.push(Item::Other(raw.to_string()));
                }
                _ => items.push(Item::Other(raw.to_string())),
            }
            continue;
        }
        if code.starts_with('.') || code.ends_with(':') {
            items.push(Item::Other(raw.to_string()));
            continue;
        }
        let instr = parse_instruction(code, line)?;
        items.push(Item::Instr { instr, text: raw.to_string() });
    }
    for (reg, target) in &layout.pointers {
        if let PointerTarget::Share(k) = target {
            if *k >= layout.n_shares {
                return Err(perr(0, format!("{reg} points at share{k}, but only {} shares", layout.n_shares)));
            }
        }
    }
    Program::from_items(items, layout)
}

impl Program {
    pub fn from_items(items: Vec<Item>, layout: Layout) -> Result<Program> {
        let mut instructions = Vec::new();
        let mut origins = Vec::new();
        for (k, item) in items.iter().enumerate() {
            match item {
                Item::Instr { instr, .. } => {
                    instructions.push(instr.clone());
                    origins.push(Origin { item: k, sub: 0 });
                }
                Item::Padding { count, .. } => {
                    for sub in 0..*count {
                        instructions.push(Instruction::pipeline_flush());
                        origins.push(Origin { item: k, sub });
                    }
                }
                Item::Other(_) => {}
            }
        }
        if instructions.is_empty() {
            return Err(perr(0, "program has no instructions"));
        }
        Ok(Program { items, layout, instructions, origins })
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Source text, one item per line.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match item {
                Item::Instr { text, .. } | Item::Padding { text, .. } | Item::Other(text) => out.push_str(text),
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable description of sample point `j`.
    pub fn describe(&self, j: usize) -> String {
        match (self.instructions.get(j), self.origins.get(j)) {
            (Some(ins), Some(o)) => match &self.items[o.item] {
                Item::Padding { .. } => format!("{ins} (padding)"),
                _ if ins.line > 0 => format!("{ins} (line {})", ins.line),
                _ => ins.to_string(),
            },
            _ => format!("sample {j}"),
        }
    }
}
