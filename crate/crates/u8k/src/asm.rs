//! A small two-pass assembler producing [`MachineImage`]s.
//!
//! Source syntax, one statement per line, `;` starts a comment:
//!
//! ```text
//! .org 0x38              ; set the location counter (first use = origin)
//! .equ user_data, 0xe0   ; named constant
//! .entry reset=start     ; entry points (default: image origin)
//! start:                 ; label (may share a line with a statement)
//!     load.imm sp, stack ; operands: reg, immediate, label, label+offset
//!     call init
//!     iret
//! table: .byte init, 2, 0xff
//! ```
//!
//! Mnemonics mirror the instruction set: `halt`, `syscall`, `iret`,
//! `ret`, `jmp.abs`/`jmp.ind` (or plain `jmp`), `call`, `jeq`/`jne`/
//! `jlt`/`jge`, `load.imm`/`load.dir`/`load.ind`, `store.dir`/
//! `store.ind`, `mov`, `add`/`sub`/`and`/`or`/`xor`/`cmp`/`div` (register
//! or immediate right-hand side), `shl`/`shr` (immediate only),
//! `wrmpu1`/`wrmpu2`/`wruflags`, `rdureg`/`wrureg`. Indirect operands
//! may be written `(r0)` or `r0`.

use std::collections::BTreeMap;

use crate::machine::image::{EntryPoints, MachineImage};
use crate::machine::isa::{encode, AluOp, Cond, Gpr, Instruction, Operand, UserReg};

#[derive(Debug, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: unresolved symbol `{name}`")]
    UnresolvedSymbol { line: usize, name: String },
    #[error("line {line}: {msg}")]
    Range { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

/// Assemble `source` into an image. Every label and `.equ` constant is
/// exported in the image symbol table.
pub fn assemble(source: &str) -> Result<MachineImage, AsmError> {
    let statements = parse_lines(source)?;
    let symbols = collect_symbols(&statements)?;
    emit(&statements, &symbols)
}

#[derive(Debug, Clone)]
enum Stmt {
    Org(Expr),
    Equ(String, Expr),
    Entry(String, Expr),
    Bytes(Vec<Expr>),
    Label(String),
    Ins(String, Vec<String>),
}

#[derive(Debug, Clone)]
struct Line {
    no: usize,
    stmt: Stmt,
}

/// A symbol, a number, or `atom +/- number`.
#[derive(Debug, Clone)]
struct Expr {
    base: String,
    offset: i16,
}

fn parse_expr(line: usize, s: &str) -> Result<Expr, AsmError> {
    let s = s.trim();
    let (base, offset) = if let Some((a, b)) = s.rsplit_once('+') {
        (a.trim(), parse_num(line, b.trim())? as i16)
    } else if let Some((a, b)) = s.split_once('-') {
        if a.trim().is_empty() {
            (s, 0) // a bare negative number
        } else {
            (a.trim(), -(parse_num(line, b.trim())? as i16))
        }
    } else {
        (s, 0)
    };
    if base.is_empty() {
        return Err(AsmError::Syntax {
            line,
            msg: "empty operand".into(),
        });
    }
    Ok(Expr {
        base: base.to_string(),
        offset,
    })
}

fn parse_num(line: usize, s: &str) -> Result<u16, AsmError> {
    let r = if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u16::from_str_radix(h, 16)
    } else {
        s.parse()
    };
    r.map_err(|_| AsmError::Syntax {
        line,
        msg: format!("expected a number, found `{s}`"),
    })
}

fn parse_lines(source: &str) -> Result<Vec<Line>, AsmError> {
    let mut out = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let no = idx + 1;
        let mut text = raw;
        if let Some(p) = text.find(';') {
            text = &text[..p];
        }
        let mut text = text.trim();
        // Leading labels, possibly several, possibly alone on the line.
        while let Some(p) = text.find(':') {
            let name = text[..p].trim();
            if name.is_empty() || !is_ident(name) {
                break;
            }
            out.push(Line {
                no,
                stmt: Stmt::Label(name.to_string()),
            });
            text = text[p + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.split_once(char::is_whitespace) {
            Some((h, r)) => (h, r.trim()),
            None => (text, ""),
        };
        let stmt = match head {
            ".org" => Stmt::Org(parse_expr(no, rest)?),
            ".equ" => {
                let (name, value) = rest.split_once(',').ok_or_else(|| AsmError::Syntax {
                    line: no,
                    msg: "expected `.equ NAME, VALUE`".into(),
                })?;
                Stmt::Equ(name.trim().to_string(), parse_expr(no, value)?)
            }
            ".entry" => {
                let (which, value) = rest.split_once('=').ok_or_else(|| AsmError::Syntax {
                    line: no,
                    msg: "expected `.entry NAME=ADDR`".into(),
                })?;
                Stmt::Entry(which.trim().to_string(), parse_expr(no, value)?)
            }
            ".byte" => {
                let exprs = rest
                    .split(',')
                    .map(|p| parse_expr(no, p))
                    .collect::<Result<Vec<_>, _>>()?;
                Stmt::Bytes(exprs)
            }
            m if m.starts_with('.') => {
                return Err(AsmError::Syntax {
                    line: no,
                    msg: format!("unknown directive `{m}`"),
                })
            }
            m => {
                let operands = if rest.is_empty() {
                    Vec::new()
                } else {
                    rest.split(',').map(|p| p.trim().to_string()).collect()
                };
                Stmt::Ins(m.to_lowercase(), operands)
            }
        };
        out.push(Line { no, stmt });
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Symbols {
    table: BTreeMap<String, u8>,
    origin: u8,
}

fn stmt_size(stmt: &Stmt) -> u16 {
    match stmt {
        Stmt::Bytes(exprs) => exprs.len() as u16,
        Stmt::Ins(..) => 2,
        _ => 0,
    }
}

fn collect_symbols(lines: &[Line]) -> Result<Symbols, AsmError> {
    let mut table: BTreeMap<String, u8> = BTreeMap::new();
    let mut lc: u16 = 0;
    let mut origin: Option<u8> = None;
    let mut equs: Vec<(usize, String, Expr)> = Vec::new();
    for line in lines {
        match &line.stmt {
            Stmt::Org(e) => {
                // .org operands may only use already-defined symbols.
                let target = eval(line.no, e, &table)? as u16;
                if origin.is_none() && lc == 0 {
                    origin = Some(target as u8);
                } else if target < lc {
                    return Err(AsmError::Range {
                        line: line.no,
                        msg: format!(".org {target:#04x} moves backwards (at {lc:#04x})"),
                    });
                }
                lc = target;
            }
            Stmt::Label(name) => {
                if lc > 0xFF {
                    return Err(AsmError::Range {
                        line: line.no,
                        msg: "label beyond the 256-byte address space".into(),
                    });
                }
                if table.insert(name.clone(), lc as u8).is_some() {
                    return Err(AsmError::DuplicateLabel {
                        line: line.no,
                        name: name.clone(),
                    });
                }
                if origin.is_none() {
                    origin = Some(lc as u8);
                }
            }
            Stmt::Equ(name, e) => equs.push((line.no, name.clone(), e.clone())),
            Stmt::Entry(..) => {}
            other => {
                if origin.is_none() {
                    origin = Some(lc as u8);
                }
                lc += stmt_size(other);
                if lc > 0x100 {
                    return Err(AsmError::Range {
                        line: line.no,
                        msg: "code runs past the 256-byte address space".into(),
                    });
                }
            }
        }
    }
    // `.equ` values may reference labels, so resolve them afterwards.
    for (no, name, e) in equs {
        let v = eval(no, &e, &table)?;
        if table.insert(name.clone(), v).is_some() {
            return Err(AsmError::DuplicateLabel { line: no, name });
        }
    }
    Ok(Symbols {
        table,
        origin: origin.unwrap_or(0),
    })
}

fn eval(line: usize, e: &Expr, table: &BTreeMap<String, u8>) -> Result<u8, AsmError> {
    let base = if let Some(&v) = table.get(&e.base) {
        v as i16
    } else if e.base.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        parse_num(line, &e.base)? as i16
    } else {
        return Err(AsmError::UnresolvedSymbol {
            line,
            name: e.base.clone(),
        });
    };
    let v = base + e.offset;
    if !(0..=0xFF).contains(&v) {
        return Err(AsmError::Range {
            line,
            msg: format!("value {v:#x} does not fit in a byte"),
        });
    }
    Ok(v as u8)
}

fn reg(line: usize, s: &str) -> Result<Gpr, AsmError> {
    reg_opt(s, true).ok_or_else(|| AsmError::Syntax {
        line,
        msg: format!("expected a register, found `{s}`"),
    })
}

fn reg_opt(s: &str, allow_sp: bool) -> Option<Gpr> {
    let s = s.trim().trim_start_matches('(').trim_end_matches(')');
    match s.to_lowercase().as_str() {
        "r0" => Some(Gpr::R0),
        "r1" => Some(Gpr::R1),
        "r2" => Some(Gpr::R2),
        "r3" => Some(Gpr::R3),
        "sp" if allow_sp => Some(Gpr::Sp),
        _ => None,
    }
}

fn ureg(line: usize, s: &str) -> Result<UserReg, AsmError> {
    match s.trim().to_lowercase().as_str() {
        "upc" => Ok(UserReg::Upc),
        "usp" => Ok(UserReg::Usp),
        "uflags" => Ok(UserReg::Uflags),
        other => Err(AsmError::Syntax {
            line,
            msg: format!("expected upc/usp/uflags, found `{other}`"),
        }),
    }
}

fn emit(lines: &[Line], syms: &Symbols) -> Result<MachineImage, AsmError> {
    let mut bytes: Vec<u8> = Vec::new();
    let mut lc: u16 = syms.origin as u16;
    let mut entries: BTreeMap<&str, u8> = BTreeMap::new();
    let table = &syms.table;

    let pad_to = |bytes: &mut Vec<u8>, lc: u16, target: u16| {
        for _ in lc..target {
            bytes.push(0);
        }
    };

    for line in lines {
        let no = line.no;
        match &line.stmt {
            Stmt::Label(_) | Stmt::Equ(..) => {}
            Stmt::Org(e) => {
                let target = eval(no, e, table)? as u16;
                pad_to(&mut bytes, lc, target);
                lc = lc.max(target);
            }
            Stmt::Entry(which, e) => {
                let v = eval(no, e, table)?;
                match which.as_str() {
                    "reset" | "syscall" | "timer" => {
                        entries.insert(
                            match which.as_str() {
                                "reset" => "reset",
                                "syscall" => "syscall",
                                _ => "timer",
                            },
                            v,
                        );
                    }
                    other => {
                        return Err(AsmError::Syntax {
                            line: no,
                            msg: format!("unknown entry point `{other}`"),
                        })
                    }
                }
            }
            Stmt::Bytes(exprs) => {
                for e in exprs {
                    bytes.push(eval(no, e, table)?);
                }
                lc += exprs.len() as u16;
            }
            Stmt::Ins(m, ops) => {
                let ins = encode_statement(no, m, ops, table)?;
                bytes.extend_from_slice(&encode(ins));
                lc += 2;
            }
        }
    }

    let origin = syms.origin;
    let default = origin;
    Ok(MachineImage {
        origin,
        bytes,
        entries: EntryPoints {
            reset: *entries.get("reset").unwrap_or(&default),
            syscall: *entries.get("syscall").unwrap_or(&default),
            timer: *entries.get("timer").unwrap_or(&default),
        },
        symbols: table.clone(),
    })
}

fn encode_statement(
    no: usize,
    m: &str,
    ops: &[String],
    table: &BTreeMap<String, u8>,
) -> Result<Instruction, AsmError> {
    let argc = |n: usize| -> Result<(), AsmError> {
        if ops.len() != n {
            Err(AsmError::Syntax {
                line: no,
                msg: format!("`{m}` takes {n} operand(s), found {}", ops.len()),
            })
        } else {
            Ok(())
        }
    };
    let value = |s: &str| eval(no, &parse_expr(no, s)?, table);
    let alu = |op: AluOp| -> Result<Instruction, AsmError> {
        argc(2)?;
        let dst = reg(no, &ops[0])?;
        require_r03(no, dst)?;
        let rhs = match reg_opt(&ops[1], false) {
            Some(r) => Operand::Reg(r),
            None => Operand::Imm(value(&ops[1])?),
        };
        Ok(Instruction::Alu { op, dst, rhs })
    };
    let alu_imm = |op: AluOp| -> Result<Instruction, AsmError> {
        argc(2)?;
        let dst = reg(no, &ops[0])?;
        require_r03(no, dst)?;
        Ok(Instruction::Alu {
            op,
            dst,
            rhs: Operand::Imm(value(&ops[1])?),
        })
    };
    let ins = match m {
        "halt" => {
            argc(0)?;
            Instruction::Halt
        }
        "syscall" => {
            argc(0)?;
            Instruction::Syscall
        }
        "iret" => {
            argc(0)?;
            Instruction::Iret
        }
        "ret" => {
            argc(0)?;
            Instruction::Ret
        }
        "jmp.abs" | "jmp.ind" | "jmp" => {
            argc(1)?;
            match (m, reg_opt(&ops[0], false)) {
                ("jmp.abs", Some(_)) => {
                    return Err(AsmError::Syntax {
                        line: no,
                        msg: "jmp.abs takes an address, not a register".into(),
                    })
                }
                (_, Some(r)) if m != "jmp.abs" => Instruction::JmpInd { reg: r },
                ("jmp.ind", None) => {
                    return Err(AsmError::Syntax {
                        line: no,
                        msg: "jmp.ind takes a register".into(),
                    })
                }
                _ => Instruction::JmpAbs {
                    addr: value(&ops[0])?,
                },
            }
        }
        "call" => {
            argc(1)?;
            Instruction::Call {
                addr: value(&ops[0])?,
            }
        }
        "jeq" | "jne" | "jlt" | "jge" => {
            argc(1)?;
            let cond = match m {
                "jeq" => Cond::Eq,
                "jne" => Cond::Ne,
                "jlt" => Cond::Lt,
                _ => Cond::Ge,
            };
            Instruction::JCond {
                cond,
                addr: value(&ops[0])?,
            }
        }
        "load.imm" => {
            argc(2)?;
            Instruction::LoadImm {
                dst: reg(no, &ops[0])?,
                imm: value(&ops[1])?,
            }
        }
        "load.dir" => {
            argc(2)?;
            let dst = reg(no, &ops[0])?;
            require_r03(no, dst)?;
            Instruction::LoadDir {
                dst,
                addr: value(&ops[1])?,
            }
        }
        "load.ind" => {
            argc(2)?;
            let dst = reg(no, &ops[0])?;
            require_r03(no, dst)?;
            let src = reg(no, &ops[1])?;
            require_r03(no, src)?;
            Instruction::LoadInd {
                dst,
                addr_reg: src,
            }
        }
        "store.dir" => {
            argc(2)?;
            let src = reg(no, &ops[1])?;
            require_r03(no, src)?;
            Instruction::StoreDir {
                addr: value(&ops[0])?,
                src,
            }
        }
        "store.ind" => {
            argc(2)?;
            let a = reg(no, &ops[0])?;
            let src = reg(no, &ops[1])?;
            require_r03(no, a)?;
            require_r03(no, src)?;
            Instruction::StoreInd { addr_reg: a, src }
        }
        "mov" => {
            argc(2)?;
            Instruction::Mov {
                dst: reg(no, &ops[0])?,
                src: reg(no, &ops[1])?,
            }
        }
        "add" => alu(AluOp::Add)?,
        "sub" => alu(AluOp::Sub)?,
        "and" => alu(AluOp::And)?,
        "or" => alu(AluOp::Or)?,
        "xor" => alu(AluOp::Xor)?,
        "cmp" => alu(AluOp::Cmp)?,
        "div" => alu(AluOp::Div)?,
        "shl" => alu_imm(AluOp::Shl)?,
        "shr" => alu_imm(AluOp::Shr)?,
        "wrmpu1" | "wrmpu2" | "wruflags" => {
            argc(1)?;
            let src = reg(no, &ops[0])?;
            require_r03(no, src)?;
            match m {
                "wrmpu1" => Instruction::WrMpu1 { src },
                "wrmpu2" => Instruction::WrMpu2 { src },
                _ => Instruction::WrUflags { src },
            }
        }
        "rdureg" => {
            argc(2)?;
            let dst = reg(no, &ops[0])?;
            require_r03(no, dst)?;
            Instruction::RdUreg {
                dst,
                ureg: ureg(no, &ops[1])?,
            }
        }
        "wrureg" => {
            argc(2)?;
            let src = reg(no, &ops[1])?;
            require_r03(no, src)?;
            Instruction::WrUreg {
                ureg: ureg(no, &ops[0])?,
                src,
            }
        }
        other => {
            return Err(AsmError::UnknownMnemonic {
                line: no,
                mnemonic: other.to_string(),
            })
        }
    };
    Ok(ins)
}

fn require_r03(no: usize, g: Gpr) -> Result<(), AsmError> {
    if g == Gpr::Sp {
        Err(AsmError::Syntax {
            line: no,
            msg: "sp is not encodable here (only r0-r3)".into(),
        })
    } else {
        Ok(())
    }
}
