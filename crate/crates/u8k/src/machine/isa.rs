//! Instruction set of the u8k machine.
//!
//! Every instruction occupies exactly two bytes. Byte 0 selects the
//! operation (high nibble = group, low nibble = minor code or register
//! field), byte 1 carries the operand (immediate, absolute address,
//! register code, or 0 when unused).
//!
//! Byte-0 map:
//!
//! ```text
//! 0x00 HALT        0x01 SYSCALL     0x02 IRET        0x03 RET
//! 0x04 JMP.abs a   0x05 CALL a      0x06 JMP.ind  (b1 = reg)
//! 0x07 WRMPU1      0x08 WRMPU2      0x09 WRUFLAGS (b1 = reg)
//! 0x0A RDUREG      0x0B WRUREG      (b1 = ureg<<4 | reg)
//! 0x10+c           JCOND  c in {0 eq, 1 ne, 2 lt, 3 ge}, b1 = addr
//! 0x20+d (d<=4)    LOAD.imm  Rd, imm          (d = 4 means SP)
//! 0x30+d (d<=3)    LOAD.dir  Rd, [addr]
//! 0x40+d (d<=3)    LOAD.ind  Rd, [Rs]         (b1 = s <= 3)
//! 0x50+s (s<=3)    STORE.dir [addr], Rs
//! 0x60+s (s<=3)    STORE.ind [Ra], Rs         (b1 = a <= 3)
//! 0x70+d (d<=4)    MOV Rd, Rs                 (b1 = s <= 4)
//! 0x80 ADD  0x90 SUB  0xA0 AND  0xB0 OR  0xC0 XOR:
//!                  +d      reg mode, b1 = s <= 3
//!                  +8+d    imm mode, b1 = imm
//! 0xD0+d SHL Rd, imm   0xD8+d SHR Rd, imm     (b1 = shift amount)
//! 0xE0+d CMP Rd, Rs    0xE8+d CMP Rd, imm
//! 0xF0+d DIV Rd, Rs    0xF8+d DIV Rd, imm
//! ```
//!
//! All remaining byte-0 values (including 0xFF) do not decode.

use std::fmt;

/// Machine registers. `Upc`/`Usp`/`Uflags` are the banked user context;
/// `Mpu1`/`Mpu2` each hold the address of a 2-byte segment descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Register {
    R0,
    R1,
    R2,
    R3,
    Sp,
    Pc,
    Flags,
    Upc,
    Usp,
    Uflags,
    Mpu1,
    Mpu2,
}

impl Register {
    pub const ALL: [Register; 12] = [
        Register::R0,
        Register::R1,
        Register::R2,
        Register::R3,
        Register::Sp,
        Register::Pc,
        Register::Flags,
        Register::Upc,
        Register::Usp,
        Register::Uflags,
        Register::Mpu1,
        Register::Mpu2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Register::R0 => "r0",
            Register::R1 => "r1",
            Register::R2 => "r2",
            Register::R3 => "r3",
            Register::Sp => "sp",
            Register::Pc => "pc",
            Register::Flags => "flags",
            Register::Upc => "upc",
            Register::Usp => "usp",
            Register::Uflags => "uflags",
            Register::Mpu1 => "mpu1",
            Register::Mpu2 => "mpu2",
        };
        f.write_str(s)
    }
}

/// General-purpose register operand (instruction-encodable registers).
/// `Sp` is only accepted where the encoding has room for code 4
/// (`LOAD.imm` destination and both `MOV` operands).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gpr {
    R0,
    R1,
    R2,
    R3,
    Sp,
}

impl Gpr {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8, allow_sp: bool) -> Option<Gpr> {
        match code {
            0 => Some(Gpr::R0),
            1 => Some(Gpr::R1),
            2 => Some(Gpr::R2),
            3 => Some(Gpr::R3),
            4 if allow_sp => Some(Gpr::Sp),
            _ => None,
        }
    }

    pub fn register(self) -> Register {
        match self {
            Gpr::R0 => Register::R0,
            Gpr::R1 => Register::R1,
            Gpr::R2 => Register::R2,
            Gpr::R3 => Register::R3,
            Gpr::Sp => Register::Sp,
        }
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.register())
    }
}

/// Banked user registers addressable by `RDUREG`/`WRUREG`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UserReg {
    Upc,
    Usp,
    Uflags,
}

impl UserReg {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<UserReg> {
        match code {
            0 => Some(UserReg::Upc),
            1 => Some(UserReg::Usp),
            2 => Some(UserReg::Uflags),
            _ => None,
        }
    }

    pub fn register(self) -> Register {
        match self {
            UserReg::Upc => Register::Upc,
            UserReg::Usp => Register::Usp,
            UserReg::Uflags => Register::Uflags,
        }
    }
}

impl fmt::Display for UserReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.register())
    }
}

/// Two-operand ALU operations. `Cmp` writes the Z/LT flag bits instead of
/// a destination register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Div,
    Cmp,
}

impl AluOp {
    pub const ALL: [AluOp; 9] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Shl,
        AluOp::Shr,
        AluOp::Div,
        AluOp::Cmp,
    ];
}

impl fmt::Display for AluOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
            AluOp::Div => "div",
            AluOp::Cmp => "cmp",
        };
        f.write_str(s)
    }
}

/// Branch conditions, testing the Z (bit 0) and LT (bit 1) flag bits set
/// by `CMP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl Cond {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Cond> {
        match code {
            0 => Some(Cond::Eq),
            1 => Some(Cond::Ne),
            2 => Some(Cond::Lt),
            3 => Some(Cond::Ge),
            _ => None,
        }
    }

    /// Decide the branch from a concrete flags byte.
    pub fn holds(self, flags: u8) -> bool {
        let z = flags & FLAG_Z != 0;
        let lt = flags & FLAG_LT != 0;
        match self {
            Cond::Eq => z,
            Cond::Ne => !z,
            Cond::Lt => lt,
            Cond::Ge => !lt,
        }
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
        };
        f.write_str(s)
    }
}

/// Right-hand operand of an ALU instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Gpr),
    Imm(u8),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{:#04x}", v),
        }
    }
}

/// Zero flag: set by `CMP a, b` when a == b.
pub const FLAG_Z: u8 = 0x01;
/// Less-than flag: set by `CMP a, b` when a < b (unsigned).
pub const FLAG_LT: u8 = 0x02;
/// Privilege bit of `FLAGS`/`UFLAGS`.
pub const FLAG_PRIVILEGED: u8 = 0x80;

/// A decoded u8k instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Halt,
    Syscall,
    Iret,
    Ret,
    JmpAbs { addr: u8 },
    Call { addr: u8 },
    JmpInd { reg: Gpr },
    WrMpu1 { src: Gpr },
    WrMpu2 { src: Gpr },
    WrUflags { src: Gpr },
    RdUreg { dst: Gpr, ureg: UserReg },
    WrUreg { ureg: UserReg, src: Gpr },
    JCond { cond: Cond, addr: u8 },
    LoadImm { dst: Gpr, imm: u8 },
    LoadDir { dst: Gpr, addr: u8 },
    LoadInd { dst: Gpr, addr_reg: Gpr },
    StoreDir { addr: u8, src: Gpr },
    StoreInd { addr_reg: Gpr, src: Gpr },
    Mov { dst: Gpr, src: Gpr },
    Alu { op: AluOp, dst: Gpr, rhs: Operand },
}

/// Why a 2-byte window failed to decode.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("undecodable instruction {byte0:#04x} {byte1:#04x} at {addr:#04x}")]
pub struct DecodeError {
    pub addr: u8,
    pub byte0: u8,
    pub byte1: u8,
}

fn gpr3(code: u8) -> Option<Gpr> {
    Gpr::from_code(code, false)
}

/// Decode the 2-byte window `[byte0, byte1]`. Total: every input either
/// decodes or yields a `DecodeError`; `addr` is carried for reporting only.
pub fn decode(addr: u8, byte0: u8, byte1: u8) -> Result<Instruction, DecodeError> {
    let err = || DecodeError { addr, byte0, byte1 };
    let lo = byte0 & 0x0F;
    let ins = match byte0 & 0xF0 {
        0x00 => match lo {
            0x0 => Instruction::Halt,
            0x1 => Instruction::Syscall,
            0x2 => Instruction::Iret,
            0x3 => Instruction::Ret,
            0x4 => Instruction::JmpAbs { addr: byte1 },
            0x5 => Instruction::Call { addr: byte1 },
            0x6 => Instruction::JmpInd {
                reg: gpr3(byte1).ok_or_else(err)?,
            },
            0x7 => Instruction::WrMpu1 {
                src: gpr3(byte1).ok_or_else(err)?,
            },
            0x8 => Instruction::WrMpu2 {
                src: gpr3(byte1).ok_or_else(err)?,
            },
            0x9 => Instruction::WrUflags {
                src: gpr3(byte1).ok_or_else(err)?,
            },
            0xA => Instruction::RdUreg {
                dst: gpr3(byte1 & 0x0F).ok_or_else(err)?,
                ureg: UserReg::from_code(byte1 >> 4).ok_or_else(err)?,
            },
            0xB => Instruction::WrUreg {
                ureg: UserReg::from_code(byte1 >> 4).ok_or_else(err)?,
                src: gpr3(byte1 & 0x0F).ok_or_else(err)?,
            },
            _ => return Err(err()),
        },
        0x10 => Instruction::JCond {
            cond: Cond::from_code(lo).ok_or_else(err)?,
            addr: byte1,
        },
        0x20 => Instruction::LoadImm {
            dst: Gpr::from_code(lo, true).ok_or_else(err)?,
            imm: byte1,
        },
        0x30 => Instruction::LoadDir {
            dst: gpr3(lo).ok_or_else(err)?,
            addr: byte1,
        },
        0x40 => Instruction::LoadInd {
            dst: gpr3(lo).ok_or_else(err)?,
            addr_reg: gpr3(byte1).ok_or_else(err)?,
        },
        0x50 => Instruction::StoreDir {
            addr: byte1,
            src: gpr3(lo).ok_or_else(err)?,
        },
        0x60 => Instruction::StoreInd {
            addr_reg: gpr3(byte1).ok_or_else(err)?,
            src: gpr3(lo).ok_or_else(err)?,
        },
        0x70 => Instruction::Mov {
            dst: Gpr::from_code(lo, true).ok_or_else(err)?,
            src: Gpr::from_code(byte1, true).ok_or_else(err)?,
        },
        g @ (0x80 | 0x90 | 0xA0 | 0xB0 | 0xC0) => {
            let op = match g {
                0x80 => AluOp::Add,
                0x90 => AluOp::Sub,
                0xA0 => AluOp::And,
                0xB0 => AluOp::Or,
                _ => AluOp::Xor,
            };
            let (dst, rhs) = alu_operands(lo, byte1).ok_or_else(err)?;
            Instruction::Alu { op, dst, rhs }
        }
        0xD0 => {
            // Shifts are immediate-only: low nibble 0..3 SHL, 8..11 SHR.
            let op = if lo & 0x08 == 0 { AluOp::Shl } else { AluOp::Shr };
            let dst = gpr3(lo & 0x07).ok_or_else(err)?;
            Instruction::Alu {
                op,
                dst,
                rhs: Operand::Imm(byte1),
            }
        }
        0xE0 => {
            let (dst, rhs) = alu_operands(lo, byte1).ok_or_else(err)?;
            Instruction::Alu {
                op: AluOp::Cmp,
                dst,
                rhs,
            }
        }
        0xF0 => {
            let (dst, rhs) = alu_operands(lo, byte1).ok_or_else(err)?;
            Instruction::Alu {
                op: AluOp::Div,
                dst,
                rhs,
            }
        }
        _ => return Err(err()),
    };
    Ok(ins)
}

fn alu_operands(lo: u8, byte1: u8) -> Option<(Gpr, Operand)> {
    if lo & 0x08 == 0 {
        Some((gpr3(lo & 0x07)?, Operand::Reg(gpr3(byte1)?)))
    } else {
        Some((gpr3(lo & 0x07)?, Operand::Imm(byte1)))
    }
}

/// Encode an instruction into its 2-byte form. Inverse of [`decode`] on
/// every value representable by the encoding.
pub fn encode(ins: Instruction) -> [u8; 2] {
    match ins {
        Instruction::Halt => [0x00, 0x00],
        Instruction::Syscall => [0x01, 0x00],
        Instruction::Iret => [0x02, 0x00],
        Instruction::Ret => [0x03, 0x00],
        Instruction::JmpAbs { addr } => [0x04, addr],
        Instruction::Call { addr } => [0x05, addr],
        Instruction::JmpInd { reg } => [0x06, reg.code()],
        Instruction::WrMpu1 { src } => [0x07, src.code()],
        Instruction::WrMpu2 { src } => [0x08, src.code()],
        Instruction::WrUflags { src } => [0x09, src.code()],
        Instruction::RdUreg { dst, ureg } => [0x0A, ureg.code() << 4 | dst.code()],
        Instruction::WrUreg { ureg, src } => [0x0B, ureg.code() << 4 | src.code()],
        Instruction::JCond { cond, addr } => [0x10 | cond.code(), addr],
        Instruction::LoadImm { dst, imm } => [0x20 | dst.code(), imm],
        Instruction::LoadDir { dst, addr } => [0x30 | dst.code(), addr],
        Instruction::LoadInd { dst, addr_reg } => [0x40 | dst.code(), addr_reg.code()],
        Instruction::StoreDir { addr, src } => [0x50 | src.code(), addr],
        Instruction::StoreInd { addr_reg, src } => [0x60 | src.code(), addr_reg.code()],
        Instruction::Mov { dst, src } => [0x70 | dst.code(), src.code()],
        Instruction::Alu { op, dst, rhs } => {
            let (mode_bit, b1) = match rhs {
                Operand::Reg(s) => (0x00, s.code()),
                Operand::Imm(v) => (0x08, v),
            };
            let group = match op {
                AluOp::Add => 0x80,
                AluOp::Sub => 0x90,
                AluOp::And => 0xA0,
                AluOp::Or => 0xB0,
                AluOp::Xor => 0xC0,
                AluOp::Shl => 0xD0,
                AluOp::Shr => 0xD0,
                AluOp::Cmp => 0xE0,
                AluOp::Div => 0xF0,
            };
            let mode_bit = match op {
                // Shifts reuse the mode bit to distinguish SHL/SHR.
                AluOp::Shl => 0x00,
                AluOp::Shr => 0x08,
                _ => mode_bit,
            };
            [group | mode_bit | dst.code(), b1]
        }
    }
}

impl Instruction {
    /// True for instructions that fault when executed with the live
    /// privilege bit clear.
    pub fn privileged(self) -> bool {
        matches!(
            self,
            Instruction::Iret
                | Instruction::WrMpu1 { .. }
                | Instruction::WrMpu2 { .. }
                | Instruction::WrUflags { .. }
                // Reading or writing the banked user context only makes
                // sense from kernel mode; allowing it unprivileged would
                // let user code flip its own saved privilege bit.
                | Instruction::RdUreg { .. }
                | Instruction::WrUreg { .. }
        )
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::Halt => write!(f, "halt"),
            Instruction::Syscall => write!(f, "syscall"),
            Instruction::Iret => write!(f, "iret"),
            Instruction::Ret => write!(f, "ret"),
            Instruction::JmpAbs { addr } => write!(f, "jmp.abs {addr:#04x}"),
            Instruction::Call { addr } => write!(f, "call {addr:#04x}"),
            Instruction::JmpInd { reg } => write!(f, "jmp.ind {reg}"),
            Instruction::WrMpu1 { src } => write!(f, "wrmpu1 {src}"),
            Instruction::WrMpu2 { src } => write!(f, "wrmpu2 {src}"),
            Instruction::WrUflags { src } => write!(f, "wruflags {src}"),
            Instruction::RdUreg { dst, ureg } => write!(f, "rdureg {dst}, {ureg}"),
            Instruction::WrUreg { ureg, src } => write!(f, "wrureg {ureg}, {src}"),
            Instruction::JCond { cond, addr } => write!(f, "j{cond} {addr:#04x}"),
            Instruction::LoadImm { dst, imm } => write!(f, "load.imm {dst}, {imm:#04x}"),
            Instruction::LoadDir { dst, addr } => write!(f, "load.dir {dst}, {addr:#04x}"),
            Instruction::LoadInd { dst, addr_reg } => write!(f, "load.ind {dst}, {addr_reg}"),
            Instruction::StoreDir { addr, src } => write!(f, "store.dir {addr:#04x}, {src}"),
            Instruction::StoreInd { addr_reg, src } => write!(f, "store.ind {addr_reg}, {src}"),
            Instruction::Mov { dst, src } => write!(f, "mov {dst}, {src}"),
            Instruction::Alu { op, dst, rhs } => write!(f, "{op} {dst}, {rhs}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_is_total() {
        // Every 2-byte window either decodes or errors; no panic.
        let mut ok = 0u32;
        for b0 in 0..=255u8 {
            for b1 in 0..=255u8 {
                if decode(0, b0, b1).is_ok() {
                    ok += 1;
                }
            }
        }
        assert!(ok > 0);
    }

    #[test]
    fn halt_is_all_zero() {
        assert_eq!(encode(Instruction::Halt), [0x00, 0x00]);
        assert_eq!(decode(0, 0x00, 0x00), Ok(Instruction::Halt));
    }

    #[test]
    fn opcode_ff_does_not_decode() {
        for b1 in 0..=255u8 {
            assert!(decode(0x10, 0xFF, b1).is_err());
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        for b0 in 0..=255u8 {
            for b1 in 0..=255u8 {
                if let Ok(ins) = decode(0, b0, b1) {
                    let [e0, e1] = encode(ins);
                    // Canonical: the encoding of a decoded instruction
                    // re-decodes to the same instruction.
                    assert_eq!(decode(0, e0, e1), Ok(ins), "{b0:#x} {b1:#x}");
                }
            }
        }
    }

    #[test]
    fn roundtrip_of_representative_instructions() {
        let samples = [
            Instruction::JmpInd { reg: Gpr::R2 },
            Instruction::LoadImm {
                dst: Gpr::Sp,
                imm: 0xA0,
            },
            Instruction::Alu {
                op: AluOp::Div,
                dst: Gpr::R1,
                rhs: Operand::Reg(Gpr::R0),
            },
            Instruction::Alu {
                op: AluOp::Shr,
                dst: Gpr::R3,
                rhs: Operand::Imm(7),
            },
            Instruction::WrUreg {
                ureg: UserReg::Uflags,
                src: Gpr::R1,
            },
            Instruction::JCond {
                cond: Cond::Ge,
                addr: 0x44,
            },
        ];
        for ins in samples {
            let [b0, b1] = encode(ins);
            assert_eq!(decode(0, b0, b1), Ok(ins));
        }
    }

    #[test]
    fn jmp_ind_r2_encoding() {
        assert_eq!(encode(Instruction::JmpInd { reg: Gpr::R2 }), [0x06, 0x02]);
    }

    #[test]
    fn privileged_set() {
        assert!(Instruction::Iret.privileged());
        assert!(Instruction::WrMpu1 { src: Gpr::R0 }.privileged());
        assert!(!Instruction::Syscall.privileged());
        assert!(!Instruction::Halt.privileged());
    }
}
