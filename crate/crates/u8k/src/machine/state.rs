//! Concrete execution of a loaded u8k system.
//!
//! The machine has two register banks sharing R0-R3: the kernel bank
//! (`PC`/`SP`/`FLAGS`) and the user bank (`UPC`/`USP`/`UFLAGS`). `mode`
//! selects which bank drives fetch and stack operations. Privilege is
//! not the mode: it is bit 7 of the *live* flags byte, so a user thread
//! whose saved flags ever gain bit 7 runs privileged — exactly the
//! situation the analyzer must prove impossible.
//!
//! Unprivileged accesses (fetch, load, store, stack) must be granted by
//! one of the two MPU segments. A segment register holds the address of
//! a 2-byte descriptor in memory: `base = mem[d]`, `sr = mem[d+1]`; the
//! segment spans `base ..= base + (sr & 0x0F)` computed without
//! wrap-around, and bit 7 of `sr` marks it read-only.

use super::image::EntryPoints;
use super::isa::{self, AluOp, Gpr, Instruction, Operand, Register};

/// Which register bank is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Kernel,
    User,
}

/// Hardware faults. A fault stops the machine permanently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    /// Undecodable instruction bytes, or `SYSCALL` issued in kernel mode.
    IllegalOpcode,
    /// Privileged instruction executed with the live privilege bit clear.
    Privilege,
    /// Unprivileged access outside every granted MPU segment, or a write
    /// into a read-only segment.
    MemoryProtection,
    /// Divisor was zero.
    DivByZero,
}

/// What a single [`ConcreteState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Executed(Instruction),
    Halted,
    Faulted(FaultKind),
    /// The machine was already halted or faulted.
    Stopped,
}

/// Full machine state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteState {
    pub mem: [u8; 256],
    regs: [u8; 12],
    pub mode: Mode,
    pub halted: bool,
    pub fault: Option<FaultKind>,
    pub vectors: EntryPoints,
}

/// True when `addr` lies inside the segment described at `desc_addr` and
/// the access kind is permitted. The upper bound is computed in 16 bits,
/// so a segment never wraps past 0xFF.
pub fn segment_grants(mem: &[u8; 256], desc_addr: u8, addr: u8, write: bool) -> bool {
    let base = mem[desc_addr as usize] as u16;
    let sr = mem[desc_addr.wrapping_add(1) as usize];
    let limit = base + (sr & 0x0F) as u16;
    let read_only = sr & 0x80 != 0;
    let a = addr as u16;
    a >= base && a <= limit && !(write && read_only)
}

impl ConcreteState {
    /// Power-on state: kernel mode, all registers zero except
    /// `FLAGS = 0x80`, control at the reset entry.
    pub fn new(mem: [u8; 256], vectors: EntryPoints) -> ConcreteState {
        let mut s = ConcreteState {
            mem,
            regs: [0; 12],
            mode: Mode::Kernel,
            halted: false,
            fault: None,
            vectors,
        };
        s.set_reg(Register::Flags, isa::FLAG_PRIVILEGED);
        s.set_reg(Register::Pc, vectors.reset);
        s
    }

    pub fn reg(&self, r: Register) -> u8 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Register, v: u8) {
        self.regs[r.index()] = v;
    }

    /// The bank-selected program counter register.
    fn pc_reg(&self) -> Register {
        match self.mode {
            Mode::Kernel => Register::Pc,
            Mode::User => Register::Upc,
        }
    }

    fn sp_reg(&self) -> Register {
        match self.mode {
            Mode::Kernel => Register::Sp,
            Mode::User => Register::Usp,
        }
    }

    fn flags_reg(&self) -> Register {
        match self.mode {
            Mode::Kernel => Register::Flags,
            Mode::User => Register::Uflags,
        }
    }

    pub fn live_pc(&self) -> u8 {
        self.reg(self.pc_reg())
    }

    pub fn live_flags(&self) -> u8 {
        self.reg(self.flags_reg())
    }

    /// Bit 7 of the live flags byte.
    pub fn privileged(&self) -> bool {
        self.live_flags() & isa::FLAG_PRIVILEGED != 0
    }

    pub fn running(&self) -> bool {
        !self.halted && self.fault.is_none()
    }

    /// Resolve a `Gpr` operand against the live bank (`SP` maps to `USP`
    /// in user mode).
    fn gpr_register(&self, g: Gpr) -> Register {
        match g {
            Gpr::Sp => self.sp_reg(),
            other => other.register(),
        }
    }

    fn read_gpr(&self, g: Gpr) -> u8 {
        self.reg(self.gpr_register(g))
    }

    fn write_gpr(&mut self, g: Gpr, v: u8) {
        self.set_reg(self.gpr_register(g), v);
    }

    fn mpu_grants(&self, addr: u8, write: bool) -> bool {
        segment_grants(&self.mem, self.reg(Register::Mpu1), addr, write)
            || segment_grants(&self.mem, self.reg(Register::Mpu2), addr, write)
    }

    fn fault(&mut self, kind: FaultKind) -> StepEvent {
        self.fault = Some(kind);
        StepEvent::Faulted(kind)
    }

    fn checked_read(&mut self, addr: u8) -> Result<u8, FaultKind> {
        if !self.privileged() && !self.mpu_grants(addr, false) {
            return Err(FaultKind::MemoryProtection);
        }
        Ok(self.mem[addr as usize])
    }

    fn checked_write(&mut self, addr: u8, v: u8) -> Result<(), FaultKind> {
        if !self.privileged() && !self.mpu_grants(addr, true) {
            return Err(FaultKind::MemoryProtection);
        }
        self.mem[addr as usize] = v;
        Ok(())
    }

    /// Deliver a timer interrupt. Hardware only raises it between
    /// instructions while in user mode; callers must respect that.
    pub fn deliver_timer(&mut self) {
        debug_assert_eq!(self.mode, Mode::User);
        self.mode = Mode::Kernel;
        self.set_reg(Register::Pc, self.vectors.timer);
        self.set_reg(Register::Flags, isa::FLAG_PRIVILEGED);
    }

    /// Execute one instruction at the live program counter.
    pub fn step(&mut self) -> StepEvent {
        if !self.running() {
            return StepEvent::Stopped;
        }
        let pc = self.live_pc();
        if !self.privileged() {
            let ok = self.mpu_grants(pc, false) && self.mpu_grants(pc.wrapping_add(1), false);
            if !ok {
                return self.fault(FaultKind::MemoryProtection);
            }
        }
        let b0 = self.mem[pc as usize];
        let b1 = self.mem[pc.wrapping_add(1) as usize];
        let ins = match isa::decode(pc, b0, b1) {
            Ok(i) => i,
            Err(_) => return self.fault(FaultKind::IllegalOpcode),
        };
        if ins.privileged() && !self.privileged() {
            return self.fault(FaultKind::Privilege);
        }
        let next = pc.wrapping_add(2);
        let mut goto = next;
        match ins {
            Instruction::Halt => {
                self.halted = true;
                self.set_reg(self.pc_reg(), next);
                return StepEvent::Halted;
            }
            Instruction::Syscall => {
                if self.mode == Mode::Kernel {
                    return self.fault(FaultKind::IllegalOpcode);
                }
                self.set_reg(Register::Upc, next);
                self.mode = Mode::Kernel;
                self.set_reg(Register::Pc, self.vectors.syscall);
                self.set_reg(Register::Flags, isa::FLAG_PRIVILEGED);
                return StepEvent::Executed(ins);
            }
            Instruction::Iret => {
                self.set_reg(Register::Pc, next);
                self.mode = Mode::User;
                return StepEvent::Executed(ins);
            }
            Instruction::Ret => {
                let sp = self.reg(self.sp_reg());
                match self.checked_read(sp) {
                    Ok(v) => goto = v,
                    Err(f) => return self.fault(f),
                }
                self.set_reg(self.sp_reg(), sp.wrapping_add(1));
            }
            Instruction::JmpAbs { addr } => goto = addr,
            Instruction::Call { addr } => {
                let sp = self.reg(self.sp_reg()).wrapping_sub(1);
                if let Err(f) = self.checked_write(sp, next) {
                    return self.fault(f);
                }
                self.set_reg(self.sp_reg(), sp);
                goto = addr;
            }
            Instruction::JmpInd { reg } => goto = self.read_gpr(reg),
            Instruction::WrMpu1 { src } => {
                let v = self.read_gpr(src);
                self.set_reg(Register::Mpu1, v);
            }
            Instruction::WrMpu2 { src } => {
                let v = self.read_gpr(src);
                self.set_reg(Register::Mpu2, v);
            }
            Instruction::WrUflags { src } => {
                let v = self.read_gpr(src);
                self.set_reg(Register::Uflags, v);
            }
            Instruction::RdUreg { dst, ureg } => {
                let v = self.reg(ureg.register());
                self.write_gpr(dst, v);
            }
            Instruction::WrUreg { ureg, src } => {
                let v = self.read_gpr(src);
                self.set_reg(ureg.register(), v);
            }
            Instruction::JCond { cond, addr } => {
                if cond.holds(self.live_flags()) {
                    goto = addr;
                }
            }
            Instruction::LoadImm { dst, imm } => self.write_gpr(dst, imm),
            Instruction::LoadDir { dst, addr } => match self.checked_read(addr) {
                Ok(v) => self.write_gpr(dst, v),
                Err(f) => return self.fault(f),
            },
            Instruction::LoadInd { dst, addr_reg } => {
                let addr = self.read_gpr(addr_reg);
                match self.checked_read(addr) {
                    Ok(v) => self.write_gpr(dst, v),
                    Err(f) => return self.fault(f),
                }
            }
            Instruction::StoreDir { addr, src } => {
                let v = self.read_gpr(src);
                if let Err(f) = self.checked_write(addr, v) {
                    return self.fault(f);
                }
            }
            Instruction::StoreInd { addr_reg, src } => {
                let addr = self.read_gpr(addr_reg);
                let v = self.read_gpr(src);
                if let Err(f) = self.checked_write(addr, v) {
                    return self.fault(f);
                }
            }
            Instruction::Mov { dst, src } => {
                let v = self.read_gpr(src);
                self.write_gpr(dst, v);
            }
            Instruction::Alu { op, dst, rhs } => {
                let a = self.read_gpr(dst);
                let b = match rhs {
                    Operand::Reg(r) => self.read_gpr(r),
                    Operand::Imm(v) => v,
                };
                match op {
                    AluOp::Cmp => {
                        let flags = self.live_flags() & !(isa::FLAG_Z | isa::FLAG_LT);
                        let mut bits = 0;
                        if a == b {
                            bits |= isa::FLAG_Z;
                        }
                        if a < b {
                            bits |= isa::FLAG_LT;
                        }
                        let fr = self.flags_reg();
                        self.set_reg(fr, flags | bits);
                    }
                    AluOp::Div if b == 0 => return self.fault(FaultKind::DivByZero),
                    _ => {
                        let v = alu_eval(op, a, b);
                        self.write_gpr(dst, v);
                    }
                }
            }
        }
        self.set_reg(self.pc_reg(), goto);
        StepEvent::Executed(ins)
    }
}

/// Concrete ALU semantics shared with the abstract transfer's exact
/// enumeration path. `Div` with `b == 0` and `Cmp` are handled by
/// callers; this function only covers the plain value-producing cases.
pub fn alu_eval(op: AluOp, a: u8, b: u8) -> u8 {
    match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::And => a & b,
        AluOp::Or => a | b,
        AluOp::Xor => a ^ b,
        AluOp::Shl => {
            if b >= 8 {
                0
            } else {
                a << b
            }
        }
        AluOp::Shr => {
            if b >= 8 {
                0
            } else {
                a >> b
            }
        }
        AluOp::Div => {
            debug_assert!(b != 0);
            a / b
        }
        AluOp::Cmp => unreachable!("cmp handled by callers"),
    }
}
