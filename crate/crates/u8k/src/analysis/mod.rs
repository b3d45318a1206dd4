//! Abstract interpretation of kernel code over the combined domain.
//!
//! The analysis walks the kernel text as a worklist fixpoint over
//! program points. A point is an address refined by a call string (so
//! procedures are analyzed per call site) and a loop-unroll index (so
//! the first iterations of a loop are kept apart before a widened
//! summary takes over). User-mode execution is never stepped: an `iret`
//! is an *empowered transition* that clobbers exactly the state a user
//! program could influence — its registers, and every memory cell one
//! of the MPU segments lets it write — and re-enters the kernel at the
//! syscall and timer vectors.

pub mod engine;

use std::collections::BTreeMap;

use crate::domains::memory::{AbsMemory, JoinCtx};
use crate::domains::value::BitvecAbs;
use crate::domains::AbstractValue;
use crate::machine::isa::Register;

/// Loop iterations kept apart before a point is summarized.
pub const UNROLL_CAP: u16 = 64;
/// Unroll index of a widened summary point.
pub const SUMMARY_UNROLL: u16 = u16::MAX;
/// Call strings longer than this raise an alarm (likely recursion).
pub const CALL_DEPTH_CAP: usize = 32;
/// Default worklist budget: analyses that pop more points than this
/// are reported incomplete instead of running away.
pub const DEFAULT_WORKLIST_BUDGET: u64 = 1_000_000;

/// One call-string entry: the call site and the unroll index it was
/// made at, so a return restores the caller's iteration context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Frame {
    pub site: u8,
    pub unroll: u16,
}

/// A program point: an address within a calling context and loop
/// iteration. States are kept per point and joined only when the
/// whole triple matches.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProgramPoint {
    pub addr: u8,
    pub ctx: Vec<Frame>,
    pub unroll: u16,
}

impl ProgramPoint {
    pub fn entry(addr: u8) -> ProgramPoint {
        ProgramPoint {
            addr,
            ctx: Vec::new(),
            unroll: 0,
        }
    }

    pub fn is_summary(&self) -> bool {
        self.unroll == SUMMARY_UNROLL
    }
}

impl std::fmt::Display for ProgramPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{:02x}", self.addr)?;
        if !self.ctx.is_empty() {
            let sites: Vec<String> = self
                .ctx
                .iter()
                .map(|fr| format!("0x{:02x}", fr.site))
                .collect();
            write!(f, " via {}", sites.join(","))?;
        }
        if self.is_summary() {
            write!(f, " (summary)")?;
        } else if self.unroll > 0 {
            write!(f, " (iter {})", self.unroll)?;
        }
        Ok(())
    }
}

/// Whether a loop head should be unrolled one more time or collapsed
/// into a widened summary, given the abstract trip count observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnrollDecision {
    Unroll(u16),
    Summarize,
}

/// Unrolling policy: a known small trip count is unrolled exactly,
/// anything unknown or beyond [`UNROLL_CAP`] is summarized.
pub fn unroll_policy(trip: &BitvecAbs) -> UnrollDecision {
    match trip.as_singleton() {
        Some(n) if u16::from(n) <= UNROLL_CAP => UnrollDecision::Unroll(u16::from(n)),
        _ => UnrollDecision::Summarize,
    }
}

/// Everything the analysis can complain about. The first block are
/// runtime errors (they refute "absence of runtime errors"); the rest
/// break the privilege argument or the typed invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AlarmKind {
    /// Control may reach a byte pair that does not decode, leave the
    /// kernel image, or fault on a privilege check.
    IllegalOpcodeSite,
    /// A division whose divisor may be zero.
    MaybeDivZero,
    /// An indirect jump or return whose target set cannot be bounded.
    UnresolvedJump,
    /// A store through an unknown address: all of memory is lost.
    WildStore,
    /// A store or user-mode grant may overwrite reachable kernel code.
    SelfModification,
    /// A dereference that may follow a null pointer.
    MaybeNullDeref,
    /// An `iret` whose saved user flags cannot be proven unprivileged.
    PrivilegedExitUnproven,
    /// A store into a typed cell whose value cannot be proven to fit.
    TypingViolationStore,
    /// The initial (or boot-exit) memory does not satisfy the
    /// declared region types.
    BaseCaseViolation,
}

impl AlarmKind {
    pub fn name(self) -> &'static str {
        match self {
            AlarmKind::IllegalOpcodeSite => "illegal-opcode-site",
            AlarmKind::MaybeDivZero => "maybe-div-zero",
            AlarmKind::UnresolvedJump => "unresolved-jump",
            AlarmKind::WildStore => "wild-store",
            AlarmKind::SelfModification => "self-modification",
            AlarmKind::MaybeNullDeref => "maybe-null-deref",
            AlarmKind::PrivilegedExitUnproven => "privileged-exit-unproven",
            AlarmKind::TypingViolationStore => "typing-violation-store",
            AlarmKind::BaseCaseViolation => "base-case-violation",
        }
    }

    /// Does this alarm refute the absence of runtime errors?
    pub fn runtime_error(self) -> bool {
        matches!(
            self,
            AlarmKind::IllegalOpcodeSite
                | AlarmKind::MaybeDivZero
                | AlarmKind::UnresolvedJump
                | AlarmKind::WildStore
                | AlarmKind::SelfModification
                | AlarmKind::MaybeNullDeref
        )
    }
}

/// An alarm at an address. Alarms are deduplicated per kind and
/// address; the message of the first occurrence is kept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub addr: u8,
    pub message: String,
}

impl std::fmt::Display for Alarm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} at 0x{:02x}: {}",
            self.kind.name(),
            self.addr,
            self.message
        )
    }
}

/// The per-point abstract machine state: one value per register plus
/// the memory. The PC slot is unused (the program point carries it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractState {
    pub regs: [AbstractValue; 12],
    pub mem: AbsMemory,
}

impl AbstractState {
    /// Everything unknown.
    pub fn all_top() -> AbstractState {
        AbstractState {
            regs: std::array::from_fn(|_| AbstractValue::top()),
            mem: AbsMemory::unknown(),
        }
    }

    /// The concrete reset state over a full memory image: registers
    /// zero, flags privileged, every cell pinned to its image byte.
    pub fn concrete_boot(mem: &[u8; 256]) -> AbstractState {
        let mut st = AbstractState {
            regs: std::array::from_fn(|_| AbstractValue::singleton(0)),
            mem: AbsMemory::from_concrete(mem),
        };
        st.set_reg(Register::Pc, AbstractValue::top());
        st.set_reg(Register::Flags, AbstractValue::singleton(0x80));
        st
    }

    pub fn reg(&self, r: Register) -> &AbstractValue {
        &self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Register, v: AbstractValue) {
        self.regs[r.index()] = v;
    }

    pub fn le(&self, other: &AbstractState, cx: JoinCtx) -> bool {
        self.regs
            .iter()
            .zip(&other.regs)
            .all(|(a, b)| a.le(b, cx.env, cx.bindings))
            && self.mem.le(&other.mem, cx)
    }

    pub fn join(&self, other: &AbstractState, cx: JoinCtx) -> AbstractState {
        AbstractState {
            regs: std::array::from_fn(|i| {
                self.regs[i].join(&other.regs[i], cx.env, cx.bindings, cx.k)
            }),
            mem: self.mem.join(&other.mem, cx),
        }
    }

    pub fn widen(&self, other: &AbstractState, cx: JoinCtx) -> AbstractState {
        AbstractState {
            regs: std::array::from_fn(|i| {
                self.regs[i].widen(&other.regs[i], cx.env, cx.bindings, cx.k)
            }),
            mem: self.mem.widen(&other.mem, cx),
        }
    }
}

/// Result of a kernel analysis.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    /// Final state per program point.
    pub states: BTreeMap<ProgramPoint, AbstractState>,
    /// States joined per address, across contexts and iterations.
    pub joined_by_addr: BTreeMap<u8, AbstractState>,
    /// Join of the states flowing into every `iret`: the state the
    /// kernel hands to user space, i.e. the runtime invariant.
    pub exit_invariant: Option<AbstractState>,
    /// States collected at requested stop addresses (boot-exit split).
    pub stop_states: BTreeMap<u8, AbstractState>,
    /// Deduplicated alarms in (kind, address) order.
    pub alarms: Vec<Alarm>,
    /// An indirect control transfer could not be resolved: whatever
    /// invariant remains does not constrain the machine.
    pub control_lost: bool,
    /// Reachable kernel code may have been overwritten.
    pub code_clobbered: bool,
    /// The worklist budget was not exhausted.
    pub complete: bool,
    /// The final states were re-checked to be closed under transfer.
    pub inductive: bool,
    /// Worklist pops consumed.
    pub pops: u64,
}

impl AnalysisResult {
    pub fn has_alarm(&self, kind: AlarmKind) -> bool {
        self.alarms.iter().any(|a| a.kind == kind)
    }

    /// Sound and complete enough to claim anything: the fixpoint
    /// closed, and its closure was verified.
    pub fn trustworthy(&self) -> bool {
        self.complete && self.inductive
    }
}
