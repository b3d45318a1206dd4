//! Verification drivers: the three analysis modes, the two property
//! verdicts, and the canonical invariant rendering.
//!
//! * **In-context** analyzes the kernel together with the concrete user
//!   image it ships with, from the concrete reset state.
//! * **Parameterized** replaces the user space with its typed shape and
//!   proves the kernel for every image satisfying the annotations; the
//!   shipped image is only checked to be a member of that family (the
//!   base case).
//! * **Boot-diff** splits the kernel at a declared exitpoint: the boot
//!   prefix is analyzed in context, the typed invariant is established
//!   at the exitpoint by discovery over the boot result, and the
//!   runtime suffix is analyzed parameterized from there.

use std::collections::BTreeMap;
use std::fmt;

use crate::analysis::engine::{analyze, AnalysisSettings, TypedView};
use crate::analysis::{AbstractState, Alarm, AlarmKind, AnalysisResult};
use crate::domains::shape::interp::discover_regions;
use crate::domains::shape::parse::{parse_annotations, AnnotError, Annotations};
use crate::domains::shape::{Bindings, ExitPoint, Label, Region, TypeEnv, TypedValue};
use crate::domains::memory::typed_load;
use crate::domains::AbstractValue;
use crate::machine::image::{load_images, ImageError, MachineImage};
use crate::machine::isa::Register;

/// Why a property could not be proved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Judgment {
    Proved,
    NotProved { reason: String },
}

impl Judgment {
    pub fn proved(&self) -> bool {
        matches!(self, Judgment::Proved)
    }
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Judgment::Proved => f.write_str("proved"),
            Judgment::NotProved { reason } => write!(f, "not proved: {reason}"),
        }
    }
}

/// Outcome of one verification run.
#[derive(Debug)]
pub struct Verification {
    pub result: AnalysisResult,
    /// Absence of runtime errors in kernel code.
    pub arte: Judgment,
    /// Absence of privilege escalation by user code.
    pub ape: Judgment,
    /// Canonical rendering of the kernel-exit invariant.
    pub invariant: String,
}

#[derive(Debug)]
pub enum VerifyError {
    Image(ImageError),
    Annotation(AnnotError),
    /// The boot-diff mode needs an exitpoint; none was declared.
    MissingExitpoint,
    /// The annotations name an exitpoint symbol absent from the kernel.
    UnknownExitSymbol(String),
    /// Plain parameterized mode was given boot-phase annotations.
    UnexpectedExitpoint,
    /// A declared region's type cannot be sized or projected.
    BadRegion(String),
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyError::Image(e) => write!(f, "{e}"),
            VerifyError::Annotation(e) => write!(f, "annotation line {}: {}", e.line, e.msg),
            VerifyError::MissingExitpoint => {
                f.write_str("boot-diff mode needs an exitpoint (annotation or --exitpoint)")
            }
            VerifyError::UnknownExitSymbol(s) => {
                write!(f, "exitpoint symbol `{s}` is not defined by the kernel image")
            }
            VerifyError::UnexpectedExitpoint => f.write_str(
                "the annotations declare an exitpoint; use the boot-diff mode to honor it",
            ),
            VerifyError::BadRegion(m) => write!(f, "bad region declaration: {m}"),
        }
    }
}

impl std::error::Error for VerifyError {}

impl From<ImageError> for VerifyError {
    fn from(e: ImageError) -> Self {
        VerifyError::Image(e)
    }
}

impl From<AnnotError> for VerifyError {
    fn from(e: AnnotError) -> Self {
        VerifyError::Annotation(e)
    }
}

/// Fully automatic analysis of the loaded system from its reset state.
pub fn verify_in_context(
    kernel: &MachineImage,
    user: &MachineImage,
    settings: &AnalysisSettings,
) -> Result<Verification, VerifyError> {
    let mem = load_images(kernel, user)?;
    let seed = AbstractState::concrete_boot(&mem);
    let result = analyze(kernel, kernel.entries.reset, seed, None, settings);
    Ok(conclude(result, None))
}

/// Annotation-driven analysis: prove the kernel for every user space
/// satisfying `annotations`, then check the shipped image is one.
pub fn verify_parameterized(
    kernel: &MachineImage,
    user: &MachineImage,
    annotations: &str,
    settings: &AnalysisSettings,
) -> Result<Verification, VerifyError> {
    let ann = parse_annotations(annotations)?;
    if ann.exitpoint.is_some() {
        return Err(VerifyError::UnexpectedExitpoint);
    }
    let mut result = run_parameterized_core(kernel, &ann, settings)?;

    // Base case: the shipped concrete image must satisfy the
    // annotations the proof assumed.
    let mem = load_images(kernel, user)?;
    let read = move |a: u8| Some(mem[a as usize]);
    let disc = discover_regions(&ann.env, &ann.regions, kernel.end(), &read);
    graft_base_case(&mut result, &disc.violations);
    Ok(conclude(result, Some(&ann.env)))
}

/// The parameterized fixpoint itself, with unbound parameters; no base
/// case, no user image. Exposed for benchmarking, where the family is
/// analyzed once regardless of the member.
pub fn run_parameterized_core(
    kernel: &MachineImage,
    ann: &Annotations,
    settings: &AnalysisSettings,
) -> Result<AnalysisResult, VerifyError> {
    let bindings = Bindings::new();
    let labels = expand_regions(&ann.env, &bindings, &ann.regions)?;
    let mut seed = AbstractState::all_top();
    for r in Register::ALL {
        seed.set_reg(r, AbstractValue::singleton(0));
    }
    seed.set_reg(Register::Pc, AbstractValue::top());
    seed.set_reg(Register::Flags, AbstractValue::singleton(0x80));
    for (i, &b) in kernel.bytes.iter().enumerate() {
        seed.mem
            .set(kernel.origin.wrapping_add(i as u8), AbstractValue::singleton(b));
    }
    for (&addr, &label) in &labels {
        seed.mem.set(addr, typed_seed(&ann.env, &bindings, label)?);
    }
    let view = TypedView {
        env: &ann.env,
        bindings: &bindings,
        region_labels: &labels,
    };
    Ok(analyze(
        kernel,
        kernel.entries.reset,
        seed,
        Some(view),
        settings,
    ))
}

/// Two-phase analysis for kernels that establish the typed invariant
/// during boot instead of assuming it at reset.
pub fn verify_bootdiff(
    kernel: &MachineImage,
    user: &MachineImage,
    annotations: &str,
    exitpoint: Option<ExitPoint>,
    settings: &AnalysisSettings,
) -> Result<Verification, VerifyError> {
    let ann = parse_annotations(annotations)?;
    let exit = match exitpoint.or(ann.exitpoint.clone()) {
        Some(e) => e,
        None => return Err(VerifyError::MissingExitpoint),
    };
    let exit_addr = match exit {
        ExitPoint::Addr(a) => a,
        ExitPoint::Symbol(s) => kernel
            .resolve(&s)
            .ok_or(VerifyError::UnknownExitSymbol(s))?,
    };

    // Phase A: concrete boot, stopped at the exitpoint.
    let mem = load_images(kernel, user)?;
    let seed = AbstractState::concrete_boot(&mem);
    let mut boot_settings = settings.clone();
    boot_settings.stop_addrs.insert(exit_addr);
    let boot = analyze(kernel, kernel.entries.reset, seed, None, &boot_settings);

    let Some(at_exit) = boot.stop_states.get(&exit_addr).cloned() else {
        // The boot phase provably never reaches its declared exitpoint;
        // nothing to hand the runtime phase.
        let mut result = boot;
        result
            .alarms
            .push(Alarm {
                kind: AlarmKind::BaseCaseViolation,
                addr: exit_addr,
                message: "the boot phase never reaches the declared exitpoint".into(),
            });
        return Ok(conclude(result, Some(&ann.env)));
    };

    // Discovery over the boot result establishes the base case and
    // binds the parameters the runtime phase may rely on.
    let read = |a: u8| at_exit.mem.get(a).as_num().and_then(|v| v.as_singleton());
    let disc = discover_regions(&ann.env, &ann.regions, kernel.end(), &read);

    // Phase B: from the exitpoint, with every labeled cell weakened to
    // its typed interpretation so the invariant is what boot proved,
    // not the particular image.
    let mut seed = at_exit;
    for (&addr, &label) in &disc.labeling.labels {
        seed.mem
            .set(addr, typed_seed(&ann.env, &disc.bindings, label)?);
    }
    let view = TypedView {
        env: &ann.env,
        bindings: &disc.bindings,
        region_labels: &disc.labeling.labels,
    };
    let mut result = analyze(kernel, exit_addr, seed, Some(view), settings);

    merge_boot(&mut result, boot);
    graft_base_case(&mut result, &disc.violations);
    Ok(conclude(result, Some(&ann.env)))
}

/// Value a labeled cell is assumed to hold: the interpretation of its
/// label's byte type.
fn typed_seed(env: &TypeEnv, bindings: &Bindings, label: Label) -> Result<AbstractValue, VerifyError> {
    let probe = TypedValue::PointerTo {
        target: label.ty,
        off: label.off,
        nullable: false,
    };
    match typed_load(env, bindings, &probe) {
        Ok(acc) => Ok(acc.value),
        Err(_) => Err(VerifyError::BadRegion(format!(
            "{} has no byte at offset {}",
            env.display_type(label.ty),
            label.off
        ))),
    }
}

/// Expand declared regions into one label per byte.
fn expand_regions(
    env: &TypeEnv,
    bindings: &Bindings,
    regions: &[Region],
) -> Result<BTreeMap<u8, Label>, VerifyError> {
    let mut labels = BTreeMap::new();
    for r in regions {
        let Some(size) = env.sizeof(bindings, r.ty) else {
            return Err(VerifyError::BadRegion(format!(
                "cannot size region {} of type {} without bindings",
                r.name,
                env.display_type(r.ty)
            )));
        };
        for off in 0..size {
            let addr = r.addr.wrapping_add(off as u8);
            labels.insert(addr, Label { ty: r.ty, off });
        }
    }
    Ok(labels)
}

fn graft_base_case(result: &mut AnalysisResult, violations: &[crate::domains::shape::interp::Violation]) {
    for v in violations {
        result.alarms.push(Alarm {
            kind: AlarmKind::BaseCaseViolation,
            addr: v.addr,
            message: v.msg.clone(),
        });
    }
    result.alarms.sort_by_key(|a| (a.kind, a.addr));
}

/// Fold the boot phase's findings into the runtime result: alarms
/// accumulate, robustness flags weaken together.
fn merge_boot(result: &mut AnalysisResult, boot: AnalysisResult) {
    result.alarms.extend(boot.alarms);
    result.alarms.sort_by_key(|a| (a.kind, a.addr));
    result.alarms.dedup_by(|a, b| a.kind == b.kind && a.addr == b.addr);
    result.control_lost |= boot.control_lost;
    result.code_clobbered |= boot.code_clobbered;
    result.complete &= boot.complete;
    result.inductive &= boot.inductive;
    result.pops += boot.pops;
}

/// Judge a finished analysis and render its invariant.
pub fn conclude(result: AnalysisResult, env: Option<&TypeEnv>) -> Verification {
    let arte = judge_arte(&result);
    let ape = judge_ape(&result);
    let invariant = render_invariant(&result, env);
    Verification {
        result,
        arte,
        ape,
        invariant,
    }
}

fn judge_arte(r: &AnalysisResult) -> Judgment {
    if let Some(a) = r.alarms.iter().find(|a| a.kind.runtime_error()) {
        return Judgment::NotProved {
            reason: a.to_string(),
        };
    }
    if !r.trustworthy() {
        return Judgment::NotProved {
            reason: "the analysis did not reach a stable fixpoint within budget".into(),
        };
    }
    Judgment::Proved
}

fn judge_ape(r: &AnalysisResult) -> Judgment {
    let first = |kind: AlarmKind| r.alarms.iter().find(|a| a.kind == kind);
    if let Some(a) = first(AlarmKind::PrivilegedExitUnproven) {
        return Judgment::NotProved {
            reason: format!("a kernel exit may hand privilege to user code ({a})"),
        };
    }
    if let Some(a) = first(AlarmKind::TypingViolationStore) {
        return Judgment::NotProved {
            reason: format!("the typing invariant is not preserved ({a})"),
        };
    }
    if let Some(a) = first(AlarmKind::BaseCaseViolation) {
        return Judgment::NotProved {
            reason: format!("the initial system does not satisfy the annotations ({a})"),
        };
    }
    if r.control_lost {
        return Judgment::NotProved {
            reason: "control over kernel execution was lost".into(),
        };
    }
    if !r.trustworthy() {
        return Judgment::NotProved {
            reason: "the analysis did not reach a stable fixpoint within budget".into(),
        };
    }
    if r.code_clobbered {
        return Judgment::NotProved {
            reason: "kernel code integrity could not be established, so the invariant is trivial"
                .into(),
        };
    }
    if let Some(inv) = &r.exit_invariant {
        let constrained = inv.regs.iter().any(|v| !v.is_top()) || inv.mem.tracked_len() > 0;
        if !constrained {
            return Judgment::NotProved {
                reason: "the kernel-exit invariant does not constrain the machine".into(),
            };
        }
    }
    Judgment::Proved
}

/// Deterministic, line-oriented rendering of the kernel-exit state:
/// one line per register, one per tracked memory cell.
pub fn render_invariant(r: &AnalysisResult, env: Option<&TypeEnv>) -> String {
    let Some(inv) = &r.exit_invariant else {
        return String::from("(no kernel exit reached)\n");
    };
    let mut out = String::new();
    for reg in Register::ALL {
        if reg == Register::Pc {
            continue;
        }
        out.push_str(&format!("reg {} = {}\n", reg, inv.reg(reg).display(env)));
    }
    for (addr, v) in inv.mem.tracked() {
        out.push_str(&format!("mem {:#04x} = {}\n", addr, v.display(env)));
    }
    out
}
