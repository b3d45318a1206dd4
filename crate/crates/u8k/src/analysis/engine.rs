//! The worklist engine: abstract transfer per instruction, the
//! empowered user transition at `iret`, widening with a descending
//! re-check, and the self-modification post-pass.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use crate::domains::memory::{
    typed_load, typed_store, value_subsumes, JoinCtx, StoreEffect, TypedAccessError,
};
use crate::domains::shape::interp::{byte_type, Leaf, PredScope};
use crate::domains::shape::{Atom, Bindings, CmpOp, ExprId, Label, Pred, TypeEnv, TypedValue};
use crate::domains::value::{transfer_alu, BitvecAbs, DEFAULT_VSET_LIMIT};
use crate::domains::AbstractValue;
use crate::machine::image::MachineImage;
use crate::machine::isa::{decode, AluOp, Gpr, Instruction, Operand, Register};

use super::{
    unroll_policy, AbstractState, Alarm, AlarmKind, AnalysisResult, Frame, ProgramPoint,
    UnrollDecision, CALL_DEPTH_CAP, DEFAULT_WORKLIST_BUDGET, SUMMARY_UNROLL,
};

/// Knobs of an analysis run.
#[derive(Debug, Clone)]
pub struct AnalysisSettings {
    /// Value-set size limit of the numeric domain.
    pub k: usize,
    /// Worklist pop budget; exceeding it reports an incomplete run.
    pub budget: u64,
    /// Addresses where propagation stops: incoming states are
    /// collected instead of transferred (boot/runtime split).
    pub stop_addrs: BTreeSet<u8>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            k: DEFAULT_VSET_LIMIT,
            budget: DEFAULT_WORKLIST_BUDGET,
            stop_addrs: BTreeSet::new(),
        }
    }
}

/// The typed view of memory for annotation-driven runs: the type
/// environment, parameter bindings (possibly empty), and the labels of
/// the cells the invariant tracks.
#[derive(Clone, Copy)]
pub struct TypedView<'a> {
    pub env: &'a TypeEnv,
    pub bindings: &'a Bindings,
    pub region_labels: &'a BTreeMap<u8, Label>,
}

/// Alarms, store footprints, and flags accumulated over one
/// evaluation of the transfer function.
struct Collected {
    alarms: BTreeMap<(AlarmKind, u8), String>,
    effects: Vec<(u8, StoreEffect)>,
    havocs: Vec<(u8, (u8, u8))>,
    control_lost: bool,
    code_clobbered: bool,
    stop_states: BTreeMap<u8, AbstractState>,
}

impl Collected {
    fn new() -> Collected {
        Collected {
            alarms: BTreeMap::new(),
            effects: Vec::new(),
            havocs: Vec::new(),
            control_lost: false,
            code_clobbered: false,
            stop_states: BTreeMap::new(),
        }
    }

    fn alarm(&mut self, kind: AlarmKind, addr: u8, message: String) {
        self.alarms.entry((kind, addr)).or_insert(message);
    }
}

/// How far user-mode stores can reach under the current MPU state.
enum UserReach {
    Everything,
    Ranges(Vec<(u8, u8)>),
}

/// Analyze kernel text from `seed_addr` in state `seed`. `typed` is
/// `None` for fully in-context runs and carries the annotations in
/// parameterized mode.
pub fn analyze(
    kernel: &MachineImage,
    seed_addr: u8,
    seed: AbstractState,
    typed: Option<TypedView<'_>>,
    settings: &AnalysisSettings,
) -> AnalysisResult {
    let empty = Bindings::new();
    let eng = Engine {
        kernel,
        typed,
        settings,
        seed_addr,
        seed,
        empty: &empty,
    };
    eng.run()
}

struct Engine<'a> {
    kernel: &'a MachineImage,
    typed: Option<TypedView<'a>>,
    settings: &'a AnalysisSettings,
    seed_addr: u8,
    seed: AbstractState,
    empty: &'a Bindings,
}

impl<'a> Engine<'a> {
    fn env(&self) -> Option<&'a TypeEnv> {
        self.typed.map(|t| t.env)
    }

    fn bindings(&self) -> &'a Bindings {
        self.typed.map_or(self.empty, |t| t.bindings)
    }

    fn cx(&self) -> JoinCtx<'a> {
        JoinCtx {
            env: self.env(),
            bindings: self.bindings(),
            k: self.settings.k,
        }
    }

    fn num(&self, v: &AbstractValue) -> BitvecAbs {
        v.to_num(self.env(), self.bindings())
    }

    fn text_lo(&self) -> u16 {
        u16::from(self.kernel.origin)
    }

    fn text_hi(&self) -> u16 {
        self.kernel.end()
    }

    /// Both bytes of an instruction window must lie in the image.
    fn in_text(&self, a: u8) -> bool {
        let x = u16::from(a);
        x >= self.text_lo() && x + 1 < self.text_hi()
    }

    fn decode_at(&self, addr: u8) -> Result<Instruction, String> {
        if !self.in_text(addr) {
            return Err(format!("control leaves the kernel image at 0x{addr:02x}"));
        }
        let i = (u16::from(addr) - self.text_lo()) as usize;
        decode(addr, self.kernel.bytes[i], self.kernel.bytes[i + 1]).map_err(|e| e.to_string())
    }

    fn run(&self) -> AnalysisResult {
        let cx = self.cx();
        let seed_pt = ProgramPoint::entry(self.seed_addr);
        let mut states: BTreeMap<ProgramPoint, AbstractState> = BTreeMap::new();
        states.insert(seed_pt.clone(), self.seed.clone());
        let mut worklist: BTreeSet<(Reverse<usize>, ProgramPoint)> = BTreeSet::new();
        worklist.insert((Reverse(0), seed_pt));

        let mut asc = Collected::new();
        let mut pops: u64 = 0;
        let mut complete = true;
        while let Some((_, pt)) = worklist.pop_first() {
            pops += 1;
            if pops > self.settings.budget {
                complete = false;
                break;
            }
            let st = states[&pt].clone();
            if self.settings.stop_addrs.contains(&pt.addr) {
                join_stop(&mut asc.stop_states, pt.addr, &st, cx);
                continue;
            }
            for (q, sq) in self.transfer(&pt, &st, &mut asc) {
                let depth = q.ctx.len();
                let updated = match states.get(&q) {
                    None => {
                        states.insert(q.clone(), sq);
                        true
                    }
                    Some(old) => {
                        let joined = old.join(&sq, cx);
                        let next = if q.is_summary() {
                            old.widen(&joined, cx)
                        } else {
                            joined
                        };
                        if next.le(old, cx) {
                            false
                        } else {
                            states.insert(q.clone(), next);
                            true
                        }
                    }
                };
                if updated {
                    worklist.insert((Reverse(depth), q));
                }
            }
        }

        // One descending pass undoes widening overshoot, then a second
        // evaluation certifies the result is closed under transfer.
        // Alarms are taken from the last evaluation so that spurious
        // ones at widened states do not survive narrowing.
        let (final_states, mut collected, inductive);
        if complete {
            let (n1, c1) = self.apply(&states);
            if le_map(&n1, &states, cx) {
                let (n2, c2) = self.apply(&n1);
                if le_map(&n2, &n1, cx) {
                    final_states = n1;
                    collected = c2;
                } else {
                    final_states = states;
                    collected = c1;
                }
                inductive = true;
            } else {
                final_states = states;
                collected = c1;
                inductive = false;
            }
        } else {
            final_states = states;
            collected = asc;
            inductive = false;
        }

        // Self-modification post-pass: the kernel's code bytes are the
        // instruction windows of every reached point (the image also
        // holds data cells, which are legitimately written). Any store
        // footprint or user-writable range that meets them is flagged;
        // a wild store already raised its own alarm.
        let text: BTreeSet<u8> = final_states
            .keys()
            .flat_map(|p| [p.addr, p.addr.wrapping_add(1)])
            .collect();
        let mut clobbers: Vec<(u8, &'static str)> = Vec::new();
        for (addr, eff) in &collected.effects {
            let hit = match eff {
                StoreEffect::Finite { addrs } => addrs.iter().any(|a| text.contains(a)),
                StoreEffect::RangeHavoc { lo, hi } => text.range(*lo..=*hi).next().is_some(),
                StoreEffect::Wild | StoreEffect::Unreachable => false,
            };
            if hit {
                clobbers.push((*addr, "a store may overwrite reachable kernel code"));
            }
        }
        for (addr, (lo, hi)) in &collected.havocs {
            if text.range(*lo..=*hi).next().is_some() {
                clobbers.push((*addr, "a user-writable segment covers reachable kernel code"));
            }
        }
        for (addr, msg) in clobbers {
            collected.alarm(AlarmKind::SelfModification, addr, msg.into());
            collected.code_clobbered = true;
        }

        let mut joined_by_addr: BTreeMap<u8, AbstractState> = BTreeMap::new();
        let mut exit_invariant: Option<AbstractState> = None;
        for (pt, st) in &final_states {
            joined_by_addr
                .entry(pt.addr)
                .and_modify(|acc| *acc = acc.join(st, cx))
                .or_insert_with(|| st.clone());
            if matches!(self.decode_at(pt.addr), Ok(Instruction::Iret))
                && !self.settings.stop_addrs.contains(&pt.addr)
            {
                exit_invariant = Some(match exit_invariant.take() {
                    None => st.clone(),
                    Some(acc) => acc.join(st, cx),
                });
            }
        }

        let alarms = collected
            .alarms
            .into_iter()
            .map(|((kind, addr), message)| Alarm {
                kind,
                addr,
                message,
            })
            .collect();
        AnalysisResult {
            states: final_states,
            joined_by_addr,
            exit_invariant,
            stop_states: collected.stop_states,
            alarms,
            control_lost: collected.control_lost,
            code_clobbered: collected.code_clobbered,
            complete,
            inductive,
            pops,
        }
    }

    /// One full application of the transfer function: evaluate every
    /// point and re-join all flows over the seed.
    fn apply(
        &self,
        states: &BTreeMap<ProgramPoint, AbstractState>,
    ) -> (BTreeMap<ProgramPoint, AbstractState>, Collected) {
        let cx = self.cx();
        let mut out = Collected::new();
        let mut next: BTreeMap<ProgramPoint, AbstractState> = BTreeMap::new();
        next.insert(ProgramPoint::entry(self.seed_addr), self.seed.clone());
        for (pt, st) in states {
            if self.settings.stop_addrs.contains(&pt.addr) {
                join_stop(&mut out.stop_states, pt.addr, st, cx);
                continue;
            }
            for (q, sq) in self.transfer(pt, st, &mut out) {
                match next.get(&q) {
                    None => {
                        next.insert(q, sq);
                    }
                    Some(old) => {
                        let j = old.join(&sq, cx);
                        next.insert(q, j);
                    }
                }
            }
        }
        (next, out)
    }

    /// Abstract successors of one instruction.
    fn transfer(
        &self,
        pt: &ProgramPoint,
        st: &AbstractState,
        out: &mut Collected,
    ) -> Vec<(ProgramPoint, AbstractState)> {
        let cx = self.cx();
        let ins = match self.decode_at(pt.addr) {
            Ok(i) => i,
            Err(msg) => {
                out.alarm(AlarmKind::IllegalOpcodeSite, pt.addr, msg);
                return Vec::new();
            }
        };
        if ins.privileged() {
            let fl = self.num(st.reg(Register::Flags));
            if fl.values().iter().any(|&v| v & 0x80 == 0) {
                out.alarm(
                    AlarmKind::IllegalOpcodeSite,
                    pt.addr,
                    "a privileged instruction may execute without privilege".into(),
                );
            }
        }

        let mut flows = Vec::new();
        let mut st = st.clone();
        match ins {
            Instruction::Halt => {}
            Instruction::Syscall => {
                out.alarm(
                    AlarmKind::IllegalOpcodeSite,
                    pt.addr,
                    "syscall from kernel mode faults".into(),
                );
            }
            Instruction::Iret => return self.empowered(pt, &st, out),
            Instruction::Ret => {
                let sp = self.num(st.reg(Register::Sp));
                let ret = self.num(&st.mem.load(&sp, cx));
                let sp1 = transfer_alu(AluOp::Add, &sp, &BitvecAbs::singleton(1), cx.k).value;
                st.set_reg(Register::Sp, AbstractValue::Num(sp1));
                let (ctx, unroll) = match pt.ctx.split_last() {
                    Some((fr, rest)) => (rest.to_vec(), fr.unroll),
                    None => (Vec::new(), pt.unroll),
                };
                for t in self.jump_targets(pt, &ret, "return address", out) {
                    let q = ProgramPoint {
                        addr: t,
                        ctx: ctx.clone(),
                        unroll,
                    };
                    self.flow_to(pt, q, st.clone(), &mut flows, out);
                }
            }
            Instruction::JmpAbs { addr } => {
                let q = self.jump_point(pt, addr);
                self.flow_to(pt, q, st, &mut flows, out);
            }
            Instruction::JmpInd { reg } => {
                let tv = self.num(st.reg(reg.register()));
                for t in self.jump_targets(pt, &tv, "indirect jump target", out) {
                    let q = self.jump_point(pt, t);
                    self.flow_to(pt, q, st.clone(), &mut flows, out);
                }
            }
            Instruction::Call { addr } => {
                if pt.ctx.len() >= CALL_DEPTH_CAP {
                    out.alarm(
                        AlarmKind::UnresolvedJump,
                        pt.addr,
                        format!("call depth exceeds {CALL_DEPTH_CAP} frames (possible recursion)"),
                    );
                    out.control_lost = true;
                } else {
                    let sp = self.num(st.reg(Register::Sp));
                    let sp1 = transfer_alu(AluOp::Sub, &sp, &BitvecAbs::singleton(1), cx.k).value;
                    let ret = AbstractValue::singleton(pt.addr.wrapping_add(2));
                    self.store_numeric(pt, &mut st, &sp1, &ret, out);
                    st.set_reg(Register::Sp, AbstractValue::Num(sp1));
                    let mut ctx = pt.ctx.clone();
                    ctx.push(Frame {
                        site: pt.addr,
                        unroll: pt.unroll,
                    });
                    let q = ProgramPoint {
                        addr,
                        ctx,
                        unroll: 0,
                    };
                    self.flow_to(pt, q, st, &mut flows, out);
                }
            }
            Instruction::JCond { cond, addr } => {
                let flags = self.num(st.reg(Register::Flags));
                let vals = flags.values();
                let taken: Vec<u8> = vals.iter().copied().filter(|&v| cond.holds(v)).collect();
                let fall: Vec<u8> = vals.into_iter().filter(|&v| !cond.holds(v)).collect();
                if !taken.is_empty() {
                    let mut s = st.clone();
                    s.set_reg(
                        Register::Flags,
                        AbstractValue::Num(BitvecAbs::from_set(taken, cx.k)),
                    );
                    let q = self.jump_point(pt, addr);
                    self.flow_to(pt, q, s, &mut flows, out);
                }
                if !fall.is_empty() {
                    st.set_reg(
                        Register::Flags,
                        AbstractValue::Num(BitvecAbs::from_set(fall, cx.k)),
                    );
                    self.flow_next(pt, st, &mut flows, out);
                }
            }
            Instruction::LoadImm { dst, imm } => {
                st.set_reg(dst.register(), AbstractValue::singleton(imm));
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::LoadDir { dst, addr } => {
                let v = st.mem.load(&BitvecAbs::singleton(addr), cx);
                st.set_reg(dst.register(), v);
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::LoadInd { dst, addr_reg } => {
                let av = st.reg(addr_reg.register()).clone();
                let v = self.load_through(pt, &st, &av, out);
                st.set_reg(dst.register(), v);
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::StoreDir { addr, src } => {
                let v = st.reg(src.register()).clone();
                self.store_numeric(pt, &mut st, &BitvecAbs::singleton(addr), &v, out);
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::StoreInd { addr_reg, src } => {
                let av = st.reg(addr_reg.register()).clone();
                let v = st.reg(src.register()).clone();
                self.store_through(pt, &mut st, &av, &v, out);
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::Mov { dst, src } => {
                st.set_reg(dst.register(), st.reg(src.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::Alu { op, dst, rhs } => {
                self.alu(pt, &mut st, op, dst, rhs, out);
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::WrMpu1 { src } => {
                st.set_reg(Register::Mpu1, st.reg(src.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::WrMpu2 { src } => {
                st.set_reg(Register::Mpu2, st.reg(src.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::WrUflags { src } => {
                st.set_reg(Register::Uflags, st.reg(src.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::RdUreg { dst, ureg } => {
                st.set_reg(dst.register(), st.reg(ureg.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
            Instruction::WrUreg { ureg, src } => {
                st.set_reg(ureg.register(), st.reg(src.register()).clone());
                self.flow_next(pt, st, &mut flows, out);
            }
        }
        flows
    }

    /// The ALU transfer, including typed pointer offsetting and the
    /// flag update of `cmp` (privilege bit preserved).
    fn alu(
        &self,
        pt: &ProgramPoint,
        st: &mut AbstractState,
        op: AluOp,
        dst: Gpr,
        rhs: Operand,
        out: &mut Collected,
    ) {
        let k = self.settings.k;
        let bval = match rhs {
            Operand::Reg(r) => st.reg(r.register()).clone(),
            Operand::Imm(i) => AbstractValue::singleton(i),
        };
        let b = self.num(&bval);
        let aval = st.reg(dst.register()).clone();

        if op == AluOp::Cmp {
            let a = self.num(&aval);
            let cmp = transfer_alu(AluOp::Cmp, &a, &b, k);
            let fl = self.num(st.reg(Register::Flags));
            let masked = transfer_alu(AluOp::And, &fl, &BitvecAbs::singleton(0xFC), k).value;
            let newf = transfer_alu(AluOp::Or, &masked, &cmp.value, k).value;
            st.set_reg(Register::Flags, AbstractValue::Num(newf));
            return;
        }

        // A typed pointer plus a constant stays typed while the offset
        // provably remains inside the object.
        if let (
            Some(view),
            AbstractValue::Typed(TypedValue::PointerTo {
                target,
                off,
                nullable: false,
            }),
        ) = (self.typed, &aval)
        {
            if matches!(op, AluOp::Add | AluOp::Sub) {
                if let Some(c) = b.as_singleton() {
                    let delta = if op == AluOp::Add {
                        i32::from(c)
                    } else {
                        -i32::from(c)
                    };
                    let noff = i32::from(*off) + delta;
                    let size = view
                        .env
                        .sizeof(view.bindings, *target)
                        .or_else(|| view.env.sizeof_lower(view.bindings, *target));
                    if noff >= 0 && size.is_some_and(|s| (noff as u16) < s) {
                        st.set_reg(
                            dst.register(),
                            AbstractValue::Typed(TypedValue::PointerTo {
                                target: *target,
                                off: noff as u16,
                                nullable: false,
                            }),
                        );
                        return;
                    }
                }
            }
        }

        let a = self.num(&aval);
        let t = transfer_alu(op, &a, &b, k);
        if t.may_div_zero {
            out.alarm(AlarmKind::MaybeDivZero, pt.addr, "divisor may be zero".into());
        }
        st.set_reg(dst.register(), AbstractValue::Num(t.value));
    }

    /// Load through an abstract address value; typed pointers go
    /// through the shape domain.
    fn load_through(
        &self,
        pt: &ProgramPoint,
        st: &AbstractState,
        av: &AbstractValue,
        out: &mut Collected,
    ) -> AbstractValue {
        if let (Some(view), AbstractValue::Typed(tv @ TypedValue::PointerTo { .. })) =
            (self.typed, av)
        {
            if let Ok(acc) = typed_load(view.env, view.bindings, tv) {
                if acc.maybe_null {
                    out.alarm(
                        AlarmKind::MaybeNullDeref,
                        pt.addr,
                        "dereferenced pointer may be null".into(),
                    );
                }
                return acc.value;
            }
        }
        st.mem.load(&self.num(av), self.cx())
    }

    /// Store through an abstract address value; typed pointers go
    /// through the shape domain with its proof obligation.
    fn store_through(
        &self,
        pt: &ProgramPoint,
        st: &mut AbstractState,
        av: &AbstractValue,
        val: &AbstractValue,
        out: &mut Collected,
    ) {
        if let (Some(view), AbstractValue::Typed(tv @ TypedValue::PointerTo { .. })) =
            (self.typed, av)
        {
            match typed_store(
                view.env,
                view.bindings,
                view.region_labels,
                &mut st.mem,
                tv,
                val,
                self.settings.k,
            ) {
                Ok(acc) => {
                    if acc.maybe_null {
                        out.alarm(
                            AlarmKind::MaybeNullDeref,
                            pt.addr,
                            "stored through a pointer that may be null".into(),
                        );
                    }
                    return;
                }
                Err(TypedAccessError::Unprovable { label, value }) => {
                    out.alarm(
                        AlarmKind::TypingViolationStore,
                        pt.addr,
                        format!("cannot prove {value} fits {label}"),
                    );
                    return;
                }
                Err(TypedAccessError::NotAPointer) => {}
            }
        }
        let a = self.num(av);
        self.store_numeric(pt, st, &a, val, out);
    }

    /// Numeric store. In parameterized mode a store that may hit a
    /// labeled cell must prove the value fits the label.
    fn store_numeric(
        &self,
        pt: &ProgramPoint,
        st: &mut AbstractState,
        addr: &BitvecAbs,
        val: &AbstractValue,
        out: &mut Collected,
    ) {
        if let Some(view) = self.typed {
            if !addr.is_bottom() {
                for (&la, &ll) in view.region_labels {
                    if addr.contains(la) && !value_subsumes(view.env, view.bindings, ll, val) {
                        out.alarm(
                            AlarmKind::TypingViolationStore,
                            pt.addr,
                            format!(
                                "stored value {} may not fit {} at 0x{la:02x}",
                                val.display(Some(view.env)),
                                view.env.display_label(ll)
                            ),
                        );
                    }
                }
            }
        }
        let eff = st.mem.store(addr, val, self.cx());
        if matches!(eff, StoreEffect::Wild) {
            out.alarm(
                AlarmKind::WildStore,
                pt.addr,
                "store address unknown: all memory lost".into(),
            );
            out.code_clobbered = true;
        }
        out.effects.push((pt.addr, eff));
    }

    /// Enumerate an indirect control target set, or alarm.
    fn jump_targets(
        &self,
        pt: &ProgramPoint,
        v: &BitvecAbs,
        what: &str,
        out: &mut Collected,
    ) -> Vec<u8> {
        if v.is_bottom() {
            return Vec::new();
        }
        if v.is_top() || v.count() > self.settings.k {
            out.alarm(
                AlarmKind::UnresolvedJump,
                pt.addr,
                format!("{what} cannot be resolved ({v})"),
            );
            out.control_lost = true;
            return Vec::new();
        }
        v.values()
    }

    /// Successor point of a jump: a backward target opens a new loop
    /// iteration, counted up to the unroll policy's limit and then
    /// collapsed into the widened summary point.
    fn jump_point(&self, from: &ProgramPoint, target: u8) -> ProgramPoint {
        let unroll = if target > from.addr {
            from.unroll
        } else if from.is_summary() {
            SUMMARY_UNROLL
        } else {
            let trip = from.unroll + 1;
            match unroll_policy(&BitvecAbs::singleton(trip.min(255) as u8)) {
                UnrollDecision::Unroll(_) => trip,
                UnrollDecision::Summarize => SUMMARY_UNROLL,
            }
        };
        ProgramPoint {
            addr: target,
            ctx: from.ctx.clone(),
            unroll,
        }
    }

    fn flow_next(
        &self,
        pt: &ProgramPoint,
        st: AbstractState,
        flows: &mut Vec<(ProgramPoint, AbstractState)>,
        out: &mut Collected,
    ) {
        let q = ProgramPoint {
            addr: pt.addr.wrapping_add(2),
            ctx: pt.ctx.clone(),
            unroll: pt.unroll,
        };
        self.flow_to(pt, q, st, flows, out);
    }

    fn flow_to(
        &self,
        from: &ProgramPoint,
        q: ProgramPoint,
        st: AbstractState,
        flows: &mut Vec<(ProgramPoint, AbstractState)>,
        out: &mut Collected,
    ) {
        if !self.in_text(q.addr) {
            out.alarm(
                AlarmKind::IllegalOpcodeSite,
                from.addr,
                format!("control leaves the kernel image (to 0x{:02x})", q.addr),
            );
            return;
        }
        flows.push((q, st));
    }

    /// The empowered transition at `iret`: hand the machine to an
    /// arbitrary user program constrained only by what this state
    /// grants it, and re-enter the kernel at both vectors.
    fn empowered(
        &self,
        pt: &ProgramPoint,
        st: &AbstractState,
        out: &mut Collected,
    ) -> Vec<(ProgramPoint, AbstractState)> {
        let uf = self.num(st.reg(Register::Uflags));
        if uf.is_bottom() {
            return Vec::new();
        }
        if uf.values().iter().any(|&v| v & 0x80 != 0) {
            out.alarm(
                AlarmKind::PrivilegedExitUnproven,
                pt.addr,
                "saved user flags cannot be proven unprivileged".into(),
            );
            out.alarm(
                AlarmKind::SelfModification,
                pt.addr,
                "a privileged user program could rewrite kernel code".into(),
            );
            out.code_clobbered = true;
            out.control_lost = true;
            return Vec::new();
        }
        let mut st = st.clone();
        match self.user_writable(&st) {
            UserReach::Everything => {
                st.mem.havoc_all();
                out.havocs.push((pt.addr, (0x00, 0xff)));
            }
            UserReach::Ranges(ranges) => {
                for (lo, hi) in ranges {
                    st.mem.havoc_range(lo, hi);
                    out.havocs.push((pt.addr, (lo, hi)));
                }
            }
        }
        for r in [
            Register::R0,
            Register::R1,
            Register::R2,
            Register::R3,
            Register::Upc,
            Register::Usp,
        ] {
            st.set_reg(r, AbstractValue::top());
        }
        // user code cannot raise its own privilege bit
        st.set_reg(
            Register::Uflags,
            AbstractValue::Num(BitvecAbs::from_range(0x00, 0x7f, self.settings.k)),
        );
        // hardware re-raises kernel privilege on every entry
        st.set_reg(Register::Flags, AbstractValue::singleton(0x80));
        let mut flows = Vec::new();
        for entry in [self.kernel.entries.syscall, self.kernel.entries.timer] {
            self.flow_to(pt, ProgramPoint::entry(entry), st.clone(), &mut flows, out);
        }
        flows
    }

    /// Union of the writable footprints of both MPU slots.
    fn user_writable(&self, st: &AbstractState) -> UserReach {
        let mut ranges = Vec::new();
        for r in [Register::Mpu1, Register::Mpu2] {
            match self.segment_reach(st, st.reg(r)) {
                None => return UserReach::Everything,
                Some(segs) => ranges.extend(segs),
            }
        }
        UserReach::Ranges(ranges)
    }

    /// Writable footprint of one MPU descriptor value; `None` means it
    /// cannot be bounded. A numeric descriptor is read out of abstract
    /// memory; a typed one is judged by its base byte's refinement.
    fn segment_reach(&self, st: &AbstractState, desc: &AbstractValue) -> Option<Vec<(u8, u8)>> {
        if let AbstractValue::Typed(TypedValue::PointerTo {
            target,
            off,
            nullable: false,
        }) = desc
        {
            if self.typed.is_some() {
                return self.symbolic_reach(*target, *off);
            }
        }
        let cx = self.cx();
        let d = self.num(desc);
        if d.is_bottom() {
            return Some(Vec::new());
        }
        if d.is_top() || d.count() > self.settings.k {
            return None;
        }
        let mut segs = Vec::new();
        for a in d.values() {
            let base = self.num(&st.mem.load(&BitvecAbs::singleton(a), cx));
            let sr = self.num(&st.mem.load(&BitvecAbs::singleton(a.wrapping_add(1)), cx));
            // bit 7 of the size byte marks the segment read-only
            let limit = sr
                .values()
                .iter()
                .filter(|&&v| v & 0x80 == 0)
                .map(|&v| v & 0x0f)
                .max();
            let Some(limit) = limit else { continue };
            if base.is_bottom() {
                continue;
            }
            if base.is_top() {
                return None;
            }
            let (lo, hi) = base.bounds().expect("non-bottom value has bounds");
            let hi = (u16::from(hi) + u16::from(limit)).min(0xff) as u8;
            segs.push((lo, hi));
        }
        Some(segs)
    }

    /// A typed MPU descriptor whose base byte is refined to lie at or
    /// above the protected-space boundary: with the boundary bound the
    /// segment covers at most `[boundary, 0xff]`; unbound, the
    /// boundary axiom already keeps it off everything tracked.
    fn symbolic_reach(&self, target: ExprId, off: u16) -> Option<Vec<(u8, u8)>> {
        let view = self.typed?;
        let bt = byte_type(view.env, view.bindings, target, off)?;
        if !matches!(bt.leaf, Leaf::Byte) {
            return None;
        }
        let boundary = view.env.boundary_param()?;
        let bounded = bt.preds.iter().any(|bp| {
            matches!(bp.scope, PredScope::SelfByte) && pred_is_self_ge_param(&bp.pred, boundary)
        });
        if !bounded {
            return None;
        }
        match view.bindings.get(boundary) {
            Some(&v) => Some(vec![(v.min(0xff) as u8, 0xff)]),
            None => Some(Vec::new()),
        }
    }
}

fn pred_is_self_ge_param(p: &Pred, param: &str) -> bool {
    p.op == CmpOp::Ge
        && p.lhs.rest.is_empty()
        && p.lhs.first == Atom::SelfVal
        && p.rhs.rest.is_empty()
        && matches!(&p.rhs.first, Atom::Param(q) if q == param)
}

fn join_stop(acc: &mut BTreeMap<u8, AbstractState>, addr: u8, st: &AbstractState, cx: JoinCtx) {
    match acc.get(&addr) {
        None => {
            acc.insert(addr, st.clone());
        }
        Some(old) => {
            let j = old.join(st, cx);
            acc.insert(addr, j);
        }
    }
}

/// Pointwise order between state maps: every point of `a` must exist
/// in `b` with a state at least as large.
fn le_map(
    a: &BTreeMap<ProgramPoint, AbstractState>,
    b: &BTreeMap<ProgramPoint, AbstractState>,
    cx: JoinCtx,
) -> bool {
    a.iter()
        .all(|(p, sa)| b.get(p).is_some_and(|sb| sa.le(sb, cx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::machine::image::load_images;

    fn analyze_in_context(kernel_src: &str) -> AnalysisResult {
        let kernel = assemble(kernel_src).expect("kernel assembles");
        let mut mem = [0u8; 256];
        let lo = kernel.origin as usize;
        mem[lo..lo + kernel.bytes.len()].copy_from_slice(&kernel.bytes);
        let seed = AbstractState::concrete_boot(&mem);
        analyze(
            &kernel,
            kernel.entries.reset,
            seed,
            None,
            &AnalysisSettings::default(),
        )
    }

    fn reg_at_halt(r: &AnalysisResult, kernel_src: &str, reg: Register) -> BitvecAbs {
        let kernel = assemble(kernel_src).unwrap();
        let halt = kernel
            .symbols
            .get("done")
            .copied()
            .expect("kernel has a `done` label");
        r.joined_by_addr[&halt].reg(reg).as_num().unwrap().clone()
    }

    const PREAMBLE: &str = ".org 0x10\n.entry reset=start\n.entry syscall=start\n.entry timer=start\n";

    #[test]
    fn straight_line_code_stays_concrete() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm r0, 5
    add r0, 3
done:
    halt
"
        );
        let r = analyze_in_context(&src);
        assert!(r.alarms.is_empty(), "{:?}", r.alarms);
        assert!(r.complete && r.inductive);
        assert_eq!(
            reg_at_halt(&r, &src, Register::R0).as_singleton(),
            Some(8)
        );
    }

    #[test]
    fn small_loops_unroll_to_exact_values() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm r0, 0
head:
    add r0, 1
    cmp r0, 3
    jne head
done:
    halt
"
        );
        let r = analyze_in_context(&src);
        assert!(r.alarms.is_empty(), "{:?}", r.alarms);
        assert_eq!(
            reg_at_halt(&r, &src, Register::R0).as_singleton(),
            Some(3)
        );
        assert!(r.states.keys().all(|p| !p.is_summary()));
    }

    #[test]
    fn long_loops_summarize_and_stay_sound() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm r0, 0
head:
    add r0, 1
    cmp r0, 200
    jne head
done:
    halt
"
        );
        let r = analyze_in_context(&src);
        assert!(r.alarms.is_empty(), "{:?}", r.alarms);
        assert!(r.complete && r.inductive);
        assert!(r.states.keys().any(|p| p.is_summary()));
        let v = reg_at_halt(&r, &src, Register::R0);
        assert!(v.contains(200), "summary must keep the exit value: {v}");
    }

    #[test]
    fn calls_return_through_the_stack() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm sp, 0x90
    call f
done:
    halt
f:
    load.imm r1, 7
    ret
"
        );
        let r = analyze_in_context(&src);
        assert!(r.alarms.is_empty(), "{:?}", r.alarms);
        assert_eq!(
            reg_at_halt(&r, &src, Register::R1).as_singleton(),
            Some(7)
        );
        assert_eq!(
            reg_at_halt(&r, &src, Register::Sp).as_singleton(),
            Some(0x90)
        );
    }

    #[test]
    fn runaway_recursion_is_cut_and_reported() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm sp, 0x90
f:
    call f
done:
    halt
"
        );
        let r = analyze_in_context(&src);
        assert!(r.has_alarm(AlarmKind::UnresolvedJump));
        assert!(r.control_lost);
        assert!(r.complete);
    }

    #[test]
    fn unknown_return_addresses_are_alarmed() {
        let kernel = assemble(&format!("{PREAMBLE}\nstart:\n    ret\n")).unwrap();
        let mut seed = AbstractState::all_top();
        seed.set_reg(Register::Sp, AbstractValue::singleton(0x50));
        let r = analyze(
            &kernel,
            kernel.entries.reset,
            seed,
            None,
            &AnalysisSettings::default(),
        );
        assert!(r.has_alarm(AlarmKind::UnresolvedJump));
        assert!(r.control_lost);
    }

    #[test]
    fn possible_zero_divisors_are_alarmed() {
        let src = format!(
            "{PREAMBLE}
start:
    load.dir r1, 0xf0
    load.imm r0, 8
    div r0, r1
done:
    halt
"
        );
        // cell 0xf0 is 0 in the zero-filled image: divisor exactly zero
        let r = analyze_in_context(&src);
        assert!(r.has_alarm(AlarmKind::MaybeDivZero));
    }

    #[test]
    fn control_leaving_the_image_is_alarmed() {
        let src = format!("{PREAMBLE}\nstart:\n    jmp.abs 0xfe\n");
        let r = analyze_in_context(&src);
        assert!(r.has_alarm(AlarmKind::IllegalOpcodeSite));
    }

    #[test]
    fn wild_stores_raise_and_lose_memory() {
        let kernel = assemble(&format!(
            "{PREAMBLE}\nstart:\n    store.ind (r0), r1\ndone:\n    halt\n"
        ))
        .unwrap();
        let seed = AbstractState::all_top();
        let r = analyze(
            &kernel,
            kernel.entries.reset,
            seed,
            None,
            &AnalysisSettings::default(),
        );
        assert!(r.has_alarm(AlarmKind::WildStore));
        assert!(r.code_clobbered);
        assert!(!r.has_alarm(AlarmKind::SelfModification));
    }

    #[test]
    fn stores_into_reached_code_are_self_modification() {
        let src = format!(
            "{PREAMBLE}
start:
    load.imm r0, 1
    store.dir 0x12, r0
done:
    halt
"
        );
        // 0x12 is the second instruction's own window
        let r = analyze_in_context(&src);
        assert!(r.has_alarm(AlarmKind::SelfModification));
        assert!(r.code_clobbered);
    }

    #[test]
    fn unprovable_user_flags_block_the_exit() {
        let src = format!(
            "{PREAMBLE}
start:
    wruflags r1
done:
    iret
"
        );
        let kernel = assemble(&src).unwrap();
        let seed = AbstractState::all_top();
        let r = analyze(
            &kernel,
            kernel.entries.reset,
            seed,
            None,
            &AnalysisSettings::default(),
        );
        assert!(r.has_alarm(AlarmKind::PrivilegedExitUnproven));
        assert!(r.code_clobbered && r.control_lost);
        // propagation stopped: the entry vectors were never reached
        assert!(!r.joined_by_addr.contains_key(&kernel.entries.syscall) || kernel.entries.syscall == kernel.entries.reset);
    }

    #[test]
    fn the_scheduler_kernel_analyzes_cleanly_in_context() {
        let kernel = crate::corpus::kernel_rr();
        let user = crate::corpus::user_two_threads();
        let mem = load_images(&kernel, &user).unwrap();
        let seed = AbstractState::concrete_boot(&mem);
        let r = analyze(
            &kernel,
            kernel.entries.reset,
            seed,
            None,
            &AnalysisSettings::default(),
        );
        assert!(r.alarms.is_empty(), "{:?}", r.alarms);
        assert!(r.complete && r.inductive);
        assert!(!r.control_lost && !r.code_clobbered);
        let inv = r.exit_invariant.as_ref().expect("kernel reaches iret");
        let cell = |a: u8| inv.mem.get(a).as_num().unwrap().values();
        assert_eq!(cell(0xa0), vec![0xa2, 0xa7], "cur walks the ring");
        assert_eq!(cell(0xa1), vec![0xa3, 0xa8], "ctx follows cur");
        assert_eq!(
            inv.reg(Register::Mpu1).as_num().unwrap().as_singleton(),
            Some(0xae)
        );
        assert_eq!(
            inv.reg(Register::Mpu2).as_num().unwrap().as_singleton(),
            Some(0xb0)
        );
        // the saved-flags slots and live user flags stay unprivileged
        assert_eq!(inv.mem.get(0xa5).as_num().unwrap().bounds(), Some((0, 0x7f)));
        assert_eq!(inv.mem.get(0xaa).as_num().unwrap().bounds(), Some((0, 0x7f)));
        assert_eq!(
            inv.reg(Register::Uflags).as_num().unwrap().bounds(),
            Some((0, 0x7f))
        );
        // user-granted segments are havocked, everything else survives
        assert!(inv.mem.get(0xc3).is_top());
        assert!(inv.mem.get(0xe7).is_top());
        assert_eq!(cell(0xa2), vec![0xae]);
        assert_eq!(cell(0xa6), vec![0xa7]);
        assert_eq!(cell(0xab), vec![0xa2]);
    }
}
