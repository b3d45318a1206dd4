//! Label interpretations, well-typedness of a concrete memory, and
//! region discovery (the base case of the parameterized analysis).
//!
//! Discovery walks the declared regions of a concrete (or boot-derived)
//! memory, labels every reachable byte with the strongest type label,
//! binds free parameters from `self == P` refinements, and finally
//! binds the boundary parameter to the first address past everything
//! the kernel tracks. A discovered labeling turns symbolic typed values
//! into concrete sets: `⟦T*⟧` is the set of addresses labeled `⊑ T_0`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::subtype::{is_subtype, norm};
use super::{
    Atom, Bindings, CmpOp, ExprId, Label, PExpr, Pred, PredBinOp, Region, TypeEnv, TypeExpr,
};
use crate::domains::value::{BitvecAbs, DEFAULT_VSET_LIMIT};

/// Scalar kind of a single byte once structure is peeled away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    /// `Int8` or `Word`: any byte.
    Byte,
    Pointer { target: ExprId, nullable: bool },
}

/// How a refinement predicate binds to one byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredScope {
    /// `self` is the byte value.
    SelfByte,
    /// `self.field` is the byte value (struct-level refinement
    /// projected onto the field's single byte).
    Field(String),
    /// Cannot be projected onto one byte; treated as unprovable.
    Unprojectable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BytePred {
    pub pred: Pred,
    pub scope: PredScope,
}

/// The scalar leaf at a byte offset plus all refinement predicates
/// gathered on the way down.
#[derive(Debug, Clone)]
pub struct ByteType {
    pub leaf: Leaf,
    pub preds: Vec<BytePred>,
}

/// Resolve the byte at `off` within `ty` to its leaf and predicates.
pub fn byte_type(env: &TypeEnv, bindings: &Bindings, ty: ExprId, off: u16) -> Option<ByteType> {
    let ty = env.resolve(ty);
    match env.expr(ty) {
        TypeExpr::Int8 | TypeExpr::Word if off == 0 => Some(ByteType {
            leaf: Leaf::Byte,
            preds: Vec::new(),
        }),
        TypeExpr::Ptr { target, nullable } if off == 0 => Some(ByteType {
            leaf: Leaf::Pointer {
                target: *target,
                nullable: *nullable,
            },
            preds: Vec::new(),
        }),
        TypeExpr::Refined { base, pred } => {
            let mut bt = byte_type(env, bindings, *base, off)?;
            if let Some(bp) = scope_pred(env, bindings, *base, off, pred) {
                bt.preds.push(bp);
            }
            Some(bt)
        }
        TypeExpr::Struct(_) => {
            let (f, rel) = env.component_at(bindings, ty, off)?;
            byte_type(env, bindings, f, rel)
        }
        TypeExpr::Array { elem, .. } => {
            let sz = env
                .sizeof(bindings, *elem)
                .or_else(|| env.sizeof_lower(bindings, *elem))?;
            if sz == 0 {
                return None;
            }
            byte_type(env, bindings, *elem, off % sz)
        }
        _ => None,
    }
}

/// Attach `pred` (refining `base`) to the byte at `off`, if it
/// constrains that byte.
fn scope_pred(
    env: &TypeEnv,
    bindings: &Bindings,
    base: ExprId,
    off: u16,
    pred: &Pred,
) -> Option<BytePred> {
    let mut selfs = BTreeSet::new();
    for a in pred_atoms(pred) {
        match a {
            Atom::SelfVal => {
                selfs.insert(None);
            }
            Atom::SelfField(f) => {
                selfs.insert(Some(f.clone()));
            }
            _ => {}
        }
    }
    let scope = match selfs.len() {
        0 => PredScope::SelfByte, // value-independent; evaluates the same everywhere
        1 => match selfs.into_iter().next().unwrap() {
            None => {
                if env.sizeof(bindings, base) == Some(1) {
                    PredScope::SelfByte
                } else {
                    PredScope::Unprojectable
                }
            }
            Some(f) => {
                // struct-level refinement: constrains only the named
                // field's byte, if that field is a single byte
                let (foff, fty) = field_info(env, bindings, base, &f)?;
                if foff != off {
                    return None;
                }
                if env.sizeof(bindings, fty) == Some(1) {
                    PredScope::Field(f)
                } else {
                    PredScope::Unprojectable
                }
            }
        },
        _ => PredScope::Unprojectable,
    };
    Some(BytePred {
        pred: pred.clone(),
        scope,
    })
}

fn pred_atoms(p: &Pred) -> Vec<&Atom> {
    let mut v = vec![&p.lhs.first, &p.rhs.first];
    v.extend(p.lhs.rest.iter().map(|(_, a)| a));
    v.extend(p.rhs.rest.iter().map(|(_, a)| a));
    v
}

/// Offset and type of a named struct field.
pub fn field_info(
    env: &TypeEnv,
    bindings: &Bindings,
    struct_ty: ExprId,
    name: &str,
) -> Option<(u16, ExprId)> {
    match env.expr(env.resolve(struct_ty)) {
        TypeExpr::Struct(fields) => {
            let mut off = 0;
            for (n, f) in fields {
                if n == name {
                    return Some((off, *f));
                }
                off += env.sizeof(bindings, *f)?;
            }
            None
        }
        TypeExpr::Refined { base, .. } => field_info(env, bindings, *base, name),
        _ => None,
    }
}

/// Evaluate a predicate for one byte. `selfv` substitutes `self`,
/// `field` substitutes `self.<name>`. `None` means some atom (an
/// unbound parameter, or a self form not substituted) is unknown.
pub fn eval_pred(
    env: &TypeEnv,
    bindings: &Bindings,
    pred: &Pred,
    selfv: Option<i64>,
    field: Option<(&str, i64)>,
) -> Option<bool> {
    let l = eval_pexpr(env, bindings, &pred.lhs, selfv, field)?;
    let r = eval_pexpr(env, bindings, &pred.rhs, selfv, field)?;
    Some(pred.op.eval(l as i32, r as i32))
}

fn eval_pexpr(
    env: &TypeEnv,
    bindings: &Bindings,
    e: &PExpr,
    selfv: Option<i64>,
    field: Option<(&str, i64)>,
) -> Option<i64> {
    let atom = |a: &Atom| -> Option<i64> {
        match a {
            Atom::SelfVal => selfv,
            Atom::SelfField(f) => match field {
                Some((n, v)) if n == f => Some(v),
                _ => None,
            },
            Atom::Param(p) => bindings.get(p).map(|&v| v as i64),
            Atom::Const(c) => env.consts.get(c).map(|&v| v as i64),
            Atom::Num(n) => Some(*n as i64),
        }
    };
    let mut acc = atom(&e.first)?;
    for (op, a) in &e.rest {
        let v = atom(a)?;
        acc = match op {
            PredBinOp::Add => acc + v,
            PredBinOp::Sub => acc - v,
            PredBinOp::And => acc & v,
        };
    }
    Some(acc)
}

/// Numeric over-approximation of a one-byte type without a labeling:
/// pointers are non-null addresses, refinements filter where decidable.
pub fn scalar_interp(env: &TypeEnv, bindings: &Bindings, ty: ExprId) -> BitvecAbs {
    let Some(bt) = byte_type(env, bindings, ty, 0) else {
        return BitvecAbs::top();
    };
    let mut keep: Vec<u8> = Vec::new();
    for v in 0..=255u8 {
        if let Leaf::Pointer { nullable, .. } = bt.leaf {
            if v == 0 && !nullable {
                continue;
            }
        }
        let ok = bt.preds.iter().all(|bp| {
            let r = match &bp.scope {
                PredScope::SelfByte => eval_pred(env, bindings, &bp.pred, Some(v as i64), None),
                PredScope::Field(f) => {
                    eval_pred(env, bindings, &bp.pred, None, Some((f.as_str(), v as i64)))
                }
                PredScope::Unprojectable => None,
            };
            // unknown keeps the value: this is an over-approximation
            r != Some(false)
        });
        if ok {
            keep.push(v);
        }
    }
    BitvecAbs::from_set(keep, DEFAULT_VSET_LIMIT)
}

/// The byte labeling of memory discovered from the declared regions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labeling {
    pub labels: BTreeMap<u8, Label>,
}

impl Labeling {
    pub fn get(&self, addr: u8) -> Option<Label> {
        self.labels.get(&addr).copied()
    }
}

/// Concrete interpretation of a pointer-to-label: every address whose
/// label is a subtype of the target, plus null if permitted.
pub fn pointer_set(
    env: &TypeEnv,
    bindings: &Bindings,
    labeling: &Labeling,
    target: Label,
    nullable: bool,
) -> BitvecAbs {
    let mut vals: Vec<u8> = labeling
        .labels
        .iter()
        .filter(|(_, &l)| is_subtype(env, bindings, l, target))
        .map(|(&a, _)| a)
        .collect();
    if nullable {
        vals.push(0);
    }
    BitvecAbs::from_set(vals, DEFAULT_VSET_LIMIT)
}

/// Concrete interpretation of a label under a labeling: the set of
/// values the byte may hold in a well-typed memory.
pub fn interp_byte(env: &TypeEnv, bindings: &Bindings, labeling: &Labeling, l: Label) -> BitvecAbs {
    let Some(bt) = byte_type(env, bindings, l.ty, l.off) else {
        return BitvecAbs::top();
    };
    let base = match bt.leaf {
        Leaf::Byte => BitvecAbs::top(),
        Leaf::Pointer { target, nullable } => pointer_set(
            env,
            bindings,
            labeling,
            norm(env, Label::new(target, 0)),
            nullable,
        ),
    };
    if bt.preds.is_empty() {
        return base;
    }
    let keep: Vec<u8> = base
        .values()
        .into_iter()
        .filter(|&v| {
            bt.preds.iter().all(|bp| {
                let r = match &bp.scope {
                    PredScope::SelfByte => {
                        eval_pred(env, bindings, &bp.pred, Some(v as i64), None)
                    }
                    PredScope::Field(f) => {
                        eval_pred(env, bindings, &bp.pred, None, Some((f.as_str(), v as i64)))
                    }
                    PredScope::Unprojectable => None,
                };
                r != Some(false)
            })
        })
        .collect();
    BitvecAbs::from_set(keep, DEFAULT_VSET_LIMIT)
}

/// A well-typedness defect at an address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub addr: u8,
    pub msg: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{:02x}: {}", self.addr, self.msg)
    }
}

/// Check one byte value against a label, strictly: every predicate must
/// be provably true and pointer targets must carry compatible labels.
pub fn check_byte(
    env: &TypeEnv,
    bindings: &Bindings,
    labeling: &Labeling,
    l: Label,
    addr: u8,
    v: u8,
) -> Result<(), Violation> {
    let fail = |msg: String| Violation { addr, msg };
    let bt = byte_type(env, bindings, l.ty, l.off)
        .ok_or_else(|| fail(format!("no byte type for {}", env.display_label(l))))?;
    if let Leaf::Pointer { target, nullable } = bt.leaf {
        if v == 0 {
            if !nullable {
                return Err(fail(format!(
                    "null in non-nullable {}",
                    env.display_label(l)
                )));
            }
        } else {
            let t = norm(env, Label::new(target, 0));
            let ok = labeling
                .get(v)
                .is_some_and(|lv| is_subtype(env, bindings, lv, t));
            if !ok {
                return Err(fail(format!(
                    "0x{v:02x} does not point at a {}",
                    env.display_label(t)
                )));
            }
        }
    }
    for bp in &bt.preds {
        let r = match &bp.scope {
            PredScope::SelfByte => eval_pred(env, bindings, &bp.pred, Some(v as i64), None),
            PredScope::Field(f) => {
                eval_pred(env, bindings, &bp.pred, None, Some((f.as_str(), v as i64)))
            }
            PredScope::Unprojectable => None,
        };
        match r {
            Some(true) => {}
            Some(false) => {
                return Err(fail(format!("value 0x{v:02x} violates `{}`", bp.pred)));
            }
            None => {
                return Err(fail(format!("cannot decide `{}`", bp.pred)));
            }
        }
    }
    Ok(())
}

/// Check every labeled byte of a memory. `read` returns `None` when the
/// byte has no single known value (possible for boot-derived cells).
pub fn check_welltyped(
    env: &TypeEnv,
    bindings: &Bindings,
    labeling: &Labeling,
    read: &dyn Fn(u8) -> Option<u8>,
) -> Vec<Violation> {
    let mut out: BTreeMap<u8, Violation> = BTreeMap::new();
    for (&addr, &l) in &labeling.labels {
        let r = match read(addr) {
            None => Err(Violation {
                addr,
                msg: format!("{} byte has no known value", env.display_label(l)),
            }),
            Some(v) => check_byte(env, bindings, labeling, l, addr, v),
        };
        if let Err(v) = r {
            out.entry(addr).or_insert(v);
        }
    }
    out.into_values().collect()
}

/// Result of region discovery.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub labeling: Labeling,
    pub bindings: Bindings,
    pub violations: Vec<Violation>,
    /// First address past everything the kernel tracks (kernel image
    /// and labeled bytes); bound to the boundary parameter.
    pub kernel_last_addr: u16,
}

impl Discovery {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Walk the declared regions of a concrete memory, labeling every
/// reachable byte, binding parameters fixed by `self == P` refinements,
/// and finally checking well-typedness under the full bindings.
pub fn discover_regions(
    env: &TypeEnv,
    regions: &[Region],
    kernel_end: u16,
    read: &dyn Fn(u8) -> Option<u8>,
) -> Discovery {
    let mut bindings = Bindings::new();
    let mut labeling = Labeling::default();
    let mut violations: BTreeMap<u8, Violation> = BTreeMap::new();
    let violate = |vs: &mut BTreeMap<u8, Violation>, addr: u8, msg: String| {
        vs.entry(addr).or_insert(Violation { addr, msg });
    };

    // worklist of (object type, base address, attributed cell)
    let mut queue: VecDeque<(ExprId, u8, Option<u8>)> = regions
        .iter()
        .map(|r| (r.ty, r.addr, None))
        .collect();
    let mut processed: BTreeSet<(ExprId, u8)> = BTreeSet::new();

    while let Some((ty, base, src)) = queue.pop_front() {
        let ty = env.resolve(ty);
        if !processed.insert((ty, base)) {
            continue;
        }
        let blame = src.unwrap_or(base);
        let Some(sz) = env.sizeof(&bindings, ty) else {
            violate(
                &mut violations,
                blame,
                format!("cannot size {} (unbound length)", env.display_type(ty)),
            );
            continue;
        };
        if sz == 0 || base as u16 + sz > 0x100 {
            violate(
                &mut violations,
                blame,
                format!(
                    "{} at 0x{base:02x} does not fit in memory",
                    env.display_type(ty)
                ),
            );
            continue;
        }

        // label the object's bytes, keeping the strongest label per cell
        let mut conflict = false;
        for off in 0..sz {
            let addr = base + off as u8;
            let new = norm(env, Label::new(ty, off));
            match labeling.get(addr) {
                None => {
                    labeling.labels.insert(addr, new);
                }
                Some(old) if is_subtype(env, &bindings, old, new) => {}
                Some(old) if is_subtype(env, &bindings, new, old) => {
                    labeling.labels.insert(addr, new);
                }
                Some(old) => {
                    violate(
                        &mut violations,
                        src.unwrap_or(addr),
                        format!(
                            "incompatible labels {} and {}",
                            env.display_label(old),
                            env.display_label(new)
                        ),
                    );
                    conflict = true;
                }
            }
            if conflict {
                break;
            }
        }
        if conflict {
            continue;
        }

        // bind parameters fixed by `self == P` refinements, then queue
        // pointer targets; all other predicates are (re)checked at the
        // end under the full bindings
        for off in 0..sz {
            let addr = base + off as u8;
            let Some(bt) = byte_type(env, &bindings, ty, off) else {
                continue;
            };
            let Some(v) = read(addr) else {
                violate(
                    &mut violations,
                    addr,
                    format!("{} byte has no known value", env.display_label(Label::new(ty, off))),
                );
                continue;
            };
            for bp in &bt.preds {
                try_bind_param(env, &mut bindings, bp, v);
            }
            if let Leaf::Pointer { target, nullable } = bt.leaf {
                if v == 0 {
                    if !nullable {
                        violate(
                            &mut violations,
                            addr,
                            "null in non-nullable pointer".to_string(),
                        );
                    }
                } else {
                    queue.push_back((target, v, Some(addr)));
                }
            }
        }
    }

    // the boundary: one past the kernel image and every labeled byte
    let max_labeled = labeling.labels.keys().next_back().map_or(0, |&a| a as u16 + 1);
    let kla = kernel_end.max(max_labeled);
    if let Some(bp) = env.boundary_param() {
        bindings.insert(bp.to_string(), kla);
    }

    // full re-check under the final bindings
    for v in check_welltyped(env, &bindings, &labeling, read) {
        violations.entry(v.addr).or_insert(v);
    }

    Discovery {
        labeling,
        bindings,
        violations: violations.into_values().collect(),
        kernel_last_addr: kla,
    }
}

/// `self == P` (or `self.f == P`) with P unbound binds P to the byte.
fn try_bind_param(env: &TypeEnv, bindings: &mut Bindings, bp: &BytePred, v: u8) {
    if bp.scope == PredScope::Unprojectable || bp.pred.op != CmpOp::Eq {
        return;
    }
    let self_side = |e: &PExpr| {
        e.rest.is_empty()
            && matches!(e.first, Atom::SelfVal | Atom::SelfField(_))
    };
    let param_side = |e: &PExpr| match (&e.first, e.rest.is_empty()) {
        (Atom::Param(p), true) => Some(p.clone()),
        _ => None,
    };
    let p = if self_side(&bp.pred.lhs) {
        param_side(&bp.pred.rhs)
    } else if self_side(&bp.pred.rhs) {
        param_side(&bp.pred.lhs)
    } else {
        None
    };
    if let Some(p) = p {
        if !bindings.contains_key(&p) && env.params.contains_key(&p) {
            bindings.insert(p, v as u16);
        }
    }
}
