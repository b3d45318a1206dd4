//! Abstract memory: a byte-addressed cell map over [`AbstractValue`].
//!
//! Untracked cells are top and are elided from the map. Numeric stores
//! pick their footprint from the abstract address: a singleton updates
//! strongly, a small set joins weakly into each candidate, a bounded
//! set blasts its whole range to top, and an unknown address loses the
//! entire memory. Typed accesses (parameterized mode) go through the
//! shape domain instead of the cell map: the type structure names the
//! loaded leaf and proves or refuses the stored value.

use std::collections::BTreeMap;

use crate::domains::shape::interp::{byte_type, eval_pred, Leaf, PredScope};
use crate::domains::shape::subtype::{is_subtype, norm};
use crate::domains::shape::{Bindings, Label, TypeEnv, TypeExpr, TypedValue};
use crate::domains::value::BitvecAbs;
use crate::domains::AbstractValue;

/// Shared evaluation context for lattice operations.
#[derive(Clone, Copy)]
pub struct JoinCtx<'a> {
    pub env: Option<&'a TypeEnv>,
    pub bindings: &'a Bindings,
    /// Value-set size limit for the numeric domain.
    pub k: usize,
}

/// What a numeric store did to the memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreEffect {
    /// Strong or weak update of an enumerated set of cells.
    Finite { addrs: Vec<u8> },
    /// Address only bounded: every cell in the range went to top.
    RangeHavoc { lo: u8, hi: u8 },
    /// Address unknown: all knowledge lost.
    Wild,
    /// Address bottom: the store is unreachable.
    Unreachable,
}

impl StoreEffect {
    /// Does the store possibly touch `[lo, hi]`?
    pub fn touches(&self, lo: u8, hi: u8) -> bool {
        match self {
            StoreEffect::Finite { addrs } => addrs.iter().any(|&a| a >= lo && a <= hi),
            StoreEffect::RangeHavoc { lo: l, hi: h } => *l <= hi && *h >= lo,
            StoreEffect::Wild => true,
            StoreEffect::Unreachable => false,
        }
    }
}

/// Abstract memory; missing cells are top.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbsMemory {
    cells: BTreeMap<u8, AbstractValue>,
}

impl AbsMemory {
    /// All cells unknown.
    pub fn unknown() -> AbsMemory {
        AbsMemory::default()
    }

    /// Every cell pinned to its concrete image byte.
    pub fn from_concrete(mem: &[u8; 256]) -> AbsMemory {
        let cells = mem
            .iter()
            .enumerate()
            .map(|(a, &v)| (a as u8, AbstractValue::singleton(v)))
            .collect();
        AbsMemory { cells }
    }

    pub fn get(&self, addr: u8) -> AbstractValue {
        self.cells
            .get(&addr)
            .cloned()
            .unwrap_or_else(AbstractValue::top)
    }

    pub fn set(&mut self, addr: u8, v: AbstractValue) {
        if v.is_top() {
            self.cells.remove(&addr);
        } else {
            self.cells.insert(addr, v);
        }
    }

    /// Tracked (non-top) cells in address order.
    pub fn tracked(&self) -> impl Iterator<Item = (u8, &AbstractValue)> {
        self.cells.iter().map(|(&a, v)| (a, v))
    }

    pub fn tracked_len(&self) -> usize {
        self.cells.len()
    }

    pub fn havoc_range(&mut self, lo: u8, hi: u8) {
        self.cells.retain(|&a, _| a < lo || a > hi);
    }

    pub fn havoc_all(&mut self) {
        self.cells.clear();
    }

    /// Pointwise order; untracked cells are top.
    pub fn le(&self, other: &AbsMemory, cx: JoinCtx) -> bool {
        other.cells.iter().all(|(a, vb)| {
            self.cells
                .get(a)
                .is_some_and(|va| va.le(vb, cx.env, cx.bindings))
        })
    }

    pub fn join(&self, other: &AbsMemory, cx: JoinCtx) -> AbsMemory {
        let cells = self
            .cells
            .iter()
            .filter_map(|(a, va)| {
                let vb = other.cells.get(a)?;
                let j = va.join(vb, cx.env, cx.bindings, cx.k);
                (!j.is_top()).then_some((*a, j))
            })
            .collect();
        AbsMemory { cells }
    }

    pub fn widen(&self, other: &AbsMemory, cx: JoinCtx) -> AbsMemory {
        let cells = self
            .cells
            .iter()
            .filter_map(|(a, va)| {
                let vb = other.cells.get(a)?;
                let w = va.widen(vb, cx.env, cx.bindings, cx.k);
                (!w.is_top()).then_some((*a, w))
            })
            .collect();
        AbsMemory { cells }
    }

    /// Numeric load: join of every cell the address may name.
    pub fn load(&self, addr: &BitvecAbs, cx: JoinCtx) -> AbstractValue {
        if addr.is_bottom() {
            return AbstractValue::bottom();
        }
        if addr.is_top() {
            return AbstractValue::top();
        }
        let mut acc = AbstractValue::bottom();
        for a in addr.values() {
            acc = acc.join(&self.get(a), cx.env, cx.bindings, cx.k);
            if acc.is_top() {
                break;
            }
        }
        acc
    }

    /// Numeric store; the returned effect names the touched footprint
    /// so the caller can detect self-modification.
    pub fn store(&mut self, addr: &BitvecAbs, val: &AbstractValue, cx: JoinCtx) -> StoreEffect {
        if addr.is_bottom() {
            return StoreEffect::Unreachable;
        }
        if addr.is_top() {
            self.havoc_all();
            return StoreEffect::Wild;
        }
        if let Some(a) = addr.as_singleton() {
            self.set(a, val.clone());
            return StoreEffect::Finite { addrs: vec![a] };
        }
        if addr.count() <= cx.k {
            let addrs = addr.values();
            for &a in &addrs {
                let j = self.get(a).join(val, cx.env, cx.bindings, cx.k);
                self.set(a, j);
            }
            return StoreEffect::Finite { addrs };
        }
        let (lo, hi) = addr.bounds().expect("non-bottom value has bounds");
        self.havoc_range(lo, hi);
        StoreEffect::RangeHavoc { lo, hi }
    }
}

/// Why a typed access could not be accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypedAccessError {
    /// The value dereferenced is not a pointer.
    NotAPointer,
    /// The stored value cannot be proven to fit the target label.
    Unprovable { label: String, value: String },
}

/// Outcome of a typed access: the result plus whether the pointer may
/// be null (a dereference of a nullable pointer is always reported).
#[derive(Debug, Clone)]
pub struct TypedAccess<T> {
    pub value: T,
    pub maybe_null: bool,
}

/// Descend to the one-byte scalar type at `off` within `ty`.
fn scalar_at(env: &TypeEnv, bindings: &Bindings, ty: u32, off: u16) -> Option<u32> {
    let mut ty = env.resolve(ty);
    let mut off = off;
    loop {
        let sz = env
            .sizeof(bindings, ty)
            .or_else(|| env.sizeof_lower(bindings, ty));
        if sz == Some(1) && off == 0 {
            return Some(ty);
        }
        match env.expr(ty) {
            TypeExpr::Refined { base, .. } => ty = env.resolve(*base),
            _ => {
                let (f, rel) = env.component_at(bindings, ty, off)?;
                ty = env.resolve(f);
                off = rel;
            }
        }
    }
}

/// Load through a typed pointer: the leaf at the target offset.
pub fn typed_load(
    env: &TypeEnv,
    bindings: &Bindings,
    ptr: &TypedValue,
) -> Result<TypedAccess<AbstractValue>, TypedAccessError> {
    let TypedValue::PointerTo {
        target,
        off,
        nullable,
    } = *ptr
    else {
        return Err(TypedAccessError::NotAPointer);
    };
    let value = match scalar_at(env, bindings, target, off) {
        None => AbstractValue::top(),
        Some(leaf) => match env.expr(leaf) {
            TypeExpr::Ptr {
                target: t,
                nullable: n,
            } => AbstractValue::Typed(TypedValue::PointerTo {
                target: *t,
                off: 0,
                nullable: *n,
            }),
            TypeExpr::Refined { .. } => AbstractValue::Typed(TypedValue::ScalarOf { expr: leaf }),
            _ => AbstractValue::top(),
        },
    };
    Ok(TypedAccess {
        value,
        maybe_null: nullable,
    })
}

/// Can every concretization of `val` legally sit in a byte labeled
/// `cell`? This is the proof obligation of a typed store.
pub fn value_subsumes(env: &TypeEnv, bindings: &Bindings, cell: Label, val: &AbstractValue) -> bool {
    let cell = norm(env, cell);
    let Some(bt) = byte_type(env, bindings, cell.ty, cell.off) else {
        return false;
    };
    match bt.leaf {
        Leaf::Pointer { target, nullable } => {
            if !bt.preds.is_empty() {
                return false;
            }
            match val {
                AbstractValue::Typed(TypedValue::PointerTo {
                    target: t,
                    off,
                    nullable: n,
                }) => {
                    (!n || nullable)
                        && is_subtype(
                            env,
                            bindings,
                            Label::new(*t, *off),
                            norm(env, Label::new(target, 0)),
                        )
                }
                AbstractValue::Num(n) => {
                    n.is_bottom() || (nullable && n.as_singleton() == Some(0))
                }
                _ => false,
            }
        }
        Leaf::Byte => {
            let nums = val.to_num(Some(env), bindings);
            if nums.is_bottom() {
                return true;
            }
            nums.values().iter().all(|&v| {
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
                    r == Some(true)
                })
            })
        }
    }
}

/// Store through a typed pointer. The proof obligation is checked and
/// tracked cells whose labels may alias the target are weakly joined
/// (separation: unrelated labels and unlabeled cells are untouched).
/// On an unprovable store the aliased cells lose all information.
pub fn typed_store(
    env: &TypeEnv,
    bindings: &Bindings,
    region_labels: &BTreeMap<u8, Label>,
    mem: &mut AbsMemory,
    ptr: &TypedValue,
    val: &AbstractValue,
    k: usize,
) -> Result<TypedAccess<()>, TypedAccessError> {
    let TypedValue::PointerTo {
        target,
        off,
        nullable,
    } = *ptr
    else {
        return Err(TypedAccessError::NotAPointer);
    };
    let cell = norm(env, Label::new(target, off));
    let provable = value_subsumes(env, bindings, cell, val);
    for (&addr, &rl) in region_labels {
        let related = is_subtype(env, bindings, rl, cell) || is_subtype(env, bindings, cell, rl);
        if !related {
            continue;
        }
        if provable {
            let j = mem.get(addr).join(val, Some(env), bindings, k);
            mem.set(addr, j);
        } else {
            mem.set(addr, AbstractValue::top());
        }
    }
    if !provable {
        return Err(TypedAccessError::Unprovable {
            label: env.display_label(cell),
            value: val.display(Some(env)),
        });
    }
    Ok(TypedAccess {
        value: (),
        maybe_null: nullable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::shape::tests::scheduler_env;
    use crate::domains::value::DEFAULT_VSET_LIMIT;

    fn cx<'a>(bindings: &'a Bindings) -> JoinCtx<'a> {
        JoinCtx {
            env: None,
            bindings,
            k: DEFAULT_VSET_LIMIT,
        }
    }

    #[test]
    fn singleton_stores_update_strongly() {
        let b = Bindings::new();
        let mut m = AbsMemory::from_concrete(&[0u8; 256]);
        let e = m.store(
            &BitvecAbs::singleton(0x40),
            &AbstractValue::singleton(7),
            cx(&b),
        );
        assert_eq!(e, StoreEffect::Finite { addrs: vec![0x40] });
        assert_eq!(m.get(0x40), AbstractValue::singleton(7));
        // strong: the old value is gone entirely
        let e = m.store(
            &BitvecAbs::singleton(0x40),
            &AbstractValue::singleton(9),
            cx(&b),
        );
        assert!(matches!(e, StoreEffect::Finite { .. }));
        assert_eq!(m.get(0x40), AbstractValue::singleton(9));
    }

    #[test]
    fn small_address_sets_join_weakly() {
        let b = Bindings::new();
        let mut m = AbsMemory::from_concrete(&[0u8; 256]);
        let addr = BitvecAbs::from_set([0xa3, 0xa8], DEFAULT_VSET_LIMIT);
        m.store(&addr, &AbstractValue::singleton(5), cx(&b));
        let v3 = m.get(0xa3).as_num().unwrap().values();
        assert_eq!(v3, vec![0x00, 0x05]);
        assert_eq!(m.get(0xa8).as_num().unwrap().values(), vec![0x00, 0x05]);
        // a cell outside the set is untouched
        assert_eq!(m.get(0xa4), AbstractValue::singleton(0));
    }

    #[test]
    fn bounded_addresses_blast_their_range() {
        let b = Bindings::new();
        let mut m = AbsMemory::from_concrete(&[1u8; 256]);
        let addr = BitvecAbs::from_range(0x40, 0x6f, DEFAULT_VSET_LIMIT);
        let e = m.store(&addr, &AbstractValue::singleton(5), cx(&b));
        assert_eq!(e, StoreEffect::RangeHavoc { lo: 0x40, hi: 0x6f });
        assert!(m.get(0x40).is_top());
        assert!(m.get(0x6f).is_top());
        assert_eq!(m.get(0x70), AbstractValue::singleton(1));
        assert!(e.touches(0x00, 0x40));
        assert!(!e.touches(0x00, 0x3f));
    }

    #[test]
    fn unknown_addresses_lose_everything() {
        let b = Bindings::new();
        let mut m = AbsMemory::from_concrete(&[1u8; 256]);
        let e = m.store(&BitvecAbs::top(), &AbstractValue::singleton(5), cx(&b));
        assert_eq!(e, StoreEffect::Wild);
        assert_eq!(m.tracked_len(), 0);
        assert!(m.get(0x00).is_top());
    }

    #[test]
    fn loads_join_their_candidates() {
        let b = Bindings::new();
        let mut m = AbsMemory::unknown();
        m.set(0x10, AbstractValue::singleton(3));
        m.set(0x11, AbstractValue::singleton(5));
        let v = m.load(&BitvecAbs::from_set([0x10, 0x11], 16), cx(&b));
        assert_eq!(v.as_num().unwrap().values(), vec![3, 5]);
        // any untracked candidate forces top
        let v = m.load(&BitvecAbs::from_set([0x10, 0x20], 16), cx(&b));
        assert!(v.is_top());
        assert!(m.load(&BitvecAbs::bottom(), cx(&b)).is_bottom());
    }

    #[test]
    fn lattice_operations_are_pointwise() {
        let b = Bindings::new();
        let mut m1 = AbsMemory::unknown();
        m1.set(0x10, AbstractValue::singleton(3));
        m1.set(0x11, AbstractValue::singleton(7));
        let mut m2 = AbsMemory::unknown();
        m2.set(0x10, AbstractValue::singleton(4));
        let j = m1.join(&m2, cx(&b));
        assert_eq!(j.get(0x10).as_num().unwrap().values(), vec![3, 4]);
        assert!(j.get(0x11).is_top()); // tracked in only one side
        assert!(m1.le(&j, cx(&b)));
        assert!(m2.le(&j, cx(&b)));
        assert!(!j.le(&m1, cx(&b)));
    }

    #[test]
    fn typed_loads_follow_the_type_structure() {
        let env = scheduler_env();
        let b = Bindings::new();
        let thread = env.defs["Thread"];
        // Thread_0 is the memory table pointer
        let a = typed_load(
            &env,
            &b,
            &TypedValue::PointerTo {
                target: thread,
                off: 0,
                nullable: false,
            },
        )
        .unwrap();
        assert!(!a.maybe_null);
        match a.value {
            AbstractValue::Typed(TypedValue::PointerTo { target, off, .. }) => {
                assert_eq!(env.resolve(target), env.resolve(env.defs["Memory_Table"]));
                assert_eq!(off, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        // Thread_3 is the saved flags byte: a refined scalar
        let a = typed_load(
            &env,
            &b,
            &TypedValue::PointerTo {
                target: thread,
                off: 3,
                nullable: false,
            },
        )
        .unwrap();
        match a.value {
            AbstractValue::Typed(TypedValue::ScalarOf { expr }) => {
                assert_eq!(env.resolve(expr), env.resolve(env.defs["Flags"]));
            }
            other => panic!("unexpected {other:?}"),
        }
        // Thread_1 is a plain byte: nothing to learn
        let a = typed_load(
            &env,
            &b,
            &TypedValue::PointerTo {
                target: thread,
                off: 1,
                nullable: false,
            },
        )
        .unwrap();
        assert!(a.value.is_top());
    }

    #[test]
    fn typed_stores_accept_what_the_label_admits() {
        let env = scheduler_env();
        let b = Bindings::new();
        let ctx = env.defs["Context"];
        let flags = env.defs["Flags"];
        let none = BTreeMap::new();
        let mut m = AbsMemory::unknown();
        // anything goes into the plain pc byte
        let r = typed_store(
            &env,
            &b,
            &none,
            &mut m,
            &TypedValue::PointerTo {
                target: ctx,
                off: 0,
                nullable: false,
            },
            &AbstractValue::top(),
            16,
        );
        assert!(r.is_ok());
        // an unprivileged Flags value fits the flags byte
        let r = typed_store(
            &env,
            &b,
            &none,
            &mut m,
            &TypedValue::PointerTo {
                target: ctx,
                off: 2,
                nullable: false,
            },
            &AbstractValue::Typed(TypedValue::ScalarOf { expr: flags }),
            16,
        );
        assert!(r.is_ok());
        // an arbitrary byte cannot be proven unprivileged
        let r = typed_store(
            &env,
            &b,
            &none,
            &mut m,
            &TypedValue::PointerTo {
                target: ctx,
                off: 2,
                nullable: false,
            },
            &AbstractValue::top(),
            16,
        );
        assert!(matches!(r, Err(TypedAccessError::Unprovable { .. })));
        // a concrete unprivileged byte is fine
        let r = typed_store(
            &env,
            &b,
            &none,
            &mut m,
            &TypedValue::PointerTo {
                target: ctx,
                off: 2,
                nullable: false,
            },
            &AbstractValue::singleton(0x7f),
            16,
        );
        assert!(r.is_ok());
    }

    #[test]
    fn typed_stores_respect_separation() {
        let mut env = scheduler_env();
        let b = Bindings::new();
        let thread = env.defs["Thread"];
        let ctx = env.defs["Context"];
        // a pointer-typed cell label: unrelated to Context bytes
        let p_thread = env.intern(TypeExpr::Ptr {
            target: thread,
            nullable: false,
        });
        let mut m = AbsMemory::unknown();
        m.set(0xa0, AbstractValue::singleton(0x11)); // labeled Thread*
        m.set(0xa1, AbstractValue::singleton(0x22)); // labeled Context_1
        m.set(0x50, AbstractValue::singleton(0x33)); // unlabeled kernel cell
        let labels = BTreeMap::from([
            (0xa0u8, Label::new(p_thread, 0)),
            (0xa1u8, Label::new(ctx, 1)),
        ]);
        // store an arbitrary byte through Context_1: aliases 0xa1 only
        let r = typed_store(
            &env,
            &b,
            &labels,
            &mut m,
            &TypedValue::PointerTo {
                target: ctx,
                off: 1,
                nullable: false,
            },
            &AbstractValue::singleton(0x55),
            16,
        );
        assert!(r.is_ok());
        assert_eq!(m.get(0xa0), AbstractValue::singleton(0x11));
        assert_eq!(m.get(0x50), AbstractValue::singleton(0x33));
        let v = m.get(0xa1).as_num().unwrap().values();
        assert_eq!(v, vec![0x22, 0x55]);
    }

    #[test]
    fn nullable_dereferences_are_reported() {
        let env = scheduler_env();
        let b = Bindings::new();
        let thread = env.defs["Thread"];
        let a = typed_load(
            &env,
            &b,
            &TypedValue::PointerTo {
                target: thread,
                off: 0,
                nullable: true,
            },
        )
        .unwrap();
        assert!(a.maybe_null);
        assert!(matches!(
            typed_load(
                &env,
                &b,
                &TypedValue::ScalarOf {
                    expr: env.defs["Flags"]
                }
            ),
            Err(TypedAccessError::NotAPointer)
        ));
    }
}
