//! Abstract domains: byte values, typed values, and memory.

pub mod memory;
pub mod shape;
pub mod value;

use crate::domains::shape::subtype::{is_subtype, least_common_supers, norm};
use crate::domains::shape::{Bindings, Label, TypeEnv, TypedValue};
use crate::domains::value::{BitvecAbs, DEFAULT_VSET_LIMIT};

/// An abstract byte: either a numeric set or a symbolic typed value
/// whose meaning is fixed by the (unknown) user-space labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbstractValue {
    Num(BitvecAbs),
    Typed(TypedValue),
}

impl AbstractValue {
    pub fn top() -> AbstractValue {
        AbstractValue::Num(BitvecAbs::top())
    }

    pub fn bottom() -> AbstractValue {
        AbstractValue::Num(BitvecAbs::bottom())
    }

    pub fn singleton(v: u8) -> AbstractValue {
        AbstractValue::Num(BitvecAbs::singleton(v))
    }

    pub fn is_top(&self) -> bool {
        matches!(self, AbstractValue::Num(n) if n.is_top())
    }

    pub fn is_bottom(&self) -> bool {
        matches!(self, AbstractValue::Num(n) if n.is_bottom())
    }

    pub fn as_num(&self) -> Option<&BitvecAbs> {
        match self {
            AbstractValue::Num(n) => Some(n),
            AbstractValue::Typed(_) => None,
        }
    }

    /// Numeric over-approximation; typed values concretize through the
    /// scalar interpretation of their type (pointers exclude null
    /// unless nullable, refined scalars keep decidable predicates).
    pub fn to_num(&self, env: Option<&TypeEnv>, bindings: &Bindings) -> BitvecAbs {
        match self {
            AbstractValue::Num(n) => n.clone(),
            AbstractValue::Typed(t) => match env {
                None => BitvecAbs::top(),
                Some(env) => match t {
                    TypedValue::ScalarOf { expr } => {
                        shape::interp::scalar_interp(env, bindings, *expr)
                    }
                    TypedValue::PointerTo { nullable, .. } => {
                        if *nullable {
                            BitvecAbs::top()
                        } else {
                            BitvecAbs::from_range(1, 0xff, DEFAULT_VSET_LIMIT)
                        }
                    }
                },
            },
        }
    }

    /// Order: numeric by set inclusion, typed by subtyping of equal
    /// kinds; mixed kinds are incomparable except against numeric top.
    pub fn le(&self, other: &AbstractValue, env: Option<&TypeEnv>, bindings: &Bindings) -> bool {
        match (self, other) {
            (AbstractValue::Num(a), AbstractValue::Num(b)) => a.le(b),
            (_, AbstractValue::Num(b)) if b.is_top() => true,
            (AbstractValue::Num(a), _) if a.is_bottom() => true,
            (AbstractValue::Typed(a), AbstractValue::Typed(b)) => {
                let Some(env) = env else { return a == b };
                match (a, b) {
                    (
                        TypedValue::PointerTo { nullable: na, .. },
                        TypedValue::PointerTo { nullable: nb, .. },
                    ) => {
                        (!na || *nb) && is_subtype(env, bindings, a.label(), b.label())
                    }
                    (TypedValue::ScalarOf { .. }, TypedValue::ScalarOf { .. }) => {
                        is_subtype(env, bindings, a.label(), b.label())
                    }
                    _ => false,
                }
            }
            _ => false,
        }
    }

    /// Join. Two typed values meet at their least common supertype
    /// label; a typed/numeric mix loses all information.
    pub fn join(
        &self,
        other: &AbstractValue,
        env: Option<&TypeEnv>,
        bindings: &Bindings,
        k: usize,
    ) -> AbstractValue {
        match (self, other) {
            (AbstractValue::Num(a), AbstractValue::Num(b)) => AbstractValue::Num(a.join(b, k)),
            (AbstractValue::Num(a), t @ AbstractValue::Typed(_)) if a.is_bottom() => t.clone(),
            (t @ AbstractValue::Typed(_), AbstractValue::Num(b)) if b.is_bottom() => t.clone(),
            (AbstractValue::Typed(a), AbstractValue::Typed(b)) => {
                if a == b {
                    return self.clone();
                }
                let Some(env) = env else {
                    return AbstractValue::top();
                };
                join_typed(env, bindings, a, b)
            }
            _ => AbstractValue::top(),
        }
    }

    /// Widen; typed values already live in a finite lattice, so only
    /// the numeric side needs acceleration.
    pub fn widen(
        &self,
        other: &AbstractValue,
        env: Option<&TypeEnv>,
        bindings: &Bindings,
        k: usize,
    ) -> AbstractValue {
        match (self, other) {
            (AbstractValue::Num(a), AbstractValue::Num(b)) => AbstractValue::Num(a.widen(b, k)),
            _ => self.join(other, env, bindings, k),
        }
    }

    pub fn display(&self, env: Option<&TypeEnv>) -> String {
        match self {
            AbstractValue::Num(n) => n.to_string(),
            AbstractValue::Typed(t) => match env {
                Some(env) => env.display_typed_value(t),
                None => format!("{t:?}"),
            },
        }
    }
}

fn join_typed(
    env: &TypeEnv,
    bindings: &Bindings,
    a: &TypedValue,
    b: &TypedValue,
) -> AbstractValue {
    match (a, b) {
        (
            TypedValue::PointerTo {
                nullable: na, ..
            },
            TypedValue::PointerTo {
                nullable: nb, ..
            },
        ) => {
            let la = a.label();
            let lb = b.label();
            let lcs = least_common_supers(env, bindings, la, lb);
            match lcs.first() {
                Some(&l) if !label_is_unconstrained(env, l) => {
                    AbstractValue::Typed(TypedValue::PointerTo {
                        target: l.ty,
                        off: l.off,
                        nullable: *na || *nb,
                    })
                }
                _ => AbstractValue::top(),
            }
        }
        (TypedValue::ScalarOf { .. }, TypedValue::ScalarOf { .. }) => {
            let lcs = least_common_supers(env, bindings, a.label(), b.label());
            match lcs.first() {
                Some(&l) if l.off == 0 && !label_is_unconstrained(env, l) => {
                    AbstractValue::Typed(TypedValue::ScalarOf { expr: l.ty })
                }
                _ => AbstractValue::top(),
            }
        }
        _ => AbstractValue::top(),
    }
}

/// `Int8` and `Word` carry no information beyond "a byte".
fn label_is_unconstrained(env: &TypeEnv, l: Label) -> bool {
    let l = norm(env, l);
    l.ty == env.int8() || l.ty == env.word()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::shape::tests::scheduler_env;

    #[test]
    fn pointer_joins_climb_to_the_common_supertype() {
        let env = scheduler_env();
        let b = Bindings::new();
        let mt = env.defs["Memory_Table"];
        let p0 = AbstractValue::Typed(TypedValue::PointerTo {
            target: mt,
            off: 0,
            nullable: false,
        });
        let p2 = AbstractValue::Typed(TypedValue::PointerTo {
            target: mt,
            off: 2,
            nullable: false,
        });
        let j = p0.join(&p2, Some(&env), &b, 16);
        match j {
            AbstractValue::Typed(TypedValue::PointerTo { target, off, .. }) => {
                assert_eq!(env.resolve(target), env.resolve(env.defs["Segment"]));
                assert_eq!(off, 0);
            }
            other => panic!("unexpected join {other:?}"),
        }
        assert!(p0.le(&j, Some(&env), &b));
        assert!(p2.le(&j, Some(&env), &b));
    }

    #[test]
    fn mixing_numbers_and_types_loses_everything() {
        let env = scheduler_env();
        let b = Bindings::new();
        let n = AbstractValue::singleton(0x42);
        let t = AbstractValue::Typed(TypedValue::ScalarOf {
            expr: env.defs["Flags"],
        });
        assert!(n.join(&t, Some(&env), &b, 16).is_top());
        assert!(t.join(&n, Some(&env), &b, 16).is_top());
        // bottom is the identity even across kinds
        assert_eq!(t.join(&AbstractValue::bottom(), Some(&env), &b, 16), t);
    }

    #[test]
    fn typed_flags_concretize_without_the_privilege_bit() {
        let env = scheduler_env();
        let b = Bindings::new();
        let t = AbstractValue::Typed(TypedValue::ScalarOf {
            expr: env.defs["Flags"],
        });
        assert_eq!(t.to_num(Some(&env), &b).bounds(), Some((0x00, 0x7f)));
        let p = AbstractValue::Typed(TypedValue::PointerTo {
            target: env.defs["Thread"],
            off: 0,
            nullable: false,
        });
        assert_eq!(p.to_num(Some(&env), &b).bounds(), Some((0x01, 0xff)));
    }

    #[test]
    fn order_respects_subtyping_between_pointers() {
        let env = scheduler_env();
        let b = Bindings::new();
        let thread = env.defs["Thread"];
        let ctx = env.defs["Context"];
        let p_thread1 = AbstractValue::Typed(TypedValue::PointerTo {
            target: thread,
            off: 1,
            nullable: false,
        });
        let p_ctx = AbstractValue::Typed(TypedValue::PointerTo {
            target: ctx,
            off: 0,
            nullable: false,
        });
        assert!(p_thread1.le(&p_ctx, Some(&env), &b));
        assert!(!p_ctx.le(&p_thread1, Some(&env), &b));
        assert!(p_thread1.le(&AbstractValue::top(), Some(&env), &b));
        assert!(!p_thread1.le(&AbstractValue::singleton(3), Some(&env), &b));
    }
}
