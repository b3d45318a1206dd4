//! Subtyping between byte labels.
//!
//! `T_o ⊑ U_p` means every byte that is offset `o` of a `T` object is
//! also offset `p` of a `U` object. The relation is generated by:
//!
//! - containment: a struct byte is a byte of the field spanning it; an
//!   array byte at `q·sizeof(elem) + r` is byte `r` of an element, when
//!   `q` is below a proven length bound;
//! - refinement erasure: `(T where p)_o ⊑ T_o`;
//! - scalar axioms: `Int8 ⊑ Word`, `T* ⊑ Word` (pointers are *not*
//!   `Int8`: the verifier never learns their numeric range);
//! - pointer covariance: `U* ⊑ T*` when `U_0 ⊑ T_0`, and a non-nullable
//!   pointer is a nullable one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{ArrayLen, Bindings, ExprId, Label, TypeEnv, TypeExpr};

/// Normalize a label so that equal types compare equal: follow `Named`
/// references to the definition.
pub fn norm(env: &TypeEnv, l: Label) -> Label {
    Label::new(env.resolve(l.ty), l.off)
}

/// Proven length bound for an array: a binding if present, otherwise
/// the declared parameter lower bound, otherwise zero.
fn proven_len(env: &TypeEnv, bindings: &Bindings, len: &ArrayLen) -> u16 {
    match len {
        ArrayLen::Const(n) => *n,
        ArrayLen::Param(p) => bindings
            .get(p)
            .copied()
            .or_else(|| env.params.get(p).and_then(|i| i.lower))
            .unwrap_or(0),
    }
}

/// Immediate supertype labels (excluding pointer covariance, which is
/// applied per-query to keep this enumeration finite).
pub fn up_steps(env: &TypeEnv, bindings: &Bindings, l: Label) -> Vec<Label> {
    let l = norm(env, l);
    match env.expr(l.ty) {
        TypeExpr::Int8 if l.off == 0 => vec![Label::new(env.word(), 0)],
        TypeExpr::Ptr { .. } if l.off == 0 => vec![Label::new(env.word(), 0)],
        TypeExpr::Refined { base, .. } => vec![norm(env, Label::new(*base, l.off))],
        TypeExpr::Struct(_) => match env.component_at(bindings, l.ty, l.off) {
            Some((f, off)) => vec![norm(env, Label::new(f, off))],
            None => vec![],
        },
        TypeExpr::Array { elem, len } => {
            let Some(sz) = env.sizeof_lower(bindings, *elem) else {
                return vec![];
            };
            if sz == 0 {
                return vec![];
            }
            let q = l.off / sz;
            if q < proven_len(env, bindings, len) {
                vec![norm(env, Label::new(*elem, l.off % sz))]
            } else {
                vec![]
            }
        }
        _ => vec![],
    }
}

/// Is `a ⊑ b`?
pub fn is_subtype(env: &TypeEnv, bindings: &Bindings, a: Label, b: Label) -> bool {
    let mut guard = BTreeSet::new();
    subtype_rec(env, bindings, norm(env, a), norm(env, b), &mut guard)
}

fn subtype_rec(
    env: &TypeEnv,
    bindings: &Bindings,
    a: Label,
    b: Label,
    guard: &mut BTreeSet<(Label, Label)>,
) -> bool {
    if a == b {
        return true;
    }
    if !guard.insert((a, b)) {
        // already deciding this pair further up the stack; assuming
        // "no" here is the conservative answer
        return false;
    }
    let mut seen = BTreeSet::from([a]);
    let mut queue = VecDeque::from([a]);
    let mut found = false;
    'bfs: while let Some(x) = queue.pop_front() {
        if x == b {
            found = true;
            break;
        }
        if x.off == 0 && b.off == 0 {
            if let (
                TypeExpr::Ptr {
                    target: u,
                    nullable: nu,
                },
                TypeExpr::Ptr {
                    target: t,
                    nullable: nt,
                },
            ) = (env.expr(x.ty), env.expr(b.ty))
            {
                let null_ok = !*nu || *nt;
                if null_ok
                    && subtype_rec(
                        env,
                        bindings,
                        norm(env, Label::new(*u, 0)),
                        norm(env, Label::new(*t, 0)),
                        guard,
                    )
                {
                    found = true;
                    break 'bfs;
                }
            }
        }
        for s in up_steps(env, bindings, x) {
            if seen.insert(s) {
                queue.push_back(s);
            }
        }
    }
    guard.remove(&(a, b));
    found
}

/// Upward closure of a label under `up_steps`, including itself.
pub fn up_closure(env: &TypeEnv, bindings: &Bindings, l: Label) -> BTreeSet<Label> {
    let mut seen = BTreeSet::from([norm(env, l)]);
    let mut queue: VecDeque<Label> = seen.iter().copied().collect();
    while let Some(x) = queue.pop_front() {
        for s in up_steps(env, bindings, x) {
            if seen.insert(s) {
                queue.push_back(s);
            }
        }
    }
    seen
}

/// Minimal common supertypes of two labels, computed over the
/// containment closure. Empty only for malformed labels.
pub fn least_common_supers(
    env: &TypeEnv,
    bindings: &Bindings,
    a: Label,
    b: Label,
) -> BTreeSet<Label> {
    let ua = up_closure(env, bindings, a);
    let ub = up_closure(env, bindings, b);
    let common: BTreeSet<Label> = ua.intersection(&ub).copied().collect();
    common
        .iter()
        .copied()
        .filter(|x| {
            !common
                .iter()
                .any(|y| y != x && is_subtype(env, bindings, *y, *x))
        })
        .collect()
}

/// The label subtyping graph reachable upward from the byte labels of
/// `roots`. Edges are the covering relation (transitive reduction).
#[derive(Debug, Clone)]
pub struct SubtypeGraph {
    pub nodes: BTreeSet<Label>,
    pub edges: BTreeSet<(Label, Label)>,
}

impl SubtypeGraph {
    /// Render edges as `"Sub <= Super"` strings for inspection.
    pub fn edge_names(&self, env: &TypeEnv) -> Vec<String> {
        self.edges
            .iter()
            .map(|(a, b)| format!("{} <= {}", env.display_label(*a), env.display_label(*b)))
            .collect()
    }
}

/// Derive the subtyping graph for the labels of the given root types.
pub fn subtype_graph(env: &TypeEnv, bindings: &Bindings, roots: &[ExprId]) -> SubtypeGraph {
    let mut nodes = BTreeSet::new();
    for &root in roots {
        let sz = env
            .sizeof(bindings, root)
            .or_else(|| env.sizeof_lower(bindings, root))
            .unwrap_or(0);
        for off in 0..sz {
            nodes.extend(up_closure(env, bindings, Label::new(root, off)));
        }
    }
    let mut order: BTreeMap<(Label, Label), ()> = BTreeMap::new();
    for &a in &nodes {
        for &b in &nodes {
            if a != b && is_subtype(env, bindings, a, b) {
                order.insert((a, b), ());
            }
        }
    }
    let edges = order
        .keys()
        .filter(|(a, b)| {
            // covering pairs only: no strictly intermediate node
            !nodes
                .iter()
                .any(|c| c != a && c != b && order.contains_key(&(*a, *c)) && order.contains_key(&(*c, *b)))
        })
        .copied()
        .collect();
    SubtypeGraph { nodes, edges }
}
