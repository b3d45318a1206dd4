//! The weak shape domain: user-space structure described by types.
//!
//! Annotations give the kernel's view of user memory as a small type
//! language: bytes (`Int8`, `Word`), pointers (`T*`, nullable `T?*`),
//! structs, arrays with constant or parameter lengths, and refinement
//! predicates (`Int8 where self & PRIVILEGED == 0`). A *label* `T_o`
//! stands for "byte at offset `o` of a `T` object"; labels ordered by
//! subtyping are the abstract values of the parameterized analysis.

pub mod interp;
pub mod parse;
pub mod subtype;

use std::collections::BTreeMap;
use std::fmt;

/// Interned type expression handle.
pub type ExprId = u32;

/// Array length: a literal or a named parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArrayLen {
    Const(u16),
    Param(String),
}

/// Comparison operators usable in refinement predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Ge,
    Gt,
}

impl CmpOp {
    pub fn eval(self, a: i32, b: i32) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }
}

/// Leaf terms of predicate expressions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    /// The refined value itself.
    SelfVal,
    /// A field of the refined struct.
    SelfField(String),
    Param(String),
    Const(String),
    Num(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PredBinOp {
    Add,
    Sub,
    And,
}

/// Left-associative chain of atoms: `a + b & c ...`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PExpr {
    pub first: Atom,
    pub rest: Vec<(PredBinOp, Atom)>,
}

impl PExpr {
    pub fn atom(a: Atom) -> PExpr {
        PExpr {
            first: a,
            rest: Vec::new(),
        }
    }
}

/// A single comparison, the only predicate form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pred {
    pub lhs: PExpr,
    pub op: CmpOp,
    pub rhs: PExpr,
}

/// Structure of a type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TypeExpr {
    Int8,
    /// One byte with no interpretation constraints; supertype of every
    /// scalar, including pointers.
    Word,
    /// Reference to a named definition (breaks recursive structures).
    Named(String),
    Ptr {
        target: ExprId,
        nullable: bool,
    },
    /// Fields in declaration order: (name, type).
    Struct(Vec<(String, ExprId)>),
    Array {
        elem: ExprId,
        len: ArrayLen,
    },
    Refined {
        base: ExprId,
        pred: Pred,
    },
}

/// A byte-granular type label: offset `off` into a `ty` object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    pub ty: ExprId,
    pub off: u16,
}

impl Label {
    pub fn new(ty: ExprId, off: u16) -> Label {
        Label { ty, off }
    }
}

/// A typed abstract value held in a register or memory cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TypedValue {
    /// An address of a byte labeled (at least) `target_off`; never null
    /// unless `nullable`.
    PointerTo {
        target: ExprId,
        off: u16,
        nullable: bool,
    },
    /// A byte drawn from the interpretation of a one-byte scalar type.
    ScalarOf { expr: ExprId },
}

impl TypedValue {
    pub fn label(&self) -> Label {
        match *self {
            TypedValue::PointerTo { target, off, .. } => Label::new(target, off),
            TypedValue::ScalarOf { expr } => Label::new(expr, 0),
        }
    }
}

/// Declared analysis parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    /// Declared lower bound (`param nb_threads >= 1`).
    pub lower: Option<u16>,
    /// The protected-space boundary: every labeled or kernel-tracked
    /// address is below it. At most one parameter has this role.
    pub boundary: bool,
}

/// A typed memory region declared in the annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub ty: ExprId,
    pub addr: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitPoint {
    Symbol(String),
    Addr(u8),
}

/// The type environment: interned expressions, named definitions,
/// parameters, and named constants.
#[derive(Debug, Clone)]
pub struct TypeEnv {
    exprs: Vec<TypeExpr>,
    ids: BTreeMap<TypeExpr, ExprId>,
    pub defs: BTreeMap<String, ExprId>,
    def_names: BTreeMap<ExprId, String>,
    pub params: BTreeMap<String, ParamInfo>,
    pub consts: BTreeMap<String, u16>,
}

/// Concrete values for parameters, established by the base case (e.g.
/// `nb_threads = 2`, `kernel_last_addr = 0xb2`).
pub type Bindings = BTreeMap<String, u16>;

impl Default for TypeEnv {
    fn default() -> Self {
        TypeEnv::new()
    }
}

impl TypeEnv {
    pub fn new() -> TypeEnv {
        let mut env = TypeEnv {
            exprs: Vec::new(),
            ids: BTreeMap::new(),
            defs: BTreeMap::new(),
            def_names: BTreeMap::new(),
            params: BTreeMap::new(),
            consts: BTreeMap::from([("PRIVILEGED".to_string(), 0x80)]),
        };
        env.intern(TypeExpr::Int8);
        env.intern(TypeExpr::Word);
        env
    }

    pub fn intern(&mut self, e: TypeExpr) -> ExprId {
        if let Some(&id) = self.ids.get(&e) {
            return id;
        }
        let id = self.exprs.len() as ExprId;
        self.ids.insert(e.clone(), id);
        self.exprs.push(e);
        id
    }

    pub fn int8(&self) -> ExprId {
        self.ids[&TypeExpr::Int8]
    }

    pub fn word(&self) -> ExprId {
        self.ids[&TypeExpr::Word]
    }

    pub fn expr(&self, id: ExprId) -> &TypeExpr {
        &self.exprs[id as usize]
    }

    /// All interned expression ids, densely numbered from zero.
    pub fn expr_ids(&self) -> impl Iterator<Item = ExprId> {
        0..self.exprs.len() as ExprId
    }

    /// Register a named definition.
    pub fn define(&mut self, name: &str, id: ExprId) {
        self.defs.insert(name.to_string(), id);
        self.def_names.entry(id).or_insert_with(|| name.to_string());
    }

    /// Follow `Named` references to the underlying definition.
    pub fn resolve(&self, mut id: ExprId) -> ExprId {
        // Definitions cannot name themselves directly, so this loop is
        // bounded by the number of definitions.
        let mut fuel = self.defs.len() + 1;
        while let TypeExpr::Named(n) = self.expr(id) {
            match self.defs.get(n) {
                Some(&next) if fuel > 0 => {
                    id = next;
                    fuel -= 1;
                }
                _ => break,
            }
        }
        id
    }

    /// The boundary parameter's name, if one was declared.
    pub fn boundary_param(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(_, i)| i.boundary)
            .map(|(n, _)| n.as_str())
    }

    /// Size in bytes under `bindings`; `None` when an array length
    /// parameter is unbound.
    pub fn sizeof(&self, bindings: &Bindings, id: ExprId) -> Option<u16> {
        match self.expr(self.resolve(id)) {
            TypeExpr::Int8 | TypeExpr::Word | TypeExpr::Ptr { .. } => Some(1),
            TypeExpr::Named(_) => None, // unresolvable name
            TypeExpr::Refined { base, .. } => self.sizeof(bindings, *base),
            TypeExpr::Struct(fields) => {
                let mut total = 0u16;
                for (_, f) in fields {
                    total += self.sizeof(bindings, *f)?;
                }
                Some(total)
            }
            TypeExpr::Array { elem, len } => {
                let n = match len {
                    ArrayLen::Const(n) => *n,
                    ArrayLen::Param(p) => *bindings.get(p)?,
                };
                Some(n * self.sizeof(bindings, *elem)?)
            }
        }
    }

    /// A provable lower bound on the size, using declared parameter
    /// lower bounds for unbound array lengths.
    pub fn sizeof_lower(&self, bindings: &Bindings, id: ExprId) -> Option<u16> {
        match self.expr(self.resolve(id)) {
            TypeExpr::Int8 | TypeExpr::Word | TypeExpr::Ptr { .. } => Some(1),
            TypeExpr::Named(_) => None,
            TypeExpr::Refined { base, .. } => self.sizeof_lower(bindings, *base),
            TypeExpr::Struct(fields) => {
                let mut total = 0u16;
                for (_, f) in fields {
                    total += self.sizeof_lower(bindings, *f)?;
                }
                Some(total)
            }
            TypeExpr::Array { elem, len } => {
                let n = match len {
                    ArrayLen::Const(n) => *n,
                    ArrayLen::Param(p) => match bindings.get(p) {
                        Some(&n) => n,
                        None => self.params.get(p)?.lower?,
                    },
                };
                Some(n * self.sizeof_lower(bindings, *elem)?)
            }
        }
    }

    /// The field of `id` (a struct, possibly refined/named) spanning
    /// byte offset `off`: returns (field type, offset within the field).
    /// For arrays, the element and intra-element offset.
    pub fn component_at(&self, bindings: &Bindings, id: ExprId, off: u16) -> Option<(ExprId, u16)> {
        match self.expr(self.resolve(id)) {
            TypeExpr::Struct(fields) => {
                let mut base = 0u16;
                for (_, f) in fields {
                    let sz = self.sizeof(bindings, *f)?;
                    if off < base + sz {
                        return Some((*f, off - base));
                    }
                    base += sz;
                }
                None
            }
            TypeExpr::Array { elem, .. } => {
                let sz = self.sizeof(bindings, *elem)?;
                if sz == 0 {
                    return None;
                }
                Some((*elem, off % sz))
            }
            _ => None,
        }
    }

    /// Human-readable form of a type expression.
    pub fn display_type(&self, id: ExprId) -> String {
        if let Some(name) = self.def_names.get(&id) {
            return name.clone();
        }
        match self.expr(id) {
            TypeExpr::Int8 => "Int8".to_string(),
            TypeExpr::Word => "Word".to_string(),
            TypeExpr::Named(n) => n.clone(),
            TypeExpr::Ptr { target, nullable } => {
                let n = if *nullable { "?*" } else { "*" };
                format!("{}{n}", self.display_type(*target))
            }
            TypeExpr::Struct(_) => "struct".to_string(),
            TypeExpr::Array { elem, len } => {
                let l = match len {
                    ArrayLen::Const(n) => n.to_string(),
                    ArrayLen::Param(p) => p.clone(),
                };
                format!("{}[{l}]", self.display_type(*elem))
            }
            TypeExpr::Refined { base, .. } => {
                format!("({} where ...)", self.display_type(*base))
            }
        }
    }

    /// Human-readable form of a label, e.g. `Thread_4` or `Int8`.
    pub fn display_label(&self, l: Label) -> String {
        let name = self.display_type(l.ty);
        let one = self
            .sizeof(&Bindings::new(), l.ty)
            .or_else(|| self.sizeof_lower(&Bindings::new(), l.ty))
            == Some(1);
        if one && l.off == 0 {
            name
        } else {
            format!("{name}_{}", l.off)
        }
    }

    pub fn display_typed_value(&self, v: &TypedValue) -> String {
        match v {
            TypedValue::PointerTo {
                target,
                off,
                nullable,
            } => {
                let n = if *nullable { "?" } else { "" };
                format!("{}{n}*", self.display_label(Label::new(*target, *off)))
            }
            TypedValue::ScalarOf { expr } => self.display_label(Label::new(*expr, 0)),
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::SelfVal => f.write_str("self"),
            Atom::SelfField(n) => write!(f, "self.{n}"),
            Atom::Param(n) | Atom::Const(n) => f.write_str(n),
            Atom::Num(v) => {
                if *v > 9 {
                    write!(f, "0x{v:x}")
                } else {
                    write!(f, "{v}")
                }
            }
        }
    }
}

impl fmt::Display for PExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.first)?;
        for (op, a) in &self.rest {
            let s = match op {
                PredBinOp::Add => "+",
                PredBinOp::Sub => "-",
                PredBinOp::And => "&",
            };
            write!(f, " {s} {a}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op, self.rhs)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Hand-built environment used by sibling module tests: the
    /// scheduler's user-space types.
    pub(crate) fn scheduler_env() -> TypeEnv {
        let mut env = TypeEnv::new();
        let int8 = env.int8();
        let flags = env.intern(TypeExpr::Refined {
            base: int8,
            pred: Pred {
                lhs: PExpr {
                    first: Atom::SelfVal,
                    rest: vec![(PredBinOp::And, Atom::Const("PRIVILEGED".into()))],
                },
                op: CmpOp::Eq,
                rhs: PExpr::atom(Atom::Num(0)),
            },
        });
        env.define("Flags", flags);
        let context = env.intern(TypeExpr::Struct(vec![
            ("pc".into(), int8),
            ("sp".into(), int8),
            ("flags".into(), flags),
        ]));
        env.define("Context", context);
        let base_refined = env.intern(TypeExpr::Refined {
            base: int8,
            pred: Pred {
                lhs: PExpr::atom(Atom::SelfVal),
                op: CmpOp::Ge,
                rhs: PExpr::atom(Atom::Param("kernel_last_addr".into())),
            },
        });
        let segment = env.intern(TypeExpr::Struct(vec![
            ("base".into(), base_refined),
            ("size".into(), int8),
        ]));
        env.define("Segment", segment);
        let memory_table = env.intern(TypeExpr::Struct(vec![
            ("code".into(), segment),
            ("data".into(), segment),
        ]));
        env.define("Memory_Table", memory_table);
        let mt_ptr = env.intern(TypeExpr::Ptr {
            target: memory_table,
            nullable: false,
        });
        let thread_ref = env.intern(TypeExpr::Named("Thread".into()));
        let thread_ptr = env.intern(TypeExpr::Ptr {
            target: thread_ref,
            nullable: false,
        });
        let thread = env.intern(TypeExpr::Struct(vec![
            ("mt".into(), mt_ptr),
            ("ctx".into(), context),
            ("next".into(), thread_ptr),
        ]));
        env.define("Thread", thread);
        let threads_arr = env.intern(TypeExpr::Array {
            elem: thread,
            len: ArrayLen::Param("nb_threads".into()),
        });
        let threads_ptr = env.intern(TypeExpr::Ptr {
            target: threads_arr,
            nullable: false,
        });
        let len_refined = env.intern(TypeExpr::Refined {
            base: int8,
            pred: Pred {
                lhs: PExpr::atom(Atom::SelfVal),
                op: CmpOp::Eq,
                rhs: PExpr::atom(Atom::Param("nb_threads".into())),
            },
        });
        let interface = env.intern(TypeExpr::Struct(vec![
            ("threads".into(), threads_ptr),
            ("threads_length".into(), len_refined),
        ]));
        env.define("Interface", interface);
        env.params.insert(
            "nb_threads".into(),
            ParamInfo {
                lower: Some(1),
                boundary: false,
            },
        );
        env.params.insert(
            "kernel_last_addr".into(),
            ParamInfo {
                lower: None,
                boundary: true,
            },
        );
        env
    }

    #[test]
    fn sizes_of_the_scheduler_types() {
        let env = scheduler_env();
        let b = Bindings::new();
        assert_eq!(env.sizeof(&b, env.defs["Flags"]), Some(1));
        assert_eq!(env.sizeof(&b, env.defs["Context"]), Some(3));
        assert_eq!(env.sizeof(&b, env.defs["Segment"]), Some(2));
        assert_eq!(env.sizeof(&b, env.defs["Memory_Table"]), Some(4));
        assert_eq!(env.sizeof(&b, env.defs["Thread"]), Some(5));
        assert_eq!(env.sizeof(&b, env.defs["Interface"]), Some(2));
    }

    #[test]
    fn array_sizes_need_bindings() {
        let mut env = scheduler_env();
        let thread = env.defs["Thread"];
        let arr = env.intern(TypeExpr::Array {
            elem: thread,
            len: ArrayLen::Param("nb_threads".into()),
        });
        assert_eq!(env.sizeof(&Bindings::new(), arr), None);
        let b = Bindings::from([("nb_threads".to_string(), 2)]);
        assert_eq!(env.sizeof(&b, arr), Some(10));
        // the declared lower bound provides a provable minimum size
        assert_eq!(env.sizeof_lower(&Bindings::new(), arr), Some(5));
    }

    #[test]
    fn component_lookup_walks_structs_and_arrays() {
        let mut env = scheduler_env();
        let thread = env.defs["Thread"];
        let context = env.defs["Context"];
        let flags = env.defs["Flags"];
        let b = Bindings::from([("nb_threads".to_string(), 2)]);
        assert_eq!(env.component_at(&b, thread, 1), Some((context, 0)));
        assert_eq!(env.component_at(&b, thread, 3), Some((context, 2)));
        assert_eq!(env.component_at(&b, context, 2), Some((flags, 0)));
        let arr = env.intern(TypeExpr::Array {
            elem: thread,
            len: ArrayLen::Param("nb_threads".into()),
        });
        assert_eq!(env.component_at(&b, arr, 7), Some((thread, 2)));
    }

    #[test]
    fn named_references_resolve() {
        let mut env = scheduler_env();
        let named = env.intern(TypeExpr::Named("Thread".into()));
        assert_eq!(env.resolve(named), env.defs["Thread"]);
        assert_eq!(env.sizeof(&Bindings::new(), named), Some(5));
    }

    #[test]
    fn display_forms() {
        let env = scheduler_env();
        let thread = env.defs["Thread"];
        assert_eq!(env.display_label(Label::new(thread, 4)), "Thread_4");
        assert_eq!(env.display_label(Label::new(env.int8(), 0)), "Int8");
        assert_eq!(
            env.display_typed_value(&TypedValue::PointerTo {
                target: thread,
                off: 0,
                nullable: false
            }),
            "Thread_0*"
        );
    }
}
