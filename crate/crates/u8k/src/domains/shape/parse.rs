//! Parser for annotation files (`.u8ka`).
//!
//! Grammar, one statement per `;` (comment lines start with `;`):
//!
//! ```text
//! param NAME [>= N];        boundary NAME;       const NAME = N;
//! type NAME = TYPE          region NAME : TYPE @ ADDR;
//! exitpoint SYMBOL;         exitpoint 0xNN;
//! TYPE  := Int8 | Word | NAME | struct { f: TYPE; ... }
//!        | ( TYPE where PRED ) | TYPE * | TYPE ?* | TYPE [ N | PARAM ]
//! PRED  := E (== | != | < | <= | >= | >) E
//! E     := ATOM ((+ | - | &) ATOM)*
//! ATOM  := self | self.FIELD | PARAM | CONST | NUMBER
//! ```

use std::collections::BTreeMap;

use super::{
    ArrayLen, Atom, CmpOp, ExitPoint, ParamInfo, PExpr, Pred, PredBinOp, Region, TypeEnv,
    TypeExpr,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct AnnotError {
    pub line: usize,
    pub msg: String,
}

/// A parsed annotation file.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub env: TypeEnv,
    pub regions: Vec<Region>,
    pub exitpoint: Option<ExitPoint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(u16),
    Punct(&'static str),
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AnnotError> {
    Err(AnnotError {
        line,
        msg: msg.into(),
    })
}

fn lex(source: &str) -> Result<Vec<(Tok, usize)>, AnnotError> {
    let mut toks = Vec::new();
    for (no, raw) in source.lines().enumerate() {
        let line = no + 1;
        let text = raw.trim();
        if text.starts_with(';') || text.is_empty() {
            continue;
        }
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), line));
                continue;
            }
            if c.is_ascii_digit() {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                let lit = &text[start..i];
                let v = if let Some(hex) = lit.strip_prefix("0x").or(lit.strip_prefix("0X")) {
                    u16::from_str_radix(hex, 16)
                } else {
                    lit.parse()
                };
                match v {
                    Ok(n) => toks.push((Tok::Num(n), line)),
                    Err(_) => return err(line, format!("bad number `{lit}`")),
                }
                continue;
            }
            let two = if i + 1 < bytes.len() {
                &text[i..i + 2]
            } else {
                ""
            };
            let p = match two {
                "==" | "!=" | "<=" | ">=" => Some(match two {
                    "==" => "==",
                    "!=" => "!=",
                    "<=" => "<=",
                    _ => ">=",
                }),
                _ => None,
            };
            if let Some(p) = p {
                toks.push((Tok::Punct(p), line));
                i += 2;
                continue;
            }
            let p = match c {
                '{' => "{",
                '}' => "}",
                '(' => "(",
                ')' => ")",
                '[' => "[",
                ']' => "]",
                '*' => "*",
                '?' => "?",
                ':' => ":",
                ';' => ";",
                '@' => "@",
                '=' => "=",
                ',' => ",",
                '.' => ".",
                '&' => "&",
                '+' => "+",
                '-' => "-",
                '<' => "<",
                '>' => ">",
                _ => return err(line, format!("unexpected character `{c}`")),
            };
            toks.push((Tok::Punct(p), line));
            i += 1;
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    env: TypeEnv,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or(self.toks.last())
            .map(|t| t.1)
            .unwrap_or(0)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t.map(|t| t.0)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if let Some(Tok::Punct(q)) = self.peek() {
            if *q == p {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), AnnotError> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            err(self.line(), format!("expected `{p}`"))
        }
    }

    fn expect_ident(&mut self) -> Result<String, AnnotError> {
        let line = self.line();
        match self.next() {
            Some(Tok::Ident(n)) => Ok(n),
            _ => err(line, "expected a name"),
        }
    }

    fn expect_num(&mut self) -> Result<u16, AnnotError> {
        let line = self.line();
        match self.next() {
            Some(Tok::Num(n)) => Ok(n),
            _ => err(line, "expected a number"),
        }
    }
}

/// Parse an annotation file into a type environment, regions, and the
/// optional boot exit point.
pub fn parse_annotations(source: &str) -> Result<Annotations, AnnotError> {
    let toks = lex(source)?;
    let mut p = Parser {
        toks,
        pos: 0,
        env: TypeEnv::new(),
    };
    let mut regions = Vec::new();
    let mut exitpoint = None;
    while p.peek().is_some() {
        let line = p.line();
        let kw = p.expect_ident()?;
        match kw.as_str() {
            "param" => {
                let name = p.expect_ident()?;
                let lower = if p.eat_punct(">=") {
                    Some(p.expect_num()?)
                } else {
                    None
                };
                p.expect_punct(";")?;
                if p.env.params.contains_key(&name) {
                    return err(line, format!("parameter `{name}` declared twice"));
                }
                p.env.params.insert(
                    name,
                    ParamInfo {
                        lower,
                        boundary: false,
                    },
                );
            }
            "boundary" => {
                let name = p.expect_ident()?;
                p.expect_punct(";")?;
                if p.env.boundary_param().is_some() {
                    return err(line, "only one boundary parameter is allowed");
                }
                let info = p.env.params.entry(name).or_insert(ParamInfo {
                    lower: None,
                    boundary: false,
                });
                info.boundary = true;
            }
            "const" => {
                let name = p.expect_ident()?;
                p.expect_punct("=")?;
                let v = p.expect_num()?;
                p.expect_punct(";")?;
                p.env.consts.insert(name, v);
            }
            "type" => {
                let name = p.expect_ident()?;
                if name == "Int8" || name == "Word" || p.env.defs.contains_key(&name) {
                    return err(line, format!("type `{name}` defined twice"));
                }
                p.expect_punct("=")?;
                let id = parse_type(&mut p)?;
                p.eat_punct(";");
                p.env.define(&name, id);
            }
            "region" => {
                let name = p.expect_ident()?;
                p.expect_punct(":")?;
                let ty = parse_type(&mut p)?;
                p.expect_punct("@")?;
                let addr = p.expect_num()?;
                p.expect_punct(";")?;
                if addr > 0xff {
                    return err(line, format!("region address 0x{addr:x} out of range"));
                }
                regions.push(Region {
                    name,
                    ty,
                    addr: addr as u8,
                });
            }
            "exitpoint" => {
                let line = p.line();
                let ep = match p.next() {
                    Some(Tok::Ident(n)) => ExitPoint::Symbol(n),
                    Some(Tok::Num(n)) if n <= 0xff => ExitPoint::Addr(n as u8),
                    _ => return err(line, "expected a symbol or address"),
                };
                p.expect_punct(";")?;
                if exitpoint.is_some() {
                    return err(line, "only one exit point is allowed");
                }
                exitpoint = Some(ep);
            }
            other => return err(line, format!("unknown statement `{other}`")),
        }
    }
    check_names_resolve(&p.env)?;
    Ok(Annotations {
        env: p.env,
        regions,
        exitpoint,
    })
}

fn parse_type(p: &mut Parser) -> Result<super::ExprId, AnnotError> {
    let line = p.line();
    let mut id = match p.next() {
        Some(Tok::Ident(n)) => match n.as_str() {
            "Int8" => p.env.int8(),
            "Word" => p.env.word(),
            "struct" => {
                p.expect_punct("{")?;
                let mut fields = Vec::new();
                let mut seen = BTreeMap::new();
                while !p.eat_punct("}") {
                    let fline = p.line();
                    let fname = p.expect_ident()?;
                    p.expect_punct(":")?;
                    let fty = parse_type(p)?;
                    p.expect_punct(";")?;
                    if seen.insert(fname.clone(), ()).is_some() {
                        return err(fline, format!("field `{fname}` declared twice"));
                    }
                    fields.push((fname, fty));
                }
                if fields.is_empty() {
                    return err(line, "empty struct");
                }
                p.env.intern(TypeExpr::Struct(fields))
            }
            _ => p.env.intern(TypeExpr::Named(n)),
        },
        Some(Tok::Punct("(")) => {
            let base = parse_type(p)?;
            let wline = p.line();
            match p.next() {
                Some(Tok::Ident(w)) if w == "where" => {}
                _ => return err(wline, "expected `where`"),
            }
            let pred = parse_pred(p)?;
            p.expect_punct(")")?;
            p.env.intern(TypeExpr::Refined { base, pred })
        }
        _ => return err(line, "expected a type"),
    };
    loop {
        if p.eat_punct("*") {
            id = p.env.intern(TypeExpr::Ptr {
                target: id,
                nullable: false,
            });
        } else if p.eat_punct("?") {
            p.expect_punct("*")?;
            id = p.env.intern(TypeExpr::Ptr {
                target: id,
                nullable: true,
            });
        } else if p.eat_punct("[") {
            let lline = p.line();
            let len = match p.next() {
                Some(Tok::Num(n)) => ArrayLen::Const(n),
                Some(Tok::Ident(n)) => ArrayLen::Param(n),
                _ => return err(lline, "expected an array length"),
            };
            p.expect_punct("]")?;
            if let ArrayLen::Param(ref name) = len {
                if !p.env.params.contains_key(name) {
                    return err(lline, format!("unknown length parameter `{name}`"));
                }
            }
            id = p.env.intern(TypeExpr::Array { elem: id, len });
        } else {
            break;
        }
    }
    Ok(id)
}

fn parse_pred(p: &mut Parser) -> Result<Pred, AnnotError> {
    let lhs = parse_pexpr(p)?;
    let line = p.line();
    let op = match p.next() {
        Some(Tok::Punct("==")) | Some(Tok::Punct("=")) => CmpOp::Eq,
        Some(Tok::Punct("!=")) => CmpOp::Ne,
        Some(Tok::Punct("<")) => CmpOp::Lt,
        Some(Tok::Punct("<=")) => CmpOp::Le,
        Some(Tok::Punct(">=")) => CmpOp::Ge,
        Some(Tok::Punct(">")) => CmpOp::Gt,
        _ => return err(line, "expected a comparison operator"),
    };
    let rhs = parse_pexpr(p)?;
    Ok(Pred { lhs, op, rhs })
}

fn parse_pexpr(p: &mut Parser) -> Result<PExpr, AnnotError> {
    let first = parse_atom(p)?;
    let mut rest = Vec::new();
    loop {
        let op = if p.eat_punct("+") {
            PredBinOp::Add
        } else if p.eat_punct("-") {
            PredBinOp::Sub
        } else if p.eat_punct("&") {
            PredBinOp::And
        } else {
            break;
        };
        rest.push((op, parse_atom(p)?));
    }
    Ok(PExpr { first, rest })
}

fn parse_atom(p: &mut Parser) -> Result<Atom, AnnotError> {
    let line = p.line();
    match p.next() {
        Some(Tok::Num(n)) => Ok(Atom::Num(n)),
        Some(Tok::Ident(n)) if n == "self" => {
            if p.eat_punct(".") {
                Ok(Atom::SelfField(p.expect_ident()?))
            } else {
                Ok(Atom::SelfVal)
            }
        }
        Some(Tok::Ident(n)) => {
            if p.env.params.contains_key(&n) {
                Ok(Atom::Param(n))
            } else if p.env.consts.contains_key(&n) {
                Ok(Atom::Const(n))
            } else {
                err(line, format!("unknown name `{n}` in predicate"))
            }
        }
        _ => err(line, "expected a predicate term"),
    }
}

/// Every `Named` reference must have a definition.
fn check_names_resolve(env: &TypeEnv) -> Result<(), AnnotError> {
    for id in env.expr_ids() {
        if let TypeExpr::Named(n) = env.expr(id) {
            if !env.defs.contains_key(n) {
                return err(0, format!("type `{n}` is never defined"));
            }
        }
    }
    Ok(())
}
