//! Abstraction of a single byte: a reduced product of an unsigned
//! interval, a signed interval, a congruence `x ≡ r (mod m)`, and —
//! while the concretization stays small — an exact value set.
//!
//! The value set is the precision backbone: scheduler state like "one of
//! the two thread records" stays exact through joins. Once a set would
//! exceed the configured limit it collapses into the coarser components.
//! Reduction keeps all components mutually consistent and re-materializes
//! the value set whenever the concretization shrinks back under the
//! limit, so representations of small abstractions are canonical.

use std::collections::BTreeSet;
use std::fmt;

use crate::machine::isa::AluOp;
use crate::machine::state::alu_eval;

/// Default cap on the exact value-set component.
pub const DEFAULT_VSET_LIMIT: usize = 16;

/// Unsigned widening thresholds (both directions snap onto these).
pub const WIDEN_STEPS_UNSIGNED: [u8; 5] = [0, 1, 7, 127, 255];
/// Signed widening thresholds.
pub const WIDEN_STEPS_SIGNED: [i8; 6] = [-128, -1, 0, 1, 7, 127];

/// Abstract byte. `None` parts = bottom (no concrete values).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitvecAbs {
    parts: Option<Parts>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Parts {
    ulo: u8,
    uhi: u8,
    slo: i8,
    shi: i8,
    /// `x ≡ residue (mod modulus)`; modulus 0 means exactly `residue`,
    /// modulus 1 carries no information.
    modulus: u16,
    residue: u8,
    vset: Option<BTreeSet<u8>>,
}

fn gcd(a: u16, b: u16) -> u16 {
    if a == 0 {
        b
    } else {
        gcd(b % a, a)
    }
}

fn norm_cong(m: u32, r: u32) -> (u16, u8) {
    if m == 0 || m >= 256 {
        (0, (r % 256) as u8)
    } else {
        (m as u16, (r % m) as u8)
    }
}

impl Parts {
    fn top() -> Parts {
        Parts {
            ulo: 0,
            uhi: 255,
            slo: -128,
            shi: 127,
            modulus: 1,
            residue: 0,
            vset: None,
        }
    }

    fn contains(&self, v: u8) -> bool {
        if let Some(set) = &self.vset {
            return set.contains(&v);
        }
        let s = v as i8;
        if v < self.ulo || v > self.uhi || s < self.slo || s > self.shi {
            return false;
        }
        match self.modulus {
            0 => v == self.residue,
            1 => true,
            m => v as u16 % m == self.residue as u16,
        }
    }
}

impl BitvecAbs {
    pub fn bottom() -> BitvecAbs {
        BitvecAbs { parts: None }
    }

    pub fn top() -> BitvecAbs {
        BitvecAbs {
            parts: Some(Parts::top()),
        }
    }

    pub fn singleton(v: u8) -> BitvecAbs {
        BitvecAbs::from_set([v], DEFAULT_VSET_LIMIT)
    }

    /// Abstraction of an explicit value set.
    pub fn from_set<I: IntoIterator<Item = u8>>(values: I, k: usize) -> BitvecAbs {
        let set: BTreeSet<u8> = values.into_iter().collect();
        if set.is_empty() {
            return BitvecAbs::bottom();
        }
        let mut parts = Parts::top();
        parts.vset = Some(set);
        BitvecAbs {
            parts: Some(parts),
        }
        .reduced(k)
    }

    /// Abstraction of the unsigned interval `lo..=hi`.
    pub fn from_range(lo: u8, hi: u8, k: usize) -> BitvecAbs {
        if lo > hi {
            return BitvecAbs::bottom();
        }
        let mut parts = Parts::top();
        parts.ulo = lo;
        parts.uhi = hi;
        BitvecAbs {
            parts: Some(parts),
        }
        .reduced(k)
    }

    pub fn is_bottom(&self) -> bool {
        self.parts.is_none()
    }

    pub fn is_top(&self) -> bool {
        self.parts.as_ref() == Some(&Parts::top())
    }

    pub fn contains(&self, v: u8) -> bool {
        self.parts.as_ref().is_some_and(|p| p.contains(v))
    }

    /// Unsigned bounds, `None` for bottom.
    pub fn bounds(&self) -> Option<(u8, u8)> {
        self.parts.as_ref().map(|p| (p.ulo, p.uhi))
    }

    /// The congruence component `(modulus, residue)`; modulus 0 means the
    /// value is exactly the residue.
    pub fn congruence(&self) -> Option<(u16, u8)> {
        self.parts.as_ref().map(|p| (p.modulus, p.residue))
    }

    /// Exact concretization, in ascending order.
    pub fn values(&self) -> Vec<u8> {
        match &self.parts {
            None => Vec::new(),
            Some(p) => match &p.vset {
                Some(set) => set.iter().copied().collect(),
                None => (p.ulo..=p.uhi).filter(|&v| p.contains(v)).collect(),
            },
        }
    }

    /// Number of concrete values.
    pub fn count(&self) -> usize {
        match &self.parts {
            None => 0,
            Some(p) => match &p.vset {
                Some(set) => set.len(),
                None => (p.ulo..=p.uhi).filter(|&v| p.contains(v)).count(),
            },
        }
    }

    /// The single concrete value, if there is exactly one.
    pub fn as_singleton(&self) -> Option<u8> {
        let p = self.parts.as_ref()?;
        if let Some(set) = &p.vset {
            if set.len() == 1 {
                return set.iter().next().copied();
            }
            return None;
        }
        if p.ulo == p.uhi {
            Some(p.ulo)
        } else {
            None
        }
    }

    /// γ(self) ⊆ γ(other)?
    pub fn le(&self, other: &BitvecAbs) -> bool {
        let Some(a) = &self.parts else { return true };
        let Some(b) = &other.parts else { return false };
        if let Some(set) = &a.vset {
            return set.iter().all(|&v| b.contains(v));
        }
        if b.vset.is_some() {
            // Canonical forms: no vset on the left means the left
            // concretization is larger than any vset could be.
            return false;
        }
        let cong_le = match (a.modulus, b.modulus) {
            (_, 1) => true,
            (0, 0) => a.residue == b.residue,
            (0, m) => a.residue as u16 % m == b.residue as u16,
            (_, 0) => false,
            (ma, mb) => ma % mb == 0 && a.residue as u16 % mb == b.residue as u16,
        };
        a.ulo >= b.ulo && a.uhi <= b.uhi && a.slo >= b.slo && a.shi <= b.shi && cong_le
    }

    pub fn join(&self, other: &BitvecAbs, k: usize) -> BitvecAbs {
        let (a, b) = match (&self.parts, &other.parts) {
            (None, _) => return other.clone(),
            (_, None) => return self.clone(),
            (Some(a), Some(b)) => (a, b),
        };
        let (modulus, residue) = {
            let g = gcd(gcd(a.modulus, b.modulus), a.residue.abs_diff(b.residue) as u16);
            norm_cong(g as u32, a.residue as u32)
        };
        let vset = match (&a.vset, &b.vset) {
            (Some(x), Some(y)) => {
                let u: BTreeSet<u8> = x.union(y).copied().collect();
                (u.len() <= k).then_some(u)
            }
            _ => None,
        };
        BitvecAbs {
            parts: Some(Parts {
                ulo: a.ulo.min(b.ulo),
                uhi: a.uhi.max(b.uhi),
                slo: a.slo.min(b.slo),
                shi: a.shi.max(b.shi),
                modulus,
                residue,
                vset,
            }),
        }
        .reduced(k)
    }

    /// Widening; `other` must already include `self` (join first). Small
    /// value sets pass through unchanged — their growth is bounded by the
    /// set limit — while interval bounds snap outward onto thresholds.
    pub fn widen(&self, other: &BitvecAbs, k: usize) -> BitvecAbs {
        let (a, b) = match (&self.parts, &other.parts) {
            (None, _) => return other.clone(),
            (_, None) => return self.clone(),
            (Some(a), Some(b)) => (a, b),
        };
        if b.vset.is_some() {
            return other.clone();
        }
        let (ulo, uhi) = widen_bounds((a.ulo, a.uhi), (b.ulo, b.uhi));
        let (slo, shi) = widen_bounds_signed((a.slo, a.shi), (b.slo, b.shi));
        BitvecAbs {
            parts: Some(Parts {
                ulo,
                uhi,
                slo,
                shi,
                modulus: b.modulus,
                residue: b.residue,
                vset: None,
            }),
        }
        .reduced(k)
    }

    /// Canonicalize: make every component as tight as the intersection of
    /// all of them, collapse to bottom when empty, and (re)materialize the
    /// value set when at most `k` values remain.
    fn reduced(mut self, k: usize) -> BitvecAbs {
        let Some(p) = self.parts.as_mut() else {
            return self;
        };
        // Pull the concretization through every component.
        let candidates: Vec<u8> = match p.vset.take() {
            Some(set) => {
                let probe = Parts { vset: None, ..p.clone() };
                set.into_iter().filter(|&v| probe.contains(v)).collect()
            }
            None => {
                let probe = Parts { vset: None, ..p.clone() };
                let n = (probe.ulo..=probe.uhi).filter(|&v| probe.contains(v)).count();
                if n == 0 {
                    return BitvecAbs::bottom();
                }
                if n > k {
                    // Too many values for a set: tighten bounds only.
                    let lo = (probe.ulo..=probe.uhi).find(|&v| probe.contains(v)).unwrap();
                    let hi = (probe.ulo..=probe.uhi).rev().find(|&v| probe.contains(v)).unwrap();
                    p.ulo = lo;
                    p.uhi = hi;
                    let svals: Vec<i8> = (lo..=hi)
                        .filter(|&v| probe.contains(v))
                        .map(|v| v as i8)
                        .collect();
                    p.slo = svals.iter().copied().min().unwrap();
                    p.shi = svals.iter().copied().max().unwrap();
                    if p.modulus == 1 {
                        p.residue = 0;
                    }
                    return self;
                }
                (probe.ulo..=probe.uhi).filter(|&v| probe.contains(v)).collect()
            }
        };
        if candidates.is_empty() {
            return BitvecAbs::bottom();
        }
        p.ulo = *candidates.first().unwrap();
        p.uhi = *candidates.last().unwrap();
        p.slo = candidates.iter().map(|&v| v as i8).min().unwrap();
        p.shi = candidates.iter().map(|&v| v as i8).max().unwrap();
        let (modulus, residue) = if candidates.len() == 1 {
            (0, candidates[0])
        } else {
            let base = candidates[0];
            let g = candidates[1..]
                .iter()
                .fold(0u16, |g, &v| gcd(g, (v - base) as u16));
            norm_cong(g as u32, base as u32)
        };
        p.modulus = modulus;
        p.residue = residue;
        p.vset = (candidates.len() <= k).then(|| candidates.into_iter().collect());
        self
    }
}

/// Threshold widening of unsigned bounds: a bound that moved past the old
/// one jumps to the next threshold in that direction.
pub fn widen_bounds(old: (u8, u8), new: (u8, u8)) -> (u8, u8) {
    let lo = if new.0 < old.0 {
        *WIDEN_STEPS_UNSIGNED
            .iter()
            .filter(|&&t| t <= new.0)
            .max()
            .unwrap_or(&0)
    } else {
        old.0
    };
    let hi = if new.1 > old.1 {
        *WIDEN_STEPS_UNSIGNED
            .iter()
            .filter(|&&t| t >= new.1)
            .min()
            .unwrap_or(&255)
    } else {
        old.1
    };
    (lo.min(new.0), hi.max(new.1))
}

fn widen_bounds_signed(old: (i8, i8), new: (i8, i8)) -> (i8, i8) {
    let lo = if new.0 < old.0 {
        *WIDEN_STEPS_SIGNED
            .iter()
            .filter(|&&t| t <= new.0)
            .max()
            .unwrap_or(&-128)
    } else {
        old.0
    };
    let hi = if new.1 > old.1 {
        *WIDEN_STEPS_SIGNED
            .iter()
            .filter(|&&t| t >= new.1)
            .min()
            .unwrap_or(&127)
    } else {
        old.1
    };
    (lo.min(new.0), hi.max(new.1))
}

/// Result of an abstract ALU step. `Cmp` produces the possible Z/LT bit
/// pairs (0b00 greater, 0b01 equal, 0b10 less); callers merge them into
/// the flags byte. `may_div_zero` reports that a zero divisor is
/// possible; the value then covers the non-zero divisors only.
pub struct AluTransfer {
    pub value: BitvecAbs,
    pub may_div_zero: bool,
}

pub fn transfer_alu(op: AluOp, a: &BitvecAbs, b: &BitvecAbs, k: usize) -> AluTransfer {
    if a.is_bottom() || b.is_bottom() {
        return AluTransfer {
            value: BitvecAbs::bottom(),
            may_div_zero: false,
        };
    }
    let may_div_zero = op == AluOp::Div && b.contains(0);
    let ca = a.count();
    let cb = b.count();
    if ca.saturating_mul(cb) <= 256 {
        let mut out = BTreeSet::new();
        for &x in &a.values() {
            for &y in &b.values() {
                match op {
                    AluOp::Cmp => {
                        out.insert(if x == y {
                            0b01
                        } else if x < y {
                            0b10
                        } else {
                            0b00
                        });
                    }
                    AluOp::Div if y == 0 => {}
                    _ => {
                        out.insert(alu_eval(op, x, y));
                    }
                }
            }
        }
        return AluTransfer {
            value: BitvecAbs::from_set(out, k),
            may_div_zero,
        };
    }
    let pa = a.parts.as_ref().unwrap();
    let pb = b.parts.as_ref().unwrap();
    let value = match op {
        AluOp::Cmp => {
            let mut out = BTreeSet::new();
            if pa.ulo <= pb.uhi && pb.ulo <= pa.uhi {
                out.insert(0b01u8);
            }
            if pa.ulo < pb.uhi {
                out.insert(0b10);
            }
            if pa.uhi > pb.ulo {
                out.insert(0b00);
            }
            BitvecAbs::from_set(out, k)
        }
        AluOp::Add => add_approx(pa, pb, k),
        AluOp::Sub => sub_approx(pa, pb, k),
        AluOp::And => {
            BitvecAbs::from_range(0, pa.uhi.min(pb.uhi), k)
        }
        AluOp::Or => {
            BitvecAbs::from_range(pa.ulo.max(pb.ulo), mask_cover(pa.uhi) | mask_cover(pb.uhi), k)
        }
        AluOp::Xor => BitvecAbs::from_range(0, mask_cover(pa.uhi) | mask_cover(pb.uhi), k),
        AluOp::Shl | AluOp::Shr => shift_approx(op, pa, b, k),
        AluOp::Div => match pa.ulo.checked_div(pb.uhi) {
            // divisor can only be zero; the value part is empty
            None => BitvecAbs::bottom(),
            Some(lo) => BitvecAbs::from_range(lo, pa.uhi / pb.ulo.max(1), k),
        },
    };
    AluTransfer {
        value,
        may_div_zero,
    }
}

/// Smallest all-ones mask (2^n - 1) covering `v`.
fn mask_cover(v: u8) -> u8 {
    let mut m = 0u8;
    while m < v {
        m = m << 1 | 1;
    }
    m
}

fn cong_arith(pa: &Parts, pb: &Parts, wrap_possible: bool, sub: bool) -> (u16, u8) {
    let g0 = gcd(pa.modulus, pb.modulus);
    let g = if wrap_possible { gcd(g0, 256) } else { g0 };
    let r = if sub {
        (pa.residue as i32 - pb.residue as i32).rem_euclid(256) as u32
    } else {
        pa.residue as u32 + pb.residue as u32
    };
    norm_cong(g as u32, if g == 0 { r % 256 } else { r % g as u32 })
}

fn add_approx(pa: &Parts, pb: &Parts, k: usize) -> BitvecAbs {
    let lo = pa.ulo as u16 + pb.ulo as u16;
    let hi = pa.uhi as u16 + pb.uhi as u16;
    let (ulo, uhi, wrapped) = if hi <= 255 {
        (lo as u8, hi as u8, false)
    } else if lo >= 256 {
        ((lo - 256) as u8, (hi - 256) as u8, false)
    } else {
        (0, 255, true)
    };
    let (modulus, residue) = cong_arith(pa, pb, wrapped, false);
    let mut parts = Parts::top();
    parts.ulo = ulo;
    parts.uhi = uhi;
    parts.modulus = modulus;
    parts.residue = residue;
    BitvecAbs {
        parts: Some(parts),
    }
    .reduced(k)
}

fn sub_approx(pa: &Parts, pb: &Parts, k: usize) -> BitvecAbs {
    let lo = pa.ulo as i16 - pb.uhi as i16;
    let hi = pa.uhi as i16 - pb.ulo as i16;
    let (ulo, uhi, wrapped) = if lo >= 0 {
        (lo as u8, hi as u8, false)
    } else if hi < 0 {
        ((lo + 256) as u8, (hi + 256) as u8, false)
    } else {
        (0, 255, true)
    };
    let (modulus, residue) = cong_arith(pa, pb, wrapped, true);
    let mut parts = Parts::top();
    parts.ulo = ulo;
    parts.uhi = uhi;
    parts.modulus = modulus;
    parts.residue = residue;
    BitvecAbs {
        parts: Some(parts),
    }
    .reduced(k)
}

fn shift_approx(op: AluOp, pa: &Parts, b: &BitvecAbs, k: usize) -> BitvecAbs {
    let amounts = if b.count() <= 16 {
        b.values()
    } else {
        return match op {
            AluOp::Shr => BitvecAbs::from_range(0, pa.uhi, k),
            _ => BitvecAbs::top(),
        };
    };
    let mut acc = BitvecAbs::bottom();
    for n in amounts {
        let one = if n >= 8 {
            BitvecAbs::singleton(0)
        } else if op == AluOp::Shr {
            BitvecAbs::from_range(pa.ulo >> n, pa.uhi >> n, k)
        } else if (pa.uhi as u16) << n <= 255 {
            BitvecAbs::from_range(pa.ulo << n, pa.uhi << n, k)
        } else {
            // Left shift may drop high bits; keep only the trailing-zeros fact.
            let mut parts = Parts::top();
            let (m, r) = norm_cong(1u32 << n, 0);
            parts.modulus = m;
            parts.residue = r;
            BitvecAbs {
                parts: Some(parts),
            }
            .reduced(k)
        };
        acc = acc.join(&one, k);
    }
    acc
}

impl fmt::Display for BitvecAbs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Some(p) = &self.parts else {
            return f.write_str("bot");
        };
        if self.is_top() {
            return f.write_str("top");
        }
        if let Some(set) = &p.vset {
            let items: Vec<String> = set.iter().map(|v| format!("{v:#04x}")).collect();
            return write!(f, "{{{}}}", items.join(", "));
        }
        write!(f, "[{:#04x}, {:#04x}]", p.ulo, p.uhi)?;
        if p.modulus > 1 {
            write!(f, " rem {} mod {}", p.residue, p.modulus)?;
        }
        Ok(())
    }
}
