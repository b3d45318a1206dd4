//! Scalability benchmark: generate systems with N round-robin threads
//! and time both analysis modes over a sweep of N.
//!
//! The generated kernel is the round-robin scheduler relocated to
//! address 0 with its variables at fixed addresses, so its bytes — and
//! therefore the parameterized analysis input — are identical for every
//! N. Only the user image grows with N.

use std::time::Instant;

use crate::analysis::engine::AnalysisSettings;
use crate::asm::assemble;
use crate::domains::shape::parse::parse_annotations;
use crate::domains::value::DEFAULT_VSET_LIMIT;
use crate::machine::image::MachineImage;
use crate::verify::{conclude, run_parameterized_core, verify_in_context, Verification};

/// Address of the interface block in generated systems.
pub const GEN_IFACE: u8 = 0x6a;
/// Address of the first thread record.
pub const GEN_THREADS: u8 = 0x6c;
/// Base of the shared user code segment.
pub const GEN_CODE_SEG: u8 = 0xe0;
/// Base of the shared user scratch segment.
pub const GEN_SCRATCH: u8 = 0xf0;

/// Largest representable thread count: records start at 0x6c, each is
/// 5 bytes, and they must leave room for the 4-byte memory table below
/// the code segment at 0xe0.
pub const MAX_THREADS: usize = (GEN_CODE_SEG as usize - GEN_THREADS as usize - 4) / 5;

/// Annotations for every generated system; N never appears in them.
pub const GENERATED_ANNOTATIONS: &str = "\
param nb_threads >= 1;
boundary kernel_last_addr;

type Flags = (Int8 where self & PRIVILEGED == 0)

type Context = struct {
    pc: Int8;
    sp: Int8;
    flags: Flags;
}

type Segment = struct {
    base: (Int8 where self >= kernel_last_addr);
    size: Int8;
}

type Memory_Table = struct {
    code: Segment;
    data: Segment;
}

type Thread = struct {
    mt: Memory_Table*;
    ctx: Context;
    next: Thread*;
}

type Interface = struct {
    threads: Thread[nb_threads]*;
    threads_length: (Int8 where self == nb_threads);
}

region iface : Interface @ 0x6a;
region cur : Thread* @ 0x68;
region ctx_var : Context* @ 0x69;
";

const GENERATED_KERNEL: &str = "\
.org 0x00
.entry reset=reset
.entry syscall=svc
.entry timer=timer

.equ th_ctx, 1
.equ th_next, 4
.equ iface, 0x6a

reset:
    load.imm sp, cur
    call init
    call load_mt
    call load_context
    iret

svc:
    load.imm sp, cur
    call save_context
    call schedule
    call load_mt
    call load_context
    iret

timer:
    jmp.abs svc

init:
    load.dir r0, iface
    store.dir cur, r0
    add r0, th_ctx
    store.dir ctx, r0
    ret

save_context:
    load.dir r0, ctx
    rdureg r1, upc
    store.ind (r0), r1
    add r0, 1
    rdureg r1, usp
    store.ind (r0), r1
    add r0, 1
    rdureg r1, uflags
    store.ind (r0), r1
    ret

schedule:
    load.dir r0, cur
    add r0, th_next
    load.ind r1, (r0)
    store.dir cur, r1
    add r1, th_ctx
    store.dir ctx, r1
    ret

load_mt:
    load.dir r0, cur
    load.ind r1, (r0)
    wrmpu1 r1
    mov r2, r1
    add r2, 2
    wrmpu2 r2
    ret

load_context:
    load.dir r0, ctx
    load.ind r1, (r0)
    wrureg upc, r1
    add r0, 1
    load.ind r1, (r0)
    wrureg usp, r1
    add r0, 1
    load.ind r1, (r0)
    wruflags r1
    ret

.org 0x68
cur: .byte 0x6c
ctx: .byte 0x6d
";

/// The scheduler kernel shared by all generated systems.
pub fn generated_kernel() -> MachineImage {
    assemble(GENERATED_KERNEL).expect("generated kernel assembles")
}

/// A user image with `n` threads linked in a ring, all sharing one code
/// segment and one scratch segment.
pub fn generated_user(n: usize) -> Result<MachineImage, String> {
    if n == 0 {
        return Err("a system needs at least one thread".into());
    }
    if n > MAX_THREADS {
        return Err(format!(
            "{n} threads need {} record bytes; only {} fit below the user segments \
             (max {MAX_THREADS} threads in the 8-bit address space)",
            5 * n,
            GEN_CODE_SEG as usize - GEN_THREADS as usize - 4,
        ));
    }
    let mt = GEN_THREADS as usize + 5 * n;
    let mut src = String::new();
    src.push_str(&format!(
        ".org {GEN_IFACE:#04x}\n.entry reset=entry\n.entry syscall=entry\n.entry timer=entry\n\n"
    ));
    src.push_str(&format!("iface:\n    .byte {GEN_THREADS:#04x}, {n:#04x}\n"));
    for i in 0..n {
        let next = GEN_THREADS as usize + 5 * ((i + 1) % n);
        let sp = GEN_SCRATCH as usize + 4 + (i % 12);
        src.push_str(&format!(
            "thread{i}:\n    .byte {mt:#04x}, entry, {sp:#04x}, 0x01, {next:#04x}\n"
        ));
    }
    src.push_str(&format!(
        "mem_table:\n    .byte {GEN_CODE_SEG:#04x}, 0x0f, {GEN_SCRATCH:#04x}, 0x0f\n"
    ));
    src.push_str(&format!(
        "\n.org {GEN_CODE_SEG:#04x}\nloop:\n    load.imm r1, 0x2a\n    store.dir {GEN_SCRATCH:#04x}, r1\n    syscall\n    jmp.abs loop\nentry:\n    jmp.abs loop\n"
    ));
    assemble(&src).map_err(|e| format!("generated user image does not assemble: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    InContext,
    Parameterized,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::InContext => "incontext",
            BenchMode::Parameterized => "param",
        }
    }
}

/// Peak-allocation probe, supplied by binaries that install a counting
/// allocator; `reset` zeroes the peak, `peak` reads it.
#[derive(Clone, Copy)]
pub struct MemProbe {
    pub reset: fn(),
    pub peak: fn() -> u64,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub mode: &'static str,
    pub millis: f64,
    pub peak_bytes: Option<u64>,
    pub verdict: String,
    /// Canonical invariant rendering, for cross-N comparison.
    pub invariant: Option<String>,
}

/// Time one mode across a sweep of thread counts. In-context rows need
/// the concrete image, so thread counts beyond [`MAX_THREADS`] report
/// infeasibility; the parameterized analysis never looks at the image
/// (its one proof covers every N), so those rows time the family proof.
pub fn bench_sweep(ns: &[usize], mode: BenchMode, probe: Option<MemProbe>) -> Vec<BenchRow> {
    let kernel = generated_kernel();
    let ann = parse_annotations(GENERATED_ANNOTATIONS).expect("generated annotations parse");
    let mut rows = Vec::new();
    for &n in ns {
        let row = match mode {
            BenchMode::InContext => match generated_user(n) {
                Err(why) => BenchRow {
                    n,
                    mode: mode.name(),
                    millis: 0.0,
                    peak_bytes: None,
                    verdict: format!("infeasible: {why}"),
                    invariant: None,
                },
                Ok(user) => {
                    // value sets must hold all n thread addresses to stay exact
                    let settings = AnalysisSettings {
                        k: DEFAULT_VSET_LIMIT.max(n + 8),
                        ..AnalysisSettings::default()
                    };
                    let (v, millis, peak) = timed(probe, || {
                        verify_in_context(&kernel, &user, &settings)
                            .expect("generated system loads")
                    });
                    row_from(n, mode, v, millis, peak)
                }
            },
            BenchMode::Parameterized => {
                let settings = AnalysisSettings::default();
                let (v, millis, peak) = timed(probe, || {
                    let result = run_parameterized_core(&kernel, &ann, &settings)
                        .expect("generated annotations expand");
                    conclude(result, Some(&ann.env))
                });
                row_from(n, mode, v, millis, peak)
            }
        };
        rows.push(row);
    }
    rows
}

fn timed<T>(probe: Option<MemProbe>, f: impl FnOnce() -> T) -> (T, f64, Option<u64>) {
    if let Some(p) = probe {
        (p.reset)();
    }
    let start = Instant::now();
    let v = f();
    let millis = start.elapsed().as_secs_f64() * 1e3;
    (v, millis, probe.map(|p| (p.peak)()))
}

fn row_from(n: usize, mode: BenchMode, v: Verification, millis: f64, peak: Option<u64>) -> BenchRow {
    let verdict = if v.arte.proved() && v.ape.proved() {
        "proved".to_string()
    } else if !v.arte.proved() {
        format!("arte {}", v.arte)
    } else {
        format!("ape {}", v.ape)
    };
    BenchRow {
        n,
        mode: mode.name(),
        millis,
        peak_bytes: peak,
        verdict,
        invariant: Some(v.invariant),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_kernel_image_never_depends_on_n() {
        // one kernel serves every generated system
        let k = generated_kernel();
        assert_eq!(k.origin, 0x00);
        assert_eq!(k.end(), 0x6a);
        assert_eq!(k.resolve("cur"), Some(0x68));
        assert_eq!(k.resolve("ctx"), Some(0x69));
    }

    #[test]
    fn generated_users_lay_out_as_documented() {
        let u = generated_user(3).unwrap();
        assert_eq!(u.origin, GEN_IFACE);
        assert_eq!(u.bytes[0], GEN_THREADS);
        assert_eq!(u.bytes[1], 3);
        // ring links: t0 -> t1 -> t2 -> t0
        let rec = |i: usize| &u.bytes[2 + 5 * i..2 + 5 * i + 5];
        assert_eq!(rec(0)[4], GEN_THREADS + 5);
        assert_eq!(rec(1)[4], GEN_THREADS + 10);
        assert_eq!(rec(2)[4], GEN_THREADS);
        // every record shares the memory table after the ring
        let mt = GEN_THREADS + 15;
        assert!((0..3).all(|i| rec(i)[0] == mt));
        assert_eq!(u.bytes[(mt - GEN_IFACE) as usize..(mt - GEN_IFACE) as usize + 4],
                   [GEN_CODE_SEG, 0x0f, GEN_SCRATCH, 0x0f]);
    }

    #[test]
    fn thread_count_caps_at_the_address_space() {
        assert_eq!(MAX_THREADS, 22);
        assert!(generated_user(MAX_THREADS).is_ok());
        assert!(generated_user(MAX_THREADS + 1).is_err());
        assert!(generated_user(0).is_err());
    }

    #[test]
    fn generated_systems_verify_in_both_modes() {
        for n in [1, 2, 5] {
            let rows = bench_sweep(&[n], BenchMode::InContext, None);
            assert_eq!(rows[0].verdict, "proved", "incontext n={n}: {}", rows[0].verdict);
        }
        let rows = bench_sweep(&[2], BenchMode::Parameterized, None);
        assert_eq!(rows[0].verdict, "proved", "param: {}", rows[0].verdict);
    }

    #[test]
    fn parameterized_invariant_is_identical_across_n() {
        let rows = bench_sweep(&[2, 7, 128], BenchMode::Parameterized, None);
        let inv0 = rows[0].invariant.as_ref().unwrap();
        assert!(rows.iter().all(|r| r.invariant.as_ref().unwrap() == inv0));
        assert!(!inv0.is_empty());
    }

    #[test]
    fn infeasible_in_context_rows_say_why() {
        let rows = bench_sweep(&[128], BenchMode::InContext, None);
        assert!(rows[0].verdict.starts_with("infeasible"), "{}", rows[0].verdict);
    }
}
