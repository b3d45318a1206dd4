//! Acceptance gate: seven criteria the shipped verifier must meet, one
//! test per criterion so the harness prints one pass/fail line each.
//!
//! 1. In-context mode reproduces the reference system's kernel-exit
//!    invariant exactly (every register and memory cell pinned).
//! 2. Parameterized mode proves the same kernel for every well-typed
//!    user image, and base-case checking catches a corrupted dump.
//! 3. All seven seeded-defect kernels are rejected on the matching
//!    property (privilege backdoors fail APE, crash bugs fail ARTE).
//! 4. Scalability shape across generated user images: parameterized
//!    time is flat with a byte-identical invariant; in-context time is
//!    required to grow supra-linearly up to 128 threads.
//! 5. Soundness suite: ALU transfer containment vs exhaustive
//!    enumeration, oracle-trace containment in the computed invariant,
//!    and inductiveness of every emitted invariant.
//! 6. Type-system goldens: the derived subtyping graph, the
//!    interpretation of `Context*`, and label separation.
//! 7. Annotation burden: the reference system verifies with at most 20
//!    annotation lines beyond the interface types.
//!
//! `U8K_SEED` (decimal or 0x-hex) fixes the randomized suites.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use u8k::analysis::engine::AnalysisSettings;
use u8k::analysis::AlarmKind;
use u8k::bench::{bench_sweep, BenchMode, BenchRow, MAX_THREADS};
use u8k::corpus;
use u8k::domains::shape::interp::{discover_regions, pointer_set};
use u8k::domains::shape::parse::parse_annotations;
use u8k::domains::shape::subtype::{is_subtype, norm, subtype_graph};
use u8k::domains::shape::{ArrayLen, Bindings, Label, TypeExpr};
use u8k::domains::value::{transfer_alu, BitvecAbs, DEFAULT_VSET_LIMIT};
use u8k::machine::image::load_images;
use u8k::machine::isa::{AluOp, Register, FLAG_LT, FLAG_Z};
use u8k::machine::oracle::{run_oracle, Event, TraceOutcome};
use u8k::machine::state::Mode;
use u8k::verify::{verify_bootdiff, verify_in_context, verify_parameterized};

fn settings() -> AnalysisSettings {
    AnalysisSettings::default()
}

/// Seed for the randomized suites, overridable via `U8K_SEED`.
fn seed() -> u64 {
    let parse = |s: &str| {
        let s = s.trim();
        match s.strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16).ok(),
            None => s.parse().ok(),
        }
    };
    std::env::var("U8K_SEED")
        .ok()
        .and_then(|s| parse(&s))
        .unwrap_or(0xC0DE)
}

#[test]
fn criterion_1_in_context_invariant_is_exact() {
    let kernel = corpus::kernel_rr();
    let user = corpus::user_two_threads();
    let t0 = Instant::now();
    let v = verify_in_context(&kernel, &user, &settings()).unwrap();
    let elapsed = t0.elapsed();
    assert!(v.arte.proved(), "arte {} ({:?})", v.arte, v.result.alarms);
    assert!(v.ape.proved(), "ape {}", v.ape);

    // Pin the full kernel-exit state. Aside from the cells below, every
    // memory cell keeps its boot value as a singleton.
    let mem0 = load_images(&kernel, &user).unwrap();
    let mut expected = String::new();
    for (name, val) in [
        ("r0", "{0xa5, 0xaa}"), // points at the saved-flags slot last restored
        ("r1", "[0x00, 0x7f]"), // holds those flags: always unprivileged
        ("r2", "{0xb0}"),
        ("r3", "top"),
        ("sp", "{0xa0}"),
        ("flags", "{0x80}"),
        ("upc", "top"),
        ("usp", "top"),
        ("uflags", "[0x00, 0x7f]"),
        ("mpu1", "{0xae}"),
        ("mpu2", "{0xb0}"),
    ] {
        expected.push_str(&format!("reg {name} = {val}\n"));
    }
    for a in 0u8..=255 {
        let cell = match a {
            0x9f => Some("{0x40, 0x4c}".to_string()), // kernel stack: the two call sites
            0xa0 => Some("{0xa2, 0xa7}".to_string()), // cur walks the thread ring
            0xa1 => Some("{0xa3, 0xa8}".to_string()), // ctx follows cur
            0xa3 | 0xa4 | 0xa8 | 0xa9 => None,        // saved pc/sp: user-controlled
            0xa5 | 0xaa => Some("[0x00, 0x7f]".to_string()), // saved flags: bit 7 clear
            0xc0..=0xcf | 0xe0..=0xef => None,        // user-granted segments: havocked
            _ => Some(format!("{{{:#04x}}}", mem0[a as usize])),
        };
        if let Some(val) = cell {
            expected.push_str(&format!("mem {a:#04x} = {val}\n"));
        }
    }
    assert_eq!(
        v.invariant, expected,
        "kernel-exit invariant differs from the pinned state"
    );
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 1: exact kernel-exit invariant reproduced in {elapsed:?}");
}

#[test]
fn criterion_2_parameterized_invariant_and_base_case() {
    let kernel = corpus::kernel_rr();
    let user = corpus::user_two_threads();
    let t0 = Instant::now();
    let v = verify_parameterized(&kernel, &user, corpus::TWO_THREADS_ANNOTATIONS, &settings())
        .unwrap();
    assert!(v.arte.proved(), "arte {} ({:?})", v.arte, v.result.alarms);
    assert!(v.ape.proved(), "ape {}", v.ape);
    assert!(!v.result.has_alarm(AlarmKind::BaseCaseViolation));

    // Typed admissibility per location in the family invariant.
    for line in [
        "reg uflags = Flags",
        "reg mpu1 = Memory_Table_0*",
        "reg mpu2 = Memory_Table_2*",
        "mem 0xa0 = Thread_0*",
        "mem 0xa1 = Thread_1*",
        "mem 0xac = Thread[nb_threads]_0*",
    ] {
        assert!(
            v.invariant.contains(&format!("{line}\n")),
            "missing `{line}` in:\n{}",
            v.invariant
        );
    }
    // Those labels imply the interface contract: byte 1 of a Thread is
    // its Context, and both MPU registers point at Segment bytes.
    let ann = parse_annotations(corpus::TWO_THREADS_ANNOTATIONS).unwrap();
    let mut env = ann.env;
    let thread = env.intern(TypeExpr::Named("Thread".into()));
    let context = env.intern(TypeExpr::Named("Context".into()));
    let mt = env.intern(TypeExpr::Named("Memory_Table".into()));
    let segment = env.intern(TypeExpr::Named("Segment".into()));
    let b = Bindings::new();
    assert!(is_subtype(&env, &b, Label::new(thread, 1), Label::new(context, 0)));
    assert!(is_subtype(&env, &b, Label::new(mt, 0), Label::new(segment, 0)));
    assert!(is_subtype(&env, &b, Label::new(mt, 2), Label::new(segment, 0)));
    let elapsed = t0.elapsed();

    // Corrupting thread 0's next pointer to aim at the memory table
    // must surface as exactly one base-case violation at that cell.
    let mut bad = corpus::user_two_threads();
    bad.bytes[0x04] = 0xae;
    let v = verify_parameterized(&kernel, &bad, corpus::TWO_THREADS_ANNOTATIONS, &settings())
        .unwrap();
    let faults: Vec<_> = v
        .result
        .alarms
        .iter()
        .filter(|a| a.kind == AlarmKind::BaseCaseViolation)
        .collect();
    assert_eq!(faults.len(), 1, "alarms: {:?}", v.result.alarms);
    assert_eq!(faults[0].addr, 0xa6);
    assert!(!v.ape.proved(), "a corrupted image must not verify");
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 2: family proof + base case in {elapsed:?}; corruption at 0xa6 caught");
}

#[test]
fn criterion_3_seeded_defects_all_rejected() {
    // name, alarm that must fire, property that must fail (true = APE)
    let expect: &[(&str, AlarmKind, bool)] = &[
        ("backdoor_jump", AlarmKind::UnresolvedJump, true),
        ("backdoor_grant", AlarmKind::PrivilegedExitUnproven, true),
        ("backdoor_write", AlarmKind::WildStore, true),
        ("backdoor_mpu", AlarmKind::SelfModification, true),
        ("backdoor_read", AlarmKind::IllegalOpcodeSite, false),
        ("bug_illegal", AlarmKind::IllegalOpcodeSite, false),
        ("bug_div", AlarmKind::MaybeDivZero, false),
    ];
    let user = corpus::user_two_threads();
    let kernels = corpus::flawed_kernels();
    assert_eq!(kernels.len(), expect.len());
    let mut falsely_verified = 0;
    for ((name, kernel), &(ename, kind, ape_flips)) in kernels.iter().zip(expect) {
        assert_eq!(*name, ename);
        let v = verify_in_context(kernel, &user, &settings()).unwrap();
        if v.arte.proved() && v.ape.proved() {
            falsely_verified += 1;
        }
        assert!(
            v.result.has_alarm(kind),
            "{name}: expected {kind:?} among {:?}",
            v.result.alarms
        );
        let (property, judgment) = if ape_flips { ("ape", &v.ape) } else { ("arte", &v.arte) };
        assert!(!judgment.proved(), "{name}: {property} must fail");
        println!("criterion 3: {name}: {property} {judgment}");
    }
    assert_eq!(falsely_verified, 0, "defective kernels verified");
}

/// Best-of-three timing per thread count, to damp scheduler noise.
fn min_sweep(ns: &[usize], mode: BenchMode) -> Vec<BenchRow> {
    let mut best = bench_sweep(ns, mode, None);
    for _ in 0..2 {
        for (b, r) in best.iter_mut().zip(bench_sweep(ns, mode, None)) {
            if r.millis < b.millis {
                b.millis = r.millis;
            }
        }
    }
    best
}

#[test]
fn criterion_4_scalability_shape() {
    let t0 = Instant::now();

    // Parameterized: one proof covers every member of the family, so
    // time must be flat across N and the invariant byte-identical.
    let param = min_sweep(&[2, 16, 128], BenchMode::Parameterized);
    for row in &param {
        assert_eq!(row.verdict, "proved", "param n={}: {}", row.n, row.verdict);
    }
    let tmin = param.iter().map(|r| r.millis).fold(f64::INFINITY, f64::min);
    let tmax = param.iter().map(|r| r.millis).fold(0.0, f64::max);
    assert!(
        tmax / tmin.max(0.001) < 2.0,
        "parameterized times vary {tmax:.1} ms vs {tmin:.1} ms (>= 2x)"
    );
    let inv0 = param[0].invariant.as_ref().unwrap();
    for row in &param[1..] {
        assert_eq!(row.invariant.as_ref().unwrap(), inv0, "family invariant differs at n={}", row.n);
    }

    // In-context: measure the whole feasible range, then the clause.
    let feasible = [1, 2, 4, 8, 16, MAX_THREADS];
    let rows = min_sweep(&feasible, BenchMode::InContext);
    for row in &rows {
        assert_eq!(row.verdict, "proved", "incontext n={}: {}", row.n, row.verdict);
    }
    let t = |n: usize| rows.iter().find(|r| r.n == n).unwrap().millis;
    let row128 = bench_sweep(&[128], BenchMode::InContext, None).remove(0);
    assert!(t0.elapsed() < Duration::from_secs(600), "bench overran");

    let curve: Vec<String> = rows.iter().map(|r| format!("t({})={:.0} ms", r.n, r.millis)).collect();
    panic!(
        "the in-context scalability clause (t(128)/t(16) > 8) cannot be met on this machine:\n\
         - n=128 is unrepresentable: {verdict}\n\
         - measured feasible curve: {curve}; growth is affine (fixed fixpoint cost plus a\n\
           per-thread term), so even the best feasible ratio t({max})/t(16) = {ratio:.2} stays far\n\
           below 8 and no substitute measurement can honestly satisfy the clause\n\
         - the parameterized half of this criterion held: verdicts proved, times within 2.0x\n\
           ({tmin:.1}..{tmax:.1} ms across n = 2, 16, 128) and a byte-identical family invariant",
        verdict = row128.verdict,
        curve = curve.join(", "),
        max = MAX_THREADS,
        ratio = t(MAX_THREADS) / t(16),
    );
}

/// Reference ALU used to check the abstract transfer, written against
/// the ISA rules rather than the analyzer's own evaluator: shifts of 8
/// or more produce 0, `cmp` yields the Z/LT flag bits, division by
/// zero is a fault handled by the caller.
fn concrete_alu(op: AluOp, a: u8, b: u8) -> u8 {
    match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::And => a & b,
        AluOp::Or => a | b,
        AluOp::Xor => a ^ b,
        AluOp::Shl => {
            if b >= 8 {
                0
            } else {
                a << b
            }
        }
        AluOp::Shr => {
            if b >= 8 {
                0
            } else {
                a >> b
            }
        }
        AluOp::Div => a / b,
        AluOp::Cmp => {
            if a == b {
                FLAG_Z
            } else if a < b {
                FLAG_LT
            } else {
                0
            }
        }
    }
}

/// Random abstract operand, biased toward small concretizations so the
/// exhaustive product stays cheap; `top` appears occasionally.
fn random_abs(rng: &mut ChaCha8Rng) -> BitvecAbs {
    match rng.gen_range(0..16) {
        0 => BitvecAbs::top(),
        1..=6 => BitvecAbs::singleton(rng.gen()),
        7..=11 => {
            let n = rng.gen_range(2..=5);
            BitvecAbs::from_set((0..n).map(|_| rng.gen::<u8>()), DEFAULT_VSET_LIMIT)
        }
        _ => {
            let lo: u8 = rng.gen();
            let width: u8 = rng.gen_range(0..=48);
            BitvecAbs::from_range(lo, lo.saturating_add(width), DEFAULT_VSET_LIMIT)
        }
    }
}

const OPS: [AluOp; 9] = [
    AluOp::Add,
    AluOp::Sub,
    AluOp::And,
    AluOp::Or,
    AluOp::Xor,
    AluOp::Shl,
    AluOp::Shr,
    AluOp::Div,
    AluOp::Cmp,
];

#[test]
fn criterion_5_soundness_suite() {
    // (a) transfer containment: for every op and operand pair, every
    // concrete result lies in the abstract result.
    let mut rng = ChaCha8Rng::seed_from_u64(seed());
    let mut cases = 0u32;
    for _ in 0..1200 {
        let a = random_abs(&mut rng);
        let b = random_abs(&mut rng);
        let ga: Vec<u8> = (0u8..=255).filter(|&v| a.contains(v)).collect();
        let gb: Vec<u8> = (0u8..=255).filter(|&v| b.contains(v)).collect();
        for op in OPS {
            let t = transfer_alu(op, &a, &b, DEFAULT_VSET_LIMIT);
            if op == AluOp::Div && b.contains(0) {
                assert!(t.may_div_zero, "zero divisor possible but not reported: b = {b}");
            }
            for &x in &ga {
                for &y in &gb {
                    if op == AluOp::Div && y == 0 {
                        continue;
                    }
                    let r = concrete_alu(op, x, y);
                    assert!(
                        t.value.contains(r),
                        "{op:?} {x:#04x},{y:#04x} = {r:#04x} escapes {} (a = {a}, b = {b})",
                        t.value
                    );
                }
            }
            cases += 1;
        }
    }
    assert!(cases >= 10_000, "only {cases} transfer cases run");
    println!("criterion 5a: {cases} transfer cases contained");

    // (b) oracle containment: every kernel-mode state of every random
    // schedule lies inside the per-address join of the analysis.
    let kernel = corpus::kernel_rr();
    let user = corpus::user_two_threads();
    let v = verify_in_context(&kernel, &user, &settings()).unwrap();
    assert!(v.arte.proved() && v.ape.proved());
    let mem0 = load_images(&kernel, &user).unwrap();
    let mut seen: HashSet<[u8; 268]> = HashSet::new();
    let mut states = 0u64;
    for run in 0..1000 {
        let mut schedule = vec![Event::Reset];
        for _ in 0..rng.gen_range(0..=8) {
            if rng.gen_ratio(1, 8) {
                schedule.push(Event::Reset);
            } else {
                schedule.push(Event::Timer { after: rng.gen_range(0..=15) });
            }
        }
        let trace = run_oracle(mem0, kernel.entries, &schedule, 50_000);
        assert_eq!(
            trace.outcome,
            TraceOutcome::ScheduleExhausted,
            "schedule {run} ended early: {:?}",
            trace.outcome
        );
        for st in &trace.states {
            if st.mode != Mode::Kernel {
                continue;
            }
            states += 1;
            let mut key = [0u8; 268];
            for (i, &r) in Register::ALL.iter().enumerate() {
                key[i] = st.reg(r);
            }
            key[12..].copy_from_slice(&st.mem);
            if !seen.insert(key) {
                continue; // this exact state was already checked
            }
            let pc = st.reg(Register::Pc);
            let abs = v
                .result
                .joined_by_addr
                .get(&pc)
                .unwrap_or_else(|| panic!("concrete kernel pc {pc:#04x} never analyzed"));
            for r in Register::ALL {
                if r == Register::Pc {
                    continue;
                }
                let av = abs.reg(r).as_num().expect("in-context values are numeric");
                assert!(
                    av.contains(st.reg(r)),
                    "reg {r} = {:#04x} escapes {av} at pc {pc:#04x}",
                    st.reg(r)
                );
            }
            for a in 0u8..=255 {
                let cell = abs.mem.get(a);
                let av = cell.as_num().expect("in-context values are numeric");
                assert!(
                    av.contains(st.mem[a as usize]),
                    "mem {a:#04x} = {:#04x} escapes {av} at pc {pc:#04x}",
                    st.mem[a as usize]
                );
            }
        }
    }
    println!(
        "criterion 5b: {states} kernel-mode states ({} distinct) over 1000 schedules contained",
        seen.len()
    );

    // (c) every verified invariant is inductive: re-applying the
    // transfer from the fixpoint changed nothing.
    assert!(v.result.complete && v.result.inductive);
    let vp = verify_parameterized(&kernel, &user, corpus::TWO_THREADS_ANNOTATIONS, &settings())
        .unwrap();
    assert!(vp.result.complete && vp.result.inductive);
    let vb = verify_bootdiff(
        &corpus::kernel_rr_bootinit(),
        &corpus::user_two_threads_unlinked(),
        corpus::TWO_THREADS_BOOT_ANNOTATIONS,
        None,
        &settings(),
    )
    .unwrap();
    assert!(vb.result.complete && vb.result.inductive);
    println!("criterion 5c: in-context, parameterized and boot-diff fixpoints all inductive");
}

#[test]
fn criterion_6_type_system_goldens() {
    let ann = parse_annotations(corpus::TWO_THREADS_ANNOTATIONS).unwrap();
    let mut env = ann.env;
    let bind2 = Bindings::from([("nb_threads".to_string(), 2)]);

    // Derived subtyping graph over a two-thread array: 23 labels, 22
    // covering edges, pinned by name.
    let thread = env.intern(TypeExpr::Named("Thread".into()));
    let arr = env.intern(TypeExpr::Array {
        elem: thread,
        len: ArrayLen::Param("nb_threads".into()),
    });
    let g = subtype_graph(&env, &bind2, &[arr]);
    assert_eq!(
        (g.nodes.len(), g.edges.len()),
        (23, 22),
        "edges: {:?}",
        g.edge_names(&env)
    );
    let mut expected = vec![
        "Int8 <= Word".to_string(),
        "Memory_Table* <= Word".to_string(),
        "Thread* <= Word".to_string(),
        "Flags <= Int8".to_string(),
        "Context_0 <= Int8".to_string(),
        "Context_1 <= Int8".to_string(),
        "Context_2 <= Flags".to_string(),
        "Thread_0 <= Memory_Table*".to_string(),
        "Thread_1 <= Context_0".to_string(),
        "Thread_2 <= Context_1".to_string(),
        "Thread_3 <= Context_2".to_string(),
        "Thread_4 <= Thread*".to_string(),
    ];
    for k in 0..10u16 {
        expected.push(format!("Thread[nb_threads]_{k} <= Thread_{}", k % 5));
    }
    expected.sort();
    let mut actual = g.edge_names(&env);
    actual.sort();
    assert_eq!(actual, expected);

    // The interpretation of Context* under the labeling discovered
    // from the reference image: exactly the two context addresses.
    let kernel = corpus::kernel_rr();
    let user = corpus::user_two_threads();
    let mem = load_images(&kernel, &user).unwrap();
    let read = |a: u8| Some(mem[a as usize]);
    let disc = discover_regions(&env, &ann.regions, kernel.end(), &read);
    assert!(disc.ok(), "{:?}", disc.violations);
    let context = env.intern(TypeExpr::Named("Context".into()));
    let ctx_ptr = pointer_set(
        &env,
        &disc.bindings,
        &disc.labeling,
        norm(&env, Label::new(context, 0)),
        false,
    );
    assert_eq!(ctx_ptr.values(), vec![0xa3, 0xa8]);

    // Separation: two addresses whose labels are not related by
    // subtyping never coincide. Since the labeling is a map, the
    // contract reduces to reflexivity plus distinctness, checked over
    // every pair; both related and unrelated pairs must occur.
    let labels = &disc.labeling.labels;
    assert!(!labels.is_empty());
    let mut unrelated = 0u32;
    let mut related_distinct = 0u32;
    for (&a, &la) in labels {
        for (&b, &lb) in labels {
            let rel = is_subtype(&env, &disc.bindings, la, lb)
                || is_subtype(&env, &disc.bindings, lb, la);
            if !rel {
                assert_ne!(a, b, "incomparable labels alias at {a:#04x}");
                unrelated += 1;
            } else if a != b {
                related_distinct += 1;
            }
        }
    }
    assert!(unrelated > 0 && related_distinct > 0, "separation check is vacuous");
    println!(
        "criterion 6: graph 23/22; Context* = {{0xa3, 0xa8}}; separation over {} labeled cells",
        labels.len()
    );
}

#[test]
fn criterion_7_annotation_burden() {
    let burden = |src: &str| -> Vec<String> {
        src.lines()
            .map(str::trim)
            .filter(|l| {
                ["param ", "boundary ", "region ", "exitpoint "]
                    .iter()
                    .any(|k| l.starts_with(k))
            })
            .map(str::to_string)
            .collect()
    };

    // Lines beyond the type definitions themselves: parameters, the
    // kernel/user boundary, region placements, boot exitpoints.
    let runtime = burden(corpus::TWO_THREADS_ANNOTATIONS);
    let boot = burden(corpus::TWO_THREADS_BOOT_ANNOTATIONS);
    assert!(
        !runtime.is_empty() && runtime.len() <= 20,
        "{} annotation lines: {runtime:#?}",
        runtime.len()
    );
    assert!(
        !boot.is_empty() && boot.len() <= 20,
        "{} annotation lines: {boot:#?}",
        boot.len()
    );

    // And that burden suffices: both parameterized proofs go through.
    let v = verify_parameterized(
        &corpus::kernel_rr(),
        &corpus::user_two_threads(),
        corpus::TWO_THREADS_ANNOTATIONS,
        &settings(),
    )
    .unwrap();
    assert!(v.arte.proved() && v.ape.proved());
    let v = verify_bootdiff(
        &corpus::kernel_rr_bootinit(),
        &corpus::user_two_threads_unlinked(),
        corpus::TWO_THREADS_BOOT_ANNOTATIONS,
        None,
        &settings(),
    )
    .unwrap();
    assert!(v.arte.proved() && v.ape.proved());
    println!(
        "criterion 7: {} runtime / {} boot annotation lines beyond the types (cap 20)",
        runtime.len(),
        boot.len()
    );
}
