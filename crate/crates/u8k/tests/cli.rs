//! End-to-end checks of the command-line contract: exit codes, report
//! formats, determinism, invariant emission, and the bench table.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const VERIFY: &str = env!("CARGO_BIN_EXE_u8k-verify");
const ASM: &str = env!("CARGO_BIN_EXE_u8k-asm");

fn corpus(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../corpus")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("u8k-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(VERIFY).args(args).output().expect("u8k-verify runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn a_verified_system_exits_zero() {
    let o = run(&[&corpus("kernel_rr.img"), &corpus("user_two_threads.img")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("arte: proved"), "{out}");
    assert!(out.contains("ape: proved"), "{out}");
    assert!(out.contains("alarms: 0"), "{out}");
}

#[test]
fn a_backdoored_kernel_exits_two_with_alarms() {
    // Assemble the defective kernel on the fly: also covers u8k-asm.
    let img = scratch("backdoor_grant.img");
    let a = Command::new(ASM)
        .args([
            corpus("kernel_backdoor_grant.s").as_str(),
            "-o",
            img.to_str().unwrap(),
        ])
        .output()
        .expect("u8k-asm runs");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));

    let o = run(&[img.to_str().unwrap(), &corpus("user_two_threads.img")]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("ape: not proved"), "{out}");
    assert!(!out.contains("alarms: 0"), "{out}");
}

#[test]
fn param_mode_without_annotations_is_a_usage_error() {
    let o = run(&[
        &corpus("kernel_rr.img"),
        &corpus("user_two_threads.img"),
        "--mode",
        "param",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains("annotation"), "{}", stderr(&o));
}

#[test]
fn incontext_mode_with_annotations_is_a_usage_error() {
    let o = run(&[
        &corpus("kernel_rr.img"),
        &corpus("user_two_threads.img"),
        "--annotations",
        &corpus("two_threads.u8ka"),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn text_reports_are_deterministic_modulo_timing() {
    let report = || {
        let o = run(&[
            &corpus("kernel_rr.img"),
            &corpus("user_two_threads.img"),
            "--mode",
            "param",
            "--annotations",
            &corpus("two_threads.u8ka"),
        ]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
            .lines()
            .filter(|l| !l.starts_with("time:"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(report(), report());
}

#[test]
fn json_report_is_versioned_and_structured() {
    let o = run(&[
        &corpus("kernel_rr.img"),
        &corpus("user_two_threads.img"),
        "--report",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).expect("valid json");
    assert_eq!(v["schema"], 1);
    assert_eq!(v["mode"], "incontext");
    assert_eq!(v["arte"]["proved"], true);
    assert_eq!(v["ape"]["proved"], true);
    assert_eq!(v["alarm_count"], 0);
    assert_eq!(v["complete"], true);
    assert_eq!(v["inductive"], true);
}

#[test]
fn emit_invariant_writes_the_rendered_state() {
    let path = scratch("invariant.txt");
    let o = run(&[
        &corpus("kernel_rr.img"),
        &corpus("user_two_threads.img"),
        "--emit-invariant",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let inv = std::fs::read_to_string(&path).unwrap();
    assert!(inv.contains("reg mpu1 = {0xae}"), "{inv}");
    assert!(inv.contains("mem 0xa0 = {0xa2, 0xa7}"), "{inv}");
}

#[test]
fn bench_single_thread_succeeds_in_both_modes() {
    for mode in ["incontext", "param"] {
        let o = run(&["--bench", "1", "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains("proved"), "{mode}: {out}");
        assert!(out.contains("N") && out.contains("time ms"), "{mode}: {out}");
    }
}
