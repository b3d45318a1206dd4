//! Embedded reference systems: the round-robin scheduler kernel, its
//! two-thread user image, the matching annotations, a boot-initializing
//! variant, and a selection of flawed kernels that the analyzer must
//! reject. Sources live in `corpus/` at the repository root and are
//! compiled in, so tests and the demo commands need no file paths.

use crate::asm::assemble;
use crate::machine::image::MachineImage;

pub const KERNEL_RR: &str = include_str!("../../../corpus/kernel_rr.s");
pub const USER_TWO_THREADS: &str = include_str!("../../../corpus/user_two_threads.s");
pub const TWO_THREADS_ANNOTATIONS: &str = include_str!("../../../corpus/two_threads.u8ka");

pub const KERNEL_RR_BOOTINIT: &str = include_str!("../../../corpus/kernel_rr_bootinit.s");
pub const USER_TWO_THREADS_UNLINKED: &str =
    include_str!("../../../corpus/user_two_threads_unlinked.s");
pub const TWO_THREADS_BOOT_ANNOTATIONS: &str =
    include_str!("../../../corpus/two_threads_boot.u8ka");

pub const KERNEL_BACKDOOR_JUMP: &str = include_str!("../../../corpus/kernel_backdoor_jump.s");
pub const KERNEL_BACKDOOR_GRANT: &str = include_str!("../../../corpus/kernel_backdoor_grant.s");
pub const KERNEL_BACKDOOR_WRITE: &str = include_str!("../../../corpus/kernel_backdoor_write.s");
pub const KERNEL_BACKDOOR_MPU: &str = include_str!("../../../corpus/kernel_backdoor_mpu.s");
pub const KERNEL_BACKDOOR_READ: &str = include_str!("../../../corpus/kernel_backdoor_read.s");
pub const KERNEL_BUG_ILLEGAL: &str = include_str!("../../../corpus/kernel_bug_illegal.s");
pub const KERNEL_BUG_DIV: &str = include_str!("../../../corpus/kernel_bug_div.s");

fn build(name: &str, src: &str) -> MachineImage {
    match assemble(src) {
        Ok(img) => img,
        Err(e) => panic!("corpus source {name} does not assemble: {e}"),
    }
}

pub fn kernel_rr() -> MachineImage {
    build("kernel_rr.s", KERNEL_RR)
}

pub fn user_two_threads() -> MachineImage {
    build("user_two_threads.s", USER_TWO_THREADS)
}

pub fn kernel_rr_bootinit() -> MachineImage {
    build("kernel_rr_bootinit.s", KERNEL_RR_BOOTINIT)
}

pub fn user_two_threads_unlinked() -> MachineImage {
    build("user_two_threads_unlinked.s", USER_TWO_THREADS_UNLINKED)
}

/// The flawed kernels, each named after the defect it demonstrates. All
/// pair with [`user_two_threads`].
pub fn flawed_kernels() -> Vec<(&'static str, MachineImage)> {
    vec![
        ("backdoor_jump", build("kernel_backdoor_jump.s", KERNEL_BACKDOOR_JUMP)),
        ("backdoor_grant", build("kernel_backdoor_grant.s", KERNEL_BACKDOOR_GRANT)),
        ("backdoor_write", build("kernel_backdoor_write.s", KERNEL_BACKDOOR_WRITE)),
        ("backdoor_mpu", build("kernel_backdoor_mpu.s", KERNEL_BACKDOOR_MPU)),
        ("backdoor_read", build("kernel_backdoor_read.s", KERNEL_BACKDOOR_READ)),
        ("bug_illegal", build("kernel_bug_illegal.s", KERNEL_BUG_ILLEGAL)),
        ("bug_div", build("kernel_bug_div.s", KERNEL_BUG_DIV)),
    ]
}
