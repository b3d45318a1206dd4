//! Sound binary-level verifier for u8k kernel images.
//!
//! The u8k is a toy 8-bit microcontroller with a 256-byte address space,
//! two register banks (kernel and user), a privilege bit, and a two-slot
//! MPU. This crate proves two properties of a loaded kernel+user system
//! by abstract interpretation of the kernel binary:
//!
//! * **Absence of runtime errors**: kernel code never executes an
//!   undecodable instruction, divides by zero, or jumps/stores through a
//!   value the analysis cannot bound.
//! * **Absence of privilege escalation**: across every kernel entry and
//!   exit, user code never gains the privilege bit.
//!
//! Two analysis modes are provided. *In-context* analysis interprets the
//! kernel together with the concrete user image it ships with.
//! *Parameterized* analysis replaces the concrete user structures with
//! type annotations and verifies the kernel for every well-typed user
//! space, including families of systems of unbounded size.

pub mod analysis;
pub mod asm;
pub mod corpus;
pub mod domains;
pub mod machine;
pub mod verify;
pub mod bench;
pub mod report;
