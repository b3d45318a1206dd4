//! The concrete u8k machine: instruction set, images, execution, and
//! schedule-driven reference runs.

pub mod image;
pub mod isa;
pub mod oracle;
pub mod state;
