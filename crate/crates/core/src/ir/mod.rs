//! Program representation: registers, instructions, legality, dead-code
//! elimination, canonical forms and the text format.

pub mod canonical;
pub mod dce;
pub mod ops;
pub mod program;
pub mod text;

pub use canonical::{canonical_key, canonicalize_symbolic};
pub use dce::eliminate_dead_code;
pub use ops::{Env, Opcode, StageKind};
pub use program::{Action, Instruction, LegalityError, Operand, Program, Reg, DEFAULT_MAX_LEN};
pub use text::{parse_program, serialize, ParseError};
