//! Built-in problem instances.

pub mod cleaning;
pub mod omega_seq;
pub mod quadratic;

pub use cleaning::{gen_cleaning, CleaningProblem, Dataset};
pub use omega_seq::{gen_omega_seq, SyntheticOmegaSeq};
pub use quadratic::{gen_quadratic, QuadraticBilevel};
