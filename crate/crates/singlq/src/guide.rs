//! The user guide, one module per chapter.
//!
//! Each chapter of the mdbook under `book/` is included here verbatim, so
//! `cargo test --doc` compiles and runs every code snippet the book shows.
//! If a snippet drifts from the library's actual API or numerics, the
//! doc-tests fail: the rendered book and the crate cannot quietly diverge.
//!
//! Render the HTML version with `mdbook build book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/problem-setup.md")]
pub mod problem_setup {}

#[doc = include_str!("../../../book/src/coordinates.md")]
pub mod coordinates {}

#[doc = include_str!("../../../book/src/regularization.md")]
pub mod regularization {}

#[doc = include_str!("../../../book/src/reduced-problem.md")]
pub mod reduced_problem {}

#[doc = include_str!("../../../book/src/minimizing-sequences.md")]
pub mod minimizing_sequences {}

#[doc = include_str!("../../../book/src/asymptotics.md")]
pub mod asymptotics {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli_tool {}

#[doc = include_str!("../../../book/src/tracking-example.md")]
pub mod tracking_example {}
