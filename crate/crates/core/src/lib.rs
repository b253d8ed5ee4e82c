//! Abductive imitation learning on a symbolic gridworld.
//!
//! Expert demonstrations carry no symbolic annotation. A hand-written state
//! machine per task ([`kb`]) constrains which symbolic state sequences are
//! plausible; [`abduction`] finds the cheapest such sequence under the
//! current predicate scores, [`perception`] learns object-level predicate
//! classifiers from those pseudo-labels, and [`policy`] trains one low-level
//! action policy per symbolic operator, routed by entailment against the plan
//! skeleton. [`runner`] evaluates the resulting agent in closed loop.

pub mod abduction;
pub mod expert;
pub mod grid;
pub mod io;
pub mod kb;
pub mod nn;
pub mod perception;
pub mod policy;
pub mod runner;
pub mod symbolic;

pub use grid::{Action, EnvState, Split, Task, TaskConfig};
pub use symbolic::{GroundAtom, ObjectRef, StateMachine};
