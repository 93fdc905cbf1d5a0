//! Joint reinforcement learning of reasoning and last-token self-rewarding
//! on an exactly verifiable synthetic task.
//!
//! A compact autoregressive policy learns single-digit addition from a
//! rule-based verifier while simultaneously learning to score its own
//! solutions: the next-token log-probability of a reserved token at the
//! end of each response is trained, via an MSE loss, to match the verifier
//! reward. The trained score drives test-time self-verification and
//! weighted majority voting, and can be folded back into the advantages
//! during training.

pub mod advantage;
pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod policy;
pub mod rng;
pub mod selfreward;
pub mod task;
pub mod trainer;

pub use error::{LaserError, Result};
pub use policy::{Arch, Policy};
pub use selfreward::{ScoredSolution, SelfRewardConfig};
pub use task::{Problem, Solution};
pub use trainer::{LaserConfig, Mode};
