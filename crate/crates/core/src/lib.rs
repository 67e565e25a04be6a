//! Grounded visual reasoning on synthetic scenes: tree search over grounded
//! steps, distillation of search trees, group-relative policy optimization
//! with a crop tool, a tag-grammar validator and a behavior coder.
pub mod behavior;
pub mod cli;
pub mod distill;
pub mod grammar;
pub mod num;
pub mod optim;
pub mod rewards;
pub mod scene;
pub mod search;
pub mod seed;
pub mod trace;

pub use num::Scalar;

/// Default scalar type.
pub type Real = f64;
pub type Policy64 = optim::policy::TabularSoftmaxPolicy<Real>;
pub type Tree = search::SearchTree<Real>;
pub type Breakdown = rewards::RewardBreakdown<Real>;
pub type Batch = optim::grpo::GroupBatch<Real>;
