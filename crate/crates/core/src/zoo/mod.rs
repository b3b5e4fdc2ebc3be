//! Residual backbones with gather-excite units in the residual branch,
//! immediately before the identity summation.

mod arch;
mod model;
mod placement;

pub use arch::{ArchSpec, BlockPlan, BlockStyle, ConvPlan, Family, Plan, StemPlan};
pub use model::{pruned_channels, Forward, Model, Order, Probes, PruneSpec};
pub use placement::{GePlacement, StageSel};
