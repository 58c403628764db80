//! Multi-exit binary network: architecture description, compiled plan,
//! parameter storage and the inference pass.

mod arch;
mod forward;
mod model;
mod plan;

pub use arch::{ArchSpec, Family, NUM_EXITS};
pub use forward::{softmax, ExitOutput, ExitStack, FeatureMap, PrefixState};
pub use model::{Model, NormParams, Param, SizeReport, BN_EPSILON};
pub use plan::{
    ConvRef, CostTrace, HeadRef, NormRef, ParamSpec, Plan, Pool, Shortcut, Stem, Unit,
};
