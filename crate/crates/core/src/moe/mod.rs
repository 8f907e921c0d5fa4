//! One attention head viewed as a mixture of experts, and the regression
//! functions of non-shared and shared mixing measures.

mod head;
mod measure;
mod probe;

pub use head::{
    extraction_matrix, head_gates, head_post_direct, head_post_moe, AdaptedProjection, HeadParams,
};
pub use measure::{
    f_nonshared, f_shared, random_nonshared, random_shared, CompiledMoe, FrozenMatrices,
    MeasureDims, MeasureKind, MixingMeasure, NonSharedAtom, NonSharedMeasure, SharedAtom,
    SharedMeasure,
};
pub use probe::{check_assumptions, check_assumptions_tags, Collision, ProbeConfig, ProbeReport};
