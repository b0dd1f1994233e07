//! Joint truncated-SVD compression of convolutional weight groups.

pub mod arch;
pub mod budget;
pub mod conv;
pub mod error;
pub mod joint;
pub mod linalg;
pub mod model_io;
pub mod random;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::{solve_least_squares, solve_least_squares_right, svd, svd_truncated, SvdResult, TruncatedPair};
pub use tensor::{fold, stack_horizontal, stack_vertical, unfold, Matrix, Precision, Shape4, Tensor4};
pub use joint::{
    bijsvd, decompose, ljsvd, reconstruct_member, rjsvd, rjsvd_als, DualFactorization, Factorization, GroupFactorization,
    LayerGroup, LeftSharedFactorization, Method, RightSharedFactorization,
};
pub use conv::{conv2d, factor_kernels, forward_dual, forward_split, max_abs_diff, same_padding, FeatureMap};
pub use budget::{
    apportion_rank, cf_for_plan, compression_report, count_params, macs_conv, macs_decomposed, plan_ranks, CompressionReport,
    ConvLayerSpec, FlopsConvention, GroupSpec, LayerSpec, ModelSpec, PlanEntry, RankPlan,
};
pub use model_io::{load_model, save_model, Model, ModelManifest};
