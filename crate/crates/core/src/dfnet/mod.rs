//! Pose regressor with multi-level feature heads, and the feature-metric
//! losses used to align real and rendered images.

mod loss;
mod model;
mod svd;
mod train;

pub use loss::{
    argmin4, cosine_dissimilarity, dfnet_loss, feature_distance, negative_distances, pose_l2, pose_l2_var, q_minus,
    squared_alignment_var, triplet_loss_mined, triplet_loss_original, triplet_mined_var, triplet_original_var,
    FeatureMap, Reduction, TripletBatch,
};
pub use model::{
    is_feature_head_param, is_pose_estimator_param, mean_pose, pose_from_row, DfnetConfig, DfnetModel, DfnetOutput,
    FeatureLevel, NormMode,
};
pub use train::{evaluate_poses, feature_spread, synthetic_views, train_dfnet, train_dfnet_with_views, Alignment, DfnetEpoch, DfnetSchedule};

#[cfg(test)]
mod tests;
