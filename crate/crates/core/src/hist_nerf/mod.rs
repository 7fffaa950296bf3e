//! Radiance field conditioned on per-image luminance histograms.
//!
//! A static density/color field is shared by every image. A small
//! histogram encoder produces an appearance vector and a transient vector
//! per image; the former shifts static colors, the latter drives a
//! transient field with its own density, color and uncertainty.

mod encoding;
mod model;
mod render;
mod train;

pub use encoding::{encoded_len, positional_encode, EncodingConfig};
pub use model::{
    query_field, EmbeddingVars, FieldOutput, FieldVars, Heads, HistNerfModel, HistogramEmbedding, NerfConfig, PointBatch,
};
pub use render::{
    all_pixels, composite, composite_weights, pixel_rays, pose_rays, render_image, render_pose_var, render_rays,
    sample_pdf, stratified_depths, RayOutputs, RenderMode, RenderOutput, RenderSettings,
};
pub use train::{fine_loss, frame_embedding, heldout_psnr, nerf_loss, train_nerf, NerfEpoch, NerfSchedule};
