//! Open-vocabulary semantic segmentation over 3D Gaussian scenes.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`]: Gaussian scene model, file formats, synthetic rooms, label
//!   transfer and augmentation.
//! - [`raster`]: projection and front-to-back compositing of color, depth and
//!   16-channel semantic features, with the semantic backward pass.
//! - [`autodiff`]: reverse-mode differentiation over dense arrays.
//! - [`gsr`]: voxelization, sparse convolution stack and the attention adapter
//!   that predict a semantic vector per Gaussian.
//! - [`ccl`]: decoders and the text / dense-feature alignment losses.
//! - [`train`]: SGD loop over (scene, view) samples.
//! - [`eval`]: text-query classification, mIoU and evaluation protocols.
//! - [`data`]: dataset manifests and synthetic dataset generation.
//! - [`config`]: flat dotted-key settings shared by the command line.

pub mod autodiff;
pub mod ccl;
pub mod config;
pub mod data;
pub mod eval;
pub mod gsr;
pub mod raster;
pub mod scene;
pub mod train;
mod bytes;
