//! Emotion-aware motion model for audio-driven talking-face animation.
//!
//! The library is organized around a small set of cooperating modules:
//!
//! - [`diffmath`] — dense-tensor math with reverse-mode automatic
//!   differentiation (MLPs, an LSTM cell, losses, gradient checking).
//! - [`motion`] — the keypoint + jacobian motion representation and all
//!   warp-field geometry (per-keypoint affine flows, mask composition,
//!   dense flow, bilinear warping, displacement algebra).
//! - [`puppet`] — a procedural synthetic face whose every frame comes with
//!   exact ground-truth keypoints, jacobians, pose, and emotion label. It
//!   plays the role of dataset, pose source, and keypoint teacher.
//! - [`audiofeat`] — WAV ingestion and MFCC features, aligned to 25 FPS
//!   video frames as 28x12 matrices.
//! - [`a2fd`] — the audio-to-facial-dynamics model: three encoders and an
//!   LSTM decoder predicting per-frame keypoints/jacobians, two-stage
//!   training, and inference.
//! - [`emolearn`] — the implicit emotion displacement learner: data
//!   augmentation, emotion extractor, displacement predictor, and additive
//!   composition with the audio-driven motion.
//! - [`metrics`] — SSIM, PSNR, landmark distances, audio-sync correlation,
//!   and a nearest-centroid emotion classifier.
//! - [`bundle`] — the versioned on-disk model format shared by the trained
//!   models.

pub mod diffmath;
pub mod audiofeat;
pub mod motion;
pub mod puppet;
pub mod geom;

/// Tool version echoed into every output directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
