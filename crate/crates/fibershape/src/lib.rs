//! Fiber-cluster shape analysis and cognitive-score regression.
//!
//! The library covers the full pipeline from streamline bundles on disk to a
//! trained model:
//!
//! * [`bundle`] — streamline bundle (SLB) and scalar-map (SLS) file formats,
//!   subject directory loading.
//! * [`voxel`] — segment-walk rasterization of clusters into voxel masks.
//! * [`shape`] — the 12 cluster shape descriptors plus FA/MD/NoS.
//! * [`matrix`] — subject-by-cluster feature matrices and z-score
//!   normalization.
//! * [`tensor`] — dense f64 tensors with reverse-mode autodiff and Adam.
//! * [`model`] — the SFFormer encoder (self-attention baseline and
//!   cross-attention feature fusion).
//! * [`train`] — training loop, 3-fold cross-validation, random
//!   hyperparameter search, helper-feature selection, Pearson r.
//! * [`synth`] — synthetic subject generation for desk-scale verification.
//!
//! With the default `parallel` feature, per-cluster extraction and
//! per-trial/per-fold runs fan out over a rayon pool; without it every code
//! path runs sequentially. Results are identical either way: each unit of
//! work derives its own seed and no unit observes another's state.

pub mod bundle;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod par;
pub mod shape;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use bundle::{FiberCluster, ScalarKind, ScalarMap, Streamline, SubjectData};
pub use matrix::{FeatureKind, FeatureMatrix};
pub use model::{FusionMode, ModelConfig, ModelParams};
pub use shape::{ShapeConfig, ShapeDescriptors, TraditionalFeatures};
pub use synth::{GeometryFamily, SynthSpec, TargetRule};
pub use train::{Hyperparams, TrainReport, TrainSettings};
pub use voxel::VoxelMask;
