//! Joint tumor detection, segmentation and diagnosis on 3D volumes with a
//! hierarchical-query mask transformer.
//!
//! The crate bundles everything needed to run desk-scale experiments end to
//! end on synthetic data:
//!
//! * [`taxonomy`] — organ/tumor class hierarchy and the two label spaces
//!   (coarse detection, fine diagnosis) derived from it;
//! * [`phantom`] — a procedural 3D phantom generator that emits volumes,
//!   voxel labels and per-case ground truth with exact provenance hashes;
//! * [`autodiff`] — a small reverse-mode automatic differentiation tape over
//!   `f64` tensors that powers training;
//! * [`backbone`] — a 3D encoder–decoder producing a multi-scale feature
//!   pyramid;
//! * [`queries`] — learnable class queries, the detection-to-diagnosis
//!   hierarchy expansion, and the transformer decoder refining queries
//!   against the pyramid;
//! * [`decode`] — dual-task mask decoding (detection + diagnosis heads) and
//!   the combined cross-entropy/soft-Dice loss;
//! * [`train`] — balanced patch sampling, augmentation and an AdamW loop;
//! * [`infer`] — Gaussian-weighted sliding-window prediction, flip
//!   test-time augmentation, connected components and patient-level
//!   diagnosis;
//! * [`eval`] — patient-, lesion- and voxel-level metrics plus the
//!   query-structure ablation harness;
//! * [`cli`] — the `hiermask` command-line front end (`gen`, `train`,
//!   `infer`, `eval`, `ablate`).
//!
//! The `examples/` directory contains one runnable example per capability;
//! start with `quick_pipeline` for a minute-scale end-to-end run.

pub mod autodiff;
pub mod backbone;
pub mod caseio;
pub mod cli;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod params;
pub mod phantom;
pub mod plot;
pub mod queries;
pub mod taxonomy;
pub mod train;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
