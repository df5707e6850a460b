//! Multi-modal contrastive image-forgery detection.
//!
//! Two branches feed a fused representation: a spatial branch (separable
//! convolution backbone plus Gram-matrix style vectors from its shallow
//! blocks) and a frequency branch (patch-wise DFT amplitude/phase spectra,
//! cross-modal dual attention, and per-stream MLP mixers). The fusion is
//! trained jointly with a supervised contrastive loss on a normalized
//! projection and a binary cross-entropy head, on top of a small
//! from-scratch tensor autodiff graph.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod mixer;
pub mod model;
pub mod papda;
pub mod params;
pub mod spectral;
pub mod ssrb;
pub mod tensor;
pub mod train;

pub use backbone::{BackboneActivations, BackboneConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use dataset::{
    gen_dataset, gen_real, patch_mask, read_manifest, DatasetConfig, DatasetError,
    DatasetManifest, Region, Split, TamperKind, TamperSpec,
};
pub use gradsuite::{gradient_suite, GRAD_CHECK_EPS, GRAD_CHECK_TOLERANCE};
pub use image::{read_pnm, to_grayscale, write_pnm, Image, PnmError};
pub use losses::{
    accuracy, auc, EvalScores, LossError, MetricsRow, SupconDenominator, METRICS_CSV_HEADER,
};
pub use model::{forward, init_model, ForwardOutput, ModelConfig, ModelError, ModelState};
pub use papda::AttnScale;
pub use spectral::{
    patch_spectra, render_residual_map, render_spectrum_map, residual_csv, residual_report,
    PatchGrid, PatchSpectra, ResidualReport, SpectralError, SpectrumView,
};
pub use tensor::{grad_check, GradCheckReport, Graph, NodeId, ParamSpec, Tensor, TensorError};
pub use train::{
    evaluate, scores_csv, train, AdamW, Evaluation, PlateauSchedule, TrainConfig, TrainResult,
};
