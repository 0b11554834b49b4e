//! Sub-bit binary convolution kernels by learned codeword selection.

pub mod accounting;
pub mod assignment;
pub mod codebook;
pub mod engine;
pub mod error;
pub mod optim;
pub mod pste;
pub mod sinkhorn;
pub mod trainer;

pub use accounting::{
    bops, compression_ratio, parse_arch, report, resnet18, storage_bits, AccountingReport, LayerSpec, Mode,
};
pub use assignment::{brute_force_assignment, hungarian_max, Permutation};
pub use codebook::{
    build_full_codebook, codeword_histogram, nearest_codeword, select_equal_interval,
    select_random, select_topn_frequent, sign_binarize, Codebook, Codeword, CodewordHistogram,
    SubCodebook,
};
pub use engine::{
    direct_conv_reference, infer, infer_detailed, load_model, precompute_lut, reconstruct_output, save_model,
    ConvGeometry, ConvPath, FileFormat, IndexCodedModel, InferOptions, LutTensor, SignMap,
};
pub use error::{Result, SparksError};
pub use optim::{Optimizer, OptimizerKind};
pub use pste::{
    codeword_gradients, permutation_gap, ste_weight_grad, AssignmentMap, PermGapTrace,
    SelectionMode, SelectionState, SelectionTrace,
};
pub use sinkhorn::{
    gumbel_noise, sinkhorn_backward, sinkhorn_forward, PermutationLogits, SinkhornConfig,
    SinkhornTape,
};
