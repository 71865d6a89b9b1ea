//! Algorithm-based fault tolerant matrix multiplication on a simulated
//! process grid.
//!
//! * [`dense`]: local matrix storage, rank-k updates, norms, residual check.
//! * [`codec`]: checksum weights, vector and matrix encoding, erasure
//!   recovery and single-error correction.
//! * [`grid`]: deterministic message-passing world with fault injection.
//! * [`summa`]: checksum-carrying SUMMA and the four-phase recovery.
//! * [`perf`]: closed-form timing models for SUMMA and its fault tolerant
//!   variants.

// `!(x < bound)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod dense;
pub mod grid;
pub mod perf;
pub mod summa;

pub use codec::{
    encode_matrix, encode_vector, is_consistent, make_scheme, recover_erasures, verify_consistency, Blocking,
    ChecksumScheme, CodecError, DiagnosisStatus, EncodedMatrix, ErrorDiagnosis,
};
pub use dense::{
    frobenius_norm, gemm_update, matmul, residual_check, vector_norm2, DenseError, DenseMatrix, ResidualReport,
};
pub use grid::{spawn_grid, Axis, FailureNotice, FaultPlan, GridError, GridWorld, Injection, Rank, Trigger};
pub use perf::{PerfError, PerfParams, PerfPrediction};
pub use summa::{distribute, ft_pdgemm, ft_pdgemm_observed, FtError, FtMatrix, PdgemmOutput, RecoveryReport};
