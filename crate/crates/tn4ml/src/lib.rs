//! Tensor-network machine learning toolkit.
//!
//! A self-contained pipeline for training one-dimensional tensor networks as
//! machine-learning models: dense named-index tensors ([`tensor`]), tensor
//! trains with canonical forms ([`tt`]), feature embeddings ([`embedding`]),
//! seeded initialization schemes ([`init`]), objective functions with
//! analytic environment gradients ([`objective`]), gradient-descent and
//! two-site sweeping trainers ([`training`]), ROC-based evaluation metrics
//! ([`eval`]), dataset ingestion ([`data`]), and a config-driven experiment
//! runner ([`pipeline`]).

pub mod embedding;
pub mod init;
pub mod objective;
pub mod tensor;
pub mod training;
pub mod tt;

pub use tensor::{contract, contract_network, frobenius_norm, matricize, qr, svd};
pub use tensor::{DenseTensor, Index, SvdResult, TensorError};
pub use tt::{SiteSignature, SpacingSpec, TensorTrain, TtError, TtKind};
