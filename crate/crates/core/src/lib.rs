//! Covariate-balanced A/B/n designs.
//!
//! Units are split into `L` groups so that each group's kernel density
//! estimate is close to the pooled estimate, measured by the discrepancy
//! criterion `T_H`. Offline designs are found with an elitist genetic
//! algorithm; online designs assign batches as they arrive while keeping
//! earlier assignments fixed.

pub mod bandwidth;
pub mod data;
pub mod error;
pub mod ga;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod online;
pub mod reduce;
pub mod simlab;

pub use bandwidth::BandwidthState;
pub use data::{balanced_sizes, CovariateSet, Partition};
pub use error::{DesignError, Result};
pub use ga::{optimize, GaConfig, GaResult};
pub use kernel::{compute_gram, criterion, extend_gram, KernelGram};
pub use online::{init_online, Assignment, BalanceMode, OnlineConfig, OnlineState};
pub use reduce::{fit_pca, transform, update_pca, PcaState, PcaTarget};
