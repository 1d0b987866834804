//! Sequential estimation for clustered responses: quasi-likelihood fits,
//! adaptive shrinkage, D-optimal recruitment and a fixed-size stopping rule.

pub mod chi2;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod pool_csv;
pub mod sampling;
pub mod sequential;
pub mod shrinkage;

pub use error::{Error, Result};
pub use model::{fit_mqle, ClusterObservation, CorrKind, Dispersion, FitOptions, GeeFit, Link, WorkingCorrelation};
pub use sampling::{DataPool, SelectorKind};
pub use sequential::{run_sequential, EllipsoidSet, ModelConfig, SequentialOutcome, StoppingPolicy};
pub use shrinkage::{AseResult, ShrinkConfig};
