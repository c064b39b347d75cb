pub mod baselines;
mod binio;
pub mod data;
pub mod encoders;
pub mod error;
pub mod feedback;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{GnolrError, Result};
