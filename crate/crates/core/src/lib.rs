pub mod autodiff;
pub mod cloud;
pub mod descriptor;
pub mod error;
pub mod evalmetrics;
pub mod gradsuite;
pub mod groundtruth;
pub mod io;
pub mod model;
pub mod perturb;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
