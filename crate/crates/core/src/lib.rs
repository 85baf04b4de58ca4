pub mod cefg;
pub mod config;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod feature_nets;
pub mod formats;
pub mod geometry;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod stfa;
pub mod supervision;
pub mod synthdata;
pub mod trainer;

pub use config::{MatchThresholds, ModelConfig, TeacherPath, VitConfig};
pub use error::{Error, Result};
