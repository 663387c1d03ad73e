pub mod analysis;
pub mod calibrate;
pub mod corpus;
pub mod decode;
pub mod diffmath;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};
