//! Few-shot social user geolocation by aligning user and location
//! representations in a shared text-encoder space.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geo_prompt;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod user_repr;

pub use error::{Error, Result};
