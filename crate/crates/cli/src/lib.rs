//! Command-line tools and HTTP service for `latent-steer`.

pub mod cli;
pub mod models;
pub mod server;
