//! Command-line tool and inference service for room-acoustics surrogates.

pub mod commands;
pub mod service;
pub mod wire;
