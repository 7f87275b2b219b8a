//! Command line and HTTP service for the preference-aligned planner.

pub mod commands;
pub mod service;
