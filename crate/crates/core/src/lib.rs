//! Forecaster: a hierarchical model-based agent that learns a K-step world
//! model over goals and plans with a small tree search over them.
//!
//! Components, bottom up: [`nn`] (dense networks, Adam), [`env`] (egocentric
//! gridworld mazes), [`replay`], [`world_model`], [`goal_codec`],
//! [`hierarchy`] (manager and worker), [`abstract_wm`], [`planner`], and the
//! training loop in [`orchestrator`].

pub mod abstract_wm;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod goal_codec;
pub mod hierarchy;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod planner;
pub mod replay;
pub mod world_model;

pub use error::{Error, Result};
