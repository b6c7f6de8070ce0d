//! Latent world models over partial point clouds, trained without
//! observation reconstruction, plus the RGB-D baseline, toy manipulation
//! scenes, and an imagination-trained actor-critic.

pub mod diffmath;
pub mod encoders;
pub mod pointcloud;
pub mod scenesim;
pub mod worldmodel;
pub mod rng;
