pub mod dataset;
pub mod geometry;
pub mod graspspace;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objectgen;
pub mod planner;
pub mod rng;
pub mod simworld;
pub mod training;
