pub mod assignment_losses;
pub mod cli;
pub mod config;
pub mod degrade;
pub mod detector;
pub mod evaluator;
pub mod diffengine;
pub mod geometry;
pub mod synthdata;
pub mod trainer;
