pub mod config;
pub mod data;
pub mod drift;
pub mod par;
pub mod learner;
pub mod evaluator;
pub mod registry;
pub mod sim;
pub mod synthetic;
pub mod benchmark;
pub mod pipeline;
