pub mod cli;
pub mod config;
pub mod corpus;
pub mod env;
pub mod graph;
pub mod pipeline;
pub mod recipe;
pub mod repo;
pub mod site;
pub mod target;
pub mod version;
