pub mod agent;
pub mod buffer;
pub mod config;
pub mod ensemble;
pub mod envs;
pub mod nn;
pub mod policy;
pub mod risk;
pub mod rollout;
pub mod run;
pub mod seed;
pub mod verify;
