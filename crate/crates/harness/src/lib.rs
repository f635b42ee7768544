//! Experiment orchestration, verification suites and plotting on top of
//! `sdh-core`.

pub mod config;
pub mod envs;
pub mod plot;
pub mod run;
pub mod verify;
