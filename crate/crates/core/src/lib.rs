//! Grade prediction and intervention planning from course activity logs.
//!
//! The pipeline runs [`ingest`] → [`balance`] → [`linmodel`] / [`carttree`]
//! → [`experiment`] and [`intervene`]. [`cohortgen`] produces synthetic
//! cohorts in the ingest formats, and [`bundle`] persists trained models.

pub mod balance;
pub mod bundle;
pub mod carttree;
pub mod cohortgen;
pub mod config;
pub mod experiment;
pub mod fsutil;
pub mod ingest;
pub mod intervene;
pub mod linmodel;
pub mod pipeline;
