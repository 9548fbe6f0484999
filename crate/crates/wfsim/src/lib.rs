//! Discrete-event simulation of a whole-exome-sequencing variant-calling
//! workflow on different compute infrastructures.
//!
//! The crate models the workflow as a DAG of task instances exchanging file
//! artifacts ([`workflow`]), generates the WES pipeline shape ([`wes`]),
//! describes clusters and file-system regimes ([`infra`]), schedules ready
//! tasks under pluggable policies ([`sched`]), executes the whole thing on a
//! continuous-time event queue ([`engine`]), and turns makespans into
//! throughput and cost-effectiveness figures ([`cost`]). Task-profile
//! constants are fitted against observed runtimes in [`calibrate`].

pub mod calibrate;
pub mod cost;
pub mod engine;
pub mod infra;
pub mod sched;
pub mod scenario;
pub mod wes;
pub mod workflow;
