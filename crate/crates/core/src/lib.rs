//! Hardened execution engine.
//!
//! A small register IR and interpreter ([`ir`]) underpin four protection
//! mechanisms: software lock-step with rollback ([`haft`]), AN-coded
//! execution ([`delta`]), shielded service envelopes ([`enclave`]) and
//! overflow-tolerant memory ([`boundless`]). [`inject`] measures them with
//! seeded fault-injection campaigns and [`orchestrator`] simulates a
//! self-healing microservice cluster.

pub mod boundless;
pub mod cli;
pub mod corpus;
pub mod delta;
pub mod enclave;
pub mod haft;
pub mod inject;
pub mod ir;
pub mod orchestrator;
