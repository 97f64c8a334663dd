//! Blockchain-supported knowledge sharing for LLM services, at desk scale.
//!
//! The crate models the on-chain state (a prefixed key-value ledger), the
//! reputation equations for LLM services, prompts, suppliers and validators,
//! Proof-of-Impact rewards, the PROCache admission/eviction policy with LFU and
//! LRU-k baselines, and the four-stage query-session lifecycle. A seeded,
//! round-based simulator drives all of it with honest and Byzantine agents.
//!
//! Each capability has a runnable example under `examples/`:
//!
//! ```bash
//! cargo run --example reputation_equations
//! cargo run --example procache_vs_baselines
//! cargo run --release --example attack_sweep
//! ```

pub mod agents;
pub mod cli;
pub mod ledger;
pub mod poi;
pub mod procache;
pub mod reputation;
pub mod session;
pub mod simulator;
pub mod types;

pub use types::{Digest, Embedding, NodeId, Tokens};
