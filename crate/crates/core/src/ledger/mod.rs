//! The public, hash-linked ledger of identity records.
//!
//! Anyone may submit records and read the chain; only the fixed validator set
//! takes part in consensus. Records describe *that* two pseudonymous parties
//! exchanged data of some category, never who they are or what the data was.

mod audit;
mod block;
pub mod consensus;
mod export;
mod privacy;
mod record;

use thiserror::Error;

pub use audit::{audit_query, observer_view, AuditScope, ObserverEntry};
pub use block::{verify_chain, Block, ChainFailure, ChainVerdict, QuorumSig, ValidatorInfo, ValidatorSet};
pub use consensus::{Behavior, ConsensusConfig, ConsensusNet, RoundStats, ValidatorKey};
pub use export::{
    parse_jsonl, parse_validators, verify_export, write_jsonl, write_validators, ExportError, ExportLine,
};
pub use privacy::PrivacyGuard;
pub use record::{IdentityRecord, RecordDraft, RecordKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid record signature: {0}")]
    InvalidSignature(String),
    #[error("privacy violation: {0}")]
    PrivacyViolation(String),
    #[error("no quorum at height {height} after {views} view(s)")]
    NoQuorum { height: u64, views: u32 },
    #[error("invalid validator set: {0}")]
    InvalidValidatorSet(String),
}
