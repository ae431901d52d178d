use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Block, IdentityRecord};
use crate::identity::{CategorySet, DidString, NodeRole};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditScope {
    /// A participant's own view: records touching any of these DIDs.
    Dids(BTreeSet<DidString>),
    /// Authority view: the whole ledger.
    All,
}

/// Records whose `did_ref` or `counterparty_did` is in scope, in chain order.
pub fn audit_query(chain: &[Block], scope: &AuditScope) -> Vec<IdentityRecord> {
    chain
        .iter()
        .flat_map(|b| b.records.iter())
        .filter(|r| match scope {
            AuditScope::All => true,
            AuditScope::Dids(dids) => dids.contains(&r.did_ref) || dids.contains(&r.counterparty_did),
        })
        .cloned()
        .collect()
}

/// What a non-participant learns from one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserverEntry {
    pub role_pair: (NodeRole, NodeRole),
    pub categories: CategorySet,
    pub tick: u64,
}

pub fn observer_view(chain: &[Block]) -> Vec<ObserverEntry> {
    chain
        .iter()
        .flat_map(|b| b.records.iter())
        .map(|r| ObserverEntry {
            role_pair: r.role_pair,
            categories: r.categories.clone(),
            tick: r.tick,
        })
        .collect()
}
