use super::{IdentityRecord, LedgerError};
use crate::crypto::{Canonical, PublicKey};
use crate::identity::{CategoryRegistry, NodeId};

pub(crate) fn contains_bytes(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Rejects records that could identify a participant. Checked at submission
/// and again by every honest validator before it votes.
#[derive(Debug, Clone, Default)]
pub struct PrivacyGuard {
    registry: CategoryRegistry,
    forbidden: Vec<(String, Vec<u8>)>,
}

impl PrivacyGuard {
    pub fn new(registry: CategoryRegistry) -> Self {
        PrivacyGuard {
            registry,
            forbidden: Vec::new(),
        }
    }

    pub fn registry(&self) -> &CategoryRegistry {
        &self.registry
    }

    /// Forbids a node's id (whole and its random tail) and master key (raw and hex).
    pub fn forbid_identity(&mut self, node_id: &NodeId, master: &PublicKey) {
        let id = node_id.as_str();
        self.forbid(format!("node_id {id}"), id.as_bytes().to_vec());
        if let Some(tail) = id.strip_prefix("node-") {
            self.forbid(format!("node_id {id}"), tail.as_bytes().to_vec());
        }
        self.forbid(format!("master key of {id}"), master.as_bytes().to_vec());
        self.forbid(format!("master key of {id}"), master.to_hex().into_bytes());
    }

    pub fn forbid(&mut self, label: String, pattern: Vec<u8>) {
        self.forbidden.push((label, pattern));
    }

    /// Labels of every forbidden pattern found in `bytes`.
    pub fn scan_bytes(&self, bytes: &[u8]) -> Vec<String> {
        let mut hits: Vec<String> = self
            .forbidden
            .iter()
            .filter(|(_, p)| contains_bytes(bytes, p))
            .map(|(l, _)| l.clone())
            .collect();
        hits.dedup();
        hits
    }

    pub fn check_record(&self, rec: &IdentityRecord) -> Result<(), LedgerError> {
        if let Some(cat) = rec.categories.iter().find(|c| !self.registry.contains(c)) {
            return Err(LedgerError::PrivacyViolation(format!("unregistered category {cat:?}")));
        }
        let json = serde_json::to_vec(rec).expect("record serializes");
        let mut canonical = Canonical::default();
        rec.write_canonical(&mut canonical);
        for bytes in [json, canonical.finish()] {
            if let Some(hit) = self.scan_bytes(&bytes).into_iter().next() {
                return Err(LedgerError::PrivacyViolation(format!(
                    "record {} embeds {hit}",
                    rec.record_id
                )));
            }
        }
        Ok(())
    }
}
