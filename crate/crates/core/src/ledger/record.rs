use serde::{Deserialize, Serialize};

use super::LedgerError;
use crate::crypto::{verify, Canonical, Digest, PublicKey, Signature};
use crate::identity::{CategorySet, Did, DidString, NodeRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    ConnectionOpened,
    DataTransferred,
    ConnectionRevoked,
    ContractCommitment,
}

impl RecordKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordKind::ConnectionOpened => "connection_opened",
            RecordKind::DataTransferred => "data_transferred",
            RecordKind::ConnectionRevoked => "connection_revoked",
            RecordKind::ContractCommitment => "contract_commitment",
        }
    }
}

/// Opaque ledger entry. `did_ref` is the data owner's connection DID.
///
/// `submitter_key` is the public key of whichever of the two DIDs signed the
/// record; the DID string is a digest of it, which is how verifiers tie the
/// signature to the identifiers without any node-level identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRecord {
    pub record_id: Digest,
    pub kind: RecordKind,
    pub did_ref: DidString,
    pub counterparty_did: DidString,
    pub role_pair: (NodeRole, NodeRole),
    pub categories: CategorySet,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commitment: Option<Digest>,
    pub submitter_key: PublicKey,
    pub submitter_sig: Signature,
}

/// Unsigned record contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordDraft {
    pub kind: RecordKind,
    pub did_ref: DidString,
    pub counterparty_did: DidString,
    pub role_pair: (NodeRole, NodeRole),
    pub categories: CategorySet,
    pub tick: u64,
    pub commitment: Option<Digest>,
}

impl RecordDraft {
    fn body(&self, submitter_key: &PublicKey) -> Canonical {
        let mut c = Canonical::new("bsmd/record/v1");
        c.str(self.kind.as_str())
            .str(self.did_ref.as_str())
            .str(self.counterparty_did.as_str())
            .str(self.role_pair.0.as_str())
            .str(self.role_pair.1.as_str())
            .u64(self.categories.len() as u64);
        for cat in &self.categories {
            c.str(cat.as_str());
        }
        c.u64(self.tick);
        match &self.commitment {
            Some(d) => c.u8(1).bytes(d.as_bytes()),
            None => c.u8(0),
        };
        c.bytes(submitter_key.as_bytes());
        c
    }

    pub fn sign(self, signer: &Did) -> IdentityRecord {
        let submitter_key = signer.public_key();
        let record_id = self.body(&submitter_key).digest();
        let submitter_sig = signer.keys().sign(record_id.as_bytes());
        IdentityRecord {
            record_id,
            kind: self.kind,
            did_ref: self.did_ref,
            counterparty_did: self.counterparty_did,
            role_pair: self.role_pair,
            categories: self.categories,
            tick: self.tick,
            commitment: self.commitment,
            submitter_key,
            submitter_sig,
        }
    }
}

impl IdentityRecord {
    pub fn draft(&self) -> RecordDraft {
        RecordDraft {
            kind: self.kind,
            did_ref: self.did_ref.clone(),
            counterparty_did: self.counterparty_did.clone(),
            role_pair: self.role_pair,
            categories: self.categories.clone(),
            tick: self.tick,
            commitment: self.commitment,
        }
    }

    pub fn compute_id(&self) -> Digest {
        self.draft().body(&self.submitter_key).digest()
    }

    pub fn involves(&self, did: &DidString) -> bool {
        &self.did_ref == did || &self.counterparty_did == did
    }

    /// Checks the id, that the submitter key belongs to one of the two DIDs,
    /// and the signature.
    pub fn verify_integrity(&self) -> Result<(), LedgerError> {
        if self.compute_id() != self.record_id {
            return Err(LedgerError::InvalidSignature(format!(
                "record {} does not match its contents",
                self.record_id
            )));
        }
        if !self.did_ref.is_bound_to(&self.submitter_key) && !self.counterparty_did.is_bound_to(&self.submitter_key) {
            return Err(LedgerError::InvalidSignature(format!(
                "record {} signed by a key outside its DIDs",
                self.record_id
            )));
        }
        if !verify(&self.submitter_key, self.record_id.as_bytes(), &self.submitter_sig) {
            return Err(LedgerError::InvalidSignature(format!(
                "record {} signature does not verify",
                self.record_id
            )));
        }
        Ok(())
    }

    /// Full canonical encoding, including id and signature, used for block hashing.
    pub(crate) fn write_canonical(&self, c: &mut Canonical) {
        c.bytes(self.record_id.as_bytes());
        c.bytes(&self.draft().body(&self.submitter_key).finish());
        c.bytes(self.submitter_sig.as_bytes());
    }

    /// Block ordering key.
    pub fn order_key(&self) -> (u64, Digest) {
        (self.tick, self.record_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{CategoryRegistry, NodeIdentity};

    fn sample() -> (IdentityRecord, NodeIdentity, NodeIdentity) {
        let reg = CategoryRegistry::default();
        let mut alice = NodeIdentity::create(NodeRole::Individual, false, 1);
        let mut uni = NodeIdentity::create(NodeRole::University, true, 2);
        let di = alice.mint_did(0).did_string.clone();
        let dn = uni.mint_did(0).clone();
        let rec = RecordDraft {
            kind: RecordKind::DataTransferred,
            did_ref: di,
            counterparty_did: dn.did_string.clone(),
            role_pair: (NodeRole::Individual, NodeRole::University),
            categories: reg.set(["gps_log", "gender"]).unwrap(),
            tick: 4,
            commitment: None,
        }
        .sign(&dn);
        (rec, alice, uni)
    }

    #[test]
    fn signed_record_verifies() {
        let (rec, _, _) = sample();
        rec.verify_integrity().unwrap();
    }

    #[test]
    fn record_signed_by_unrelated_key_rejected() {
        let (rec, _, _) = sample();
        let mut outsider = NodeIdentity::create(NodeRole::Company, false, 9);
        let od = outsider.mint_did(0).clone();
        let forged = rec.draft().sign(&od);
        assert!(matches!(
            forged.verify_integrity(),
            Err(LedgerError::InvalidSignature(_))
        ));
    }

    #[test]
    fn content_change_breaks_id() {
        let (mut rec, _, _) = sample();
        rec.tick += 1;
        assert!(rec.verify_integrity().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let (rec, _, _) = sample();
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"kind\":\"data_transferred\""));
        assert!(!json.contains("commitment"));
        let back: IdentityRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }
}
