use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{IdentityRecord, LedgerError};
use crate::crypto::{verify, Canonical, Digest, PublicKey, Signature};
use crate::identity::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuorumSig {
    pub validator: u32,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    /// Index of the proposing validator in the [`ValidatorSet`].
    pub proposer: u32,
    pub records: Vec<IdentityRecord>,
    pub block_hash: Digest,
    /// Commit signatures, strictly ascending by validator index.
    pub quorum_sigs: Vec<QuorumSig>,
}

impl Block {
    pub fn compute_hash(height: u64, prev_hash: &Digest, proposer: u32, records: &[IdentityRecord]) -> Digest {
        let mut c = Canonical::new("bsmd/block/v1");
        c.u64(height)
            .bytes(prev_hash.as_bytes())
            .u64(proposer as u64)
            .u64(records.len() as u64);
        for r in records {
            r.write_canonical(&mut c);
        }
        c.digest()
    }

    /// Unsigned proposal; records are put in `(tick, record_id)` order.
    pub fn proposal(height: u64, prev_hash: Digest, proposer: u32, mut records: Vec<IdentityRecord>) -> Self {
        records.sort_by_key(|r| r.order_key());
        let block_hash = Self::compute_hash(height, &prev_hash, proposer, &records);
        Block {
            height,
            prev_hash,
            proposer,
            records,
            block_hash,
            quorum_sigs: Vec::new(),
        }
    }

    /// Bytes a validator signs to commit `block_hash` at `height`.
    pub fn commit_message(height: u64, block_hash: &Digest) -> Vec<u8> {
        let mut c = Canonical::new("bsmd/commit/v1");
        c.u64(height).bytes(block_hash.as_bytes());
        c.finish()
    }

    pub fn recomputed_hash(&self) -> Digest {
        Self::compute_hash(self.height, &self.prev_hash, self.proposer, &self.records)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorInfo {
    pub node_id: NodeId,
    pub public_key: PublicKey,
}

/// Static validator membership tolerating `f` Byzantine members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorSet {
    members: Vec<ValidatorInfo>,
    f: usize,
}

impl ValidatorSet {
    /// Uses the largest `f` with `n >= 3f + 1`.
    pub fn new(members: Vec<ValidatorInfo>) -> Result<Self, LedgerError> {
        let f = members.len().saturating_sub(1) / 3;
        Self::with_f(members, f)
    }

    pub fn with_f(members: Vec<ValidatorInfo>, f: usize) -> Result<Self, LedgerError> {
        if members.is_empty() {
            return Err(LedgerError::InvalidValidatorSet("no validators".into()));
        }
        if members.len() < 3 * f + 1 {
            return Err(LedgerError::InvalidValidatorSet(format!(
                "{} members cannot tolerate f={f}",
                members.len()
            )));
        }
        let keys: BTreeSet<_> = members.iter().map(|m| m.public_key).collect();
        if keys.len() != members.len() {
            return Err(LedgerError::InvalidValidatorSet("duplicate validator key".into()));
        }
        Ok(ValidatorSet { members, f })
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        Self::with_f(self.members.clone(), self.f).map(|_| ())
    }

    pub fn members(&self) -> &[ValidatorInfo] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    /// Round-robin leader for `(height, view)`.
    pub fn leader(&self, height: u64, view: u32) -> u32 {
        ((height + view as u64) % self.members.len() as u64) as u32
    }

    pub fn key(&self, index: u32) -> Option<&PublicKey> {
        self.members.get(index as usize).map(|m| &m.public_key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainFailure {
    pub height: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainVerdict {
    pub blocks_checked: usize,
    pub failure: Option<ChainFailure>,
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        self.failure.is_none()
    }
}

/// Checks a quorum certificate: strictly ascending distinct indices, every
/// signature valid, and at least `2f + 1` of them.
pub(crate) fn check_certificate(
    height: u64,
    block_hash: &Digest,
    sigs: &[QuorumSig],
    validators: &ValidatorSet,
) -> Result<(), String> {
    let msg = Block::commit_message(height, block_hash);
    let mut last: Option<u32> = None;
    for qs in sigs {
        if last.is_some_and(|l| qs.validator <= l) {
            return Err("quorum signatures not strictly ordered".into());
        }
        last = Some(qs.validator);
        let key = validators
            .key(qs.validator)
            .ok_or_else(|| format!("unknown validator index {}", qs.validator))?;
        if !verify(key, &msg, &qs.signature) {
            return Err(format!("invalid commit signature from validator {}", qs.validator));
        }
    }
    if sigs.len() < validators.quorum() {
        return Err(format!(
            "{} commit signatures, quorum is {}",
            sigs.len(),
            validators.quorum()
        ));
    }
    Ok(())
}

pub(crate) fn check_block(
    block: &Block,
    expected_height: u64,
    prev_hash: &Digest,
    validators: &ValidatorSet,
    seen: &mut BTreeSet<Digest>,
) -> Result<(), String> {
    if block.height != expected_height {
        return Err(format!("height {} where {expected_height} expected", block.height));
    }
    if &block.prev_hash != prev_hash {
        return Err("prev_hash does not link to predecessor".into());
    }
    if block.proposer as usize >= validators.len() {
        return Err(format!("unknown proposer {}", block.proposer));
    }
    if block.records.is_empty() {
        return Err("empty block".into());
    }
    if block.recomputed_hash() != block.block_hash {
        return Err("block_hash does not match contents".into());
    }
    for pair in block.records.windows(2) {
        if pair[0].order_key() >= pair[1].order_key() {
            return Err("records not in (tick, record_id) order".into());
        }
    }
    for r in &block.records {
        r.verify_integrity().map_err(|e| e.to_string())?;
        if !seen.insert(r.record_id) {
            return Err(format!("record {} committed twice", r.record_id));
        }
    }
    check_certificate(block.height, &block.block_hash, &block.quorum_sigs, validators)
}

/// Valid iff every block recomputes, links to its predecessor (all-zero for
/// the first), and carries a valid quorum certificate.
pub fn verify_chain(chain: &[Block], validators: &ValidatorSet) -> ChainVerdict {
    let mut prev = Digest::ZERO;
    let mut seen = BTreeSet::new();
    for (i, block) in chain.iter().enumerate() {
        if let Err(reason) = check_block(block, i as u64, &prev, validators, &mut seen) {
            return ChainVerdict {
                blocks_checked: i + 1,
                failure: Some(ChainFailure {
                    height: i as u64,
                    reason,
                }),
            };
        }
        prev = block.block_hash;
    }
    ChainVerdict {
        blocks_checked: chain.len(),
        failure: None,
    }
}
