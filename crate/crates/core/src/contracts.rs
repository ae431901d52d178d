//! Owner-defined smart contracts: accept, grant, revoke, and request evaluation.
//!
//! Contracts run at the owner's node. Every mutation carries a signature by the
//! owner's master key over `(address, version, operation)`, so a mutation
//! cannot be forged or replayed against a later version. The ledger only ever
//! sees a digest commitment of a contract version.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{verify, Canonical, Digest, KeyPair, PublicKey, Signature};
use crate::identity::{CategorySet, DataCategory, DidString, NodeId, NodeIdentity, NodeRole};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    #[error("owner signature does not verify")]
    BadSignature,
    #[error("peer {0} has been revoked")]
    RevokedPeer(NodeId),
    #[error("DID {0} never connected to this contract")]
    UnknownPeer(DidString),
    #[error("connection request names no categories")]
    EmptyRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContractAddress(String);

impl ContractAddress {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContractAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Step one of the access flow. Field order gives the `(tick, requester)`
/// processing order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConnectionRequest {
    pub tick: u64,
    pub requester: NodeId,
    pub requester_role: NodeRole,
    pub requested_categories: CategorySet,
    pub service: Option<String>,
}

impl ConnectionRequest {
    pub fn new(
        requester: NodeId,
        requester_role: NodeRole,
        requested_categories: CategorySet,
        service: Option<String>,
        tick: u64,
    ) -> Result<Self, ContractError> {
        if requested_categories.is_empty() {
            return Err(ContractError::EmptyRequest);
        }
        Ok(ConnectionRequest {
            tick,
            requester,
            requester_role,
            requested_categories,
            service,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Deny,
    Revoked,
}

/// `Accept` always carries a non-empty grant; the other verdicts never do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessDecision {
    verdict: Verdict,
    granted: CategorySet,
}

impl AccessDecision {
    fn from_grant(granted: CategorySet) -> Self {
        if granted.is_empty() {
            Self::deny()
        } else {
            AccessDecision {
                verdict: Verdict::Accept,
                granted,
            }
        }
    }

    pub fn deny() -> Self {
        AccessDecision {
            verdict: Verdict::Deny,
            granted: CategorySet::new(),
        }
    }

    pub fn revoked() -> Self {
        AccessDecision {
            verdict: Verdict::Revoked,
            granted: CategorySet::new(),
        }
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn granted(&self) -> &CategorySet {
        &self.granted
    }

    pub fn is_accept(&self) -> bool {
        self.verdict == Verdict::Accept
    }
}

/// An owner-authorized mutation. The owner signs [`SmartContract::mutation_digest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractOp {
    Accept {
        request: ConnectionRequest,
        grant: CategorySet,
    },
    Grant {
        peer: NodeId,
        categories: CategorySet,
    },
    Revoke {
        peer: NodeId,
    },
    SetMandatory {
        service: String,
        categories: CategorySet,
    },
}

fn put_set(c: &mut Canonical, set: &CategorySet) {
    c.u64(set.len() as u64);
    for cat in set {
        c.str(cat.as_str());
    }
}

/// Emitted when a peer is revoked so the channel layer can close connections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationNotice {
    pub peer: NodeId,
    /// The peer's DIDs on connections to this contract.
    pub peer_dids: Vec<DidString>,
    pub revoked_grant: CategorySet,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmartContract {
    address: ContractAddress,
    owner: NodeId,
    owner_key: PublicKey,
    owner_pseudonym: String,
    version: u64,
    policy: BTreeMap<NodeId, CategorySet>,
    mandatory: BTreeMap<String, CategorySet>,
    revoked: BTreeSet<NodeId>,
    pending: BTreeSet<ConnectionRequest>,
    peer_dids: BTreeMap<DidString, NodeId>,
}

impl SmartContract {
    pub fn new<R: RngCore>(owner: NodeId, owner_key: PublicKey, rng: &mut R) -> Self {
        let mut addr = [0u8; 16];
        rng.fill_bytes(&mut addr);
        let mut pseudo = [0u8; 16];
        rng.fill_bytes(&mut pseudo);
        SmartContract {
            address: ContractAddress(format!("contract-{}", hex::encode(addr))),
            owner,
            owner_key,
            owner_pseudonym: format!("owner-{}", hex::encode(pseudo)),
            version: 0,
            policy: BTreeMap::new(),
            mandatory: BTreeMap::new(),
            revoked: BTreeSet::new(),
            pending: BTreeSet::new(),
            peer_dids: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> &ContractAddress {
        &self.address
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn policy(&self) -> &BTreeMap<NodeId, CategorySet> {
        &self.policy
    }

    pub fn grant_for(&self, peer: &NodeId) -> CategorySet {
        self.policy.get(peer).cloned().unwrap_or_default()
    }

    pub fn mandatory(&self) -> &BTreeMap<String, CategorySet> {
        &self.mandatory
    }

    pub fn revoked(&self) -> &BTreeSet<NodeId> {
        &self.revoked
    }

    pub fn is_revoked(&self, peer: &NodeId) -> bool {
        self.revoked.contains(peer)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ConnectionRequest> {
        self.pending.iter()
    }

    /// Peers that currently hold a grant or a bound DID and are not revoked.
    pub fn known_peers(&self) -> impl Iterator<Item = &NodeId> {
        let mut peers: BTreeSet<&NodeId> = self.policy.keys().collect();
        peers.extend(self.peer_dids.values());
        peers.into_iter().filter(|p| !self.revoked.contains(*p))
    }

    pub fn resolve(&self, peer_did: &DidString) -> Option<&NodeId> {
        self.peer_dids.get(peer_did)
    }

    pub(crate) fn bind_peer_did(&mut self, peer_did: DidString, peer: NodeId) {
        self.peer_dids.insert(peer_did, peer);
    }

    /// Queues a request (step one); requests are handled in `(tick, requester)` order.
    pub fn submit_request(&mut self, req: ConnectionRequest) {
        self.pending.insert(req);
    }

    pub fn mutation_digest(&self, op: &ContractOp) -> Digest {
        let mut c = Canonical::new("bsmd/contract-mutation/v1");
        c.str(self.address.as_str()).u64(self.version);
        match op {
            ContractOp::Accept { request, grant } => {
                c.u8(0)
                    .u64(request.tick)
                    .str(request.requester.as_str())
                    .str(request.requester_role.as_str());
                put_set(&mut c, &request.requested_categories);
                c.str(request.service.as_deref().unwrap_or(""));
                put_set(&mut c, grant);
            }
            ContractOp::Grant { peer, categories } => {
                c.u8(1).str(peer.as_str());
                put_set(&mut c, categories);
            }
            ContractOp::Revoke { peer } => {
                c.u8(2).str(peer.as_str());
            }
            ContractOp::SetMandatory { service, categories } => {
                c.u8(3).str(service);
                put_set(&mut c, categories);
            }
        }
        c.digest()
    }

    fn check_owner(&self, op: &ContractOp, sig: &Signature) -> Result<(), ContractError> {
        if verify(&self.owner_key, self.mutation_digest(op).as_bytes(), sig) {
            Ok(())
        } else {
            Err(ContractError::BadSignature)
        }
    }

    /// Step two: the owner approves `req` with the categories it is willing to
    /// share. The released grant is `grant ∩ requested`, and for a service with
    /// mandatory categories it must cover all of them.
    pub fn accept_connection(
        &mut self,
        req: &ConnectionRequest,
        grant: &CategorySet,
        owner_sig: &Signature,
    ) -> Result<AccessDecision, ContractError> {
        self.check_owner(
            &ContractOp::Accept {
                request: req.clone(),
                grant: grant.clone(),
            },
            owner_sig,
        )?;
        self.pending.remove(req);
        if self.revoked.contains(&req.requester) {
            return Ok(AccessDecision::revoked());
        }
        let granted: CategorySet = grant.intersection(&req.requested_categories).cloned().collect();
        if let Some(required) = req.service.as_ref().and_then(|s| self.mandatory.get(s)) {
            if !granted.is_superset(required) {
                return Ok(AccessDecision::deny());
            }
        }
        let decision = AccessDecision::from_grant(granted);
        if decision.is_accept() {
            self.policy
                .entry(req.requester.clone())
                .or_default()
                .extend(decision.granted.iter().cloned());
            self.version += 1;
        }
        Ok(decision)
    }

    pub fn grant(
        &mut self,
        peer: &NodeId,
        categories: &CategorySet,
        owner_sig: &Signature,
    ) -> Result<(), ContractError> {
        self.check_owner(
            &ContractOp::Grant {
                peer: peer.clone(),
                categories: categories.clone(),
            },
            owner_sig,
        )?;
        if self.revoked.contains(peer) {
            return Err(ContractError::RevokedPeer(peer.clone()));
        }
        if categories.is_empty() {
            return Ok(());
        }
        let entry = self.policy.entry(peer.clone()).or_default();
        let before = entry.len();
        entry.extend(categories.iter().cloned());
        if entry.len() != before {
            self.version += 1;
        }
        Ok(())
    }

    /// Adds `peer` to the deny-list and clears its grant. Idempotent; works for
    /// peers that never connected.
    pub fn revoke(
        &mut self,
        peer: &NodeId,
        owner_sig: &Signature,
        tick: u64,
    ) -> Result<RevocationNotice, ContractError> {
        self.check_owner(&ContractOp::Revoke { peer: peer.clone() }, owner_sig)?;
        let revoked_grant = self.policy.remove(peer).unwrap_or_default();
        self.revoked.insert(peer.clone());
        self.version += 1;
        let peer_dids = self
            .peer_dids
            .iter()
            .filter(|(_, p)| *p == peer)
            .map(|(d, _)| d.clone())
            .collect();
        Ok(RevocationNotice {
            peer: peer.clone(),
            peer_dids,
            revoked_grant,
            tick,
        })
    }

    pub fn set_mandatory(
        &mut self,
        service: &str,
        categories: &CategorySet,
        owner_sig: &Signature,
    ) -> Result<(), ContractError> {
        self.check_owner(
            &ContractOp::SetMandatory {
                service: service.to_string(),
                categories: categories.clone(),
            },
            owner_sig,
        )?;
        self.mandatory.insert(service.to_string(), categories.clone());
        self.version += 1;
        Ok(())
    }

    /// Step four: which of `categories` may flow to the peer behind `peer_did`
    /// right now. Pure.
    pub fn evaluate_request(
        &self,
        peer_did: &DidString,
        categories: &CategorySet,
    ) -> Result<AccessDecision, ContractError> {
        let peer = self
            .peer_dids
            .get(peer_did)
            .ok_or_else(|| ContractError::UnknownPeer(peer_did.clone()))?;
        if self.revoked.contains(peer) {
            return Ok(AccessDecision::revoked());
        }
        let granted = match self.policy.get(peer) {
            Some(g) => categories.intersection(g).cloned().collect(),
            None => CategorySet::new(),
        };
        Ok(AccessDecision::from_grant(granted))
    }

    fn body(&self) -> ContractBody {
        ContractBody {
            address: self.address.clone(),
            owner_pseudonym: self.owner_pseudonym.clone(),
            version: self.version,
            policy: self
                .policy
                .iter()
                .map(|(peer, categories)| PolicyEntry {
                    peer: peer.clone(),
                    categories: categories.clone(),
                })
                .collect(),
            mandatory: self.mandatory.clone(),
            revoked: self.revoked.iter().cloned().collect(),
        }
    }

    /// Digest of the current version. This is what goes on the ledger.
    pub fn commitment(&self) -> Digest {
        self.body().digest()
    }

    pub fn export(&self, owner: &KeyPair) -> ContractExport {
        let body = self.body();
        let owner_signature = owner.sign(body.digest().as_bytes());
        ContractExport { body, owner_signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub peer: NodeId,
    pub categories: BTreeSet<DataCategory>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractBody {
    pub address: ContractAddress,
    pub owner_pseudonym: String,
    pub version: u64,
    pub policy: Vec<PolicyEntry>,
    pub mandatory: BTreeMap<String, CategorySet>,
    pub revoked: Vec<NodeId>,
}

impl ContractBody {
    pub fn digest(&self) -> Digest {
        let mut c = Canonical::new("bsmd/contract/v1");
        c.str(self.address.as_str())
            .str(&self.owner_pseudonym)
            .u64(self.version)
            .u64(self.policy.len() as u64);
        for e in &self.policy {
            c.str(e.peer.as_str());
            put_set(&mut c, &e.categories);
        }
        c.u64(self.mandatory.len() as u64);
        for (service, set) in &self.mandatory {
            c.str(service);
            put_set(&mut c, set);
        }
        c.u64(self.revoked.len() as u64);
        for r in &self.revoked {
            c.str(r.as_str());
        }
        c.digest()
    }
}

/// Audit export of one contract version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractExport {
    #[serde(flatten)]
    pub body: ContractBody,
    pub owner_signature: Signature,
}

impl ContractExport {
    pub fn verify(&self, owner_key: &PublicKey) -> bool {
        verify(owner_key, self.body.digest().as_bytes(), &self.owner_signature)
    }
}

impl NodeIdentity {
    pub fn export_contract(&self) -> ContractExport {
        self.contract.export(self.master_keys())
    }
}
