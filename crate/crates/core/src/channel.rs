//! Pairwise connections between a data owner and a requester.
//!
//! A handshake mints one fresh DID on each side and derives the session key
//! from an X25519 agreement between the two DID keys. Payloads travel in a
//! [`TransferEnvelope`] whose binary layout is:
//!
//! ```text
//! version      u8            (= 1)
//! sender_did   u16 len | utf8
//! receiver_did u16 len | utf8
//! tick         u64 big-endian
//! categories   u16 count | (u8 len | utf8)*
//! ciphertext   u32 len | nonce(12) || aead ciphertext
//! signature    64 bytes, Ed25519 by the sender DID
//! ```
//!
//! The signature covers `(digest(ciphertext), categories, tick)`; the AEAD
//! associated data binds the header to the ciphertext.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{ConnectionRequest, ContractError, ContractOp, RevocationNotice, Verdict};
use crate::crypto::{agree, verify, Canonical, Digest, PublicKey, Signature, SymmetricKey, NONCE_LEN, SIGNATURE_LEN};
use crate::identity::{
    hex_vec, AssetId, AssetRef, CategorySet, DataCategory, DidString, IdentityError, NodeId, NodeIdentity, NodeRole,
};
use crate::ledger::{IdentityRecord, RecordDraft, RecordKind};

pub const ENVELOPE_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("access denied: contract verdict {0:?}")]
    AccessDenied(Verdict),
    #[error("handshake failed: {0}")]
    HandshakeFailure(String),
    #[error("categories outside the grant: {0:?}")]
    NotGranted(Vec<String>),
    #[error("connection is closed")]
    ChannelClosed,
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnState {
    Requested,
    Established,
    Closed,
}

/// Which end of the connection this is. Data flows from the owner side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Owner,
    Requester,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    OwnerRevoked,
    PeerLeft,
    Voluntary,
}

/// One end of a connection, confined to the node that holds it.
#[derive(Clone)]
pub struct Connection {
    pub local_did: DidString,
    pub remote_did: DidString,
    remote_key: PublicKey,
    session_key: SymmetricKey,
    state: ConnState,
    /// Categories released by the owner's contract at handshake time.
    pub granted: CategorySet,
    pub side: Side,
    pub local_role: NodeRole,
    pub remote_role: NodeRole,
    pub opened_at: u64,
    pub close_reason: Option<CloseReason>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("local_did", &self.local_did)
            .field("remote_did", &self.remote_did)
            .field("state", &self.state)
            .field("side", &self.side)
            .field("granted", &self.granted)
            .finish_non_exhaustive()
    }
}

impl Connection {
    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn is_open(&self) -> bool {
        self.state == ConnState::Established
    }

    pub fn remote_key(&self) -> &PublicKey {
        &self.remote_key
    }

    pub fn session_key(&self) -> &SymmetricKey {
        &self.session_key
    }

    /// Marks this end closed without any cleanup. Returns false if it already was.
    pub fn mark_closed(&mut self, reason: CloseReason) -> bool {
        if self.state == ConnState::Closed {
            return false;
        }
        self.state = ConnState::Closed;
        self.close_reason = Some(reason);
        true
    }
}

/// Result of a successful handshake.
#[derive(Debug)]
pub struct Handshake {
    pub requester_conn: Connection,
    pub owner_conn: Connection,
    /// `ConnectionOpened`, signed by the requester's new DID.
    pub record: IdentityRecord,
}

fn session_key(
    local: &crate::identity::Did,
    remote: &PublicKey,
    a: &DidString,
    b: &DidString,
) -> Result<SymmetricKey, ChannelError> {
    let shared = agree(local.keys(), remote).map_err(|e| ChannelError::HandshakeFailure(e.to_string()))?;
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut salt = Canonical::new("bsmd/session-salt/v1");
    salt.str(lo.as_str()).str(hi.as_str());
    Ok(SymmetricKey::derive(&salt.finish(), &shared, b"bsmd/session/v1"))
}

fn key_confirmation(key: &SymmetricKey) -> Digest {
    let mut c = Canonical::new("bsmd/key-confirm/v1");
    c.bytes(key.as_bytes());
    c.digest()
}

/// Runs the access flow and handshake: the owner's contract decides `req`
/// under `grant`, then both sides mint a fresh DID and agree a session key.
/// Nothing is minted unless the contract accepts.
pub fn open_connection(
    requester: &mut NodeIdentity,
    owner: &mut NodeIdentity,
    req: &ConnectionRequest,
    grant: &CategorySet,
    tick: u64,
) -> Result<Handshake, ChannelError> {
    if owner.has_left() || requester.has_left() {
        return Err(ChannelError::AccessDenied(Verdict::Deny));
    }
    owner.contract.submit_request(req.clone());
    let sig = owner.authorize(&ContractOp::Accept {
        request: req.clone(),
        grant: grant.clone(),
    });
    let decision = owner.contract.accept_connection(req, grant, &sig)?;
    if !decision.is_accept() {
        return Err(ChannelError::AccessDenied(decision.verdict()));
    }
    let granted = decision.granted().clone();

    let owner_did = owner.mint_did(tick).clone();
    let requester_did = requester.mint_did(tick).clone();
    let (od, rd) = (&owner_did.did_string, &requester_did.did_string);
    let owner_key = session_key(&owner_did, &requester_did.public_key(), od, rd)?;
    let requester_key = session_key(&requester_did, &owner_did.public_key(), od, rd)?;
    if key_confirmation(&owner_key) != key_confirmation(&requester_key) {
        return Err(ChannelError::HandshakeFailure("session keys disagree".into()));
    }

    if let Some(d) = owner.did_mut(od) {
        d.peer_did = Some(rd.clone());
    }
    if let Some(d) = requester.did_mut(rd) {
        d.peer_did = Some(od.clone());
    }
    owner.contract.bind_peer_did(rd.clone(), requester.node_id().clone());

    let record = RecordDraft {
        kind: RecordKind::ConnectionOpened,
        did_ref: od.clone(),
        counterparty_did: rd.clone(),
        role_pair: (owner.role(), requester.role()),
        categories: granted.clone(),
        tick,
        commitment: Some(owner.contract.commitment()),
    }
    .sign(&requester_did);

    let owner_conn = Connection {
        local_did: od.clone(),
        remote_did: rd.clone(),
        remote_key: requester_did.public_key(),
        session_key: owner_key,
        state: ConnState::Established,
        granted: granted.clone(),
        side: Side::Owner,
        local_role: owner.role(),
        remote_role: requester.role(),
        opened_at: tick,
        close_reason: None,
    };
    let requester_conn = Connection {
        local_did: rd.clone(),
        remote_did: od.clone(),
        remote_key: owner_did.public_key(),
        session_key: requester_key,
        state: ConnState::Established,
        granted,
        side: Side::Requester,
        local_role: requester.role(),
        remote_role: owner.role(),
        opened_at: tick,
        close_reason: None,
    };
    Ok(Handshake {
        requester_conn,
        owner_conn,
        record,
    })
}

/// Plaintext unit inside an envelope.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeItem {
    pub asset_id: AssetId,
    pub category: DataCategory,
    /// DID of the original data owner when the sender forwards received data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_owner_did: Option<DidString>,
    #[serde(with = "hex_vec")]
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for EnvelopeItem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnvelopeItem")
            .field("asset_id", &self.asset_id)
            .field("category", &self.category)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferEnvelope {
    pub version: u8,
    pub sender_did: DidString,
    pub receiver_did: DidString,
    pub tick: u64,
    pub categories: CategorySet,
    /// `nonce || aead ciphertext`.
    pub ciphertext: Vec<u8>,
    pub sender_sig: Signature,
}

impl TransferEnvelope {
    fn header_aad(sender: &DidString, receiver: &DidString, tick: u64, categories: &CategorySet) -> Vec<u8> {
        let mut c = Canonical::new("bsmd/envelope-aad/v1");
        c.str(sender.as_str())
            .str(receiver.as_str())
            .u64(tick)
            .u64(categories.len() as u64);
        for cat in categories {
            c.str(cat.as_str());
        }
        c.finish()
    }

    fn signed_message(ciphertext: &[u8], categories: &CategorySet, tick: u64) -> Vec<u8> {
        let mut c = Canonical::new("bsmd/envelope/v1");
        c.bytes(Digest::of(ciphertext).as_bytes()).u64(categories.len() as u64);
        for cat in categories {
            c.str(cat.as_str());
        }
        c.u64(tick);
        c.finish()
    }

    pub fn verify_signature(&self, sender_key: &PublicKey) -> bool {
        sender_key_matches(&self.sender_did, sender_key)
            && verify(
                sender_key,
                &Self::signed_message(&self.ciphertext, &self.categories, self.tick),
                &self.sender_sig,
            )
    }

    /// Decrypts with `key`. Fails for every key but the session key.
    pub fn open_with(&self, key: &SymmetricKey) -> Result<Vec<EnvelopeItem>, ChannelError> {
        let aad = Self::header_aad(&self.sender_did, &self.receiver_did, self.tick, &self.categories);
        let plain = key
            .open_framed(&aad, &self.ciphertext)
            .map_err(|e| ChannelError::Malformed(e.to_string()))?;
        serde_json::from_slice(&plain).map_err(|e| ChannelError::Malformed(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.ciphertext.len());
        out.push(self.version);
        for did in [&self.sender_did, &self.receiver_did] {
            let b = did.as_str().as_bytes();
            out.extend_from_slice(&(b.len() as u16).to_be_bytes());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.tick.to_be_bytes());
        out.extend_from_slice(&(self.categories.len() as u16).to_be_bytes());
        for cat in &self.categories {
            let b = cat.as_str().as_bytes();
            out.push(b.len() as u8);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(self.sender_sig.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.take(1)?[0];
        if version != ENVELOPE_VERSION {
            return Err(ChannelError::Malformed(format!("unsupported version {version}")));
        }
        let sender_did = r.did()?;
        let receiver_did = r.did()?;
        let tick = u64::from_be_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = u16::from_be_bytes(r.take(2)?.try_into().expect("2 bytes"));
        let mut categories = CategorySet::new();
        for _ in 0..count {
            let len = r.take(1)?[0] as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| ChannelError::Malformed(e.to_string()))?;
            let cat: DataCategory = serde_json::from_value(serde_json::Value::String(name.to_string()))
                .map_err(|e| ChannelError::Malformed(e.to_string()))?;
            if !categories.insert(cat) {
                return Err(ChannelError::Malformed("duplicate category".into()));
            }
        }
        let ct_len = u32::from_be_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        let sig: [u8; SIGNATURE_LEN] = r.take(SIGNATURE_LEN)?.try_into().expect("64 bytes");
        if r.pos != bytes.len() {
            return Err(ChannelError::Malformed("trailing bytes".into()));
        }
        Ok(TransferEnvelope {
            version,
            sender_did,
            receiver_did,
            tick,
            categories,
            ciphertext,
            sender_sig: Signature(sig),
        })
    }
}

fn sender_key_matches(did: &DidString, key: &PublicKey) -> bool {
    did.is_bound_to(key)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ChannelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ChannelError::Malformed("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn did(&mut self) -> Result<DidString, ChannelError> {
        let len = u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let s = std::str::from_utf8(self.take(len)?).map_err(|e| ChannelError::Malformed(e.to_string()))?;
        DidString::parse(s).map_err(ChannelError::Malformed)
    }
}

/// Seals `assets` for the peer on `conn`. All-or-nothing: if any category is
/// outside what the sender's contract currently grants the peer, nothing is
/// produced.
pub fn transfer(
    sender: &mut NodeIdentity,
    conn: &Connection,
    assets: &[AssetRef],
    tick: u64,
) -> Result<TransferEnvelope, ChannelError> {
    if !conn.is_open() || sender.has_left() {
        return Err(ChannelError::ChannelClosed);
    }
    let items = assets
        .iter()
        .map(|a| sender.outgoing_item(a))
        .collect::<Result<Vec<_>, _>>()?;
    let categories: CategorySet = items.iter().map(|i| i.category.clone()).collect();
    if categories.is_empty() {
        return Err(ChannelError::NotGranted(Vec::new()));
    }
    let allowed = match conn.side {
        Side::Owner => sender.contract.evaluate_request(&conn.remote_did, &categories)?,
        Side::Requester => crate::contracts::AccessDecision::deny(),
    };
    let missing: Vec<String> = categories
        .iter()
        .filter(|c| !allowed.is_accept() || !allowed.granted().contains(*c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ChannelError::NotGranted(missing));
    }

    let plain: Vec<EnvelopeItem> = items
        .into_iter()
        .map(|i| EnvelopeItem {
            asset_id: i.asset_id,
            category: i.category,
            origin_owner_did: i.origin_owner_did,
            payload: i.payload,
        })
        .collect();
    let plain = serde_json::to_vec(&plain).expect("items serialize");
    let mut nonce = [0u8; NONCE_LEN];
    rand::RngCore::fill_bytes(sender.rng(), &mut nonce);
    let aad = TransferEnvelope::header_aad(&conn.local_did, &conn.remote_did, tick, &categories);
    let ciphertext = conn.session_key.seal_framed(nonce, &aad, &plain);
    let did = sender
        .did(&conn.local_did)
        .ok_or_else(|| IdentityError::UnknownDid(conn.local_did.to_string()))?;
    let sender_sig = did
        .keys()
        .sign(&TransferEnvelope::signed_message(&ciphertext, &categories, tick));
    Ok(TransferEnvelope {
        version: ENVELOPE_VERSION,
        sender_did: conn.local_did.clone(),
        receiver_did: conn.remote_did.clone(),
        tick,
        categories,
        ciphertext,
        sender_sig,
    })
}

/// Receiver side: checks, decrypts and stores an envelope, and returns one
/// `DataTransferred` record per data owner, signed by the receiver's DID.
pub fn receive(
    receiver: &mut NodeIdentity,
    conn: &Connection,
    wire: &[u8],
    tick: u64,
) -> Result<Vec<IdentityRecord>, ChannelError> {
    if !conn.is_open() || receiver.has_left() {
        return Err(ChannelError::ChannelClosed);
    }
    let env = TransferEnvelope::decode(wire)?;
    if env.sender_did != conn.remote_did || env.receiver_did != conn.local_did {
        return Err(ChannelError::Malformed(
            "envelope not addressed to this connection".into(),
        ));
    }
    if !env.verify_signature(&conn.remote_key) {
        return Err(ChannelError::Malformed("sender signature does not verify".into()));
    }
    let items = env.open_with(&conn.session_key)?;
    let carried: CategorySet = items.iter().map(|i| i.category.clone()).collect();
    if carried != env.categories {
        return Err(ChannelError::Malformed("category labels do not match contents".into()));
    }

    let mut by_owner: std::collections::BTreeMap<DidString, CategorySet> = Default::default();
    for item in items {
        let owner_did = item.origin_owner_did.clone().unwrap_or_else(|| env.sender_did.clone());
        by_owner
            .entry(owner_did.clone())
            .or_default()
            .insert(item.category.clone());
        receiver.store_received(
            conn.local_did.clone(),
            env.sender_did.clone(),
            owner_did,
            item.asset_id,
            item.category,
            &item.payload,
            tick,
        );
    }
    let did = receiver
        .did(&conn.local_did)
        .ok_or_else(|| IdentityError::UnknownDid(conn.local_did.to_string()))?;
    Ok(by_owner
        .into_iter()
        .map(|(owner_did, categories)| {
            RecordDraft {
                kind: RecordKind::DataTransferred,
                did_ref: owner_did,
                counterparty_did: conn.local_did.clone(),
                role_pair: (conn.remote_role, conn.local_role),
                categories,
                tick,
                commitment: None,
            }
            .sign(did)
        })
        .collect())
}

/// Closes one end. On `OwnerRevoked` the requester end purges what it
/// received over this connection. Returns the number of purged assets.
pub fn close_connection(node: &mut NodeIdentity, conn: &mut Connection, reason: CloseReason) -> usize {
    if !conn.mark_closed(reason) {
        return 0;
    }
    if reason == CloseReason::OwnerRevoked && conn.side == Side::Requester {
        node.purge_received(&conn.local_did)
    } else {
        0
    }
}

/// `ConnectionRevoked` record for one owner-side connection covered by `notice`.
pub fn revocation_record(
    owner: &NodeIdentity,
    conn: &Connection,
    notice: &RevocationNotice,
) -> Result<IdentityRecord, ChannelError> {
    let did = owner
        .did(&conn.local_did)
        .ok_or_else(|| IdentityError::UnknownDid(conn.local_did.to_string()))?;
    Ok(RecordDraft {
        kind: RecordKind::ConnectionRevoked,
        did_ref: conn.local_did.clone(),
        counterparty_did: conn.remote_did.clone(),
        role_pair: (conn.local_role, conn.remote_role),
        categories: notice.revoked_grant.clone(),
        tick: notice.tick,
        commitment: Some(owner.contract.commitment()),
    }
    .sign(did))
}

/// Which node a connection's remote end belongs to, from the owner's contract.
pub fn resolve_peer<'a>(owner: &'a NodeIdentity, conn: &Connection) -> Option<&'a NodeId> {
    owner.contract.resolve(&conn.remote_did)
}
