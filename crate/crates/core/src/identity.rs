//! Participants, their per-connection DIDs and the off-chain encrypted vault.
//!
//! A node owns its data: every asset it collects is sealed at rest under a
//! vault key derived from the node's master secret, and assets received from
//! peers are re-sealed under the receiver's own vault key. Nothing in this
//! module ever hands plaintext to a serializer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::contracts::{ContractError, ContractOp, RevocationNotice, SmartContract};
use crate::crypto::{
    decode_hex_strict, Canonical, CryptoError, Digest, KeyPair, PublicKey, Signature, SymmetricKey, NONCE_LEN,
};

pub const KEYSTORE_VERSION: u32 = 1;

/// Categories every registry starts with.
pub const SEED_CATEGORIES: [&str; 8] = [
    "gps_log",
    "speed",
    "direction",
    "mac_address",
    "gender",
    "origin",
    "destination",
    "inferred_mode",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("unknown data category {0:?}")]
    UnknownCategory(String),
    #[error("invalid category name {0:?}: expected non-empty lowercase snake_case")]
    InvalidCategoryName(String),
    #[error("unknown asset {0}")]
    UnknownAsset(String),
    #[error("unknown DID {0}")]
    UnknownDid(String),
    #[error("node has left the network")]
    NodeLeft,
    #[error("keystore: {0}")]
    Keystore(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Individual,
    Company,
    Government,
    University,
}

impl NodeRole {
    pub const ALL: [NodeRole; 4] = [
        NodeRole::Individual,
        NodeRole::Company,
        NodeRole::Government,
        NodeRole::University,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeRole::Individual => "individual",
            NodeRole::Company => "company",
            NodeRole::Government => "government",
            NodeRole::University => "university",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// Opaque network-wide node identifier, `node-<32 hex>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_snake_case(name: &str) -> bool {
    !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_lowercase())
        && !name.ends_with('_')
        && !name.contains("__")
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// A data category label such as `gps_log`. This is the only description of
/// transferred data that ever reaches the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct DataCategory(String);

impl DataCategory {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DataCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DataCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if !is_snake_case(&s) {
            return Err(serde::de::Error::custom(format!("invalid category {s:?}")));
        }
        Ok(DataCategory(s))
    }
}

pub type CategorySet = BTreeSet<DataCategory>;

/// Extensible set of known category names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRegistry {
    names: BTreeSet<String>,
}

impl Default for CategoryRegistry {
    fn default() -> Self {
        CategoryRegistry {
            names: SEED_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryRegistry {
    pub fn register(&mut self, name: &str) -> Result<DataCategory, IdentityError> {
        if !is_snake_case(name) {
            return Err(IdentityError::InvalidCategoryName(name.to_string()));
        }
        self.names.insert(name.to_string());
        Ok(DataCategory(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<DataCategory, IdentityError> {
        if self.names.contains(name) {
            Ok(DataCategory(name.to_string()))
        } else {
            Err(IdentityError::UnknownCategory(name.to_string()))
        }
    }

    pub fn contains(&self, category: &DataCategory) -> bool {
        self.names.contains(category.as_str())
    }

    pub fn set<'a, I: IntoIterator<Item = &'a str>>(&self, names: I) -> Result<CategorySet, IdentityError> {
        names.into_iter().map(|n| self.get(n)).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// `did:bsmd:<hex of the first 16 bytes of SHA-256(public key)>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct DidString(String);

impl DidString {
    pub const PREFIX: &'static str = "did:bsmd:";

    pub fn from_public_key(pk: &PublicKey) -> Self {
        let d = Digest::of(pk.as_bytes());
        DidString(format!("{}{}", Self::PREFIX, hex::encode(&d.0[..16])))
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let tail = s
            .strip_prefix(Self::PREFIX)
            .ok_or_else(|| format!("DID {s:?} lacks {:?} prefix", Self::PREFIX))?;
        if tail.len() != 32 {
            return Err(format!("DID {s:?} has wrong length"));
        }
        decode_hex_strict(tail)?;
        Ok(DidString(s.to_string()))
    }

    /// True iff `pk` is the key this identifier was derived from.
    pub fn is_bound_to(&self, pk: &PublicKey) -> bool {
        *self == Self::from_public_key(pk)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DidString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DidString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        DidString::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A pairwise identifier minted for exactly one connection.
#[derive(Debug, Clone)]
pub struct Did {
    pub did_string: DidString,
    keys: KeyPair,
    pub peer_did: Option<DidString>,
    pub created_at: u64,
    pub active: bool,
}

impl Did {
    /// A standalone DID not held by any node.
    pub fn from_keys(keys: KeyPair, created_at: u64) -> Self {
        Did {
            did_string: DidString::from_public_key(&keys.public()),
            keys,
            peer_did: None,
            created_at,
            active: true,
        }
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetId(String);

impl AssetId {
    pub fn new(s: impl Into<String>) -> Self {
        AssetId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An asset held in the owner's vault. The payload exists only in sealed form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAsset {
    pub asset_id: AssetId,
    pub owner: NodeId,
    pub category: DataCategory,
    pub created_at: u64,
    #[serde(with = "hex_vec")]
    sealed_payload: Vec<u8>,
}

/// Data received from a peer, re-sealed under the receiver's vault key and
/// tagged with the connection it arrived on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedAsset {
    pub local_did: DidString,
    pub sender_did: DidString,
    /// The data owner's DID, which differs from `sender_did` for re-shared data.
    pub owner_did: DidString,
    pub asset_id: AssetId,
    pub category: DataCategory,
    pub received_at: u64,
    #[serde(with = "hex_vec")]
    sealed_payload: Vec<u8>,
}

/// Selects an asset for an outgoing transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssetRef {
    Own(AssetId),
    /// A previously received asset. Forwarding these is what an unsolicited
    /// share looks like.
    Received(AssetId),
}

/// Decrypted asset ready to be sealed onto a channel.
#[derive(Clone, PartialEq, Eq)]
pub struct OutgoingItem {
    pub asset_id: AssetId,
    pub category: DataCategory,
    pub payload: Vec<u8>,
    /// `None` for the node's own data.
    pub origin_owner_did: Option<DidString>,
}

impl fmt::Debug for OutgoingItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutgoingItem")
            .field("asset_id", &self.asset_id)
            .field("category", &self.category)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct VaultContents {
    assets: Vec<DataAsset>,
    received: Vec<ReceivedAsset>,
}

/// Keystore container. `master_secret` is present only in private exports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeystoreExport {
    pub version: u32,
    pub node_id: NodeId,
    pub role: NodeRole,
    pub is_validator: bool,
    pub public: bool,
    pub master_public_key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex_vec")]
    pub master_secret: Option<Vec<u8>>,
    #[serde(with = "hex_vec")]
    pub encrypted_vault: Vec<u8>,
}

pub struct NodeIdentity {
    node_id: NodeId,
    role: NodeRole,
    is_validator: bool,
    master: KeyPair,
    vault_key: SymmetricKey,
    vault: BTreeMap<AssetId, DataAsset>,
    received: Vec<ReceivedAsset>,
    dids: Vec<Did>,
    pub contract: SmartContract,
    rng: ChaCha20Rng,
    left: bool,
}

impl fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeIdentity")
            .field("node_id", &self.node_id)
            .field("role", &self.role)
            .field("is_validator", &self.is_validator)
            .field("assets", &self.vault.len())
            .field("received", &self.received.len())
            .field("dids", &self.dids.len())
            .finish_non_exhaustive()
    }
}

fn vault_key_for(master: &KeyPair) -> SymmetricKey {
    SymmetricKey::derive(b"bsmd/vault/v1", &master.seed(), b"personal vault key")
}

fn asset_aad(owner: &NodeId, asset_id: &AssetId) -> Vec<u8> {
    let mut c = Canonical::new("bsmd/asset/v1");
    c.str(owner.as_str()).str(asset_id.as_str());
    c.finish()
}

fn received_aad(local_did: &DidString, asset_id: &AssetId) -> Vec<u8> {
    let mut c = Canonical::new("bsmd/received/v1");
    c.str(local_did.as_str()).str(asset_id.as_str());
    c.finish()
}

impl NodeIdentity {
    /// Creates a participant with fresh keys and an empty vault. The same
    /// `(role, seed)` always yields the same identity.
    pub fn create(role: NodeRole, is_validator: bool, rng_seed: u64) -> Self {
        let mut c = Canonical::new("bsmd/node/v1");
        c.u64(rng_seed).str(role.as_str());
        let mut rng = ChaCha20Rng::from_seed(c.digest().0);
        let master = KeyPair::generate(&mut rng);
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        let node_id = NodeId(format!("node-{}", hex::encode(id)));
        let contract = SmartContract::new(node_id.clone(), master.public(), &mut rng);
        NodeIdentity {
            vault_key: vault_key_for(&master),
            node_id,
            role,
            is_validator,
            master,
            vault: BTreeMap::new(),
            received: Vec::new(),
            dids: Vec::new(),
            contract,
            rng,
            left: false,
        }
    }

    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn role(&self) -> NodeRole {
        self.role
    }

    pub fn is_validator(&self) -> bool {
        self.is_validator
    }

    pub fn has_left(&self) -> bool {
        self.left
    }

    pub fn master_public_key(&self) -> PublicKey {
        self.master.public()
    }

    /// Validators sign consensus votes with the master key.
    pub fn master_keys(&self) -> &KeyPair {
        &self.master
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// Mints a fresh pairwise DID. The identifier is a digest of a key drawn
    /// from the node's RNG and has no relation to `node_id` or the master key.
    pub fn mint_did(&mut self, tick: u64) -> &Did {
        let keys = KeyPair::generate(&mut self.rng);
        self.dids.push(Did::from_keys(keys, tick));
        self.dids.last().unwrap()
    }

    pub fn dids(&self) -> &[Did] {
        &self.dids
    }

    pub fn did(&self, did: &DidString) -> Option<&Did> {
        self.dids.iter().find(|d| &d.did_string == did)
    }

    pub(crate) fn did_mut(&mut self, did: &DidString) -> Option<&mut Did> {
        self.dids.iter_mut().find(|d| &d.did_string == did)
    }

    pub fn did_strings(&self) -> BTreeSet<DidString> {
        self.dids.iter().map(|d| d.did_string.clone()).collect()
    }

    fn fresh_nonce(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut n);
        n
    }

    /// Seals `payload` into the vault and returns its fresh id.
    pub fn store_asset(
        &mut self,
        registry: &CategoryRegistry,
        category: &str,
        payload: &[u8],
        tick: u64,
    ) -> Result<AssetId, IdentityError> {
        if self.left {
            return Err(IdentityError::NodeLeft);
        }
        let category = registry.get(category)?;
        let mut raw = [0u8; 16];
        self.rng.fill_bytes(&mut raw);
        let asset_id = AssetId(format!("asset-{}", hex::encode(raw)));
        let nonce = self.fresh_nonce();
        let sealed_payload = self
            .vault_key
            .seal_framed(nonce, &asset_aad(&self.node_id, &asset_id), payload);
        self.vault.insert(
            asset_id.clone(),
            DataAsset {
                asset_id: asset_id.clone(),
                owner: self.node_id.clone(),
                category,
                created_at: tick,
                sealed_payload,
            },
        );
        Ok(asset_id)
    }

    pub fn asset(&self, id: &AssetId) -> Option<&DataAsset> {
        self.vault.get(id)
    }

    pub fn assets(&self) -> impl Iterator<Item = &DataAsset> {
        self.vault.values()
    }

    pub fn vault_len(&self) -> usize {
        self.vault.len()
    }

    pub fn read_asset(&self, id: &AssetId) -> Result<Vec<u8>, IdentityError> {
        let asset = self
            .vault
            .get(id)
            .ok_or_else(|| IdentityError::UnknownAsset(id.to_string()))?;
        Ok(self
            .vault_key
            .open_framed(&asset_aad(&self.node_id, id), &asset.sealed_payload)?)
    }

    pub fn received(&self) -> &[ReceivedAsset] {
        &self.received
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn store_received(
        &mut self,
        local_did: DidString,
        sender_did: DidString,
        owner_did: DidString,
        asset_id: AssetId,
        category: DataCategory,
        payload: &[u8],
        tick: u64,
    ) {
        let nonce = self.fresh_nonce();
        let sealed_payload = self
            .vault_key
            .seal_framed(nonce, &received_aad(&local_did, &asset_id), payload);
        self.received.push(ReceivedAsset {
            local_did,
            sender_did,
            owner_did,
            asset_id,
            category,
            received_at: tick,
            sealed_payload,
        });
    }

    pub fn read_received(&self, index: usize) -> Result<Vec<u8>, IdentityError> {
        let r = self
            .received
            .get(index)
            .ok_or_else(|| IdentityError::UnknownAsset(format!("received#{index}")))?;
        Ok(self
            .vault_key
            .open_framed(&received_aad(&r.local_did, &r.asset_id), &r.sealed_payload)?)
    }

    /// Drops everything received over the connection bound to `local_did`.
    pub fn purge_received(&mut self, local_did: &DidString) -> usize {
        let before = self.received.len();
        self.received.retain(|r| &r.local_did != local_did);
        before - self.received.len()
    }

    pub fn outgoing_item(&self, r: &AssetRef) -> Result<OutgoingItem, IdentityError> {
        match r {
            AssetRef::Own(id) => {
                let asset = self
                    .vault
                    .get(id)
                    .ok_or_else(|| IdentityError::UnknownAsset(id.to_string()))?;
                Ok(OutgoingItem {
                    asset_id: id.clone(),
                    category: asset.category.clone(),
                    payload: self.read_asset(id)?,
                    origin_owner_did: None,
                })
            }
            AssetRef::Received(id) => {
                let (idx, rec) = self
                    .received
                    .iter()
                    .enumerate()
                    .find(|(_, r)| &r.asset_id == id)
                    .ok_or_else(|| IdentityError::UnknownAsset(id.to_string()))?;
                Ok(OutgoingItem {
                    asset_id: id.clone(),
                    category: rec.category.clone(),
                    payload: self.read_received(idx)?,
                    origin_owner_did: Some(rec.owner_did.clone()),
                })
            }
        }
    }

    /// Signs a contract mutation with the master key.
    pub fn authorize(&self, op: &ContractOp) -> Signature {
        self.master.sign(self.contract.mutation_digest(op).as_bytes())
    }

    pub fn grant(&mut self, peer: &NodeId, categories: &CategorySet) -> Result<(), ContractError> {
        let sig = self.authorize(&ContractOp::Grant {
            peer: peer.clone(),
            categories: categories.clone(),
        });
        self.contract.grant(peer, categories, &sig)
    }

    pub fn revoke(&mut self, peer: &NodeId, tick: u64) -> Result<RevocationNotice, ContractError> {
        let sig = self.authorize(&ContractOp::Revoke { peer: peer.clone() });
        self.contract.revoke(peer, &sig, tick)
    }

    pub fn set_mandatory(&mut self, service: &str, categories: &CategorySet) -> Result<(), ContractError> {
        let sig = self.authorize(&ContractOp::SetMandatory {
            service: service.to_string(),
            categories: categories.clone(),
        });
        self.contract.set_mandatory(service, categories, &sig)
    }

    /// Leaves the network: revokes every peer through the contract, erases the
    /// vault and received-store, and deactivates all DIDs. Ledger records that
    /// reference those DIDs stay on-chain; they carry no personal data.
    pub fn leave_network(&mut self, tick: u64) -> Vec<RevocationNotice> {
        if self.left {
            return Vec::new();
        }
        let peers: BTreeSet<NodeId> = self.contract.known_peers().cloned().collect();
        let mut notices = Vec::new();
        for peer in peers {
            if let Ok(n) = self.revoke(&peer, tick) {
                notices.push(n);
            }
        }
        self.vault.clear();
        self.received.clear();
        for d in &mut self.dids {
            d.active = false;
        }
        self.left = true;
        notices
    }

    fn sealed_vault(&self) -> Vec<u8> {
        let contents = VaultContents {
            assets: self.vault.values().cloned().collect(),
            received: self.received.clone(),
        };
        let plain = serde_json::to_vec(&contents).expect("vault serializes");
        // Deterministic nonce: identical contents are the only way to repeat it.
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&Digest::of(&plain).0[..NONCE_LEN]);
        self.vault_key
            .seal_framed(nonce, self.node_id.as_str().as_bytes(), &plain)
    }

    /// Public keystore export: no secret key material.
    pub fn export_public(&self) -> KeystoreExport {
        KeystoreExport {
            version: KEYSTORE_VERSION,
            node_id: self.node_id.clone(),
            role: self.role,
            is_validator: self.is_validator,
            public: true,
            master_public_key: self.master.public(),
            master_secret: None,
            encrypted_vault: self.sealed_vault(),
        }
    }

    pub fn export_private(&self) -> KeystoreExport {
        KeystoreExport {
            public: false,
            master_secret: Some(self.master.seed().to_vec()),
            ..self.export_public()
        }
    }

    /// Restores a node (keys and vault) from a private export. DIDs and
    /// connections are per-session and are not part of the keystore.
    pub fn import_private(export: &KeystoreExport) -> Result<Self, IdentityError> {
        if export.version != KEYSTORE_VERSION {
            return Err(IdentityError::Keystore(format!(
                "unsupported version {}",
                export.version
            )));
        }
        let secret = export
            .master_secret
            .as_ref()
            .ok_or_else(|| IdentityError::Keystore("public export carries no secret".into()))?;
        let seed: [u8; 32] = secret
            .as_slice()
            .try_into()
            .map_err(|_| IdentityError::Keystore("master secret must be 32 bytes".into()))?;
        let master = KeyPair::from_seed(seed);
        if master.public() != export.master_public_key {
            return Err(IdentityError::Keystore("secret does not match public key".into()));
        }
        let vault_key = vault_key_for(&master);
        let plain = vault_key.open_framed(export.node_id.as_str().as_bytes(), &export.encrypted_vault)?;
        let contents: VaultContents =
            serde_json::from_slice(&plain).map_err(|e| IdentityError::Keystore(e.to_string()))?;
        let mut rng_seed = Canonical::new("bsmd/node-restore/v1");
        rng_seed.bytes(&seed);
        let mut rng = ChaCha20Rng::from_seed(rng_seed.digest().0);
        let contract = SmartContract::new(export.node_id.clone(), master.public(), &mut rng);
        Ok(NodeIdentity {
            node_id: export.node_id.clone(),
            role: export.role,
            is_validator: export.is_validator,
            master,
            vault_key,
            vault: contents.assets.into_iter().map(|a| (a.asset_id.clone(), a)).collect(),
            received: contents.received,
            dids: Vec::new(),
            contract,
            rng,
            left: false,
        })
    }
}

pub(crate) mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        crate::crypto::decode_hex_strict(&s).map_err(serde::de::Error::custom)
    }
}

mod opt_hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => super::hex_vec::serialize(b, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| crate::crypto::decode_hex_strict(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
