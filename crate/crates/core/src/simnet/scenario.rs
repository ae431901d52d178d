use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{CategoryRegistry, NodeRole};
use crate::ledger::Behavior;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    /// TOML syntax or schema error; the message carries line and column.
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

fn default_duration() -> u64 {
    200
}

fn default_block_interval() -> u64 {
    10
}

fn default_latency() -> [u64; 2] {
    [1, 3]
}

fn default_true() -> bool {
    true
}

fn honest() -> Behavior {
    Behavior::Honest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    /// Seed used when none is given on the command line.
    #[serde(default)]
    pub seed: u64,
    /// Last tick at which scripted events may occur.
    #[serde(default = "default_duration")]
    pub duration: u64,
    /// Ticks between consensus rounds.
    #[serde(default = "default_block_interval")]
    pub block_interval: u64,
    /// Inclusive per-message delay bounds in ticks.
    #[serde(default = "default_latency")]
    pub latency: [u64; 2],
    #[serde(default)]
    pub drop_rate: f64,
}

impl Default for Meta {
    fn default() -> Self {
        Meta {
            name: "unnamed".into(),
            seed: 0,
            duration: default_duration(),
            block_interval: default_block_interval(),
            latency: default_latency(),
            drop_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoriesSection {
    /// Registered in addition to the built-in categories.
    #[serde(default)]
    pub extra: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub role: NodeRole,
    #[serde(default)]
    pub validator: bool,
    #[serde(default = "honest")]
    pub behavior: Behavior,
    /// Fixed key seed; derived from the run seed and `id` when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub mandatory: Vec<String>,
    /// Owners whose contracts require `mandatory` for this service.
    pub owners: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    pub id: String,
    pub owner: String,
    pub category: String,
    /// Sentinel payload; defaults to `SENTINEL:<id>`.
    #[serde(default)]
    pub payload: Option<String>,
}

impl AssetSpec {
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.payload
            .clone()
            .unwrap_or_else(|| format!("SENTINEL:{}", self.id))
            .into_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Accept,
    Deny,
    Revoked,
    Ok,
    NotGranted,
    Closed,
    RevokedPeer,
}

impl Expect {
    pub fn as_str(&self) -> &'static str {
        match self {
            Expect::Accept => "accept",
            Expect::Deny => "deny",
            Expect::Revoked => "revoked",
            Expect::Ok => "ok",
            Expect::NotGranted => "not_granted",
            Expect::Closed => "closed",
            Expect::RevokedPeer => "revoked_peer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// `requester` asks `owner`'s contract for `categories`; the owner approves
    /// with `grant` (defaults to everything requested).
    Connect {
        tick: u64,
        requester: String,
        owner: String,
        categories: Vec<String>,
        #[serde(default)]
        grant: Option<Vec<String>>,
        #[serde(default)]
        service: Option<String>,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Grant {
        tick: u64,
        owner: String,
        peer: String,
        categories: Vec<String>,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Transfer {
        tick: u64,
        owner: String,
        to: String,
        assets: Vec<String>,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Revoke {
        tick: u64,
        owner: String,
        peer: String,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Leave {
        tick: u64,
        node: String,
        #[serde(default)]
        expect: Option<Expect>,
    },
}

impl Action {
    pub fn tick(&self) -> u64 {
        match self {
            Action::Connect { tick, .. }
            | Action::Grant { tick, .. }
            | Action::Transfer { tick, .. }
            | Action::Revoke { tick, .. }
            | Action::Leave { tick, .. } => *tick,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Action::Connect { .. } => "connect",
            Action::Grant { .. } => "grant",
            Action::Transfer { .. } => "transfer",
            Action::Revoke { .. } => "revoke",
            Action::Leave { .. } => "leave",
        }
    }

    pub fn expect(&self) -> Option<Expect> {
        match self {
            Action::Connect { expect, .. }
            | Action::Grant { expect, .. }
            | Action::Transfer { expect, .. }
            | Action::Revoke { expect, .. }
            | Action::Leave { expect, .. } => *expect,
        }
    }

    fn allowed_expectations(&self) -> &'static [Expect] {
        match self {
            Action::Connect { .. } => &[Expect::Accept, Expect::Deny, Expect::Revoked],
            Action::Grant { .. } => &[Expect::Ok, Expect::RevokedPeer],
            Action::Transfer { .. } => &[Expect::Ok, Expect::NotGranted, Expect::Closed],
            Action::Revoke { .. } | Action::Leave { .. } => &[Expect::Ok],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterceptionSpec {
    /// Unordered node pairs whose traffic is recorded.
    #[serde(default)]
    pub taps: Vec<[String; 2]>,
    #[serde(default)]
    pub all: bool,
    /// Control run: the adversary also holds every session key.
    #[serde(default)]
    pub stolen_keys: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassLeakSpec {
    /// Number of nodes compromised at random, in addition to `targets`.
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsolicitedShareSpec {
    pub tick: u64,
    pub rogue: String,
    /// Id of an asset the rogue received earlier.
    pub asset: String,
    pub to: String,
    /// Whether the receiving side submits the ledger records.
    #[serde(default = "default_true")]
    pub on_ledger: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsolicitedRequestSpec {
    pub tick: u64,
    pub attacker: String,
    pub target: String,
    pub categories: Vec<String>,
    pub count: u64,
    /// Requests sent per tick.
    pub rate: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpecs {
    #[serde(default)]
    pub interception: Option<InterceptionSpec>,
    #[serde(default)]
    pub mass_leak: Option<MassLeakSpec>,
    #[serde(default)]
    pub unsolicited_share: Vec<UnsolicitedShareSpec>,
    #[serde(default)]
    pub unsolicited_request: Vec<UnsolicitedRequestSpec>,
}

impl AdversarySpecs {
    pub fn is_empty(&self) -> bool {
        self.interception.is_none()
            && self.mass_leak.is_none()
            && self.unsolicited_share.is_empty()
            && self.unsolicited_request.is_empty()
    }
}

/// Declarative scenario. Build one in code or parse it from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub meta: Meta,
    #[serde(default)]
    pub categories: CategoriesSection,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub assets: Vec<AssetSpec>,
    #[serde(default)]
    pub actions: Vec<Action>,
    #[serde(default)]
    pub adversaries: AdversarySpecs,
}

/// A script that passed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    script: ScenarioScript,
    registry: CategoryRegistry,
}

pub const CARBONCOUNT_TOML: &str = include_str!("../../scenarios/carboncount.toml");

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_script(script)
    }

    pub fn carboncount() -> Self {
        Self::parse(CARBONCOUNT_TOML).expect("bundled scenario is valid")
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn registry(&self) -> &CategoryRegistry {
        &self.registry
    }

    pub fn from_script(script: ScenarioScript) -> Result<Self, ScenarioError> {
        let mut registry = CategoryRegistry::default();
        for (i, name) in script.categories.extra.iter().enumerate() {
            registry
                .register(name)
                .map_err(|e| invalid(format!("categories.extra[{i}]"), e.to_string()))?;
        }
        let m = &script.meta;
        if m.latency[0] > m.latency[1] {
            return Err(invalid("meta.latency", "min exceeds max"));
        }
        if !(0.0..1.0).contains(&m.drop_rate) {
            return Err(invalid("meta.drop_rate", "must be in [0, 1)"));
        }
        if m.block_interval == 0 {
            return Err(invalid("meta.block_interval", "must be positive"));
        }

        let mut nodes = BTreeSet::new();
        for (i, n) in script.nodes.iter().enumerate() {
            if n.id.is_empty() {
                return Err(invalid(format!("nodes[{i}].id"), "empty id"));
            }
            if !nodes.insert(n.id.as_str()) {
                return Err(invalid(format!("nodes[{i}].id"), format!("duplicate node '{}'", n.id)));
            }
            if !n.validator && n.behavior != Behavior::Honest {
                return Err(invalid(
                    format!("nodes[{i}].behavior"),
                    "only validators can be given a consensus behavior",
                ));
            }
        }
        let has_data = !script.nodes.is_empty();
        if has_data && !script.nodes.iter().any(|n| n.validator) {
            return Err(invalid("nodes", "at least one validator is required"));
        }
        let node = |field: String, id: &str| -> Result<(), ScenarioError> {
            if nodes.contains(id) {
                Ok(())
            } else {
                Err(invalid(field, format!("undefined node '{id}'")))
            }
        };
        let cats = |field: String, names: &[String], nonempty: bool| -> Result<(), ScenarioError> {
            if nonempty && names.is_empty() {
                return Err(invalid(field, "empty category list"));
            }
            for (j, c) in names.iter().enumerate() {
                registry
                    .get(c)
                    .map_err(|_| invalid(format!("{field}[{j}]"), format!("unregistered category '{c}'")))?;
            }
            Ok(())
        };

        let mut services = BTreeSet::new();
        for (i, s) in script.services.iter().enumerate() {
            if !services.insert(s.name.as_str()) {
                return Err(invalid(
                    format!("services[{i}].name"),
                    format!("duplicate service '{}'", s.name),
                ));
            }
            cats(format!("services[{i}].mandatory"), &s.mandatory, true)?;
            for (j, o) in s.owners.iter().enumerate() {
                node(format!("services[{i}].owners[{j}]"), o)?;
            }
        }

        let mut assets: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, a) in script.assets.iter().enumerate() {
            if assets.insert(a.id.as_str(), a.owner.as_str()).is_some() {
                return Err(invalid(
                    format!("assets[{i}].id"),
                    format!("duplicate asset '{}'", a.id),
                ));
            }
            node(format!("assets[{i}].owner"), &a.owner)?;
            cats(format!("assets[{i}].category"), std::slice::from_ref(&a.category), true)?;
            if a.payload.as_deref() == Some("") {
                return Err(invalid(format!("assets[{i}].payload"), "empty payload"));
            }
        }

        for (i, a) in script.actions.iter().enumerate() {
            let f = |name: &str| format!("actions[{i}].{name}");
            if a.tick() > m.duration {
                return Err(invalid(f("tick"), format!("beyond duration {}", m.duration)));
            }
            if let Some(e) = a.expect() {
                if !a.allowed_expectations().contains(&e) {
                    return Err(invalid(
                        f("expect"),
                        format!("'{}' is not an outcome of {}", e.as_str(), a.kind()),
                    ));
                }
            }
            match a {
                Action::Connect {
                    requester,
                    owner,
                    categories,
                    grant,
                    service,
                    ..
                } => {
                    node(f("requester"), requester)?;
                    node(f("owner"), owner)?;
                    if requester == owner {
                        return Err(invalid(f("owner"), "a node cannot connect to itself"));
                    }
                    cats(f("categories"), categories, true)?;
                    if let Some(g) = grant {
                        cats(f("grant"), g, false)?;
                    }
                    if let Some(s) = service {
                        if !services.contains(s.as_str()) {
                            return Err(invalid(f("service"), format!("undefined service '{s}'")));
                        }
                    }
                }
                Action::Grant {
                    owner,
                    peer,
                    categories,
                    ..
                } => {
                    node(f("owner"), owner)?;
                    node(f("peer"), peer)?;
                    cats(f("categories"), categories, false)?;
                }
                Action::Transfer {
                    owner, to, assets: ids, ..
                } => {
                    node(f("owner"), owner)?;
                    node(f("to"), to)?;
                    if ids.is_empty() {
                        return Err(invalid(f("assets"), "empty asset list"));
                    }
                    for (j, id) in ids.iter().enumerate() {
                        match assets.get(id.as_str()) {
                            None => {
                                return Err(invalid(
                                    format!("actions[{i}].assets[{j}]"),
                                    format!("undefined asset '{id}'"),
                                ))
                            }
                            Some(o) if o != owner => {
                                return Err(invalid(
                                    format!("actions[{i}].assets[{j}]"),
                                    format!("asset '{id}' belongs to '{o}', not '{owner}'"),
                                ))
                            }
                            Some(_) => {}
                        }
                    }
                }
                Action::Revoke { owner, peer, .. } => {
                    node(f("owner"), owner)?;
                    node(f("peer"), peer)?;
                }
                Action::Leave { node: n, .. } => node(f("node"), n)?,
            }
        }

        let adv = &script.adversaries;
        if let Some(i) = &adv.interception {
            for (j, [a, b]) in i.taps.iter().enumerate() {
                node(format!("adversaries.interception.taps[{j}]"), a)?;
                node(format!("adversaries.interception.taps[{j}]"), b)?;
            }
        }
        if let Some(l) = &adv.mass_leak {
            for (j, t) in l.targets.iter().enumerate() {
                node(format!("adversaries.mass_leak.targets[{j}]"), t)?;
            }
            let distinct: BTreeSet<_> = l.targets.iter().collect();
            if distinct.len() + l.k > script.nodes.len() {
                return Err(invalid("adversaries.mass_leak.k", "more compromised nodes than nodes"));
            }
        }
        for (j, s) in adv.unsolicited_share.iter().enumerate() {
            let f = |name: &str| format!("adversaries.unsolicited_share[{j}].{name}");
            node(f("rogue"), &s.rogue)?;
            node(f("to"), &s.to)?;
            if s.rogue == s.to {
                return Err(invalid(f("to"), "rogue cannot share with itself"));
            }
            match assets.get(s.asset.as_str()) {
                None => return Err(invalid(f("asset"), format!("undefined asset '{}'", s.asset))),
                Some(o) if *o == s.rogue => {
                    return Err(invalid(f("asset"), "rogue must share data it received, not its own"))
                }
                Some(_) => {}
            }
            if s.tick > m.duration {
                return Err(invalid(f("tick"), format!("beyond duration {}", m.duration)));
            }
        }
        for (j, r) in adv.unsolicited_request.iter().enumerate() {
            let f = |name: &str| format!("adversaries.unsolicited_request[{j}].{name}");
            node(f("attacker"), &r.attacker)?;
            node(f("target"), &r.target)?;
            if r.attacker == r.target {
                return Err(invalid(f("target"), "attacker cannot target itself"));
            }
            cats(f("categories"), &r.categories, true)?;
            if r.tick > m.duration {
                return Err(invalid(f("tick"), format!("beyond duration {}", m.duration)));
            }
        }
        Ok(Scenario { script, registry })
    }
}
