//! Scenario and chain builders shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bsmd_core::channel::open_connection;
use bsmd_core::contracts::ConnectionRequest;
use bsmd_core::identity::{CategoryRegistry, CategorySet, NodeIdentity, NodeRole, SEED_CATEGORIES};
use bsmd_core::ledger::{
    Behavior, Block, ConsensusConfig, ConsensusNet, IdentityRecord, PrivacyGuard, ValidatorKey, ValidatorSet,
};
use bsmd_core::simnet::{Action, AssetSpec, Meta, NodeSpec, Scenario, ScenarioScript};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const VALIDATOR_ROLES: [NodeRole; 4] = [
    NodeRole::University,
    NodeRole::Government,
    NodeRole::Government,
    NodeRole::Company,
];

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Subset of the built-in categories selected by the low 8 bits of `mask`.
pub fn cats_from_mask(reg: &CategoryRegistry, mask: u8) -> CategorySet {
    reg.set(
        SEED_CATEGORIES
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| *c),
    )
    .unwrap()
}

pub fn names_from_mask(mask: u8) -> Vec<String> {
    SEED_CATEGORIES
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, c)| c.to_string())
        .collect()
}

pub fn node(id: &str, role: NodeRole, validator: bool, seed: u64) -> NodeSpec {
    NodeSpec {
        id: id.into(),
        role,
        validator,
        behavior: Behavior::Honest,
        seed: Some(seed),
    }
}

pub fn validators() -> Vec<NodeSpec> {
    VALIDATOR_ROLES
        .iter()
        .enumerate()
        .map(|(i, r)| node(&format!("v{i}"), *r, true, 1000 + i as u64))
        .collect()
}

pub fn connect(tick: u64, requester: &str, owner: &str, categories: Vec<String>, grant: Option<Vec<String>>) -> Action {
    Action::Connect {
        tick,
        requester: requester.into(),
        owner: owner.into(),
        categories,
        grant,
        service: None,
        expect: None,
    }
}

pub fn send_assets(tick: u64, owner: &str, to: &str, assets: Vec<String>) -> Action {
    Action::Transfer {
        tick,
        owner: owner.into(),
        to: to.into(),
        assets,
        expect: None,
    }
}

pub fn asset(id: &str, owner: &str, category: &str) -> AssetSpec {
    AssetSpec {
        id: id.into(),
        owner: owner.into(),
        category: category.into(),
        payload: Some(format!("SENTINEL<{id}>{}", "#".repeat(16))),
    }
}

/// Four honest validators plus `individuals` data owners `p0..`, each holding
/// one asset per built-in category.
pub fn population(name: &str, individuals: usize) -> ScenarioScript {
    let mut script = ScenarioScript {
        meta: Meta {
            name: name.into(),
            duration: 1000,
            ..Meta::default()
        },
        nodes: validators(),
        ..ScenarioScript::default()
    };
    for i in 0..individuals {
        let id = format!("p{i}");
        script
            .nodes
            .push(node(&id, NodeRole::Individual, false, 2000 + i as u64));
        for c in SEED_CATEGORIES {
            script.assets.push(asset(&format!("{id}_{c}"), &id, c));
        }
    }
    script
}

/// A random but valid script: connects, grants, transfers, revokes and the
/// occasional leave, between four validators and a few individuals.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut r = rng(seed);
    let individuals = r.gen_range(2..=6);
    let mut script = population(&format!("random-{seed}"), individuals);
    script.meta.block_interval = r.gen_range(3..=12);
    let owners: Vec<String> = (0..individuals).map(|i| format!("p{i}")).collect();
    let requesters: Vec<String> = (0..4).map(|i| format!("v{i}")).collect();
    let mut tick = 0;
    for _ in 0..r.gen_range(10..40) {
        tick += r.gen_range(0..4);
        let owner = owners.choose(&mut r).unwrap().clone();
        let peer = requesters.choose(&mut r).unwrap().clone();
        let action = match r.gen_range(0..100) {
            0..=34 => {
                let req = r.gen_range(1..=255u8);
                let grant = if r.gen_bool(0.7) {
                    None
                } else {
                    Some(names_from_mask(r.gen()))
                };
                connect(tick, &peer, &owner, names_from_mask(req), grant)
            }
            35..=44 => Action::Grant {
                tick,
                owner,
                peer,
                categories: names_from_mask(r.gen()),
                expect: None,
            },
            45..=84 => {
                let n = r.gen_range(1..=3);
                let assets = SEED_CATEGORIES
                    .choose_multiple(&mut r, n)
                    .map(|c| format!("{owner}_{c}"))
                    .collect();
                send_assets(tick, &owner, &peer, assets)
            }
            85..=96 => Action::Revoke {
                tick,
                owner,
                peer,
                expect: None,
            },
            _ => Action::Leave {
                tick,
                node: owner,
                expect: None,
            },
        };
        script.actions.push(action);
    }
    script.meta.duration = tick + 20;
    Scenario::from_script(script).expect("generated scenario is valid")
}

/// Records that need no simulator: handshakes between fresh node pairs.
pub fn handshake_records(count: usize, tick: u64, seed: u64) -> Vec<IdentityRecord> {
    let reg = CategoryRegistry::default();
    let cats = reg.set(["origin", "destination"]).unwrap();
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64 * 2);
            let mut owner = NodeIdentity::create(NodeRole::Individual, false, s);
            let mut requester = NodeIdentity::create(NodeRole::University, false, s + 1);
            let req = ConnectionRequest::new(requester.node_id().clone(), requester.role(), cats.clone(), None, tick)
                .unwrap();
            open_connection(&mut requester, &mut owner, &req, &cats, tick)
                .unwrap()
                .record
        })
        .collect()
}

pub fn validator_keys(behaviors: &[Behavior], seed: u64) -> Vec<ValidatorKey> {
    behaviors
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let id = NodeIdentity::create(VALIDATOR_ROLES[i % 4], true, seed * 10 + i as u64);
            ValidatorKey {
                node_id: id.node_id().clone(),
                keys: id.master_keys().clone(),
                behavior: *b,
            }
        })
        .collect()
}

pub fn net(behaviors: &[Behavior], seed: u64) -> ConsensusNet {
    ConsensusNet::new(
        validator_keys(behaviors, seed),
        PrivacyGuard::new(CategoryRegistry::default()),
        ConsensusConfig::default(),
        seed,
    )
    .unwrap()
}

/// A committed chain of `blocks` blocks from four honest validators.
pub fn committed_chain(blocks: usize, records_per_block: usize, seed: u64) -> (Vec<Block>, ValidatorSet) {
    let mut n = net(&[Behavior::Honest; 4], seed);
    for h in 0..blocks {
        for rec in handshake_records(records_per_block, h as u64, seed * 100 + h as u64) {
            n.submit_record(rec).unwrap();
        }
        n.run_consensus().unwrap().expect("honest network commits");
    }
    (n.chain().to_vec(), n.validator_set().clone())
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn distinct<T: Ord>(items: impl IntoIterator<Item = T>) -> usize {
    items.into_iter().collect::<BTreeSet<_>>().len()
}
