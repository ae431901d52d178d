mod common;

use std::collections::BTreeSet;

use bsmd_core::channel::{open_connection, receive, transfer, CloseReason};
use bsmd_core::contracts::{ConnectionRequest, ContractOp, Verdict};
use bsmd_core::crypto::KeyPair;
use bsmd_core::identity::{AssetRef, CategoryRegistry, NodeIdentity, NodeRole};
use bsmd_core::ledger::{audit_query, verify_export, write_jsonl, AuditScope, Behavior, IdentityRecord};
use bsmd_core::simnet::{run, SimConfig};
use common::*;
use proptest::prelude::*;

fn requester_owner(seed: u64) -> (NodeIdentity, NodeIdentity) {
    (
        NodeIdentity::create(NodeRole::Company, false, seed),
        NodeIdentity::create(NodeRole::Individual, false, seed + 1),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Released categories are exactly `standing grant ∩ asked`, never more.
    #[test]
    fn access_decision_is_set_intersection(
        seed in any::<u64>(),
        requested in 1..=255u8,
        grant in any::<u8>(),
        later_grant in any::<u8>(),
        asked in 1..=255u8,
    ) {
        let reg = CategoryRegistry::default();
        let (mut requester, mut owner) = requester_owner(seed);
        let req = ConnectionRequest::new(
            requester.node_id().clone(), requester.role(), cats_from_mask(&reg, requested), None, 0,
        ).unwrap();
        let policy_mask = requested & grant;
        match open_connection(&mut requester, &mut owner, &req, &cats_from_mask(&reg, grant), 0) {
            Err(_) => prop_assert_eq!(policy_mask, 0),
            Ok(hs) => {
                prop_assert!(policy_mask != 0);
                prop_assert_eq!(&hs.owner_conn.granted, &cats_from_mask(&reg, policy_mask));
                owner.grant(requester.node_id(), &cats_from_mask(&reg, later_grant)).unwrap();
                let standing = policy_mask | later_grant;
                let d = owner
                    .contract
                    .evaluate_request(&hs.owner_conn.remote_did, &cats_from_mask(&reg, asked))
                    .unwrap();
                let expected = cats_from_mask(&reg, standing & asked);
                prop_assert_eq!(d.granted(), &expected);
                prop_assert_eq!(d.is_accept(), !expected.is_empty());
            }
        }
    }

    /// Mutations signed by anyone but the owner leave the contract untouched.
    #[test]
    fn forged_mutations_change_nothing(seed in any::<u64>(), ops in prop::collection::vec((0..3u8, any::<u8>()), 1..12)) {
        let reg = CategoryRegistry::default();
        let (mut requester, mut owner) = requester_owner(seed);
        let all = cats_from_mask(&reg, 0xff);
        let req = ConnectionRequest::new(requester.node_id().clone(), requester.role(), all.clone(), None, 0).unwrap();
        open_connection(&mut requester, &mut owner, &req, &cats_from_mask(&reg, 0x0f), 0).unwrap();
        let before = owner.contract.commitment();
        let forger = KeyPair::from_seed(seed.to_be_bytes().repeat(4).try_into().unwrap());
        let peer = requester.node_id().clone();
        for (kind, mask) in ops {
            let cats = cats_from_mask(&reg, mask);
            let result = match kind {
                0 => {
                    let op = ContractOp::Grant { peer: peer.clone(), categories: cats.clone() };
                    let sig = forger.sign(owner.contract.mutation_digest(&op).as_bytes());
                    owner.contract.grant(&peer, &cats, &sig).map(|_| ())
                }
                1 => {
                    let op = ContractOp::Revoke { peer: peer.clone() };
                    let sig = forger.sign(owner.contract.mutation_digest(&op).as_bytes());
                    owner.contract.revoke(&peer, &sig, 1).map(|_| ())
                }
                _ => {
                    let op = ContractOp::SetMandatory { service: "svc".into(), categories: cats.clone() };
                    let sig = forger.sign(owner.contract.mutation_digest(&op).as_bytes());
                    owner.contract.set_mandatory("svc", &cats, &sig)
                }
            };
            prop_assert!(result.is_err());
            prop_assert_eq!(owner.contract.commitment(), before);
        }
    }

    /// Once revoked, a peer gets no Accept, whatever the owner does next.
    #[test]
    fn revocation_dominates_later_operations(
        seed in any::<u64>(),
        ops in prop::collection::vec((0..3u8, any::<u8>()), 0..10),
    ) {
        let reg = CategoryRegistry::default();
        let (mut requester, mut owner) = requester_owner(seed);
        let all = cats_from_mask(&reg, 0xff);
        let req = ConnectionRequest::new(requester.node_id().clone(), requester.role(), all.clone(), None, 0).unwrap();
        let hs = open_connection(&mut requester, &mut owner, &req, &all, 0).unwrap();
        let peer = requester.node_id().clone();
        owner.revoke(&peer, 1).unwrap();
        for (kind, mask) in ops {
            let cats = cats_from_mask(&reg, mask | 1);
            match kind {
                0 => { let _ = owner.grant(&peer, &cats); }
                1 => {
                    let again = ConnectionRequest::new(peer.clone(), requester.role(), cats.clone(), None, 2).unwrap();
                    prop_assert!(open_connection(&mut requester, &mut owner, &again, &cats, 2).is_err());
                }
                _ => { let _ = owner.set_mandatory("svc", &cats); }
            }
            let d = owner.contract.evaluate_request(&hs.owner_conn.remote_did, &all).unwrap();
            prop_assert_eq!(d.verdict(), Verdict::Revoked);
        }
    }

    /// DIDs of one node never repeat and never carry the node's identity.
    #[test]
    fn dids_unlinkable_to_node(seed in any::<u64>(), n in 1..40usize) {
        let mut node = NodeIdentity::create(NodeRole::Individual, false, seed);
        let node_id = node.node_id().as_str().to_string();
        let master_hex = node.master_public_key().to_hex();
        let master_raw = *node.master_public_key().as_bytes();
        let dids: Vec<String> = (0..n).map(|t| node.mint_did(t as u64).did_string.as_str().to_string()).collect();
        prop_assert_eq!(distinct(dids.iter()), n);
        let node_hex = node_id.trim_start_matches("node-");
        for d in &dids {
            prop_assert!(!d.contains(node_hex));
            prop_assert!(!master_hex.contains(d.trim_start_matches("did:bsmd:")));
            prop_assert!(!contains(d.as_bytes(), &master_raw));
        }
        for did in node.dids() {
            prop_assert_ne!(did.public_key(), node.master_public_key());
        }
    }

    /// Payload bytes never appear in a serialized keystore or on the wire.
    #[test]
    fn payload_never_serialized_in_clear(seed in any::<u64>(), payload in prop::collection::vec(any::<u8>(), 12..200)) {
        let reg = CategoryRegistry::default();
        let (mut requester, mut owner) = requester_owner(seed);
        let id = owner.store_asset(&reg, "gps_log", &payload, 0).unwrap();
        let cats = reg.set(["gps_log"]).unwrap();
        let req = ConnectionRequest::new(requester.node_id().clone(), requester.role(), cats.clone(), None, 0).unwrap();
        let hs = open_connection(&mut requester, &mut owner, &req, &cats, 0).unwrap();
        let env = transfer(&mut owner, &hs.owner_conn, &[AssetRef::Own(id)], 1).unwrap();
        let wire = env.encode();
        let records = receive(&mut requester, &hs.requester_conn, &wire, 1).unwrap();
        prop_assert_eq!(requester.read_received(0).unwrap(), payload.clone());
        let views = [
            wire,
            serde_json::to_vec(&owner.export_public()).unwrap(),
            serde_json::to_vec(&requester.export_public()).unwrap(),
            serde_json::to_vec(&owner.export_private()).unwrap(),
            serde_json::to_vec(&requester.export_private()).unwrap(),
            serde_json::to_vec(&records).unwrap(),
        ];
        for v in &views {
            prop_assert!(!contains(v, &payload));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Audit output equals a brute-force scan for random DID subsets.
    #[test]
    fn audit_equals_brute_force(seed in 0..10_000u64, pick in any::<u64>()) {
        let scenario = random_scenario(seed);
        let out = run(&scenario, &SimConfig::from_scenario(&scenario, Some(seed))).unwrap();
        let all: Vec<IdentityRecord> = out.chain.iter().flat_map(|b| b.records.clone()).collect();
        prop_assert_eq!(audit_query(&out.chain, &AuditScope::All), all.clone());
        let pool: Vec<_> = out.dids.values().flatten().cloned().collect();
        let chosen: BTreeSet<_> = pool.iter().enumerate().filter(|(i, _)| pick >> (i % 64) & 1 == 1).map(|(_, d)| d.clone()).collect();
        let brute: Vec<IdentityRecord> = all
            .into_iter()
            .filter(|r| chosen.iter().any(|d| *d == r.did_ref || *d == r.counterparty_did))
            .collect();
        prop_assert_eq!(audit_query(&out.chain, &AuditScope::Dids(chosen)), brute);
    }

    /// Same scenario and seed, same report and ledger bytes.
    #[test]
    fn simulation_is_deterministic(seed in 0..10_000u64) {
        let scenario = random_scenario(seed);
        let cfg = SimConfig::from_scenario(&scenario, Some(seed));
        let a = run(&scenario, &cfg).unwrap();
        let b = run(&scenario, &cfg).unwrap();
        prop_assert_eq!(a.report.to_json(), b.report.to_json());
        prop_assert_eq!(a.ledger_jsonl, b.ledger_jsonl);
    }

    /// Random scenarios never violate the structural checks.
    #[test]
    fn random_scenarios_keep_invariants(seed in 0..10_000u64) {
        let scenario = random_scenario(seed);
        let out = run(&scenario, &SimConfig::from_scenario(&scenario, Some(seed))).unwrap();
        prop_assert!(out.report.passed, "{}", out.report.summary());
    }

    /// Flipping bits in any one byte of an exported chain breaks verification.
    #[test]
    fn any_byte_mutation_is_detected(seed in 0..50u64, pos in any::<prop::sample::Index>(), mask in 1..=255u8) {
        let (chain, set) = committed_chain(3, 2, seed);
        let mut bytes = write_jsonl(&chain).into_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= mask;
        let verdict = verify_export(&bytes, &set);
        prop_assert!(verdict.map_or(true, |v| !v.is_valid()), "byte {} mask {:#x}", i, mask);
    }
}

/// Heights increase by one and committed blocks are never rewritten.
#[test]
fn chain_is_append_only() {
    let mut n = net(
        &[
            Behavior::Honest,
            Behavior::Honest,
            Behavior::Equivocating,
            Behavior::Honest,
        ],
        7,
    );
    let mut seen = Vec::new();
    for h in 0..6u64 {
        for rec in handshake_records(3, h, 70 + h) {
            n.submit_record(rec).unwrap();
        }
        n.run_consensus().unwrap();
        let chain = n.chain();
        assert!(chain.len() >= seen.len());
        assert_eq!(&chain[..seen.len()], &seen[..]);
        for (i, b) in chain.iter().enumerate() {
            assert_eq!(b.height, i as u64);
        }
        seen = chain.to_vec();
    }
    assert!(!seen.is_empty());
}

#[test]
fn closing_twice_is_a_noop() {
    let reg = CategoryRegistry::default();
    let (mut requester, mut owner) = requester_owner(3);
    let cats = reg.set(["origin"]).unwrap();
    let req = ConnectionRequest::new(requester.node_id().clone(), requester.role(), cats.clone(), None, 0).unwrap();
    let mut hs = open_connection(&mut requester, &mut owner, &req, &cats, 0).unwrap();
    assert!(hs.owner_conn.mark_closed(CloseReason::Voluntary));
    assert!(!hs.owner_conn.mark_closed(CloseReason::OwnerRevoked));
}
