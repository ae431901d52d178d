//! Simplified PBFT over a static validator set.
//!
//! One call to [`ConsensusNet::run_consensus`] decides one height. Each
//! validator is an independent state machine fed by a seeded message queue;
//! the seed decides latencies and the order of same-tick deliveries, so a test
//! can replay any interleaving.
//!
//! Phases per view: the round-robin leader broadcasts a pre-prepare, replicas
//! broadcast signed prepares, and a replica that collects `2f + 1` prepares for
//! the block it accepted is *prepared*: it locks on that block and broadcasts
//! a commit signature. `2f + 1` commit signatures form the quorum certificate
//! stored in the block.
//!
//! An honest replica commit-signs at most one digest per height. Two
//! certificates for different digests would need `4f + 2` signatures from
//! `3f + 1` validators, so at least one honest replica would have signed both.
//! View changes carry the sender's lock with its prepare certificate; the new
//! leader re-proposes the highest-view lock it sees and locked replicas refuse
//! anything else.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::block::{check_block, check_certificate};
use super::{
    Block, IdentityRecord, LedgerError, PrivacyGuard, QuorumSig, RecordDraft, RecordKind, ValidatorInfo, ValidatorSet,
};
use crate::crypto::{verify, Canonical, Digest, KeyPair, Signature};
use crate::identity::{CategorySet, Did, NodeId, NodeRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Honest,
    /// Proposes conflicting blocks when leading and votes for every digest it sees.
    Equivocating,
    /// Crashed or partitioned: sends nothing and receives nothing.
    Silent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusConfig {
    /// Per-message delivery delay bounds in ticks.
    pub latency: (u64, u64),
    pub drop_rate: f64,
    /// Retransmissions after a drop before the message is lost.
    pub retry_budget: u32,
    /// Ticks a replica waits in a view before asking for a view change.
    pub round_timeout: u64,
    pub max_views: u32,
    pub max_block_records: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            latency: (1, 3),
            drop_rate: 0.0,
            retry_budget: 5,
            round_timeout: 40,
            max_views: 6,
            max_block_records: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RoundStats {
    pub rounds: u64,
    pub blocks: u64,
    pub no_quorum: u64,
    pub view_changes: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub messages_lost: u64,
}

/// Key material and behavior of one validator.
pub struct ValidatorKey {
    pub node_id: NodeId,
    pub keys: KeyPair,
    pub behavior: Behavior,
}

#[derive(Debug, Clone)]
struct Lock {
    view: u32,
    block: Block,
    prepares: Vec<(u32, Signature)>,
}

#[derive(Debug, Clone)]
enum Msg {
    PrePrepare { view: u32, block: Block },
    Prepare { view: u32, digest: Digest, sig: Signature },
    Commit { digest: Digest, sig: Signature },
    ViewChange { new_view: u32, lock: Option<Lock> },
    Decided { block: Block },
}

#[derive(Debug)]
enum Event {
    Deliver { from: u32, to: u32, msg: Msg },
    Timeout { to: u32, view: u32 },
    Propose { to: u32, view: u32 },
}

struct Validator {
    keys: KeyPair,
    behavior: Behavior,
    chain: Vec<Block>,
    mempool: BTreeMap<(u64, Digest), IdentityRecord>,
}

impl Validator {
    fn tip(&self) -> Digest {
        self.chain.last().map(|b| b.block_hash).unwrap_or(Digest::ZERO)
    }

    fn contains_record(&self, id: &Digest) -> bool {
        self.chain.iter().any(|b| b.records.iter().any(|r| &r.record_id == id))
    }

    fn adopt(&mut self, block: Block) {
        for r in &block.records {
            self.mempool.remove(&r.order_key());
        }
        self.chain.push(block);
    }
}

#[derive(Default)]
struct RoundState {
    view: u32,
    accepted: BTreeMap<u32, Digest>,
    proposals: BTreeMap<Digest, Block>,
    prepares: BTreeMap<(u32, Digest), BTreeMap<u32, Signature>>,
    commits: BTreeMap<Digest, BTreeMap<u32, Signature>>,
    commit_sent: BTreeSet<Digest>,
    lock: Option<Lock>,
    view_changes: BTreeMap<u32, BTreeMap<u32, Option<Lock>>>,
    proposed: BTreeSet<u32>,
    buffered: BTreeMap<u32, Vec<(u32, Block)>>,
    decided: Option<Block>,
    gave_up: bool,
}

fn prepare_message(height: u64, view: u32, digest: &Digest) -> Vec<u8> {
    let mut c = Canonical::new("bsmd/prepare/v1");
    c.u64(height).u64(view as u64).bytes(digest.as_bytes());
    c.finish()
}

pub struct ConsensusNet {
    set: ValidatorSet,
    validators: Vec<Validator>,
    guard: PrivacyGuard,
    config: ConsensusConfig,
    rng: ChaCha20Rng,
    clock: u64,
    stats: RoundStats,
}

struct Round<'a> {
    net: &'a mut ConsensusNet,
    height: u64,
    states: Vec<RoundState>,
    queue: BinaryHeap<Reverse<(u64, u64, u64)>>,
    events: BTreeMap<u64, Event>,
    seq: u64,
    now: u64,
}

impl ConsensusNet {
    pub fn new(
        validators: Vec<ValidatorKey>,
        guard: PrivacyGuard,
        config: ConsensusConfig,
        seed: u64,
    ) -> Result<Self, LedgerError> {
        let set = ValidatorSet::new(
            validators
                .iter()
                .map(|v| ValidatorInfo {
                    node_id: v.node_id.clone(),
                    public_key: v.keys.public(),
                })
                .collect(),
        )?;
        if config.latency.0 > config.latency.1 || !(0.0..1.0).contains(&config.drop_rate) {
            return Err(LedgerError::InvalidValidatorSet("invalid network config".into()));
        }
        Ok(ConsensusNet {
            set,
            validators: validators
                .into_iter()
                .map(|v| Validator {
                    keys: v.keys,
                    behavior: v.behavior,
                    chain: Vec::new(),
                    mempool: BTreeMap::new(),
                })
                .collect(),
            guard,
            config,
            rng: ChaCha20Rng::seed_from_u64(seed),
            clock: 0,
            stats: RoundStats::default(),
        })
    }

    pub fn validator_set(&self) -> &ValidatorSet {
        &self.set
    }

    pub fn guard(&self) -> &PrivacyGuard {
        &self.guard
    }

    pub fn guard_mut(&mut self) -> &mut PrivacyGuard {
        &mut self.guard
    }

    pub fn stats(&self) -> &RoundStats {
        &self.stats
    }

    pub fn behavior(&self, index: u32) -> Behavior {
        self.validators[index as usize].behavior
    }

    fn honest(&self) -> impl Iterator<Item = (usize, &Validator)> {
        self.validators
            .iter()
            .enumerate()
            .filter(|(_, v)| v.behavior == Behavior::Honest)
    }

    /// Chain held by the lowest-index honest validator.
    pub fn chain(&self) -> &[Block] {
        self.honest().next().map(|(_, v)| v.chain.as_slice()).unwrap_or(&[])
    }

    pub fn honest_chains(&self) -> Vec<&[Block]> {
        self.honest().map(|(_, v)| v.chain.as_slice()).collect()
    }

    pub fn mempool_len(&self) -> usize {
        self.honest().map(|(_, v)| v.mempool.len()).max().unwrap_or(0)
    }

    /// Validates a record and places it in every reachable validator's mempool.
    pub fn submit_record(&mut self, rec: IdentityRecord) -> Result<(), LedgerError> {
        rec.verify_integrity()?;
        self.guard.check_record(&rec)?;
        for v in &mut self.validators {
            if v.behavior != Behavior::Silent && !v.contains_record(&rec.record_id) {
                v.mempool.insert(rec.order_key(), rec.clone());
            }
        }
        Ok(())
    }

    /// Decides the next height. `Ok(None)` when there is nothing to propose.
    pub fn run_consensus(&mut self) -> Result<Option<Block>, LedgerError> {
        if self.mempool_len() == 0 {
            return Ok(None);
        }
        let height = self.chain().len() as u64;
        self.stats.rounds += 1;
        let mut round = Round::new(self, height);
        round.start();
        round.run();
        round.finish()
    }
}

impl<'a> Round<'a> {
    fn new(net: &'a mut ConsensusNet, height: u64) -> Self {
        let n = net.validators.len();
        let now = net.clock;
        Round {
            net,
            height,
            states: (0..n).map(|_| RoundState::default()).collect(),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            now,
        }
    }

    fn n(&self) -> u32 {
        self.net.validators.len() as u32
    }

    fn quorum(&self) -> usize {
        self.net.set.quorum()
    }

    fn behavior(&self, i: u32) -> Behavior {
        self.net.validators[i as usize].behavior
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        let tiebreak: u64 = self.net.rng.gen();
        self.seq += 1;
        self.queue.push(Reverse((at, tiebreak, self.seq)));
        self.events.insert(self.seq, ev);
    }

    fn send(&mut self, from: u32, to: u32, msg: Msg) {
        if self.behavior(to) == Behavior::Silent || self.behavior(from) == Behavior::Silent {
            return;
        }
        self.net.stats.messages_sent += 1;
        if from == to {
            let at = self.now;
            self.schedule(at, Event::Deliver { from, to, msg });
            return;
        }
        let (lo, hi) = self.net.config.latency;
        let mut delay = 0;
        for attempt in 0..=self.net.config.retry_budget {
            delay += self.net.rng.gen_range(lo..=hi);
            if self.net.config.drop_rate > 0.0 && self.net.rng.gen_bool(self.net.config.drop_rate) {
                self.net.stats.messages_dropped += 1;
                if attempt == self.net.config.retry_budget {
                    self.net.stats.messages_lost += 1;
                    return;
                }
                continue;
            }
            break;
        }
        let at = self.now + delay;
        self.schedule(at, Event::Deliver { from, to, msg });
    }

    fn broadcast(&mut self, from: u32, msg: Msg) {
        for to in 0..self.n() {
            self.send(from, to, msg.clone());
        }
    }

    fn start(&mut self) {
        for i in 0..self.n() {
            if self.behavior(i) == Behavior::Honest {
                self.enter_view(i, 0);
            }
        }
        let leader = self.net.set.leader(self.height, 0);
        match self.behavior(leader) {
            Behavior::Honest => self.propose(leader, 0),
            Behavior::Equivocating => self.propose_conflicting(leader, 0),
            Behavior::Silent => {}
        }
    }

    fn run(&mut self) {
        while let Some(Reverse((at, _, seq))) = self.queue.pop() {
            self.now = at;
            let ev = self.events.remove(&seq).expect("scheduled event");
            match ev {
                Event::Deliver { from, to, msg } => self.deliver(from, to, msg),
                Event::Timeout { to, view } => self.on_timeout(to, view),
                Event::Propose { to, view } => {
                    let st = &self.states[to as usize];
                    if st.view == view && st.decided.is_none() && !st.gave_up {
                        self.propose(to, view);
                    }
                }
            }
            if self.all_honest_done() {
                break;
            }
        }
        self.net.clock = self.now + 1;
    }

    fn all_honest_done(&self) -> bool {
        (0..self.n())
            .filter(|&i| self.behavior(i) == Behavior::Honest)
            .all(|i| {
                let st = &self.states[i as usize];
                st.decided.is_some() || st.gave_up
            })
    }

    fn finish(self) -> Result<Option<Block>, LedgerError> {
        let honest: Vec<u32> = (0..self.n())
            .filter(|&i| self.behavior(i) == Behavior::Honest)
            .collect();
        let decided = honest.iter().find_map(|&i| self.states[i as usize].decided.clone());
        match decided {
            Some(block) => {
                // State transfer for any honest replica that missed the decision.
                for &i in &honest {
                    if self.states[i as usize].decided.is_none() {
                        self.net.validators[i as usize].adopt(block.clone());
                    }
                }
                self.net.stats.blocks += 1;
                Ok(Some(block))
            }
            None => {
                self.net.stats.no_quorum += 1;
                let views = honest
                    .iter()
                    .map(|&i| self.states[i as usize].view + 1)
                    .max()
                    .unwrap_or(0);
                Err(LedgerError::NoQuorum {
                    height: self.height,
                    views,
                })
            }
        }
    }

    fn enter_view(&mut self, i: u32, view: u32) {
        let st = &mut self.states[i as usize];
        st.view = view;
        let timeout = self.now + self.net.config.round_timeout;
        self.schedule(timeout, Event::Timeout { to: i, view });
        let buffered = self.states[i as usize].buffered.remove(&view).unwrap_or_default();
        for (from, block) in buffered {
            self.on_pre_prepare(i, from, view, block);
        }
        self.maybe_schedule_proposal(i, view);
    }

    fn fresh_records(&self, i: u32) -> Vec<IdentityRecord> {
        let v = &self.net.validators[i as usize];
        v.mempool
            .values()
            .filter(|r| !v.contains_record(&r.record_id))
            .take(self.net.config.max_block_records)
            .cloned()
            .collect()
    }

    fn propose(&mut self, i: u32, view: u32) {
        if !self.states[i as usize].proposed.insert(view) {
            return;
        }
        let v = &self.net.validators[i as usize];
        let prev = v.tip();
        let locked = self.best_lock(i, view);
        let block = match locked {
            Some(b) => b,
            None => {
                let records = self.fresh_records(i);
                if records.is_empty() {
                    return;
                }
                Block::proposal(self.height, prev, i, records)
            }
        };
        self.broadcast(i, Msg::PrePrepare { view, block });
    }

    /// Highest-view valid lock reported in the view change for `view`, plus our own.
    fn best_lock(&self, i: u32, view: u32) -> Option<Block> {
        let st = &self.states[i as usize];
        let reported = st
            .view_changes
            .get(&view)
            .into_iter()
            .flat_map(|m| m.values().flatten());
        reported
            .chain(st.lock.iter())
            .filter(|l| l.view < view && self.lock_is_valid(l))
            .max_by(|a, b| a.view.cmp(&b.view).then(b.block.block_hash.cmp(&a.block.block_hash)))
            .map(|l| l.block.clone())
    }

    fn lock_is_valid(&self, lock: &Lock) -> bool {
        let msg = prepare_message(self.height, lock.view, &lock.block.block_hash);
        let signers: BTreeSet<u32> = lock
            .prepares
            .iter()
            .filter(|(from, sig)| self.net.set.key(*from).is_some_and(|k| verify(k, &msg, sig)))
            .map(|(from, _)| *from)
            .collect();
        signers.len() >= self.quorum() && lock.block.recomputed_hash() == lock.block.block_hash
    }

    fn maybe_schedule_proposal(&mut self, i: u32, view: u32) {
        if view == 0 || self.net.set.leader(self.height, view) != i || self.behavior(i) != Behavior::Honest {
            return;
        }
        let st = &self.states[i as usize];
        let vcs = st.view_changes.get(&view).map_or(0, |m| m.len());
        if st.view == view && vcs >= self.quorum() && !st.proposed.contains(&view) {
            // Wait one maximum latency so late view-change messages and their
            // locks can still be considered.
            let at = self.now + self.net.config.latency.1;
            self.schedule(at, Event::Propose { to: i, view });
        }
    }

    fn on_timeout(&mut self, i: u32, view: u32) {
        let max_views = self.net.config.max_views;
        let st = &mut self.states[i as usize];
        if st.view != view || st.decided.is_some() || st.gave_up {
            return;
        }
        if view + 1 >= max_views {
            st.gave_up = true;
            return;
        }
        self.net.stats.view_changes += 1;
        self.start_view_change(i, view + 1);
    }

    fn start_view_change(&mut self, i: u32, new_view: u32) {
        let lock = self.states[i as usize].lock.clone();
        self.enter_view(i, new_view);
        self.broadcast(i, Msg::ViewChange { new_view, lock });
    }

    fn deliver(&mut self, from: u32, to: u32, msg: Msg) {
        match self.behavior(to) {
            Behavior::Silent => {}
            Behavior::Equivocating => self.byzantine_react(from, to, msg),
            Behavior::Honest => {
                let st = &self.states[to as usize];
                if st.gave_up || (st.decided.is_some() && !matches!(msg, Msg::Decided { .. })) {
                    return;
                }
                match msg {
                    Msg::PrePrepare { view, block } => self.on_pre_prepare(to, from, view, block),
                    Msg::Prepare { view, digest, sig } => self.on_prepare(to, from, view, digest, sig),
                    Msg::Commit { digest, sig } => self.on_commit(to, from, digest, sig),
                    Msg::ViewChange { new_view, lock } => self.on_view_change(to, from, new_view, lock),
                    Msg::Decided { block } => self.on_decided(to, block),
                }
            }
        }
    }

    fn validate_proposal(&self, i: u32, block: &Block) -> bool {
        let v = &self.net.validators[i as usize];
        let mut seen: BTreeSet<Digest> = v
            .chain
            .iter()
            .flat_map(|b| b.records.iter().map(|r| r.record_id))
            .collect();
        let mut unsigned = block.clone();
        unsigned.quorum_sigs.clear();
        // Structure and records; the certificate does not exist yet.
        let structure = check_block(&unsigned, self.height, &v.tip(), &self.net.set, &mut seen);
        let structural_ok = match structure {
            Ok(()) => true,
            Err(reason) => reason.contains("commit signatures, quorum is"),
        };
        structural_ok && block.records.iter().all(|r| self.net.guard.check_record(r).is_ok())
    }

    fn on_pre_prepare(&mut self, i: u32, from: u32, view: u32, block: Block) {
        if from != self.net.set.leader(self.height, view) || block.proposer != from {
            return;
        }
        let st = &self.states[i as usize];
        if view > st.view {
            self.states[i as usize]
                .buffered
                .entry(view)
                .or_default()
                .push((from, block));
            return;
        }
        if view < st.view || st.accepted.contains_key(&view) {
            return;
        }
        if let Some(lock) = &st.lock {
            if lock.block.block_hash != block.block_hash {
                return;
            }
        }
        if !self.validate_proposal(i, &block) {
            log::debug!("validator {i} rejected proposal from {from} in view {view}");
            return;
        }
        let digest = block.block_hash;
        let st = &mut self.states[i as usize];
        st.accepted.insert(view, digest);
        st.proposals.insert(digest, block);
        let sig = self.net.validators[i as usize]
            .keys
            .sign(&prepare_message(self.height, view, &digest));
        self.broadcast(i, Msg::Prepare { view, digest, sig });
        self.check_prepared(i, view);
        self.check_committed(i, digest);
    }

    fn on_prepare(&mut self, i: u32, from: u32, view: u32, digest: Digest, sig: Signature) {
        let Some(key) = self.net.set.key(from) else { return };
        if !verify(key, &prepare_message(self.height, view, &digest), &sig) {
            return;
        }
        self.states[i as usize]
            .prepares
            .entry((view, digest))
            .or_default()
            .insert(from, sig);
        self.check_prepared(i, view);
    }

    fn check_prepared(&mut self, i: u32, view: u32) {
        let quorum = self.quorum();
        let st = &self.states[i as usize];
        let Some(&digest) = st.accepted.get(&view) else { return };
        let Some(votes) = st.prepares.get(&(view, digest)) else {
            return;
        };
        if votes.len() < quorum {
            return;
        }
        if st.lock.as_ref().is_some_and(|l| l.block.block_hash != digest) {
            return;
        }
        let lock = Lock {
            view,
            block: st.proposals[&digest].clone(),
            prepares: votes.iter().map(|(f, s)| (*f, *s)).collect(),
        };
        let st = &mut self.states[i as usize];
        if st.lock.as_ref().is_none_or(|l| l.view < view) {
            st.lock = Some(lock);
        }
        if st.commit_sent.insert(digest) {
            let sig = self.net.validators[i as usize]
                .keys
                .sign(&Block::commit_message(self.height, &digest));
            self.broadcast(i, Msg::Commit { digest, sig });
        }
    }

    fn on_commit(&mut self, i: u32, from: u32, digest: Digest, sig: Signature) {
        let Some(key) = self.net.set.key(from) else { return };
        if !verify(key, &Block::commit_message(self.height, &digest), &sig) {
            return;
        }
        self.states[i as usize]
            .commits
            .entry(digest)
            .or_default()
            .insert(from, sig);
        self.check_committed(i, digest);
    }

    fn check_committed(&mut self, i: u32, digest: Digest) {
        let quorum = self.quorum();
        let st = &self.states[i as usize];
        if st.decided.is_some() {
            return;
        }
        let Some(votes) = st.commits.get(&digest) else { return };
        if votes.len() < quorum {
            return;
        }
        let Some(block) = st.proposals.get(&digest) else { return };
        let mut block = block.clone();
        block.quorum_sigs = votes
            .iter()
            .map(|(v, s)| QuorumSig {
                validator: *v,
                signature: *s,
            })
            .collect();
        self.decide(i, block);
    }

    fn decide(&mut self, i: u32, block: Block) {
        self.states[i as usize].decided = Some(block.clone());
        self.net.validators[i as usize].adopt(block.clone());
        self.broadcast(i, Msg::Decided { block });
    }

    fn on_decided(&mut self, i: u32, block: Block) {
        if self.states[i as usize].decided.is_some() {
            return;
        }
        let v = &self.net.validators[i as usize];
        let mut seen: BTreeSet<Digest> = v
            .chain
            .iter()
            .flat_map(|b| b.records.iter().map(|r| r.record_id))
            .collect();
        if check_block(&block, self.height, &v.tip(), &self.net.set, &mut seen).is_ok()
            && check_certificate(self.height, &block.block_hash, &block.quorum_sigs, &self.net.set).is_ok()
        {
            self.states[i as usize].decided = Some(block.clone());
            self.net.validators[i as usize].adopt(block);
        }
    }

    fn on_view_change(&mut self, i: u32, from: u32, new_view: u32, lock: Option<Lock>) {
        let f = self.net.set.f();
        self.states[i as usize]
            .view_changes
            .entry(new_view)
            .or_default()
            .insert(from, lock);
        let my_view = self.states[i as usize].view;
        // Join a higher view once f + 1 replicas have asked for it.
        if new_view > my_view && new_view < self.net.config.max_views {
            let support = self.states[i as usize].view_changes[&new_view].len();
            if support > f {
                self.net.stats.view_changes += 1;
                self.start_view_change(i, new_view);
                return;
            }
        }
        self.maybe_schedule_proposal(i, new_view);
    }

    /// Proposes two different valid blocks and splits the honest replicas.
    fn propose_conflicting(&mut self, i: u32, view: u32) {
        if !self.states[i as usize].proposed.insert(view) {
            return;
        }
        let records = self.fresh_records(i);
        if records.is_empty() {
            return;
        }
        let prev = self.net.validators[i as usize].tip();
        let a = Block::proposal(self.height, prev, i, records.clone());
        let mut b_records = records;
        b_records.push(self.fabricated_record());
        let b = Block::proposal(self.height, prev, i, b_records);
        for to in 0..self.n() {
            let block = if self.net.rng.gen_bool(0.5) {
                a.clone()
            } else {
                b.clone()
            };
            self.send(i, to, Msg::PrePrepare { view, block });
        }
    }

    /// A well-formed record under a throwaway DID.
    fn fabricated_record(&mut self) -> IdentityRecord {
        let keys = KeyPair::generate(&mut self.net.rng);
        let did = Did::from_keys(keys, self.now);
        let categories: CategorySet = self
            .net
            .guard
            .registry()
            .names()
            .take(1)
            .map(|n| self.net.guard.registry().get(n).expect("registered"))
            .collect();
        RecordDraft {
            kind: RecordKind::DataTransferred,
            did_ref: did.did_string.clone(),
            counterparty_did: did.did_string.clone(),
            role_pair: (NodeRole::Individual, NodeRole::Company),
            categories,
            tick: self.now,
            commitment: None,
        }
        .sign(&did)
    }

    fn byzantine_react(&mut self, from: u32, i: u32, msg: Msg) {
        let st = &mut self.states[i as usize];
        match msg {
            Msg::PrePrepare { view, block } => {
                let digest = block.block_hash;
                st.proposals.insert(digest, block);
                let keys = self.net.validators[i as usize].keys.clone();
                let sig = keys.sign(&prepare_message(self.height, view, &digest));
                self.broadcast(i, Msg::Prepare { view, digest, sig });
                let junk = Digest::of(&self.net.rng.gen::<[u8; 32]>());
                let sig = keys.sign(&prepare_message(self.height, view, &junk));
                for to in 0..self.n() {
                    if self.net.rng.gen_bool(0.5) {
                        self.send(
                            i,
                            to,
                            Msg::Prepare {
                                view,
                                digest: junk,
                                sig,
                            },
                        );
                    }
                }
            }
            Msg::Prepare { digest, .. } => {
                if st.commit_sent.insert(digest) {
                    let sig = self.net.validators[i as usize]
                        .keys
                        .sign(&Block::commit_message(self.height, &digest));
                    self.broadcast(i, Msg::Commit { digest, sig });
                }
            }
            Msg::ViewChange { new_view, .. } => {
                let seen = st.view_changes.entry(new_view).or_default();
                let first = seen.is_empty();
                seen.insert(from, None);
                if first {
                    // Always claims to hold no lock.
                    self.broadcast(i, Msg::ViewChange { new_view, lock: None });
                    if self.net.set.leader(self.height, new_view) == i {
                        self.propose_conflicting(i, new_view);
                    }
                }
            }
            Msg::Commit { .. } => {}
            Msg::Decided { block } => {
                let v = &mut self.net.validators[i as usize];
                if block.height == v.chain.len() as u64 && block.prev_hash == v.tip() {
                    v.adopt(block);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{CategoryRegistry, NodeIdentity};
    use crate::ledger::verify_chain;

    fn records(count: usize, seed: u64) -> Vec<IdentityRecord> {
        let reg = CategoryRegistry::default();
        let mut a = NodeIdentity::create(NodeRole::Individual, false, seed);
        let mut b = NodeIdentity::create(NodeRole::Government, false, seed + 1000);
        (0..count)
            .map(|t| {
                let di = a.mint_did(t as u64).did_string.clone();
                let dn = b.mint_did(t as u64).clone();
                RecordDraft {
                    kind: RecordKind::DataTransferred,
                    did_ref: di,
                    counterparty_did: dn.did_string.clone(),
                    role_pair: (NodeRole::Individual, NodeRole::Government),
                    categories: reg.set(["gps_log"]).unwrap(),
                    tick: t as u64,
                    commitment: None,
                }
                .sign(&dn)
            })
            .collect()
    }

    fn net(behaviors: &[Behavior], seed: u64) -> ConsensusNet {
        let vals = behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let node = NodeIdentity::create(NodeRole::Government, true, 500 + i as u64);
                ValidatorKey {
                    node_id: node.node_id().clone(),
                    keys: node.master_keys().clone(),
                    behavior: *b,
                }
            })
            .collect();
        ConsensusNet::new(vals, PrivacyGuard::default(), ConsensusConfig::default(), seed).unwrap()
    }

    #[test]
    fn empty_mempool_proposes_nothing() {
        let mut n = net(&[Behavior::Honest; 4], 1);
        assert_eq!(n.run_consensus(), Ok(None));
        assert!(n.chain().is_empty());
    }

    #[test]
    fn honest_network_commits() {
        let mut n = net(&[Behavior::Honest; 4], 1);
        for r in records(3, 1) {
            n.submit_record(r).unwrap();
        }
        let block = n.run_consensus().unwrap().unwrap();
        assert_eq!(block.height, 0);
        assert_eq!(block.records.len(), 3);
        assert!(block.quorum_sigs.len() >= 3);
        assert!(verify_chain(n.chain(), n.validator_set()).is_valid());
        assert_eq!(n.mempool_len(), 0);
    }

    #[test]
    fn one_equivocator_cannot_split_honest_replicas() {
        for seed in 0..20 {
            for byz in 0..4 {
                let mut behaviors = [Behavior::Honest; 4];
                behaviors[byz] = Behavior::Equivocating;
                let mut n = net(&behaviors, seed);
                for r in records(4, seed) {
                    n.submit_record(r).unwrap();
                }
                n.run_consensus().unwrap().unwrap();
                let chains = n.honest_chains();
                let hashes: BTreeSet<Vec<Digest>> = chains
                    .iter()
                    .map(|c| c.iter().map(|b| b.block_hash).collect())
                    .collect();
                assert_eq!(hashes.len(), 1, "seed {seed} byz {byz}");
                assert!(verify_chain(chains[0], n.validator_set()).is_valid());
            }
        }
    }

    #[test]
    fn two_silent_validators_block_progress() {
        let mut n = net(
            &[Behavior::Honest, Behavior::Silent, Behavior::Honest, Behavior::Silent],
            3,
        );
        for r in records(2, 3) {
            n.submit_record(r).unwrap();
        }
        for _ in 0..3 {
            assert!(matches!(
                n.run_consensus(),
                Err(LedgerError::NoQuorum { height: 0, .. })
            ));
        }
        assert!(n.chain().is_empty());
        assert_eq!(n.mempool_len(), 2);
    }

    #[test]
    fn one_silent_validator_is_tolerated() {
        for silent in 0..4 {
            let mut behaviors = [Behavior::Honest; 4];
            behaviors[silent] = Behavior::Silent;
            let mut n = net(&behaviors, 9);
            for r in records(2, 9) {
                n.submit_record(r).unwrap();
            }
            assert!(n.run_consensus().unwrap().is_some(), "silent leader {silent}");
        }
    }

    #[test]
    fn lossy_links_still_commit() {
        let vals: Vec<_> = (0..4)
            .map(|i| {
                let node = NodeIdentity::create(NodeRole::Company, true, 900 + i);
                ValidatorKey {
                    node_id: node.node_id().clone(),
                    keys: node.master_keys().clone(),
                    behavior: Behavior::Honest,
                }
            })
            .collect();
        let config = ConsensusConfig {
            drop_rate: 0.3,
            ..ConsensusConfig::default()
        };
        let mut n = ConsensusNet::new(vals, PrivacyGuard::default(), config, 4).unwrap();
        for r in records(2, 4) {
            n.submit_record(r).unwrap();
        }
        n.run_consensus().unwrap().unwrap();
        assert!(n.stats().messages_dropped > 0);
    }

    #[test]
    fn invalid_record_not_admitted() {
        let mut n = net(&[Behavior::Honest; 4], 1);
        let mut r = records(1, 1).remove(0);
        r.tick += 1;
        assert!(matches!(n.submit_record(r), Err(LedgerError::InvalidSignature(_))));
    }
}
