use serde::{Deserialize, Serialize};

use crate::ledger::RoundStats;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub connections_requested: u64,
    pub connections_opened: u64,
    pub connections_denied: u64,
    pub transfers_sent: u64,
    pub transfers_refused: u64,
    pub transfers_delivered: u64,
    pub transfers_rejected: u64,
    pub assets_purged: u64,
    pub revocations: u64,
    pub leaves: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub messages_lost: u64,
    pub records_submitted: u64,
    pub records_rejected: u64,
    pub records_committed: u64,
    pub dids_minted: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusCounts {
    pub rounds: u64,
    pub blocks: u64,
    pub no_quorum: u64,
    pub view_changes: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub messages_lost: u64,
}

impl From<&RoundStats> for ConsensusCounts {
    fn from(s: &RoundStats) -> Self {
        ConsensusCounts {
            rounds: s.rounds,
            blocks: s.blocks,
            no_quorum: s.no_quorum,
            view_changes: s.view_changes,
            messages_sent: s.messages_sent,
            messages_dropped: s.messages_dropped,
            messages_lost: s.messages_lost,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterceptionMetrics {
    pub links_tapped: u64,
    pub messages_captured: u64,
    pub envelopes_captured: u64,
    pub bytes_captured: u64,
    /// Sentinel bytes found using only the captured bytes.
    pub plaintext_bytes_recovered: u64,
    /// Same, for an adversary that also holds the session keys. Only
    /// measured in the stolen-keys control run.
    pub plaintext_bytes_recovered_with_keys: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLeakMetrics {
    pub compromised: Vec<String>,
    pub individuals_exposed: u64,
    pub exposed: Vec<String>,
    pub population: u64,
    pub fraction_of_population: f64,
    /// `k` plus, per compromised node, the distinct owners in its received store.
    pub exposure_bound: u64,
}

impl Eq for MassLeakMetrics {}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareMetrics {
    pub shares_attempted: u64,
    pub shares_performed: u64,
    pub shares_on_ledger: u64,
    pub shares_detected_by_audit: u64,
    pub shares_undetected: u64,
    pub on_ledger_undetected: u64,
    /// Flagged records with no matching rogue share.
    pub false_alarms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub requests_sent: u64,
    pub requests_delivered: u64,
    pub requests_denied: u64,
    pub requests_granted: u64,
    /// Decisions that disagree with the grant held before the flood.
    pub unsound_decisions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub interception: Option<InterceptionMetrics>,
    pub mass_leak: Option<MassLeakMetrics>,
    pub unsolicited_share: Option<ShareMetrics>,
    pub unsolicited_request: Option<RequestMetrics>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationOutcome {
    pub action: usize,
    pub tick: u64,
    pub kind: String,
    pub expected: Option<String>,
    pub actual: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub height: u64,
    pub records: u64,
    /// SHA-256 of the JSONL export.
    pub digest: String,
}

/// Everything a run produced, in a fixed field order so two runs can be
/// compared byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub final_tick: u64,
    pub nodes: u64,
    pub validators: u64,
    pub events: EventCounts,
    pub consensus: ConsensusCounts,
    pub adversaries: AdversaryReport,
    pub expectations: Vec<ExpectationOutcome>,
    pub checks: Vec<Check>,
    pub ledger: LedgerSummary,
    pub passed: bool,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Short human-readable digest of the report.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "scenario {} seed {}: {}\n",
            self.scenario,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        );
        out.push_str(&format!(
            "  ledger: {} blocks, {} records, digest {}\n",
            self.ledger.height, self.ledger.records, self.ledger.digest
        ));
        let e = &self.events;
        out.push_str(&format!(
            "  connections: {} opened, {} denied; transfers: {} delivered, {} refused\n",
            e.connections_opened, e.connections_denied, e.transfers_delivered, e.transfers_refused
        ));
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {}: {}\n",
                if c.pass { "pass" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        let failed_expect = self.expectations.iter().filter(|x| !x.pass).count();
        if failed_expect > 0 {
            for x in self.expectations.iter().filter(|x| !x.pass) {
                out.push_str(&format!(
                    "  action {} ({} at tick {}): expected {}, got {}\n",
                    x.action,
                    x.kind,
                    x.tick,
                    x.expected.as_deref().unwrap_or("-"),
                    x.actual
                ));
            }
        }
        out
    }
}
