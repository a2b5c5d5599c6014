//! Audit sessions: open, draw, record interpretations, update measured risk,
//! stop or escalate to a full hand count.
//!
//! Every mutation appends to the session transcript, and [`replay`] rebuilds a
//! session from a transcript alone, checking each regenerated line against the
//! recorded one.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::assorter::{assort, to_f64, Assertion, OverstatementAssorter};
use crate::election::{
    reported_winner, verify_accounting, BallotManifest, CardRecord, Contest, GroupRef,
    ReportedResults,
};
use crate::error::{AuditError, Result};
use crate::one::{build_one_layout, AffineTranslation, OneLayout};
use crate::risk::{AlphaConfig, MeasuredRisk, RiskState};
use crate::sampler::{locate, DrawSequence};
use crate::sim::{alpha_stopping_size, rep_rng, AlphaTest, SampleStats, MIN_REPS};
use crate::transcript::{EventKind, Transcript, TranscriptEvent};
use crate::Rational;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub alpha: AlphaConfig,
    /// Shift overstatement values so the smallest possible one is zero.
    #[serde(default)]
    pub translate: bool,
}


/// Everything a session is built from; embedded in the OPEN event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInputs {
    pub contest: Contest,
    pub manifest: BallotManifest,
    pub results: ReportedResults,
    pub seed: String,
    #[serde(default)]
    pub method: MethodConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Setup,
    Running,
    Confirmed,
    FullCount,
    Stalled,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Setup => "SETUP",
            Status::Running => "RUNNING",
            Status::Confirmed => "CONFIRMED",
            Status::FullCount => "FULL_COUNT",
            Status::Stalled => "STALLED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawInstruction {
    pub ordinal: u64,
    pub container_id: String,
    pub position: u64,
    pub group_id: GroupRef,
    pub cvr: Option<CardRecord>,
}

impl DrawInstruction {
    /// The drawn card's id: its CVR id when linked, else container and position.
    pub fn card_id(&self) -> String {
        match &self.cvr {
            Some(c) => c.card_id.clone(),
            None => format!("{}-{:04}", self.container_id, self.position),
        }
    }

    /// A single-contest interpretation of this card; `None` means no valid vote.
    pub fn interpretation(&self, contest_id: &str, vote: Option<&str>) -> CardRecord {
        CardRecord::new(self.card_id()).with_vote(contest_id, vote)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvrEntry {
    pub ordinal: u64,
    pub mvr: CardRecord,
    /// Transcript sequence number of the MVR event.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionState {
    pub assertion: Assertion,
    pub layout: OneLayout,
    pub translation: AffineTranslation,
    pub risk: RiskState,
    pub risk_limit: f64,
    pub passed: bool,
}

impl AssertionState {
    fn overstatement(&self) -> OverstatementAssorter {
        self.assertion.overstatement()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionUpdate {
    pub assertion_id: String,
    #[serde(with = "crate::rational_serde")]
    pub overstatement: Rational,
    pub measured_risk: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionSummary {
    pub assertion_id: String,
    pub measured_risk: String,
    pub risk_limit: String,
    pub passed: bool,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub status: Status,
    pub revision: u64,
    pub draws: u64,
    pub recorded: u64,
    pub pending: Vec<u64>,
    pub assertions: Vec<AssertionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullCountOutcome {
    pub winner: String,
    pub tally: BTreeMap<String, u64>,
    pub reported_winner_confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEstimate {
    pub error_rate: f64,
    pub stats: SampleStats,
    /// Suggested initial sample: the 90th percentile of stopping sizes.
    pub sample_size: u64,
}

#[derive(Debug, Clone)]
pub struct AuditSession {
    pub inputs: SessionInputs,
    pub assertions: Vec<AssertionState>,
    pub sequence: DrawSequence,
    pub draws: BTreeMap<u64, DrawInstruction>,
    pub mvr_log: Vec<MvrEntry>,
    pub status: Status,
    transcript: Transcript,
    linked_offsets: BTreeMap<String, u64>,
}

fn dec<T: ToString>(x: T) -> Value {
    Value::String(x.to_string())
}

impl AuditSession {
    pub fn open(inputs: SessionInputs) -> Result<Self> {
        let SessionInputs {
            contest,
            manifest,
            results,
            method,
            ..
        } = &inputs;
        contest.validate()?;
        manifest.validate()?;
        verify_accounting(results, manifest, contest).into_result()?;
        let n = manifest.total_cards();
        let mut assertions = Vec::new();
        for assertion in Assertion::for_contest(contest, results)? {
            let layout = build_one_layout(&assertion, results, manifest)?;
            let b = assertion.overstatement();
            let translation = if method.translate {
                layout.translation(&b)
            } else {
                AffineTranslation::identity(b.upper_bound())
            };
            let upper = to_f64(translation.upper);
            let risk = RiskState::new(method.alpha.estimator(upper), n, upper)?;
            assertions.push(AssertionState {
                assertion,
                layout,
                translation,
                risk,
                risk_limit: contest.risk_limit,
                passed: false,
            });
        }
        let mut linked_offsets = BTreeMap::new();
        let mut offset = 0;
        for e in manifest.ordered() {
            if e.group_id == GroupRef::Linked {
                linked_offsets.insert(e.container_id.clone(), offset);
                offset += e.card_count;
            }
        }
        let mut session = AuditSession {
            sequence: DrawSequence::new(inputs.seed.clone()),
            inputs,
            assertions,
            draws: BTreeMap::new(),
            mvr_log: Vec::new(),
            status: Status::Setup,
            transcript: Transcript::new(),
            linked_offsets,
        };
        let open = json!({
            "inputs": serde_json::to_value(&session.inputs).expect("inputs serialize"),
            "cards": dec(n),
            "container_order": "lexicographic",
            "generator": "sha256(seed,counter)",
            "assertions": session.assertions.iter().map(|a| json!({
                "id": a.assertion.id,
                "margin": dec(a.assertion.margin),
                "upper": dec(a.translation.upper),
                "shift": dec(a.translation.low),
            })).collect::<Vec<_>>(),
        });
        session.transcript.append(EventKind::Open, open);
        session.set_status(Status::Running, json!({}));
        Ok(session)
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Incremented on every mutation; the number of transcript events.
    pub fn revision(&self) -> u64 {
        self.transcript.len() as u64
    }

    pub fn cards(&self) -> u64 {
        self.inputs.manifest.total_cards()
    }

    fn set_status(&mut self, status: Status, mut extra: Value) {
        self.status = status;
        extra["status"] = Value::String(status.as_str().to_owned());
        self.transcript.append(EventKind::Status, extra);
    }

    fn require_running(&self) -> Result<()> {
        if self.status != Status::Running {
            return Err(AuditError::WrongState {
                status: self.status.as_str().to_owned(),
            });
        }
        Ok(())
    }

    pub fn draw_next(&mut self) -> Result<DrawInstruction> {
        self.require_running()?;
        let n = self.cards();
        if self.draws.len() as u64 >= n {
            return Err(AuditError::FullCountRequired);
        }
        let ordinal = self.sequence.next_uniform(n)?;
        let loc = locate(&self.inputs.manifest, ordinal)?;
        let cvr = match loc.group_id {
            GroupRef::Linked => {
                let k = self.linked_offsets[&loc.container_id] + loc.position - 1;
                Some(self.inputs.results.linked_cvrs[k as usize].clone())
            }
            GroupRef::Group(_) => None,
        };
        let draw = DrawInstruction {
            ordinal,
            container_id: loc.container_id,
            position: loc.position,
            group_id: loc.group_id,
            cvr,
        };
        self.transcript.append(
            EventKind::Draw,
            json!({
                "ordinal": dec(draw.ordinal),
                "container_id": draw.container_id,
                "position": dec(draw.position),
                "group_id": draw.group_id,
                "cvr": draw.cvr,
                "counter": dec(self.sequence.counter),
            }),
        );
        self.draws.insert(ordinal, draw.clone());
        Ok(draw)
    }

    fn is_recorded(&self, ordinal: u64) -> bool {
        self.mvr_log.iter().any(|e| e.ordinal == ordinal)
    }

    /// Drawn ordinals still waiting for an interpretation, ascending.
    pub fn pending(&self) -> Vec<u64> {
        let recorded: BTreeSet<u64> = self.mvr_log.iter().map(|e| e.ordinal).collect();
        self.draws
            .keys()
            .filter(|o| !recorded.contains(o))
            .copied()
            .collect()
    }

    pub fn record_mvr(&mut self, ordinal: u64, mvr: CardRecord) -> Result<Vec<AssertionUpdate>> {
        self.require_running()?;
        if self.draws.is_empty() {
            return Err(AuditError::WrongState {
                status: "RUNNING with nothing drawn".into(),
            });
        }
        let draw = self
            .draws
            .get(&ordinal)
            .ok_or(AuditError::UnknownOrdinal(ordinal))?
            .clone();
        if self.is_recorded(ordinal) {
            return Err(AuditError::DuplicateRecord(ordinal));
        }
        let card_id = draw.cvr.as_ref().map(|c| c.card_id.as_str()).unwrap_or("");
        // compute everything before mutating so a failure leaves no trace
        let mut xs = Vec::with_capacity(self.assertions.len());
        for a in &self.assertions {
            let cvr_value = a.layout.comparison_value(card_id, &draw.group_id)?;
            let mvr_value = assort(&a.assertion.assorter, &mvr);
            let x = a.overstatement().value(mvr_value, cvr_value);
            xs.push((x, a.translation.apply(x)));
        }
        let timestamp = self.revision() + 1;
        self.transcript.append(
            EventKind::Mvr,
            json!({ "ordinal": dec(ordinal), "mvr": mvr, "timestamp": dec(timestamp) }),
        );
        self.mvr_log.push(MvrEntry {
            ordinal,
            mvr,
            timestamp,
        });
        let mut updates = Vec::with_capacity(self.assertions.len());
        for (a, (x, shifted)) in self.assertions.iter_mut().zip(xs) {
            if !a.passed {
                a.risk.update(to_f64(shifted))?;
                a.passed = a.risk.measured_risk() <= a.risk_limit;
            }
            updates.push(AssertionUpdate {
                assertion_id: a.assertion.id.clone(),
                overstatement: x,
                measured_risk: a.risk.measured_risk(),
                passed: a.passed,
            });
        }
        self.transcript.append(
            EventKind::Risk,
            json!({
                "ordinal": dec(ordinal),
                "assertions": updates.iter().map(|u| json!({
                    "id": u.assertion_id,
                    "overstatement": dec(u.overstatement),
                    "measured_risk": dec(u.measured_risk),
                    "passed": u.passed,
                })).collect::<Vec<_>>(),
            }),
        );
        if self.assertions.iter().all(|a| a.passed) {
            self.set_status(Status::Confirmed, json!({}));
        }
        Ok(updates)
    }

    /// Operator gives up on the sampling phase.
    pub fn abandon(&mut self, reason: &str) -> Result<()> {
        self.require_running()?;
        self.set_status(Status::Stalled, json!({ "reason": reason }));
        Ok(())
    }

    /// Hand count of every card. `mvrs` must cover every ordinal that has no
    /// recorded interpretation yet.
    pub fn full_count(&mut self, mvrs: BTreeMap<u64, CardRecord>) -> Result<FullCountOutcome> {
        if !matches!(self.status, Status::Running | Status::Stalled) {
            return Err(AuditError::WrongState {
                status: self.status.as_str().to_owned(),
            });
        }
        let n = self.cards();
        for &o in mvrs.keys() {
            if o == 0 || o > n {
                return Err(AuditError::OutOfRange {
                    ordinal: o,
                    total: n,
                });
            }
            if self.is_recorded(o) {
                return Err(AuditError::DuplicateRecord(o));
            }
        }
        let covered = mvrs.len() as u64 + self.mvr_log.len() as u64;
        if covered < n {
            return Err(AuditError::Incomplete {
                missing: n - covered,
            });
        }
        let contest = &self.inputs.contest;
        let mut tally: BTreeMap<String, u64> =
            contest.candidates.iter().map(|c| (c.clone(), 0)).collect();
        for card in self.mvr_log.iter().map(|e| &e.mvr).chain(mvrs.values()) {
            if let Some(c) = card.vote(&contest.id) {
                *tally.entry(c.to_owned()).or_insert(0) += 1;
            }
        }
        let winner = reported_winner(&tally)?;
        let outcome = FullCountOutcome {
            reported_winner_confirmed: winner == contest.reported_winner,
            winner,
            tally,
        };
        self.set_status(
            Status::FullCount,
            json!({
                "winner": outcome.winner,
                "tally": outcome.tally.iter().map(|(k, v)| (k.clone(), dec(v))).collect::<BTreeMap<_, _>>(),
                "mvrs": mvrs.iter().map(|(o, m)| (o.to_string(), m)).collect::<BTreeMap<_, _>>(),
            }),
        );
        Ok(outcome)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            status: self.status,
            revision: self.revision(),
            draws: self.draws.len() as u64,
            recorded: self.mvr_log.len() as u64,
            pending: self.pending(),
            assertions: self
                .assertions
                .iter()
                .map(|a| AssertionSummary {
                    assertion_id: a.assertion.id.clone(),
                    measured_risk: a.risk.measured_risk().to_string(),
                    risk_limit: a.risk_limit.to_string(),
                    passed: a.passed,
                    samples: a.risk.draws,
                })
                .collect(),
        }
    }

    /// Monte Carlo estimate of the number of cards needed to confirm, assuming
    /// the reported results are right except that a fraction `error_rate` of
    /// reported-winner cards really show the strongest loser.
    pub fn plan_sample_size(
        &self,
        error_rate: f64,
        reps: usize,
        seed: u64,
    ) -> Result<PlanEstimate> {
        if reps < MIN_REPS {
            return Err(AuditError::invalid(
                "replications",
                format!("{reps} is fewer than {MIN_REPS}"),
            ));
        }
        if !(0.0..1.0).contains(&error_rate) {
            return Err(AuditError::invalid("error rate", "must lie in [0, 1)"));
        }
        let cards = self.planning_population(error_rate);
        let columns: Vec<Vec<f64>> = self
            .assertions
            .iter()
            .map(|a| {
                let b = a.overstatement();
                cards
                    .iter()
                    .map(|(cvr, truth)| {
                        let cvr_value = match cvr {
                            PlanCvr::Card(c) => assort(&a.assertion.assorter, c),
                            PlanCvr::Group(g) => a.layout.group_means[g.as_str()],
                        };
                        let x = b.value(a.assertion.assorter.score(truth.as_deref()), cvr_value);
                        to_f64(a.translation.apply(x))
                    })
                    .collect()
            })
            .collect();
        let tests: Vec<AlphaTest> = self
            .assertions
            .iter()
            .map(|a| AlphaTest {
                estimator: a.risk.estimator,
                upper: a.risk.upper,
            })
            .collect();
        let alpha = self.inputs.contest.risk_limit;
        let sizes: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                alpha_stopping_size(&columns, &tests, alpha, &mut rep_rng(seed, r))
                    .map(|s| s as f64)
            })
            .collect::<Result<_>>()?;
        let stats = SampleStats::from_samples(&sizes);
        Ok(PlanEstimate {
            error_rate,
            sample_size: stats.q90 as u64,
            stats,
        })
    }

    /// Every card with its reported CVR (own or group) and assumed true vote.
    fn planning_population(&self, error_rate: f64) -> Vec<(PlanCvr<'_>, Option<String>)> {
        let contest = &self.inputs.contest;
        let results = &self.inputs.results;
        let runner_up = contest
            .reported_losers()
            .max_by_key(|c| (results.total(c), std::cmp::Reverse(c.to_string())))
            .map(str::to_owned);
        let winner = &contest.reported_winner;
        let mut out = Vec::with_capacity(self.cards() as usize);
        let mut winner_seen = 0u64;
        // deterministic error placement: every k-th winner card
        let mut flip = |vote: Option<&str>| -> Option<String> {
            if vote == Some(winner.as_str()) && error_rate > 0.0 {
                winner_seen += 1;
                let due = (winner_seen as f64 * error_rate).floor()
                    > ((winner_seen - 1) as f64 * error_rate).floor();
                if due {
                    return runner_up.clone();
                }
            }
            vote.map(str::to_owned)
        };
        for c in &results.linked_cvrs {
            let truth = flip(c.vote(&contest.id));
            out.push((PlanCvr::Card(c), truth));
        }
        for g in &results.group_subtotals {
            let mut votes: Vec<Option<&str>> = Vec::with_capacity(g.cards as usize);
            for (cand, n) in &g.tally {
                votes.extend(std::iter::repeat_n(Some(cand.as_str()), *n as usize));
            }
            votes.resize(g.cards as usize, None);
            for v in votes {
                let truth = flip(v);
                out.push((PlanCvr::Group(&g.group_id), truth));
            }
        }
        out
    }
}

enum PlanCvr<'a> {
    Card(&'a CardRecord),
    Group(&'a String),
}

fn field<'a>(event: &'a TranscriptEvent, key: &str) -> Result<&'a Value> {
    event
        .payload
        .get(key)
        .ok_or(AuditError::Divergence { seq: event.seq })
}

fn parse_ordinal(event: &TranscriptEvent) -> Result<u64> {
    field(event, "ordinal")?
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or(AuditError::Divergence { seq: event.seq })
}

/// Rebuilds a session from its transcript, re-running every action and
/// checking each regenerated line byte for byte.
pub fn replay(text: &str) -> Result<AuditSession> {
    let events = Transcript::parse(text)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let first = events.first().ok_or(AuditError::Divergence { seq: 1 })?;
    if first.kind != EventKind::Open {
        return Err(AuditError::Divergence { seq: 1 });
    }
    let inputs: SessionInputs = serde_json::from_value(field(first, "inputs")?.clone())
        .map_err(|_| AuditError::Divergence { seq: 1 })?;
    let mut session = AuditSession::open(inputs).map_err(|_| AuditError::Divergence { seq: 1 })?;
    let check = |session: &AuditSession| -> Result<()> {
        for (i, produced) in session.transcript.lines().iter().enumerate() {
            match lines.get(i) {
                Some(orig) if *orig == produced => {}
                _ => return Err(AuditError::Divergence { seq: i as u64 + 1 }),
            }
        }
        Ok(())
    };
    check(&session)?;
    for event in &events {
        let idx = event.seq as usize - 1;
        if idx < session.transcript.len() {
            continue;
        }
        let diverge = AuditError::Divergence { seq: event.seq };
        match event.kind {
            EventKind::Draw => {
                session.draw_next().map_err(|_| diverge.clone())?;
            }
            EventKind::Mvr => {
                let ordinal = parse_ordinal(event)?;
                let mvr: CardRecord = serde_json::from_value(field(event, "mvr")?.clone())
                    .map_err(|_| diverge.clone())?;
                session
                    .record_mvr(ordinal, mvr)
                    .map_err(|_| diverge.clone())?;
            }
            EventKind::Status => match field(event, "status")?.as_str() {
                Some("STALLED") => {
                    let reason = event.payload["reason"].as_str().unwrap_or_default();
                    session.abandon(reason).map_err(|_| diverge.clone())?;
                }
                Some("FULL_COUNT") => {
                    let raw: BTreeMap<String, CardRecord> =
                        serde_json::from_value(field(event, "mvrs")?.clone())
                            .map_err(|_| diverge.clone())?;
                    let mvrs = raw
                        .into_iter()
                        .map(|(k, v)| k.parse().map(|o| (o, v)))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| diverge.clone())?;
                    session.full_count(mvrs).map_err(|_| diverge.clone())?;
                }
                _ => return Err(diverge),
            },
            EventKind::Open | EventKind::Risk => return Err(diverge),
        }
        check(&session)?;
    }
    if session.transcript.len() != lines.len() {
        return Err(AuditError::Divergence {
            seq: lines.len() as u64 + 1,
        });
    }
    Ok(session)
}
