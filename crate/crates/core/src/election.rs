//! Contests, cards, manifests, batch subtotals and the accounting checks that
//! must pass before an audit may start.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AuditError, Result};

/// Literal used for linked containers in manifests.
pub const LINKED: &str = "LINKED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contest {
    pub id: String,
    pub candidates: Vec<String>,
    pub reported_winner: String,
    pub cards_total: u64,
    pub risk_limit: f64,
}

impl Contest {
    pub fn new(
        id: impl Into<String>,
        candidates: Vec<String>,
        reported_winner: impl Into<String>,
        cards_total: u64,
        risk_limit: f64,
    ) -> Result<Self> {
        let contest = Contest {
            id: id.into(),
            candidates,
            reported_winner: reported_winner.into(),
            cards_total,
            risk_limit,
        };
        contest.validate()?;
        Ok(contest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(AuditError::invalid("contest", "no candidates"));
        }
        let unique: BTreeSet<_> = self.candidates.iter().collect();
        if unique.len() != self.candidates.len() {
            return Err(AuditError::invalid("contest", "duplicate candidate"));
        }
        if !self.has_candidate(&self.reported_winner) {
            return Err(AuditError::invalid(
                "contest",
                format!(
                    "reported winner {} is not a candidate",
                    self.reported_winner
                ),
            ));
        }
        if !(self.risk_limit > 0.0 && self.risk_limit < 1.0) {
            return Err(AuditError::invalid(
                "contest",
                "risk limit must lie in (0, 1)",
            ));
        }
        if self.cards_total == 0 {
            return Err(AuditError::invalid(
                "contest",
                "cards_total must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn has_candidate(&self, candidate: &str) -> bool {
        self.candidates.iter().any(|c| c == candidate)
    }

    /// Candidates other than the reported winner, in ballot order.
    pub fn reported_losers(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .map(String::as_str)
            .filter(move |c| *c != self.reported_winner)
    }
}

/// One card's interpretation, either by the voting system (CVR) or by people (MVR).
///
/// `None` in `votes` is a NO_VOTE (undervote, overvote or invalid); a contest that
/// is absent from the map is scored the same way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardRecord {
    pub card_id: String,
    pub votes: BTreeMap<String, Option<String>>,
}

impl CardRecord {
    pub fn new(card_id: impl Into<String>) -> Self {
        CardRecord {
            card_id: card_id.into(),
            votes: BTreeMap::new(),
        }
    }

    pub fn with_vote(mut self, contest: &str, candidate: Option<&str>) -> Self {
        self.votes
            .insert(contest.to_owned(), candidate.map(str::to_owned));
        self
    }

    pub fn vote(&self, contest: &str) -> Option<&str> {
        self.votes.get(contest).and_then(|v| v.as_deref())
    }
}

/// Which reporting unit a container's cards belong to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupRef {
    Linked,
    Group(String),
}

impl GroupRef {
    pub fn parse(raw: &str) -> Self {
        if raw == LINKED {
            GroupRef::Linked
        } else {
            GroupRef::Group(raw.to_owned())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            GroupRef::Linked => LINKED,
            GroupRef::Group(id) => id,
        }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for GroupRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for GroupRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(GroupRef::parse(&raw))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub container_id: String,
    pub card_count: u64,
    pub group_id: GroupRef,
}

/// Physical containers and how many cards each holds.
///
/// Entries keep their input order (so files round-trip); sampling always walks
/// them in lexicographic container order, see [`BallotManifest::ordered`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotManifest {
    pub entries: Vec<ManifestEntry>,
}

impl BallotManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = BallotManifest { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.container_id.as_str()) {
                return Err(AuditError::invalid(
                    "manifest",
                    format!("duplicate container {}", e.container_id),
                ));
            }
            if e.card_count == 0 {
                return Err(AuditError::invalid(
                    "manifest",
                    format!("container {} holds no cards", e.container_id),
                ));
            }
        }
        Ok(())
    }

    pub fn total_cards(&self) -> u64 {
        self.entries.iter().map(|e| e.card_count).sum()
    }

    pub fn ordered(&self) -> Vec<&ManifestEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| a.container_id.cmp(&b.container_id));
        v
    }

    /// Cards per reporting unit (LINKED included).
    pub fn cards_by_group(&self) -> BTreeMap<GroupRef, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.group_id.clone()).or_insert(0) += e.card_count;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSubtotal {
    pub group_id: String,
    pub cards: u64,
    pub tally: BTreeMap<String, u64>,
}

impl GroupSubtotal {
    pub fn new(group_id: impl Into<String>, cards: u64, tally: &[(&str, u64)]) -> Self {
        GroupSubtotal {
            group_id: group_id.into(),
            cards,
            tally: tally.iter().map(|(c, n)| ((*c).to_owned(), *n)).collect(),
        }
    }

    pub fn votes(&self) -> u64 {
        self.tally.values().sum()
    }

    pub fn count(&self, candidate: &str) -> u64 {
        self.tally.get(candidate).copied().unwrap_or(0)
    }
}

/// What the voting system exported for one contest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedResults {
    pub contest_id: String,
    pub totals: BTreeMap<String, u64>,
    pub linked_cvrs: Vec<CardRecord>,
    pub group_subtotals: Vec<GroupSubtotal>,
}

impl ReportedResults {
    /// Builds results whose totals are exactly the sum of the parts.
    pub fn from_parts(
        contest_id: impl Into<String>,
        linked_cvrs: Vec<CardRecord>,
        group_subtotals: Vec<GroupSubtotal>,
    ) -> Self {
        let contest_id = contest_id.into();
        let mut totals = BTreeMap::new();
        for cvr in &linked_cvrs {
            if let Some(c) = cvr.vote(&contest_id) {
                *totals.entry(c.to_owned()).or_insert(0) += 1;
            }
        }
        for g in &group_subtotals {
            for (c, n) in &g.tally {
                *totals.entry(c.clone()).or_insert(0) += n;
            }
        }
        ReportedResults {
            contest_id,
            totals,
            linked_cvrs,
            group_subtotals,
        }
    }

    pub fn total(&self, candidate: &str) -> u64 {
        self.totals.get(candidate).copied().unwrap_or(0)
    }

    pub fn cards(&self) -> u64 {
        self.linked_cvrs.len() as u64 + self.group_subtotals.iter().map(|g| g.cards).sum::<u64>()
    }
}

/// Plurality winner: the unique candidate with the largest count.
pub fn reported_winner(totals: &BTreeMap<String, u64>) -> Result<String> {
    let max = totals
        .values()
        .copied()
        .max()
        .ok_or_else(|| AuditError::invalid("totals", "no candidates"))?;
    let leaders: Vec<String> = totals
        .iter()
        .filter(|(_, n)| **n == max)
        .map(|(c, _)| c.clone())
        .collect();
    if leaders.len() > 1 {
        return Err(AuditError::Tie(leaders));
    }
    Ok(leaders.into_iter().next().expect("non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountCheck {
    pub linked: u64,
    pub grouped: u64,
    pub manifest: u64,
    pub expected: u64,
}

impl CountCheck {
    pub fn holds(&self) -> bool {
        self.linked + self.grouped == self.expected && self.manifest == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TallyCheck {
    pub candidate: String,
    pub linked: u64,
    pub grouped: u64,
    pub reported: u64,
}

impl TallyCheck {
    pub fn holds(&self) -> bool {
        self.linked + self.grouped == self.reported
    }
}

/// Outcome of the pre-audit reconciliation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub contest_id: String,
    pub counts: CountCheck,
    pub tallies: Vec<TallyCheck>,
    pub recomputed_winner: Option<String>,
    pub findings: Vec<AuditError>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    /// First finding as an error, or `Ok` on PASS.
    pub fn into_result(self) -> Result<Self> {
        match self.findings.first() {
            Some(err) => Err(err.clone()),
            None => Ok(self),
        }
    }
}

/// Reconciles card counts, candidate tallies and the reported winner.
pub fn verify_accounting(
    results: &ReportedResults,
    manifest: &BallotManifest,
    contest: &Contest,
) -> VerificationReport {
    let mut findings = Vec::new();
    let cid = contest.id.as_str();

    if let Err(e) = contest.validate() {
        findings.push(e);
    }
    if let Err(e) = manifest.validate() {
        findings.push(e);
    }

    // (a) card counts
    let linked = results.linked_cvrs.len() as u64;
    let grouped: u64 = results.group_subtotals.iter().map(|g| g.cards).sum();
    let counts = CountCheck {
        linked,
        grouped,
        manifest: manifest.total_cards(),
        expected: contest.cards_total,
    };
    if linked + grouped != contest.cards_total {
        findings.push(AuditError::MismatchedCounts {
            scope: format!("contest {cid}"),
            expected: contest.cards_total,
            found: linked + grouped,
        });
    }
    if counts.manifest != contest.cards_total {
        findings.push(AuditError::MismatchedCounts {
            scope: "manifest".into(),
            expected: contest.cards_total,
            found: counts.manifest,
        });
    }
    let by_group = manifest.cards_by_group();
    let manifest_linked = by_group.get(&GroupRef::Linked).copied().unwrap_or(0);
    if manifest_linked != linked {
        findings.push(AuditError::MismatchedCounts {
            scope: "group LINKED".into(),
            expected: manifest_linked,
            found: linked,
        });
    }
    let mut seen_groups = BTreeSet::new();
    for g in &results.group_subtotals {
        if !seen_groups.insert(g.group_id.as_str()) {
            findings.push(AuditError::invalid(
                "subtotals",
                format!("group {} listed twice", g.group_id),
            ));
        }
        let in_manifest = by_group
            .get(&GroupRef::Group(g.group_id.clone()))
            .copied()
            .unwrap_or(0);
        if in_manifest != g.cards {
            findings.push(AuditError::MismatchedCounts {
                scope: format!("group {}", g.group_id),
                expected: in_manifest,
                found: g.cards,
            });
        }
        if g.votes() > g.cards {
            findings.push(AuditError::MismatchedTally {
                scope: format!("group {}", g.group_id),
                expected: g.cards,
                found: g.votes(),
            });
        }
        for c in g.tally.keys() {
            if !contest.has_candidate(c) {
                findings.push(AuditError::invalid(
                    "subtotals",
                    format!("group {} names unknown candidate {c}", g.group_id),
                ));
            }
        }
    }
    for group in by_group.keys() {
        if let GroupRef::Group(id) = group {
            if !seen_groups.contains(id.as_str()) {
                findings.push(AuditError::MismatchedCounts {
                    scope: format!("group {id}"),
                    expected: by_group[group],
                    found: 0,
                });
            }
        }
    }

    // (b) tallies, candidate by candidate
    let mut linked_tally: BTreeMap<&str, u64> = BTreeMap::new();
    for cvr in &results.linked_cvrs {
        if let Some(c) = cvr.vote(cid) {
            if !contest.has_candidate(c) {
                findings.push(AuditError::invalid(
                    "cvr",
                    format!("card {} votes for unknown candidate {c}", cvr.card_id),
                ));
            }
            *linked_tally.entry(c).or_insert(0) += 1;
        }
    }
    for c in results.totals.keys() {
        if !contest.has_candidate(c) {
            findings.push(AuditError::invalid(
                "totals",
                format!("unknown candidate {c}"),
            ));
        }
    }
    let tallies: Vec<TallyCheck> = contest
        .candidates
        .iter()
        .map(|c| TallyCheck {
            candidate: c.clone(),
            linked: linked_tally.get(c.as_str()).copied().unwrap_or(0),
            grouped: results.group_subtotals.iter().map(|g| g.count(c)).sum(),
            reported: results.total(c),
        })
        .collect();
    for t in tallies.iter().filter(|t| !t.holds()) {
        findings.push(AuditError::MismatchedTally {
            scope: format!("candidate {}", t.candidate),
            expected: t.reported,
            found: t.linked + t.grouped,
        });
    }

    // (c) winner
    let recomputed_winner = match reported_winner(&results.totals) {
        Ok(w) => {
            if w != contest.reported_winner {
                findings.push(AuditError::WinnerDisagrees {
                    reported: contest.reported_winner.clone(),
                    recomputed: w.clone(),
                });
            }
            Some(w)
        }
        Err(e) => {
            findings.push(e);
            None
        }
    };

    VerificationReport {
        contest_id: contest.id.clone(),
        counts,
        tallies,
        recomputed_winner,
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{alice_bob, alice_bob_results};

    #[test]
    fn worked_example_passes() {
        let f = alice_bob(900, 100);
        let report = verify_accounting(&f.results, &f.manifest, &f.contest);
        assert!(report.passed(), "{:?}", report.findings);
        assert_eq!(report.recomputed_winner.as_deref(), Some("Alice"));
        assert_eq!(f.results.total("Alice"), 10_000);
        assert_eq!(f.results.total("Bob"), 9_000);
        assert_eq!(f.contest.cards_total - 19_000, 1_000);
    }

    #[test]
    fn linked_only_passes() {
        let cvrs = vec![
            CardRecord::new("a").with_vote("c", Some("A")),
            CardRecord::new("b").with_vote("c", Some("A")),
            CardRecord::new("x").with_vote("c", None),
        ];
        let results = ReportedResults::from_parts("c", cvrs, vec![]);
        let manifest = BallotManifest::new(vec![ManifestEntry {
            container_id: "box".into(),
            card_count: 3,
            group_id: GroupRef::Linked,
        }])
        .unwrap();
        let contest = Contest::new("c", vec!["A".into(), "B".into()], "A", 3, 0.05).unwrap();
        assert!(verify_accounting(&results, &manifest, &contest).passed());
    }

    #[test]
    fn perturbed_group_is_named() {
        let f = alice_bob(900, 100);
        let mut results = f.results.clone();
        *results.group_subtotals[3].tally.get_mut("Alice").unwrap() += 1;
        let report = verify_accounting(&results, &f.manifest, &f.contest);
        assert!(!report.passed());
        let named = report.findings.iter().any(|e| {
            matches!(e, AuditError::MismatchedTally { scope, .. } if scope == "group precinct-04")
        });
        assert!(named, "{:?}", report.findings);
    }

    #[test]
    fn wrong_reported_winner_is_flagged() {
        let f = alice_bob(900, 100);
        let mut contest = f.contest.clone();
        contest.reported_winner = "Bob".into();
        let report = verify_accounting(&f.results, &f.manifest, &contest);
        assert!(report
            .findings
            .iter()
            .any(|e| e.code() == "WINNER_DISAGREES"));
    }

    #[test]
    fn short_manifest_is_mismatched_counts() {
        let f = alice_bob(900, 100);
        let mut manifest = f.manifest.clone();
        manifest.entries[0].card_count -= 1;
        let report = verify_accounting(&f.results, &manifest, &f.contest);
        assert_eq!(report.findings[0].code(), "MISMATCHED_COUNTS");
    }

    #[test]
    fn winner_extraction() {
        let t = |pairs: &[(&str, u64)]| -> BTreeMap<String, u64> {
            pairs.iter().map(|(c, n)| ((*c).to_owned(), *n)).collect()
        };
        assert_eq!(
            reported_winner(&t(&[("Alice", 10_000), ("Bob", 9_000)])).unwrap(),
            "Alice"
        );
        assert_eq!(reported_winner(&t(&[("A", 1), ("B", 0)])).unwrap(), "A");
        assert_eq!(
            reported_winner(&t(&[("A", 5), ("B", 5)]))
                .unwrap_err()
                .code(),
            "TIE"
        );
    }

    #[test]
    fn contest_invariants() {
        assert!(Contest::new("c", vec![], "A", 1, 0.05).is_err());
        assert!(Contest::new("c", vec!["A".into(), "A".into()], "A", 1, 0.05).is_err());
        assert!(Contest::new("c", vec!["A".into()], "B", 1, 0.05).is_err());
        assert!(Contest::new("c", vec!["A".into()], "A", 1, 1.0).is_err());
        assert!(Contest::new("c", vec!["A".into()], "A", 0, 0.05).is_err());
    }

    #[test]
    fn permutation_invariance_of_worked_example() {
        let f = alice_bob(990, 10);
        let mut results = alice_bob_results(990, 10);
        results.group_subtotals.reverse();
        results.linked_cvrs.reverse();
        assert!(verify_accounting(&results, &f.manifest, &f.contest).passed());
    }
}
