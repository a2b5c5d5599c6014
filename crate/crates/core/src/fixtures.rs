//! Built-in election fixtures: the 20,000-card worked example with ten
//! precincts, used by tests, the CLI and the Python bindings.

use crate::election::{
    BallotManifest, CardRecord, Contest, GroupRef, GroupSubtotal, ManifestEntry, ReportedResults,
};

pub const CONTEST_ID: &str = "alice-bob";

#[derive(Debug, Clone)]
pub struct Fixture {
    pub contest: Contest,
    pub manifest: BallotManifest,
    pub results: ReportedResults,
}

/// 10,000 linked cards (5,000 Alice, 4,000 Bob, 1,000 blank) in ten mail
/// trays, plus ten 1,000-card precincts: the first five report `major` votes
/// for Alice and `minor` for Bob, the other five the reverse.
pub fn alice_bob(major: u64, minor: u64) -> Fixture {
    let contest = Contest::new(
        CONTEST_ID,
        vec!["Alice".into(), "Bob".into()],
        "Alice",
        20_000,
        0.05,
    )
    .expect("valid contest");
    let mut entries: Vec<ManifestEntry> = (1..=10)
        .map(|i| ManifestEntry {
            container_id: format!("mail-{i:02}"),
            card_count: 1_000,
            group_id: GroupRef::Linked,
        })
        .collect();
    entries.extend((1..=10).map(|i| ManifestEntry {
        container_id: format!("precinct-{i:02}"),
        card_count: 1_000,
        group_id: GroupRef::Group(format!("precinct-{i:02}")),
    }));
    Fixture {
        contest,
        manifest: BallotManifest::new(entries).expect("valid manifest"),
        results: alice_bob_results(major, minor),
    }
}

pub fn alice_bob_results(major: u64, minor: u64) -> ReportedResults {
    ReportedResults::from_parts(CONTEST_ID, alice_bob_cvrs(), alice_bob_groups(major, minor))
}

pub fn alice_bob_cvrs() -> Vec<CardRecord> {
    (0..10_000u32)
        .map(|k| {
            let vote = match k {
                0..=4_999 => Some("Alice"),
                5_000..=8_999 => Some("Bob"),
                _ => None,
            };
            CardRecord::new(format!("mail-{:02}-{:04}", k / 1_000 + 1, k % 1_000 + 1))
                .with_vote(CONTEST_ID, vote)
        })
        .collect()
}

pub fn alice_bob_groups(major: u64, minor: u64) -> Vec<GroupSubtotal> {
    (1..=10)
        .map(|i| {
            let (alice, bob) = if i <= 5 {
                (major, minor)
            } else {
                (minor, major)
            };
            GroupSubtotal::new(
                format!("precinct-{i:02}"),
                1_000,
                &[("Alice", alice), ("Bob", bob)],
            )
        })
        .collect()
}

/// The interpretation a correct hand count would record for a card of the
/// worked example: the CVR itself for linked cards; for precinct cards the
/// first `major` (or `minor`) positions hold the precinct's leading candidate,
/// the next ones the other candidate, the rest are blank.
pub fn alice_bob_mvr(
    major: u64,
    minor: u64,
    container_id: &str,
    position: u64,
    cvr: Option<&CardRecord>,
) -> CardRecord {
    if let Some(c) = cvr {
        return c.clone();
    }
    let precinct: u64 = container_id
        .strip_prefix("precinct-")
        .and_then(|n| n.parse().ok())
        .expect("precinct container");
    let (lead, trail) = if precinct <= 5 {
        ("Alice", "Bob")
    } else {
        ("Bob", "Alice")
    };
    let vote = if position <= major {
        Some(lead)
    } else if position <= major + minor {
        Some(trail)
    } else {
        None
    };
    CardRecord::new(format!("{container_id}-{position:04}")).with_vote(CONTEST_ID, vote)
}
