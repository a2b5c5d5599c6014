//! Election input files.
//!
//! * `manifest.csv`: `container_id,card_count,group_id` (`LINKED` for CVR trays)
//! * `subtotals.csv`: `group_id,cards,candidate,count`, one row per candidate
//! * `cvrs.jsonl`: one `{"card_id", "votes": {contest: candidate|null}}` per line
//! * `contest.json`: the contest definition plus reported totals
//!
//! A directory holding all four is an election bundle. `ONIT_DATA_DIR` names
//! the default bundle location.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::election::{
    BallotManifest, CardRecord, Contest, GroupRef, GroupSubtotal, ManifestEntry, ReportedResults,
};
use crate::error::{AuditError, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SUBTOTALS_FILE: &str = "subtotals.csv";
pub const CVRS_FILE: &str = "cvrs.jsonl";
pub const CONTEST_FILE: &str = "contest.json";
pub const DATA_DIR_ENV: &str = "ONIT_DATA_DIR";

const MANIFEST_HEADER: [&str; 3] = ["container_id", "card_count", "group_id"];
const SUBTOTALS_HEADER: [&str; 4] = ["group_id", "cards", "candidate", "count"];

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn csv_error(file: &str, err: csv::Error) -> AuditError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    AuditError::Parse {
        file: file.to_owned(),
        line,
        column: 0,
        message: err.to_string(),
    }
}

/// Reads the header row and every record, keeping each record's line number.
fn read_csv(file: &str, text: &str, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let first = match records.next() {
        None => {
            return Err(AuditError::MissingHeader {
                file: file.to_owned(),
            })
        }
        Some(r) => r.map_err(|e| csv_error(file, e))?,
    };
    if first.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(AuditError::MissingHeader {
            file: file.to_owned(),
        });
    }
    let mut out = Vec::new();
    for r in records {
        let r = r.map_err(|e| csv_error(file, e))?;
        let line = r.position().map(|p| p.line()).unwrap_or(0);
        if r.len() != header.len() {
            return Err(AuditError::Parse {
                file: file.to_owned(),
                line,
                column: r.len().min(header.len()) as u64 + 1,
                message: format!("expected {} fields, found {}", header.len(), r.len()),
            });
        }
        out.push((line, r));
    }
    Ok(out)
}

fn field_u64(file: &str, line: u64, record: &csv::StringRecord, idx: usize) -> Result<u64> {
    let raw = record[idx].trim();
    raw.parse().map_err(|_| AuditError::Parse {
        file: file.to_owned(),
        line,
        column: idx as u64 + 1,
        message: format!("not a non-negative integer: {raw:?}"),
    })
}

fn field_str(file: &str, line: u64, record: &csv::StringRecord, idx: usize) -> Result<String> {
    let raw = record[idx].trim();
    if raw.is_empty() {
        return Err(AuditError::Parse {
            file: file.to_owned(),
            line,
            column: idx as u64 + 1,
            message: "empty field".into(),
        });
    }
    Ok(raw.to_owned())
}

pub fn parse_manifest(text: &str) -> Result<BallotManifest> {
    let file = MANIFEST_FILE;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (line, r) in read_csv(file, text, &MANIFEST_HEADER)? {
        let container_id = field_str(file, line, &r, 0)?;
        if !seen.insert(container_id.clone()) {
            return Err(AuditError::DuplicateId {
                file: file.to_owned(),
                line,
                id: container_id,
            });
        }
        let card_count = field_u64(file, line, &r, 1)?;
        if card_count == 0 {
            return Err(AuditError::Parse {
                file: file.to_owned(),
                line,
                column: 2,
                message: "container holds no cards".into(),
            });
        }
        let group_id = GroupRef::parse(&field_str(file, line, &r, 2)?);
        entries.push(ManifestEntry {
            container_id,
            card_count,
            group_id,
        });
    }
    BallotManifest::new(entries)
}

pub fn emit_manifest(manifest: &BallotManifest) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory write");
    for e in &manifest.entries {
        w.write_record([
            e.container_id.as_str(),
            &e.card_count.to_string(),
            e.group_id.as_str(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Groups appear in first-seen order. A row with an empty candidate declares
/// a group's card count without any votes.
pub fn parse_subtotals(text: &str) -> Result<Vec<GroupSubtotal>> {
    let file = SUBTOTALS_FILE;
    let mut groups: Vec<GroupSubtotal> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (line, r) in read_csv(file, text, &SUBTOTALS_HEADER)? {
        let group_id = field_str(file, line, &r, 0)?;
        let cards = field_u64(file, line, &r, 1)?;
        let candidate = r[2].trim().to_owned();
        let count = field_u64(file, line, &r, 3)?;
        let slot = match index.get(&group_id) {
            Some(&i) => {
                if groups[i].cards != cards {
                    return Err(AuditError::Parse {
                        file: file.to_owned(),
                        line,
                        column: 2,
                        message: format!(
                            "group {group_id} declared with {} cards earlier",
                            groups[i].cards
                        ),
                    });
                }
                i
            }
            None => {
                index.insert(group_id.clone(), groups.len());
                groups.push(GroupSubtotal {
                    group_id: group_id.clone(),
                    cards,
                    tally: BTreeMap::new(),
                });
                groups.len() - 1
            }
        };
        if candidate.is_empty() {
            continue;
        }
        if groups[slot]
            .tally
            .insert(candidate.clone(), count)
            .is_some()
        {
            return Err(AuditError::DuplicateId {
                file: file.to_owned(),
                line,
                id: format!("{group_id}/{candidate}"),
            });
        }
    }
    Ok(groups)
}

pub fn emit_subtotals(groups: &[GroupSubtotal]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUBTOTALS_HEADER).expect("in-memory write");
    for g in groups {
        let cards = g.cards.to_string();
        if g.tally.is_empty() {
            w.write_record([g.group_id.as_str(), &cards, "", "0"])
                .expect("in-memory write");
        }
        for (c, n) in &g.tally {
            w.write_record([g.group_id.as_str(), &cards, c, &n.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn parse_cvrs(text: &str) -> Result<Vec<CardRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cvr: CardRecord = serde_json::from_str(line).map_err(|e| AuditError::Parse {
            file: CVRS_FILE.to_owned(),
            line: line_no,
            column: e.column() as u64,
            message: e.to_string(),
        })?;
        if !seen.insert(cvr.card_id.clone()) {
            return Err(AuditError::DuplicateId {
                file: CVRS_FILE.to_owned(),
                line: line_no,
                id: cvr.card_id,
            });
        }
        out.push(cvr);
    }
    Ok(out)
}

pub fn emit_cvrs(cvrs: &[CardRecord]) -> String {
    let mut out = String::new();
    for c in cvrs {
        out.push_str(&serde_json::to_string(c).expect("cvr serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestFile {
    pub contest: Contest,
    pub totals: BTreeMap<String, u64>,
}

pub fn parse_contest(text: &str) -> Result<ContestFile> {
    let parsed: ContestFile = serde_json::from_str(text).map_err(|e| AuditError::Parse {
        file: CONTEST_FILE.to_owned(),
        line: e.line() as u64,
        column: e.column() as u64,
        message: e.to_string(),
    })?;
    parsed.contest.validate()?;
    Ok(parsed)
}

pub fn emit_contest(contest: &Contest, totals: &BTreeMap<String, u64>) -> String {
    let file = ContestFile {
        contest: contest.clone(),
        totals: totals.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("contest serializes");
    s.push('\n');
    s
}

/// Everything needed to verify and audit one contest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionBundle {
    pub contest: Contest,
    pub manifest: BallotManifest,
    pub results: ReportedResults,
}

impl From<crate::fixtures::Fixture> for ElectionBundle {
    fn from(f: crate::fixtures::Fixture) -> Self {
        ElectionBundle {
            contest: f.contest,
            manifest: f.manifest,
            results: f.results,
        }
    }
}

fn read(dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name))
        .map_err(|e| AuditError::Io(format!("{}: {e}", dir.join(name).display())))
}

pub fn load_bundle(dir: &Path) -> Result<ElectionBundle> {
    let contest_file = parse_contest(&read(dir, CONTEST_FILE)?)?;
    let manifest = parse_manifest(&read(dir, MANIFEST_FILE)?)?;
    let groups = parse_subtotals(&read(dir, SUBTOTALS_FILE)?)?;
    let cvrs = parse_cvrs(&read(dir, CVRS_FILE)?)?;
    let results = ReportedResults {
        contest_id: contest_file.contest.id.clone(),
        totals: contest_file.totals,
        linked_cvrs: cvrs,
        group_subtotals: groups,
    };
    Ok(ElectionBundle {
        contest: contest_file.contest,
        manifest,
        results,
    })
}

pub fn write_bundle(dir: &Path, bundle: &ElectionBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(CONTEST_FILE),
        emit_contest(&bundle.contest, &bundle.results.totals),
    )?;
    fs::write(dir.join(MANIFEST_FILE), emit_manifest(&bundle.manifest))?;
    fs::write(
        dir.join(SUBTOTALS_FILE),
        emit_subtotals(&bundle.results.group_subtotals),
    )?;
    fs::write(dir.join(CVRS_FILE), emit_cvrs(&bundle.results.linked_cvrs))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::alice_bob;

    #[test]
    fn alice_bob_files_round_trip() {
        let f = alice_bob(900, 100);
        let m = emit_manifest(&f.manifest);
        assert!(m.starts_with("container_id,card_count,group_id\nmail-01,1000,LINKED\n"));
        assert_eq!(parse_manifest(&m).unwrap(), f.manifest);
        let s = emit_subtotals(&f.results.group_subtotals);
        assert_eq!(parse_subtotals(&s).unwrap(), f.results.group_subtotals);
        let c = emit_cvrs(&f.results.linked_cvrs);
        assert_eq!(parse_cvrs(&c).unwrap(), f.results.linked_cvrs);
        let j = emit_contest(&f.contest, &f.results.totals);
        let back = parse_contest(&j).unwrap();
        assert_eq!(back.contest, f.contest);
        assert_eq!(back.totals, f.results.totals);
    }

    #[test]
    fn empty_file_lacks_header() {
        assert_eq!(parse_manifest("").unwrap_err().code(), "MISSING_HEADER");
        assert_eq!(parse_subtotals("").unwrap_err().code(), "MISSING_HEADER");
        assert_eq!(
            parse_manifest("a,1,LINKED\n").unwrap_err().code(),
            "MISSING_HEADER"
        );
    }

    #[test]
    fn duplicate_container() {
        let text = "container_id,card_count,group_id\nbox-1,10,LINKED\nbox-1,5,g\n";
        assert_eq!(
            parse_manifest(text).unwrap_err(),
            AuditError::DuplicateId {
                file: MANIFEST_FILE.into(),
                line: 3,
                id: "box-1".into()
            }
        );
    }

    #[test]
    fn bad_count_points_at_cell() {
        let text = "container_id,card_count,group_id\nbox-1,10,LINKED\nbox-2,ten,g\n";
        match parse_manifest(text).unwrap_err() {
            AuditError::Parse { line, column, .. } => assert_eq!((line, column), (3, 2)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn bad_cvr_line() {
        let text = "{\"card_id\":\"a\",\"votes\":{}}\n{\"card_id\":\"b\",\"votes\":\n";
        match parse_cvrs(text).unwrap_err() {
            AuditError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        let dup = "{\"card_id\":\"a\",\"votes\":{}}\n{\"card_id\":\"a\",\"votes\":{}}\n";
        assert_eq!(parse_cvrs(dup).unwrap_err().code(), "DUPLICATE_ID");
    }

    #[test]
    fn null_vote_round_trips() {
        let c = CardRecord::new("x").with_vote("c", None);
        let text = emit_cvrs(std::slice::from_ref(&c));
        assert_eq!(text, "{\"card_id\":\"x\",\"votes\":{\"c\":null}}\n");
        assert_eq!(parse_cvrs(&text).unwrap(), vec![c]);
    }

    #[test]
    fn group_without_votes() {
        let g = GroupSubtotal::new("g", 5, &[]);
        let text = emit_subtotals(std::slice::from_ref(&g));
        assert_eq!(parse_subtotals(&text).unwrap(), vec![g]);
    }
}
