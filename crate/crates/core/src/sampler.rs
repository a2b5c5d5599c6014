//! Seed-reproducible card and batch selection.
//!
//! Every random value is the first eight bytes (big-endian) of
//! `SHA-256(seed ‖ "," ‖ decimal(counter))`. The counter advances on every hash,
//! including rejected ones, so any third party can recompute the sequence from
//! the seed alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::election::{BallotManifest, GroupRef};
use crate::error::{AuditError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawSequence {
    pub seed: String,
    pub counter: u64,
    pub drawn: BTreeSet<u64>,
}

/// Where a card ordinal lives in the physical manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardLocation {
    pub ordinal: u64,
    pub container_id: String,
    pub position: u64,
    pub group_id: GroupRef,
}

impl DrawSequence {
    pub fn new(seed: impl Into<String>) -> Self {
        DrawSequence {
            seed: seed.into(),
            counter: 0,
            drawn: BTreeSet::new(),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.as_bytes());
        h.update(b",");
        h.update(self.counter.to_string().as_bytes());
        let digest = h.finalize();
        self.counter += 1;
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(head)
    }

    /// Uniform integer in `[0, n)` without modulo bias.
    pub fn next_below(&mut self, n: u64) -> Result<u64> {
        if n == 0 {
            return Err(AuditError::Exhausted);
        }
        let zone = (1u128 << 64) / n as u128 * n as u128;
        loop {
            let v = self.next_u64();
            if (v as u128) < zone {
                return Ok(v % n);
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Draws an ordinal in `[1, total]` that has not been drawn before.
    pub fn next_uniform(&mut self, total: u64) -> Result<u64> {
        let remaining = total.saturating_sub(self.drawn.len() as u64);
        let k = self.next_below(remaining)?;
        // k-th (0-based) undrawn ordinal
        let mut ordinal = k + 1;
        for &d in &self.drawn {
            if d <= ordinal {
                ordinal += 1;
            } else {
                break;
            }
        }
        self.drawn.insert(ordinal);
        Ok(ordinal)
    }

    /// Draws a batch with probability proportional to its error bound, with
    /// replacement. Batches are ordered by id.
    pub fn next_ppeb<'a>(&mut self, bounds: &'a BTreeMap<String, f64>) -> Result<&'a str> {
        if bounds.values().any(|&b| b < 0.0 || !b.is_finite()) {
            return Err(AuditError::invalid(
                "error bounds",
                "bounds must be finite and non-negative",
            ));
        }
        let total: f64 = bounds.values().sum();
        if total <= 0.0 {
            return Err(AuditError::AllZeroBounds);
        }
        let target = self.next_unit() * total;
        let mut cumulative = 0.0;
        let mut last = None;
        for (id, &b) in bounds {
            if b == 0.0 {
                continue;
            }
            cumulative += b;
            last = Some(id.as_str());
            if target < cumulative {
                return Ok(id);
            }
        }
        // rounding at the top end
        Ok(last.expect("some bound is positive"))
    }
}

/// Maps a 1-based ordinal to its container, in lexicographic container order.
pub fn locate(manifest: &BallotManifest, ordinal: u64) -> Result<CardLocation> {
    let total = manifest.total_cards();
    if ordinal == 0 || ordinal > total {
        return Err(AuditError::OutOfRange { ordinal, total });
    }
    let mut before = 0u64;
    for entry in manifest.ordered() {
        if ordinal <= before + entry.card_count {
            return Ok(CardLocation {
                ordinal,
                container_id: entry.container_id.clone(),
                position: ordinal - before,
                group_id: entry.group_id.clone(),
            });
        }
        before += entry.card_count;
    }
    unreachable!("ordinal checked against total")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn single_remaining_ordinal() {
        for seed in ["a", "b", "20230319"] {
            let mut s = DrawSequence::new(seed);
            s.drawn.extend([1, 2, 4]);
            assert_eq!(s.next_uniform(4).unwrap(), 3);
            assert_eq!(s.next_uniform(4).unwrap_err().code(), "EXHAUSTED");
        }
    }

    #[test]
    fn enumerates_every_ordinal() {
        let mut s = DrawSequence::new("enumerate");
        let n = 300;
        let got: BTreeSet<u64> = (0..n).map(|_| s.next_uniform(n).unwrap()).collect();
        assert_eq!(got, (1..=n).collect());
    }

    #[test]
    fn counter_advances_per_hash() {
        let mut s = DrawSequence::new("x");
        s.next_u64();
        s.next_u64();
        assert_eq!(s.counter, 2);
        let mut a = DrawSequence::new("x");
        a.counter = 1;
        let mut b = DrawSequence::new("x");
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn locate_alice_bob_layout() {
        let f = fixtures::alice_bob(900, 100);
        let first = locate(&f.manifest, 1).unwrap();
        assert_eq!(
            (first.container_id.as_str(), first.position),
            ("mail-01", 1)
        );
        assert_eq!(first.group_id, GroupRef::Linked);
        let p1 = locate(&f.manifest, 10_001).unwrap();
        assert_eq!(p1.container_id, "precinct-01");
        assert_eq!(p1.position, 1);
        assert_eq!(p1.group_id, GroupRef::Group("precinct-01".into()));
        let last = locate(&f.manifest, 20_000).unwrap();
        assert_eq!(
            (last.container_id.as_str(), last.position),
            ("precinct-10", 1000)
        );
        assert_eq!(locate(&f.manifest, 0).unwrap_err().code(), "OUT_OF_RANGE");
        assert_eq!(
            locate(&f.manifest, 20_001).unwrap_err().code(),
            "OUT_OF_RANGE"
        );
    }

    #[test]
    fn ppeb_edge_cases() {
        let mut s = DrawSequence::new("ppeb");
        let one: BTreeMap<String, f64> = [("only".to_string(), 2.5)].into();
        assert_eq!(s.next_ppeb(&one).unwrap(), "only");
        let zeros: BTreeMap<String, f64> = [("a".to_string(), 0.0)].into();
        assert_eq!(s.next_ppeb(&zeros).unwrap_err().code(), "ALL_ZERO_BOUNDS");
        let mixed: BTreeMap<String, f64> = [
            ("a".to_string(), 0.0),
            ("b".to_string(), 1.0),
            ("c".to_string(), 0.0),
        ]
        .into();
        for _ in 0..1000 {
            assert_eq!(s.next_ppeb(&mixed).unwrap(), "b");
        }
    }
}
