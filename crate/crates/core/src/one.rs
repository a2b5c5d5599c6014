//! ONE layouts: the comparison value for every card in the audit.
//!
//! Linked cards are compared with their own CVR. Every card in a reporting
//! group is compared with the group's mean reported assorter value, which keeps
//! the overall reported assorter total, and so the net overstatement, unchanged.

use std::collections::BTreeMap;

use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::assorter::{assort, half, Assertion, OverstatementAssorter};
use crate::election::{BallotManifest, GroupRef, ReportedResults};
use crate::error::{AuditError, Result};
use crate::Rational;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneLayout {
    pub assertion_id: String,
    pub cards_total: u64,
    #[serde(with = "rational_map")]
    pub linked: BTreeMap<String, Rational>,
    #[serde(with = "rational_map")]
    pub group_means: BTreeMap<String, Rational>,
    pub group_sizes: BTreeMap<String, u64>,
}

pub fn build_one_layout(
    assertion: &Assertion,
    results: &ReportedResults,
    manifest: &BallotManifest,
) -> Result<OneLayout> {
    if !assertion.margin.is_positive() {
        return Err(AuditError::NonpositiveMargin {
            assertion: assertion.id.clone(),
            margin: assertion.margin.to_string(),
        });
    }
    let spec = &assertion.assorter;
    let linked = results
        .linked_cvrs
        .iter()
        .map(|c| (c.card_id.clone(), assort(spec, c)))
        .collect();
    let mut group_means = BTreeMap::new();
    let mut group_sizes = BTreeMap::new();
    for g in &results.group_subtotals {
        let total = spec.score_tally(g.count(&spec.winner), g.count(&spec.loser), g.cards);
        group_means.insert(
            g.group_id.clone(),
            total / Rational::from_integer(g.cards as i128),
        );
        group_sizes.insert(g.group_id.clone(), g.cards);
    }
    for e in &manifest.entries {
        if let GroupRef::Group(id) = &e.group_id {
            if !group_means.contains_key(id) {
                return Err(AuditError::UnknownGroup(id.clone()));
            }
        }
    }
    Ok(OneLayout {
        assertion_id: assertion.id.clone(),
        cards_total: results.cards(),
        linked,
        group_means,
        group_sizes,
    })
}

impl OneLayout {
    /// CVR assorter value to compare a drawn card against.
    pub fn comparison_value(&self, card_id: &str, group: &GroupRef) -> Result<Rational> {
        match group {
            GroupRef::Linked => self
                .linked
                .get(card_id)
                .copied()
                .ok_or_else(|| AuditError::UnknownCard(card_id.to_owned())),
            GroupRef::Group(id) => self
                .group_means
                .get(id)
                .copied()
                .ok_or_else(|| AuditError::UnknownGroup(id.clone())),
        }
    }

    /// Mean comparison value over all cards; equals the reported assorter mean.
    pub fn reported_mean(&self) -> Rational {
        let linked: Rational = self.linked.values().copied().sum();
        let grouped: Rational = self
            .group_means
            .iter()
            .map(|(g, m)| *m * Rational::from_integer(self.group_sizes[g] as i128))
            .sum();
        (linked + grouped) / Rational::from_integer(self.cards_total as i128)
    }

    /// Smallest overstatement-assorter value any card could produce (MVR scored 0).
    pub fn min_overstatement(&self, b: &OverstatementAssorter) -> Rational {
        self.linked
            .values()
            .chain(self.group_means.values())
            .map(|cvr| b.value(Rational::zero(), *cvr))
            .min()
            .unwrap_or_else(Rational::zero)
    }

    pub fn translation(&self, b: &OverstatementAssorter) -> AffineTranslation {
        AffineTranslation::new(self.min_overstatement(b), b.upper_bound())
    }
}

/// Shift overstatement values so the smallest possible value is 0, then
/// rescale so the null mean stays 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineTranslation {
    #[serde(with = "crate::rational_serde")]
    pub low: Rational,
    #[serde(with = "crate::rational_serde")]
    pub upper: Rational,
}

impl AffineTranslation {
    pub fn identity(upper: Rational) -> Self {
        AffineTranslation {
            low: Rational::zero(),
            upper,
        }
    }

    fn new(low: Rational, upper_b: Rational) -> Self {
        let scale = half() / (half() - low);
        AffineTranslation {
            low,
            upper: (upper_b - low) * scale,
        }
    }

    pub fn apply(&self, x: Rational) -> Rational {
        (x - self.low) * (half() / (half() - self.low))
    }

    pub fn is_identity(&self) -> bool {
        self.low.is_zero()
    }
}

/// Net overstatement of the margin in the two-candidate ±1/0 encoding.
pub fn net_overstatement(cvrs: &[i8], truth: &[i8]) -> Result<i64> {
    if cvrs.len() != truth.len() {
        return Err(AuditError::LengthMismatch {
            what: "cvr/truth",
            left: cvrs.len(),
            right: truth.len(),
        });
    }
    Ok(cvrs
        .iter()
        .zip(truth)
        .map(|(c, b)| i64::from(*c) - i64::from(*b))
        .sum())
}

/// True when every comparison value lies in `[0, u]`.
pub fn values_in_range(layout: &OneLayout, upper: Rational) -> bool {
    layout
        .linked
        .values()
        .chain(layout.group_means.values())
        .all(|v| *v >= Rational::zero() && *v <= upper)
}

mod rational_map {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    use crate::Rational;

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<String, Rational>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let as_str: BTreeMap<&str, String> =
            m.iter().map(|(k, v)| (k.as_str(), v.to_string())).collect();
        as_str.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<String, Rational>, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                crate::rational_serde::parse(&v)
                    .map(|r| (k, r))
                    .map_err(D::Error::custom)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assorter::{affine_recover, overstatement_support, AssorterSpec};
    use crate::election::{CardRecord, GroupSubtotal, ManifestEntry};
    use crate::fixtures::{alice_bob, CONTEST_ID};
    use crate::rat;

    fn layout_for(major: u64, minor: u64) -> (Assertion, OneLayout) {
        let f = alice_bob(major, minor);
        let a = Assertion::for_contest(&f.contest, &f.results)
            .unwrap()
            .remove(0);
        let l = build_one_layout(&a, &f.results, &f.manifest).unwrap();
        (a, l)
    }

    #[test]
    fn group_means_match_summation() {
        let (a, l) = layout_for(900, 100);
        // summation oracle over the 1000 cards of a 900/100 group
        let oracle: Rational = (0..1000)
            .map(|i| if i < 900 { rat(1, 1) } else { rat(0, 1) })
            .sum::<Rational>()
            / rat(1000, 1);
        assert_eq!(l.group_means["precinct-01"], oracle);
        assert_eq!(oracle, rat(9, 10));
        assert_eq!(l.group_means["precinct-07"], rat(1, 10));
        assert_eq!(l.reported_mean(), a.reported_mean);
        // the ±1 encoding of the same group is 2*0.9 - 1 = 0.8
        assert_eq!(oracle * 2 - rat(1, 1), rat(4, 5));
    }

    #[test]
    fn comparison_values() {
        let (_, l) = layout_for(900, 100);
        assert_eq!(
            l.comparison_value("mail-01-0001", &GroupRef::Linked)
                .unwrap(),
            rat(1, 1)
        );
        assert_eq!(
            l.comparison_value("x", &GroupRef::Group("precinct-02".into()))
                .unwrap(),
            rat(9, 10)
        );
        assert_eq!(
            l.comparison_value("x", &GroupRef::Group("precinct-09".into()))
                .unwrap(),
            rat(1, 10)
        );
        assert_eq!(
            l.comparison_value("nope", &GroupRef::Linked)
                .unwrap_err()
                .code(),
            "UNKNOWN_CARD"
        );
        assert_eq!(
            l.comparison_value("x", &GroupRef::Group("nope".into()))
                .unwrap_err()
                .code(),
            "UNKNOWN_GROUP"
        );
    }

    fn single_group() -> (Assertion, OneLayout) {
        let g = GroupSubtotal::new("all", 100, &[("Alice", 55), ("Bob", 40)]);
        let results = ReportedResults::from_parts(CONTEST_ID, vec![], vec![g]);
        let manifest = BallotManifest::new(vec![ManifestEntry {
            container_id: "box".into(),
            card_count: 100,
            group_id: GroupRef::Group("all".into()),
        }])
        .unwrap();
        let spec = AssorterSpec::plurality(CONTEST_ID, "Alice", "Bob").unwrap();
        let a = Assertion::new(spec, &results).unwrap();
        let l = build_one_layout(&a, &results, &manifest).unwrap();
        (a, l)
    }

    #[test]
    fn single_group_mean_is_contest_mean() {
        let (a, l) = single_group();
        assert_eq!(l.group_means["all"], a.reported_mean);
        assert_eq!(l.group_means["all"], (a.margin + 1) / 2);
    }

    #[test]
    fn single_group_stream_is_affine_image_of_raw() {
        let (a, l) = single_group();
        let b = a.overstatement();
        let cvr = l.group_means["all"];
        let support = overstatement_support(a.margin, a.assorter.upper);
        for (raw, expect) in [rat(0, 1), rat(1, 2), rat(1, 1)].into_iter().zip(support) {
            let x = b.value(raw, cvr);
            assert_eq!(x, expect);
            assert_eq!(affine_recover(x, a.margin, a.assorter.upper), raw);
        }
        // the generic translation is exactly the recovery map here
        let t = l.translation(&b);
        assert_eq!(t.apply(support[2]), rat(1, 1));
        assert_eq!(
            t.upper,
            rat(1, 1) / (rat(1, 2) - support[0]) * rat(1, 2) * (b.upper_bound() - support[0])
        );
    }

    #[test]
    fn all_linked_layout() {
        let cvrs = vec![
            CardRecord::new("a").with_vote(CONTEST_ID, Some("Alice")),
            CardRecord::new("b").with_vote(CONTEST_ID, None),
        ];
        let results = ReportedResults::from_parts(CONTEST_ID, cvrs, vec![]);
        let manifest = BallotManifest::new(vec![ManifestEntry {
            container_id: "t".into(),
            card_count: 2,
            group_id: GroupRef::Linked,
        }])
        .unwrap();
        let spec = AssorterSpec::plurality(CONTEST_ID, "Alice", "Bob").unwrap();
        let a = Assertion::new(spec, &results).unwrap();
        let l = build_one_layout(&a, &results, &manifest).unwrap();
        assert!(l.group_means.is_empty());
        assert_eq!(l.reported_mean(), rat(3, 4));
        assert!(values_in_range(&l, rat(1, 1)));
    }

    #[test]
    fn translation_is_identity_with_linked_winner_cards() {
        let (a, l) = layout_for(900, 100);
        assert!(l.translation(&a.overstatement()).is_identity());
    }

    #[test]
    fn net_overstatement_examples() {
        assert_eq!(net_overstatement(&[1, -1, 0], &[1, -1, 0]).unwrap(), 0);
        assert_eq!(net_overstatement(&[1], &[-1]).unwrap(), 2);
        assert_eq!(
            net_overstatement(&[1, -1, 0], &[1, 0, 0]).unwrap(),
            net_overstatement(&[0, 1, -1], &[1, 0, 0]).unwrap()
        );
        assert_eq!(
            net_overstatement(&[1], &[]).unwrap_err().code(),
            "LENGTH_MISMATCH"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Reported assorter total is preserved exactly by the group means.
            #[test]
            fn layout_identity(
                linked in proptest::collection::vec(0u8..3, 0..20),
                groups in proptest::collection::vec((0u64..15, 0u64..15, 0u64..6), 1..6),
            ) {
                let vote = |k: u8| match k { 0 => Some("Alice"), 1 => Some("Bob"), _ => None };
                let cvrs: Vec<_> = linked.iter().enumerate()
                    .map(|(i, k)| CardRecord::new(format!("c{i}")).with_vote(CONTEST_ID, vote(*k)))
                    .collect();
                let subtotals: Vec<_> = groups.iter().enumerate()
                    .map(|(i, (w, l, o))| GroupSubtotal::new(format!("g{i}"), (w + l + o).max(1), &[("Alice", *w), ("Bob", *l)]))
                    .collect();
                let results = ReportedResults::from_parts(CONTEST_ID, cvrs, subtotals.clone());
                let mut entries = vec![];
                if !linked.is_empty() {
                    entries.push(ManifestEntry { container_id: "L".into(), card_count: linked.len() as u64, group_id: GroupRef::Linked });
                }
                for g in &subtotals {
                    entries.push(ManifestEntry { container_id: g.group_id.clone(), card_count: g.cards, group_id: GroupRef::Group(g.group_id.clone()) });
                }
                let manifest = BallotManifest::new(entries).unwrap();
                let spec = AssorterSpec::plurality(CONTEST_ID, "Alice", "Bob").unwrap();
                let Ok(a) = Assertion::new(spec, &results) else { return Ok(()); };
                let l = build_one_layout(&a, &results, &manifest).unwrap();
                prop_assert_eq!(l.reported_mean(), a.reported_mean);
            }
        }
    }
}
