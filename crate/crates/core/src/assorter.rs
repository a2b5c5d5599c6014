//! Assorter algebra for pairwise plurality assertions.
//!
//! An assorter maps a card to `[0, u]`; the assertion is that its mean over the
//! true votes exceeds 1/2. Comparison audits test the equivalent claim about the
//! overstatement assorter `B = (u + A(mvr) - A(cvr)) / (2u - v)`, where `v` is the
//! reported assorter margin and `A(cvr)` may be a group mean rather than a
//! single card's value.

use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::election::{CardRecord, Contest, ReportedResults};
use crate::error::{AuditError, Result};
use crate::Rational;

pub fn half() -> Rational {
    Rational::new(1, 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssorterSpec {
    pub contest_id: String,
    pub winner: String,
    pub loser: String,
    #[serde(with = "crate::rational_serde")]
    pub upper: Rational,
}

impl AssorterSpec {
    pub fn plurality(contest_id: &str, winner: &str, loser: &str) -> Result<Self> {
        if winner == loser {
            return Err(AuditError::invalid("assorter", "winner equals loser"));
        }
        Ok(AssorterSpec {
            contest_id: contest_id.to_owned(),
            winner: winner.to_owned(),
            loser: loser.to_owned(),
            upper: Rational::one(),
        })
    }

    /// Value assigned to a card whose vote (in this contest) is `vote`.
    pub fn score(&self, vote: Option<&str>) -> Rational {
        match vote {
            Some(c) if c == self.winner => self.upper,
            Some(c) if c == self.loser => Rational::zero(),
            _ => self.upper * half(),
        }
    }

    /// Sum of assorter values implied by a tally over `cards` cards.
    pub fn score_tally(&self, winner_votes: u64, loser_votes: u64, cards: u64) -> Rational {
        let other = cards - winner_votes - loser_votes;
        self.upper * Rational::from_integer(winner_votes as i128)
            + self.upper * half() * Rational::from_integer(other as i128)
    }
}

/// Assorter value of a card: winner 1, loser 0, anything else (other candidate,
/// NO_VOTE, contest missing) 1/2, scaled by `u`.
pub fn assort(spec: &AssorterSpec, card: &CardRecord) -> Rational {
    spec.score(card.vote(&spec.contest_id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub id: String,
    pub assorter: AssorterSpec,
    #[serde(with = "crate::rational_serde")]
    pub reported_mean: Rational,
    #[serde(with = "crate::rational_serde")]
    pub margin: Rational,
}

impl Assertion {
    pub fn new(assorter: AssorterSpec, results: &ReportedResults) -> Result<Self> {
        let id = format!(
            "{}:{}>{}",
            assorter.contest_id, assorter.winner, assorter.loser
        );
        let (reported_mean, margin) = assorter_mean_and_margin(&assorter, results)?;
        Ok(Assertion {
            id,
            assorter,
            reported_mean,
            margin,
        })
    }

    /// One assertion per (reported winner, other candidate) pair.
    pub fn for_contest(contest: &Contest, results: &ReportedResults) -> Result<Vec<Self>> {
        contest
            .reported_losers()
            .map(|loser| {
                let spec = AssorterSpec::plurality(&contest.id, &contest.reported_winner, loser)?;
                Assertion::new(spec, results)
            })
            .collect()
    }

    pub fn overstatement(&self) -> OverstatementAssorter {
        OverstatementAssorter {
            upper: self.assorter.upper,
            margin: self.margin,
        }
    }
}

/// Reported assorter mean and margin computed from the linked CVRs and the
/// group tallies.
pub fn assorter_mean_and_margin(
    spec: &AssorterSpec,
    results: &ReportedResults,
) -> Result<(Rational, Rational)> {
    let cards = results.cards();
    if cards == 0 {
        return Err(AuditError::invalid("results", "no cards"));
    }
    let mut total: Rational = results.linked_cvrs.iter().map(|c| assort(spec, c)).sum();
    for g in &results.group_subtotals {
        total += spec.score_tally(g.count(&spec.winner), g.count(&spec.loser), g.cards);
    }
    let mean = total / Rational::from_integer(cards as i128);
    let margin = mean * 2 - Rational::one();
    if !margin.is_positive() {
        return Err(AuditError::NonpositiveMargin {
            assertion: format!("{}:{}>{}", spec.contest_id, spec.winner, spec.loser),
            margin: margin.to_string(),
        });
    }
    Ok((mean, margin))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverstatementAssorter {
    #[serde(with = "crate::rational_serde")]
    pub upper: Rational,
    #[serde(with = "crate::rational_serde")]
    pub margin: Rational,
}

impl OverstatementAssorter {
    /// `2u / (2u - v)`
    pub fn upper_bound(&self) -> Rational {
        self.upper * 2 / (self.upper * 2 - self.margin)
    }

    pub fn value(&self, mvr_assort: Rational, cvr_assort: Rational) -> Rational {
        overstatement_value(self.upper, self.margin, mvr_assort, cvr_assort)
    }

    /// Mean of `B` when every MVR matches its CVR: `u / (2u - v)`.
    pub fn reported_correct_mean(&self) -> Rational {
        self.upper / (self.upper * 2 - self.margin)
    }
}

/// `(u + mvr - cvr) / (2u - v)`
pub fn overstatement_value(
    upper: Rational,
    margin: Rational,
    mvr_assort: Rational,
    cvr_assort: Rational,
) -> Rational {
    (upper + mvr_assort - cvr_assort) / (upper * 2 - margin)
}

/// Possible overstatement-assorter values when the ONE CVR of every card is the
/// contest-level mean `(v+1)/2`, ascending.
pub fn overstatement_support(margin: Rational, upper: Rational) -> [Rational; 3] {
    let cvr = (margin + Rational::one()) / 2;
    [Rational::zero(), upper * half(), upper].map(|a| overstatement_value(upper, margin, a, cvr))
}

/// Undo the contest-level ONE transformation: shift by the smallest support
/// point, rescale so the null mean is 1/2 again. Returns the original assorter
/// value exactly.
pub fn affine_recover(b_value: Rational, margin: Rational, upper: Rational) -> Rational {
    let low = (upper - (margin + Rational::one()) / 2) / (upper * 2 - margin);
    half() / (half() - low) * (b_value - low)
}

/// Overstatement as a fraction of its largest possible value.
pub fn taint(overstatement: Rational, max_overstatement: Rational) -> Result<Rational> {
    if max_overstatement.is_zero() {
        return Err(AuditError::DivisionByZeroBound);
    }
    let t = overstatement / max_overstatement;
    if t > Rational::one() {
        return Err(AuditError::Domain {
            value: t.to_string(),
            upper: "1".into(),
        });
    }
    Ok(t)
}

pub fn to_f64(r: Rational) -> f64 {
    r.to_f64().expect("finite rational")
}
