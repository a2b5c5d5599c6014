//! Monte Carlo workloads.
//!
//! Each replication draws cards (or batches) from an explicit population of
//! true card values with its own ChaCha stream, seeded from
//! `SHA-256(base ‖ "," ‖ rep)`, so any single replication can be rerun alone.
//! Replications run in parallel with rayon. An audit that never stops counts
//! as a full hand count of all `N` cards.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::ToPrimitive;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assorter::half;
use crate::error::{AuditError, Result};
use crate::risk::{AlphaConfig, Estimator, KmState, MeasuredRisk, PollVote, RiskState, SprtState};
use crate::{rat, Rational};

pub const MIN_REPS: usize = 100;

pub fn rep_rng(base: u64, rep: u64) -> ChaCha20Rng {
    let digest = Sha256::digest(format!("{base},{rep}").as_bytes());
    ChaCha20Rng::from_seed(digest.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub reps: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q90: f64,
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

impl SampleStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        SampleStats {
            reps: n,
            mean,
            sd: var.sqrt(),
            median: quantile(&sorted, 0.5),
            q90: quantile(&sorted, 0.9),
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.sd / (self.reps as f64).sqrt()
    }
}

/// One ALPHA test run against a column of true overstatement values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTest {
    pub estimator: Estimator,
    pub upper: f64,
}

/// Draws cards without replacement until every test's measured risk is at or
/// below `alpha`. Returns the number of cards examined.
pub fn alpha_stopping_size<R: Rng>(
    columns: &[Vec<f64>],
    tests: &[AlphaTest],
    alpha: f64,
    rng: &mut R,
) -> Result<u64> {
    let n = columns.first().map(Vec::len).unwrap_or(0);
    let mut states = tests
        .iter()
        .map(|t| RiskState::new(t.estimator, n as u64, t.upper))
        .collect::<Result<Vec<_>>>()?;
    let mut open: Vec<usize> = (0..states.len()).collect();
    let mut order: Vec<u32> = (0..n as u32).collect();
    for j in 0..n {
        let k = rng.random_range(j..n);
        order.swap(j, k);
        let card = order[j] as usize;
        open.retain(|&a| {
            let s = &mut states[a];
            s.update(columns[a][card])
                .expect("population values lie in [0, u]");
            s.measured_risk() > alpha
        });
        if open.is_empty() {
            return Ok(j as u64 + 1);
        }
    }
    Ok(n as u64)
}

/// Ballot-polling SPRT on a population of votes, without replacement.
pub fn sprt_stopping_size<R: Rng>(
    votes: &[PollVote],
    theta: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<u64> {
    let n = votes.len();
    let mut state = SprtState::new(theta)?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    for j in 0..n {
        let k = rng.random_range(j..n);
        order.swap(j, k);
        state.update(votes[order[j] as usize]);
        if state.measured_risk() <= alpha {
            return Ok(j as u64 + 1);
        }
    }
    Ok(n as u64)
}

/// A batch for Kaplan-Markov PPEB audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Batch {
    pub cards: u64,
    /// Largest possible overstatement as a fraction of the assorter margin total.
    pub error_bound: f64,
    pub taint: f64,
}

/// Draws batches with probability proportional to error bound, with
/// replacement, until the Kaplan-Markov P-value is at or below `alpha`.
/// Returns the number of distinct cards examined; a taint of one, or a draw
/// budget running out, escalates to all cards.
pub fn km_stopping_size<R: Rng>(batches: &[Batch], alpha: f64, rng: &mut R) -> Result<u64> {
    let total_cards: u64 = batches.iter().map(|b| b.cards).sum();
    let weights: Vec<f64> = batches.iter().map(|b| b.error_bound).collect();
    let total_bound: f64 = weights.iter().sum();
    let dist = WeightedIndex::new(&weights).map_err(|_| AuditError::AllZeroBounds)?;
    let mut km = KmState::new(total_bound)?;
    let mut seen = BTreeSet::new();
    let mut workload = 0u64;
    let budget = 20 * batches.len() + 1_000;
    for _ in 0..budget {
        let b = dist.sample(rng);
        if seen.insert(b) {
            workload += batches[b].cards;
        }
        match km.update(batches[b].taint) {
            Ok(()) => {}
            Err(AuditError::TaintAtOne) => return Ok(total_cards),
            Err(e) => return Err(e),
        }
        if km.p_value() <= alpha {
            return Ok(workload);
        }
        if workload == total_cards {
            break;
        }
    }
    Ok(total_cards)
}

/// Reported votes in one block of cards. Cards not for the winner or the
/// loser are `other` (blank, invalid or a third candidate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VoteBlock {
    pub winner: u64,
    pub loser: u64,
    #[serde(default)]
    pub other: u64,
}

impl VoteBlock {
    pub fn new(winner: u64, loser: u64, other: u64) -> Self {
        VoteBlock {
            winner,
            loser,
            other,
        }
    }

    pub fn cards(&self) -> u64 {
        self.winner + self.loser + self.other
    }

    fn assorter_total(&self) -> Rational {
        Rational::from_integer(self.winner as i128) + half() * (self.other as i128)
    }
}

/// A two-candidate contest: a block of linked CVRs and any number of groups
/// reported only as subtotals.
///
/// `flips[i]` winner votes in block `i` (0 = linked, then the groups in order)
/// were really loser votes; the default is reported-correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub linked: VoteBlock,
    #[serde(default)]
    pub groups: Vec<VoteBlock>,
    #[serde(default)]
    pub flips: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Card-level comparison against ONE CVRs for the groups.
    OneClca,
    /// Card-level comparison as if every card had its own CVR.
    Clca,
    /// Ballot polling with Wald's SPRT.
    Bpa,
    /// Batch-level comparison with Kaplan-Markov and PPEB.
    Blca,
}

impl Method {
    pub fn parse(raw: &str) -> Result<Self> {
        match raw.to_ascii_lowercase().replace('-', "_").as_str() {
            "one_clca" | "one" => Ok(Method::OneClca),
            "clca" => Ok(Method::Clca),
            "bpa" => Ok(Method::Bpa),
            "blca" | "km" => Ok(Method::Blca),
            _ => Err(AuditError::invalid(
                "method",
                format!("{raw:?}; expected one_clca, clca, bpa or blca"),
            )),
        }
    }
}

impl Scenario {
    pub fn alice_bob(major: u64, minor: u64) -> Self {
        let mut groups = vec![VoteBlock::new(major, minor, 1_000 - major - minor); 5];
        groups.extend(vec![VoteBlock::new(minor, major, 1_000 - major - minor); 5]);
        Scenario {
            linked: VoteBlock::new(5_000, 4_000, 1_000),
            groups,
            flips: Vec::new(),
        }
    }

    /// Many nearly homogeneous batches: `batches` groups of `size` cards, the
    /// first `winner_batches` holding `purity` winner votes out of `size`, the
    /// rest the mirror image.
    pub fn polarized(batches: u64, size: u64, winner_batches: u64, purity: u64) -> Self {
        let groups = (0..batches)
            .map(|i| {
                if i < winner_batches {
                    VoteBlock::new(purity, size - purity, 0)
                } else {
                    VoteBlock::new(size - purity, purity, 0)
                }
            })
            .collect();
        Scenario {
            linked: VoteBlock::default(),
            groups,
            flips: Vec::new(),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &VoteBlock> {
        std::iter::once(&self.linked).chain(&self.groups)
    }

    fn flip(&self, i: usize) -> u64 {
        self.flips.get(i).copied().unwrap_or(0)
    }

    pub fn cards(&self) -> u64 {
        self.blocks().map(VoteBlock::cards).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cards() == 0 {
            return Err(AuditError::invalid("scenario", "no cards"));
        }
        if self.flips.len() > self.groups.len() + 1 {
            return Err(AuditError::invalid("scenario", "more flips than blocks"));
        }
        for (i, b) in self.blocks().enumerate() {
            if self.flip(i) > b.winner {
                return Err(AuditError::invalid(
                    "scenario",
                    format!("block {i} flips more winner votes than it has"),
                ));
            }
        }
        self.margin().map(|_| ())
    }

    pub fn reported_mean(&self) -> Rational {
        let total: Rational = self.blocks().map(VoteBlock::assorter_total).sum();
        total / Rational::from_integer(self.cards() as i128)
    }

    pub fn margin(&self) -> Result<Rational> {
        let v = self.reported_mean() * 2 - Rational::from_integer(1);
        if v <= Rational::from_integer(0) {
            return Err(AuditError::NonpositiveMargin {
                assertion: "scenario".into(),
                margin: v.to_string(),
            });
        }
        Ok(v)
    }

    /// Flips just enough winner votes, spread over blocks in proportion to
    /// their winner votes, that the reported loser ties or wins.
    pub fn with_wrong_outcome(&self) -> Self {
        let w: u64 = self.blocks().map(|b| b.winner).sum();
        let l: u64 = self.blocks().map(|b| b.loser).sum();
        let needed = w.saturating_sub(l).div_ceil(2);
        let mut flips: Vec<u64> = self
            .blocks()
            .map(|b| b.winner * needed / w.max(1))
            .collect();
        let mut short = needed - flips.iter().sum::<u64>();
        for (i, b) in self.blocks().enumerate() {
            let room = b.winner - flips[i];
            let extra = room.min(short);
            flips[i] += extra;
            short -= extra;
        }
        Scenario {
            flips,
            ..self.clone()
        }
    }

    fn true_votes(&self) -> Vec<PollVote> {
        let mut votes = Vec::with_capacity(self.cards() as usize);
        for (i, b) in self.blocks().enumerate() {
            let f = self.flip(i);
            votes.extend(std::iter::repeat_n(
                PollVote::Winner,
                (b.winner - f) as usize,
            ));
            votes.extend(std::iter::repeat_n(PollVote::Loser, (b.loser + f) as usize));
            votes.extend(std::iter::repeat_n(PollVote::Other, b.other as usize));
        }
        votes
    }

    /// Overstatement-assorter value of every card. With `one_cvrs` the group
    /// cards are compared to their group mean, otherwise to their own CVR.
    pub fn overstatement_values(&self, one_cvrs: bool) -> Result<Vec<f64>> {
        let v = self.margin()?;
        let denom = Rational::from_integer(2) - v;
        let b = |mvr: Rational, cvr: Rational| -> f64 {
            ((Rational::from_integer(1) + mvr - cvr) / denom)
                .to_f64()
                .expect("finite")
        };
        let (one, zero, h) = (Rational::from_integer(1), Rational::from_integer(0), half());
        let mut out = Vec::with_capacity(self.cards() as usize);
        for (i, blk) in self.blocks().enumerate() {
            let f = self.flip(i) as usize;
            let (w, l, o) = (blk.winner as usize, blk.loser as usize, blk.other as usize);
            if i > 0 && one_cvrs {
                let g = blk.assorter_total() / Rational::from_integer(blk.cards() as i128);
                out.extend(std::iter::repeat_n(b(one, g), w - f));
                out.extend(std::iter::repeat_n(b(zero, g), l + f));
                out.extend(std::iter::repeat_n(b(h, g), o));
            } else {
                out.extend(std::iter::repeat_n(b(one, one), w - f));
                out.extend(std::iter::repeat_n(b(zero, one), f));
                out.extend(std::iter::repeat_n(b(zero, zero), l));
                out.extend(std::iter::repeat_n(b(h, h), o));
            }
        }
        Ok(out)
    }

    /// Linked cards become batches of one; each group is one batch.
    pub fn batches(&self) -> Result<Vec<Batch>> {
        let v = self.margin()?.to_f64().expect("finite");
        let scale = self.cards() as f64 * v / 2.0;
        let mut out = Vec::new();
        let single = |reported: f64, truth: f64| Batch {
            cards: 1,
            error_bound: reported / scale,
            taint: if reported > 0.0 {
                (reported - truth) / reported
            } else {
                0.0
            },
        };
        let l = self.linked;
        let f = self.flip(0) as usize;
        out.extend(std::iter::repeat_n(single(1.0, 1.0), l.winner as usize - f));
        out.extend(std::iter::repeat_n(single(1.0, 0.0), f));
        out.extend(std::iter::repeat_n(single(0.0, 0.0), l.loser as usize));
        out.extend(std::iter::repeat_n(single(0.5, 0.5), l.other as usize));
        for (i, g) in self.groups.iter().enumerate() {
            let reported = g.assorter_total().to_f64().expect("finite");
            let truth = reported - self.flip(i + 1) as f64;
            out.push(Batch {
                cards: g.cards(),
                error_bound: reported / scale,
                taint: if reported > 0.0 {
                    (reported - truth) / reported
                } else {
                    0.0
                },
            });
        }
        Ok(out.into_iter().filter(|b| b.cards > 0).collect())
    }

    fn sprt_theta(&self) -> f64 {
        let w: u64 = self.blocks().map(|b| b.winner).sum();
        let l: u64 = self.blocks().map(|b| b.loser).sum();
        w as f64 / (w + l) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub method: Method,
    pub alpha: f64,
    pub cards: u64,
    pub stats: SampleStats,
    /// Fraction of replications that stopped before a full hand count.
    pub confirmed_rate: f64,
}

pub fn run_expected_sample_size(
    scenario: &Scenario,
    method: Method,
    config: &AlphaConfig,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<SimulationReport> {
    if reps < MIN_REPS {
        return Err(AuditError::invalid(
            "replications",
            format!("{reps} is fewer than {MIN_REPS}"),
        ));
    }
    scenario.validate()?;
    let n = scenario.cards();
    let sizes: Vec<u64> = match method {
        Method::OneClca | Method::Clca => {
            let values = scenario.overstatement_values(method == Method::OneClca)?;
            let v = scenario.margin()?.to_f64().expect("finite");
            let upper = 2.0 / (2.0 - v);
            let columns = vec![values];
            let tests = [AlphaTest {
                estimator: config.estimator(upper),
                upper,
            }];
            (0..reps as u64)
                .into_par_iter()
                .map(|r| alpha_stopping_size(&columns, &tests, alpha, &mut rep_rng(seed, r)))
                .collect::<Result<_>>()?
        }
        Method::Bpa => {
            let votes = scenario.true_votes();
            let theta = scenario.sprt_theta();
            (0..reps as u64)
                .into_par_iter()
                .map(|r| sprt_stopping_size(&votes, theta, alpha, &mut rep_rng(seed, r)))
                .collect::<Result<_>>()?
        }
        Method::Blca => {
            let batches = scenario.batches()?;
            (0..reps as u64)
                .into_par_iter()
                .map(|r| km_stopping_size(&batches, alpha, &mut rep_rng(seed, r)))
                .collect::<Result<_>>()?
        }
    };
    let confirmed = sizes.iter().filter(|&&s| s < n).count();
    let as_f64: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    Ok(SimulationReport {
        method,
        alpha,
        cards: n,
        stats: SampleStats::from_samples(&as_f64),
        confirmed_rate: confirmed as f64 / reps as f64,
    })
}

/// The 2018 Kalamazoo gubernatorial primary pilot: reported votes in the
/// stratum with linked CVRs, in the stratum without, and the polling sample
/// drawn from the latter.
pub mod kalamazoo {
    pub const CANDIDATES: [(&str, u64, u64, u64); 7] = [
        ("Butkovich", 6, 66, 0),
        ("Gelineau", 56, 462, 1),
        ("Kurland", 23, 284, 0),
        ("Schleiger", 19, 116, 0),
        ("Schuette", 1_349, 4_220, 8),
        ("Whitmer", 3_765, 16_934, 23),
        ("Non-vote", 76, 290, 0),
    ];
    pub const CVR_CARDS: u64 = 5_294;
    pub const NO_CVR_CARDS: u64 = 22_372;
    pub const POLL_SAMPLE: u64 = 32;
    /// Error-free draws from the CVR stratum.
    pub const CVR_DRAWS: u64 = 8;
    pub const WINNER: &str = "Whitmer";
    pub const RUNNER_UP: &str = "Schuette";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalamazooReport {
    pub permutations: usize,
    pub mean: f64,
    pub sd: f64,
    pub q90: f64,
    pub cards: u64,
    #[serde(with = "crate::rational_serde")]
    pub margin: Rational,
    pub eta: f64,
    pub caveat: &'static str,
}

pub const KALAMAZOO_CAVEAT: &str = "the sample was stratified; this treats it as a simple random \
sample of cards, ignoring the different sampling fractions in the two strata";

/// Overstatement values of the 40 audited Kalamazoo cards for the Whitmer
/// over Schuette assertion, and the assertion's margin.
pub fn kalamazoo_values() -> (Vec<Rational>, Rational) {
    use kalamazoo::*;
    let find = |name: &str| {
        CANDIDATES
            .iter()
            .find(|c| c.0 == name)
            .copied()
            .expect("known candidate")
    };
    let (_, w_cvr, w_no, w_poll) = find(WINNER);
    let (_, l_cvr, l_no, l_poll) = find(RUNNER_UP);
    let n = CVR_CARDS + NO_CVR_CARDS;
    let total = |w: u64, l: u64, cards: u64| {
        Rational::from_integer(w as i128) + half() * ((cards - w - l) as i128)
    };
    let mean = total(w_cvr + w_no, l_cvr + l_no, n) / Rational::from_integer(n as i128);
    let v = mean * 2 - Rational::from_integer(1);
    let group = total(w_no, l_no, NO_CVR_CARDS) / Rational::from_integer(NO_CVR_CARDS as i128);
    let denom = Rational::from_integer(2) - v;
    let b = |mvr: Rational| (Rational::from_integer(1) + mvr - group) / denom;
    let other_poll = POLL_SAMPLE - w_poll - l_poll;
    let mut values = Vec::new();
    values.extend(std::iter::repeat_n(
        b(Rational::from_integer(1)),
        w_poll as usize,
    ));
    values.extend(std::iter::repeat_n(
        b(Rational::from_integer(0)),
        l_poll as usize,
    ));
    values.extend(std::iter::repeat_n(b(half()), other_poll as usize));
    values.extend(std::iter::repeat_n(
        Rational::from_integer(1) / denom,
        CVR_DRAWS as usize,
    ));
    (values, v)
}

/// Measured risk of the Kalamazoo sample under random orderings, using ALPHA
/// with the fixed alternative `eta_fraction · 2u/(2u − v)`.
pub fn run_kalamazoo(permutations: usize, eta_fraction: f64, seed: u64) -> Result<KalamazooReport> {
    if permutations == 0 {
        return Err(AuditError::invalid("permutations", "need at least one"));
    }
    let (values, v) = kalamazoo_values();
    let values: Vec<f64> = values.iter().map(|x| x.to_f64().expect("finite")).collect();
    let upper = (rat(2, 1) / (rat(2, 1) - v)).to_f64().expect("finite");
    let eta = eta_fraction * upper;
    let n = kalamazoo::CVR_CARDS + kalamazoo::NO_CVR_CARDS;
    let risks: Vec<f64> = (0..permutations as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = rep_rng(seed, p);
            let mut order = values.clone();
            for j in 0..order.len() {
                let k = rng.random_range(j..order.len());
                order.swap(j, k);
            }
            let mut s = RiskState::new(Estimator::Fixed { eta }, n, upper)?;
            for x in order {
                s.update(x)?;
            }
            Ok(s.measured_risk())
        })
        .collect::<Result<_>>()?;
    let stats = SampleStats::from_samples(&risks);
    Ok(KalamazooReport {
        permutations,
        mean: stats.mean,
        sd: stats.sd,
        q90: stats.q90,
        cards: n,
        margin: v,
        eta,
        caveat: KALAMAZOO_CAVEAT,
    })
}

/// How the card values are fed to ALPHA in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Polling on the raw assorter values, `u = 1`.
    Raw,
    /// Overstatement values against a single ONE CVR for the whole contest.
    OneAudit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub transform: Transform,
    /// Alternative mean on the raw assorter scale.
    pub eta: f64,
    /// `None` is `d = ∞`.
    pub d: Option<f64>,
    pub c: f64,
}

impl GridConfig {
    pub fn label(&self) -> String {
        let d = self.d.map_or("inf".to_owned(), |d| format!("{d}"));
        let kind = match self.transform {
            Transform::Raw => "ALPHA",
            Transform::OneAudit => "ONEAudit",
        };
        format!("{kind} eta={} d={d}", self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCondition {
    pub theta: f64,
    pub blank: f64,
    pub n: u64,
}

impl GridCondition {
    /// Winner, loser and blank counts: `round(N(1−blank))` valid votes of
    /// which `round(θ·valid)` go to the winner.
    pub fn counts(&self) -> (u64, u64, u64) {
        let valid = (self.n as f64 * (1.0 - self.blank)).round() as u64;
        let winner = (self.theta * valid as f64).round() as u64;
        (winner, valid - winner, self.n - valid)
    }

    pub fn label(&self) -> String {
        format!("theta={} blank={} N={}", self.theta, self.blank, self.n)
    }
}

/// Card values, upper bound and ALPHA estimator for one grid cell.
pub fn grid_cell_population(
    cond: &GridCondition,
    cfg: &GridConfig,
) -> Result<(Vec<f64>, AlphaTest)> {
    let (w, l, b) = cond.counts();
    let raw: Vec<f64> = std::iter::repeat_n(1.0, w as usize)
        .chain(std::iter::repeat_n(0.0, l as usize))
        .chain(std::iter::repeat_n(0.5, b as usize))
        .collect();
    let mean = (rat(2 * w as i128 + b as i128, 2 * cond.n as i128))
        .to_f64()
        .expect("finite");
    let v = 2.0 * mean - 1.0;
    if v <= 0.0 {
        return Err(AuditError::NonpositiveMargin {
            assertion: cond.label(),
            margin: v.to_string(),
        });
    }
    let estimator = |eta0: f64| Estimator::ShrinkTrunc {
        eta0,
        d: cfg.d,
        c: cfg.c,
    };
    Ok(match cfg.transform {
        Transform::Raw => (
            raw,
            AlphaTest {
                estimator: estimator(cfg.eta),
                upper: 1.0,
            },
        ),
        Transform::OneAudit => {
            let map = |a: f64| (1.0 + a - mean) / (2.0 - v);
            let values: Vec<f64> = raw.iter().map(|&a| map(a)).collect();
            let upper = values.iter().copied().fold(0.0, f64::max);
            (
                values,
                AlphaTest {
                    estimator: estimator(map(cfg.eta)),
                    upper,
                },
            )
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub condition: GridCondition,
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub configs: Vec<GridConfig>,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["theta".to_owned(), "blank".to_owned(), "N".to_owned()];
        header.extend(self.configs.iter().map(GridConfig::label));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.condition.theta.to_string(),
                r.condition.blank.to_string(),
                r.condition.n.to_string(),
            ];
            rec.extend(
                r.cells
                    .iter()
                    .map(|c| c.map_or(String::new(), |x| format!("{x:.1}"))),
            );
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

pub fn grid_cell(
    cond: &GridCondition,
    cfg: &GridConfig,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<SampleStats> {
    let (values, test) = grid_cell_population(cond, cfg)?;
    let columns = vec![values];
    let sizes: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            alpha_stopping_size(&columns, &[test], alpha, &mut rep_rng(seed, r)).map(|s| s as f64)
        })
        .collect::<Result<_>>()?;
    Ok(SampleStats::from_samples(&sizes))
}

/// Mean stopping sizes for every condition and config. Cells whose margin is
/// not positive are left empty.
pub fn run_grid(
    conditions: &[GridCondition],
    configs: &[GridConfig],
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<GridTable> {
    if reps == 0 {
        return Err(AuditError::invalid("replications", "need at least one"));
    }
    let rows = conditions
        .iter()
        .map(|cond| {
            let cells = configs
                .iter()
                .map(|cfg| match grid_cell(cond, cfg, alpha, reps, seed) {
                    Ok(s) => Ok(Some(s.mean)),
                    Err(AuditError::NonpositiveMargin { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            Ok(GridRow {
                condition: *cond,
                cells,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GridTable {
        configs: configs.to_vec(),
        rows,
    })
}

/// Geometric mean, per config, of each cell's ratio to the smallest cell in
/// its row.
pub fn score_geometric_mean(table: &GridTable) -> Result<BTreeMap<String, f64>> {
    let k = table.configs.len();
    let mut log_sums = vec![0.0; k];
    for row in &table.rows {
        let mut cells = Vec::with_capacity(k);
        for (i, c) in row.cells.iter().enumerate() {
            match c {
                Some(x) => cells.push(*x),
                None => {
                    return Err(AuditError::MissingCell(format!(
                        "{} / {}",
                        row.condition.label(),
                        table
                            .configs
                            .get(i)
                            .map(GridConfig::label)
                            .unwrap_or_default()
                    )))
                }
            }
        }
        if cells.len() != k {
            return Err(AuditError::MissingCell(row.condition.label()));
        }
        let min = cells.iter().copied().fold(f64::INFINITY, f64::min);
        for (s, x) in log_sums.iter_mut().zip(&cells) {
            *s += (x / min).ln();
        }
    }
    let rows = table.rows.len().max(1) as f64;
    Ok(table
        .configs
        .iter()
        .zip(log_sums)
        .map(|(cfg, s)| (cfg.label(), (s / rows).exp()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_and_moments() {
        let s = SampleStats::from_samples(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(s.mean, 5.5);
        assert_eq!(s.median, 5.0);
        assert_eq!(s.q90, 9.0);
        assert!((s.sd - 3.0276503540974917).abs() < 1e-12);
    }

    #[test]
    fn rep_streams_are_reproducible_and_distinct() {
        let a: u64 = rep_rng(7, 3).random();
        let b: u64 = rep_rng(7, 3).random();
        let c: u64 = rep_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn alice_bob_scenario_matches_fixture() {
        let s = Scenario::alice_bob(900, 100);
        assert_eq!(s.cards(), 20_000);
        assert_eq!(s.margin().unwrap(), rat(1, 20));
        let vals = s.overstatement_values(true).unwrap();
        assert_eq!(vals.len(), 20_000);
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0 / 1.95).abs() < 1e-12);
    }

    #[test]
    fn wrong_outcome_ties_or_flips() {
        let s = Scenario::alice_bob(900, 100).with_wrong_outcome();
        s.validate().unwrap();
        let votes = s.true_votes();
        let w = votes.iter().filter(|v| **v == PollVote::Winner).count();
        let l = votes.iter().filter(|v| **v == PollVote::Loser).count();
        assert!(l >= w);
        assert!(l - w <= 1);
        let vals = s.overstatement_values(true).unwrap();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean <= 0.5 + 1e-12);
    }

    #[test]
    fn km_batches_for_alice_bob() {
        let s = Scenario::alice_bob(900, 100);
        let b = s.batches().unwrap();
        let total: f64 = b.iter().map(|x| x.error_bound).sum();
        // U = 2Ā / v = 21
        assert!((total - 21.0).abs() < 1e-9);
        assert!(b.iter().all(|x| x.taint == 0.0));
    }

    #[test]
    fn too_few_reps() {
        let s = Scenario::alice_bob(900, 100);
        let e = run_expected_sample_size(&s, Method::Bpa, &AlphaConfig::default(), 0.05, 10, 1);
        assert_eq!(e.unwrap_err().code(), "INVALID_INPUT");
    }

    #[test]
    fn kalamazoo_rejects_zero_permutations() {
        assert!(run_kalamazoo(0, 0.99, 1).is_err());
    }

    #[test]
    fn kalamazoo_values_shape() {
        let (vals, v) = kalamazoo_values();
        assert_eq!(vals.len(), 40);
        // error-free CVR draws sit at u / (2u − v)
        assert_eq!(
            vals[39],
            Rational::from_integer(1) / (Rational::from_integer(2) - v)
        );
        assert!(v > rat(54, 100) && v < rat(55, 100));
    }

    #[test]
    fn geometric_mean_scores() {
        let cond = GridCondition {
            theta: 0.6,
            blank: 0.0,
            n: 100,
        };
        let cfg = GridConfig {
            transform: Transform::Raw,
            eta: 0.6,
            d: Some(10.0),
            c: 0.5,
        };
        let one = GridTable {
            configs: vec![cfg],
            rows: vec![GridRow {
                condition: cond,
                cells: vec![Some(42.0)],
            }],
        };
        assert_eq!(score_geometric_mean(&one).unwrap()[&cfg.label()], 1.0);
        let cfg2 = GridConfig { d: None, ..cfg };
        let two = GridTable {
            configs: vec![cfg, cfg2],
            rows: vec![GridRow {
                condition: cond,
                cells: vec![Some(42.0), Some(42.0)],
            }],
        };
        assert!(score_geometric_mean(&two)
            .unwrap()
            .values()
            .all(|&s| s == 1.0));
        let missing = GridTable {
            configs: vec![cfg, cfg2],
            rows: vec![GridRow {
                condition: cond,
                cells: vec![Some(42.0), None],
            }],
        };
        assert_eq!(
            score_geometric_mean(&missing).unwrap_err().code(),
            "MISSING_CELL"
        );
    }

    #[test]
    fn unanimous_grid_cell_same_for_both_transforms() {
        let cond = GridCondition {
            theta: 1.0,
            blank: 0.0,
            n: 1_000,
        };
        let raw = GridConfig {
            transform: Transform::Raw,
            eta: 0.9,
            d: Some(10.0),
            c: 0.5,
        };
        let one = GridConfig {
            transform: Transform::OneAudit,
            ..raw
        };
        let a = grid_cell(&cond, &raw, 0.05, 20, 3).unwrap();
        let b = grid_cell(&cond, &one, 0.05, 20, 3).unwrap();
        assert_eq!(a.mean, b.mean);
        assert!(a.mean < 20.0);
    }
}
