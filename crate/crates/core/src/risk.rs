//! Sequential risk-measuring functions.
//!
//! * [`RiskState`]: the ALPHA test supermartingale for the mean of a finite
//!   population of values in `[0, u]`, sampled without replacement, with either a
//!   fixed alternative or the truncated shrinkage estimator.
//! * [`SprtState`]: Wald's SPRT for ballot polling, conditioning on valid votes.
//! * [`KmState`]: the Kaplan-Markov test for batch comparisons drawn by PPEB.
//!
//! Martingale products are kept in log space. Measured risk is the reciprocal
//! of the running maximum, so it never increases.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Upper cap on the alternative mean, as a fraction of `u`.
pub const ETA_CAP: f64 = 1.0 - 1.0 / (1u64 << 20) as f64;

pub trait MeasuredRisk {
    fn measured_risk(&self) -> f64;
}

/// How the alternative mean is chosen before each draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Fixed {
        eta: f64,
    },
    /// `d = None` means `d = ∞`: the estimator never moves off `eta0`.
    ShrinkTrunc {
        eta0: f64,
        d: Option<f64>,
        c: f64,
    },
}

impl Estimator {
    fn eta(&self, mu: f64, upper: f64, draws_before: u64, running_sum: f64) -> f64 {
        let cap = upper * ETA_CAP;
        match *self {
            Estimator::Fixed { eta } => eta.max(mu).min(cap),
            Estimator::ShrinkTrunc { eta0, d, c } => {
                let (shrunk, floor) = match d {
                    Some(d) => {
                        let weight = d + draws_before as f64;
                        ((d * eta0 + running_sum) / weight, mu + c / weight.sqrt())
                    }
                    None => (eta0, mu),
                };
                shrunk.max(floor).min(cap)
            }
        }
    }
}

/// Alternative-mean specification that can be resolved once `u` is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eta {
    Absolute(f64),
    FractionOfUpper(f64),
}

impl Eta {
    pub fn resolve(self, upper: f64) -> f64 {
        match self {
            Eta::Absolute(x) => x,
            Eta::FractionOfUpper(f) => f * upper,
        }
    }
}

/// ALPHA parameters as configured by a user, independent of the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaConfig {
    Fixed { eta: Eta },
    ShrinkTrunc { eta0: Eta, d: Option<f64>, c: f64 },
}

impl Default for AlphaConfig {
    fn default() -> Self {
        AlphaConfig::ShrinkTrunc {
            eta0: Eta::FractionOfUpper(0.99),
            d: Some(500.0),
            c: 0.5,
        }
    }
}

impl AlphaConfig {
    pub fn estimator(&self, upper: f64) -> Estimator {
        match *self {
            AlphaConfig::Fixed { eta } => Estimator::Fixed {
                eta: eta.resolve(upper),
            },
            AlphaConfig::ShrinkTrunc { eta0, d, c } => Estimator::ShrinkTrunc {
                eta0: eta0.resolve(upper),
                d,
                c,
            },
        }
    }
}

/// ALPHA state for one assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskState {
    pub estimator: Estimator,
    pub population: u64,
    pub upper: f64,
    pub draws: u64,
    pub running_sum: f64,
    pub log_t: f64,
    pub log_t_max: f64,
    /// Set once the sample alone shows the null mean is impossible.
    pub certain: bool,
}

impl RiskState {
    pub fn new(estimator: Estimator, population: u64, upper: f64) -> Result<Self> {
        if population == 0 {
            return Err(AuditError::invalid("risk state", "empty population"));
        }
        if upper.is_nan() || upper <= 0.5 {
            return Err(AuditError::invalid(
                "risk state",
                "upper bound must exceed 1/2",
            ));
        }
        Ok(RiskState {
            estimator,
            population,
            upper,
            draws: 0,
            running_sum: 0.0,
            log_t: 0.0,
            log_t_max: 0.0,
            certain: false,
        })
    }

    /// Null mean of the cards not yet drawn.
    pub fn null_mean(&self) -> f64 {
        let n = self.population as f64;
        (n / 2.0 - self.running_sum) / (n - self.draws as f64)
    }

    /// Multiplicative factor the next datum `x` would contribute.
    pub fn term(&self, x: f64) -> f64 {
        let mu = self.null_mean();
        if mu <= 0.0 {
            return f64::INFINITY;
        }
        if mu >= self.upper {
            return 1.0;
        }
        let eta = self
            .estimator
            .eta(mu, self.upper, self.draws, self.running_sum);
        (x / mu) * (eta - mu) / (self.upper - mu) + (self.upper - eta) / (self.upper - mu)
    }

    pub fn update(&mut self, x: f64) -> Result<()> {
        if !(x >= 0.0 && x <= self.upper * (1.0 + 1e-12)) {
            return Err(AuditError::Domain {
                value: x.to_string(),
                upper: self.upper.to_string(),
            });
        }
        if self.draws >= self.population {
            return Err(AuditError::Exhausted);
        }
        if !self.certain {
            let term = self.term(x);
            if term.is_infinite() {
                self.certain = true;
            } else {
                self.log_t += term.ln();
                self.log_t_max = self.log_t_max.max(self.log_t);
            }
        }
        self.running_sum += x;
        self.draws += 1;
        Ok(())
    }
}

impl MeasuredRisk for RiskState {
    fn measured_risk(&self) -> f64 {
        if self.certain {
            0.0
        } else {
            (-self.log_t_max).exp().min(1.0)
        }
    }
}

/// Ballot-polling vote categories for the SPRT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PollVote {
    Winner,
    Loser,
    Other,
}

/// Wald's SPRT against the alternative that the winner's share of valid votes
/// is `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtState {
    pub theta: f64,
    pub draws: u64,
    pub log_t: f64,
    pub log_t_max: f64,
}

impl SprtState {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.5 && theta <= 1.0) {
            return Err(AuditError::Domain {
                value: theta.to_string(),
                upper: "theta must exceed 1/2".into(),
            });
        }
        Ok(SprtState {
            theta,
            draws: 0,
            log_t: 0.0,
            log_t_max: 0.0,
        })
    }

    pub fn factor(&self, vote: PollVote) -> f64 {
        match vote {
            PollVote::Winner => 2.0 * self.theta,
            PollVote::Loser => 2.0 * (1.0 - self.theta),
            PollVote::Other => 1.0,
        }
    }

    pub fn update(&mut self, vote: PollVote) {
        self.log_t += self.factor(vote).ln();
        self.log_t_max = self.log_t_max.max(self.log_t);
        self.draws += 1;
    }

    /// Update from an assorter value, which must be 0, 1/2 or 1.
    pub fn update_assort(&mut self, assort_value: f64) -> Result<()> {
        let vote = if assort_value == 1.0 {
            PollVote::Winner
        } else if assort_value == 0.0 {
            PollVote::Loser
        } else if assort_value == 0.5 {
            PollVote::Other
        } else {
            return Err(AuditError::Domain {
                value: assort_value.to_string(),
                upper: "1".into(),
            });
        };
        self.update(vote);
        Ok(())
    }
}

impl MeasuredRisk for SprtState {
    fn measured_risk(&self) -> f64 {
        (-self.log_t_max).exp().min(1.0)
    }
}

/// Kaplan-Markov P-value for PPEB batch draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmState {
    pub total_bound: f64,
    pub taints: Vec<f64>,
    pub log_p: f64,
}

impl KmState {
    pub fn new(total_bound: f64) -> Result<Self> {
        if total_bound.is_nan() || total_bound <= 1.0 {
            return Err(AuditError::invalid(
                "kaplan-markov",
                format!("total error bound {total_bound} must exceed 1"),
            ));
        }
        Ok(KmState {
            total_bound,
            taints: Vec::new(),
            log_p: 0.0,
        })
    }

    /// Folds in one draw. A taint of exactly one leaves P unchanged and is
    /// reported as [`AuditError::TaintAtOne`]: the test cannot conclude.
    pub fn update(&mut self, taint: f64) -> Result<()> {
        if taint > 1.0 || taint.is_nan() {
            return Err(AuditError::Domain {
                value: taint.to_string(),
                upper: "1".into(),
            });
        }
        self.taints.push(taint);
        if taint >= 1.0 {
            return Err(AuditError::TaintAtOne);
        }
        self.log_p += (1.0 - 1.0 / self.total_bound).ln() - (1.0 - taint).ln();
        Ok(())
    }

    pub fn p_value(&self) -> f64 {
        self.log_p.exp().min(1.0)
    }
}

impl MeasuredRisk for KmState {
    fn measured_risk(&self) -> f64 {
        self.p_value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(eta: f64) -> Estimator {
        Estimator::Fixed { eta }
    }

    #[test]
    fn fresh_state_has_risk_one() {
        let s = RiskState::new(fixed(0.6), 100, 1.0).unwrap();
        assert_eq!(s.measured_risk(), 1.0);
        assert_eq!(SprtState::new(0.55).unwrap().measured_risk(), 1.0);
        assert_eq!(KmState::new(10.0).unwrap().measured_risk(), 1.0);
    }

    #[test]
    fn datum_at_null_mean_is_neutral() {
        let mut s = RiskState::new(fixed(0.7), 1000, 1.0).unwrap();
        s.update(0.3).unwrap();
        let mu = s.null_mean();
        let before = s.log_t;
        assert!((s.term(mu) - 1.0).abs() < 1e-15);
        s.update(mu).unwrap();
        assert!((s.log_t - before).abs() < 1e-15);
    }

    #[test]
    fn all_max_stream_matches_direct_product() {
        let (n, u, eta) = (1_000u64, 40.0 / 39.0, 1.0);
        let mut s = RiskState::new(fixed(eta), n, u).unwrap();
        // oracle: multiply the factors directly, tracking the null mean by hand
        let mut product = 1.0f64;
        let mut sum = 0.0f64;
        for j in 1..=20u64 {
            let mu = (n as f64 / 2.0 - sum) / (n - j + 1) as f64;
            product *= (u / mu) * (eta - mu) / (u - mu) + (u - eta) / (u - mu);
            sum += u;
            s.update(u).unwrap();
            assert!((s.log_t - product.ln()).abs() < 1e-10);
        }
        assert!(s.measured_risk() < 0.01);
        assert!((s.measured_risk() - 1.0 / product).abs() < 1e-12);
    }

    #[test]
    fn certainty_when_null_impossible() {
        let mut s = RiskState::new(fixed(0.9), 4, 1.0).unwrap();
        s.update(1.0).unwrap();
        s.update(1.0).unwrap();
        s.update(0.0).unwrap();
        assert_eq!(s.measured_risk(), 0.0);
        assert!(s.certain);
    }

    #[test]
    fn out_of_domain_datum() {
        let mut s = RiskState::new(fixed(0.9), 4, 1.0).unwrap();
        assert_eq!(s.update(1.5).unwrap_err().code(), "DOMAIN");
        assert_eq!(s.update(-0.1).unwrap_err().code(), "DOMAIN");
    }

    #[test]
    fn shrink_trunc_starts_at_eta0_and_respects_floor() {
        let e = Estimator::ShrinkTrunc {
            eta0: 0.6,
            d: Some(10.0),
            c: 0.5,
        };
        // j = 1: (d*eta0)/d = eta0, floor = mu + c/sqrt(d)
        let floor = 0.5 + 0.5 / 10f64.sqrt();
        assert!((e.eta(0.5, 1.0, 0, 0.0) - floor.max(0.6)).abs() < 1e-15);
        let e = Estimator::ShrinkTrunc {
            eta0: 0.99,
            d: Some(10.0),
            c: 0.0,
        };
        assert!((e.eta(0.5, 1.0, 0, 0.0) - 0.99).abs() < 1e-15);
        assert!(e.eta(0.5, 1.0, 10, 10.0) <= ETA_CAP);
        let inf = Estimator::ShrinkTrunc {
            eta0: 0.7,
            d: None,
            c: 0.5,
        };
        assert_eq!(inf.eta(0.5, 1.0, 100, 20.0), 0.7);
    }

    #[test]
    fn sprt_factors() {
        let s = SprtState::new(0.55).unwrap();
        assert!((s.factor(PollVote::Winner) - 1.10).abs() < 1e-12);
        assert!((s.factor(PollVote::Loser) - 0.90).abs() < 1e-12);
        assert_eq!(s.factor(PollVote::Other), 1.0);
        assert_eq!(SprtState::new(0.5).unwrap_err().code(), "DOMAIN");
        let mut s = s;
        assert_eq!(s.update_assort(0.25).unwrap_err().code(), "DOMAIN");
        s.update_assort(1.0).unwrap();
        assert!((s.measured_risk() - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn km_closed_form() {
        let mut k = KmState::new(10.0).unwrap();
        k.update(0.0).unwrap();
        assert!((k.p_value() - 0.9).abs() < 1e-12);
        for _ in 1..25 {
            k.update(0.0).unwrap();
        }
        assert!((k.p_value() - 0.9f64.powi(25)).abs() < 1e-12);
        assert_eq!(k.update(1.0).unwrap_err().code(), "TAINT_AT_ONE");
        assert!((k.p_value() - 0.9f64.powi(25)).abs() < 1e-12);
        assert_eq!(k.update(1.5).unwrap_err().code(), "DOMAIN");
        assert!(KmState::new(1.0).is_err());
    }

    #[test]
    fn risk_is_monotone_in_running_max() {
        let mut s = RiskState::new(fixed(0.8), 500, 1.0).unwrap();
        let mut last = 1.0;
        for x in [1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0] {
            s.update(x).unwrap();
            let r = s.measured_risk();
            assert!(r <= last);
            last = r;
        }
    }
}
