//! Risk-limiting audits that compare individual ballot cards against
//! overstatement-net-equivalent (ONE) cast-vote records.
//!
//! Cards with linked CVRs are compared against their own CVR; cards that only
//! appear in a batch subtotal are compared against the batch's mean assorter
//! value. The crate also carries the baseline methods (ballot polling with
//! Wald's SPRT, batch-level comparison with the Kaplan-Markov test) and a
//! Monte Carlo harness for expected workloads.

pub mod assorter;
pub mod election;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod one;
pub mod risk;
pub mod sampler;
pub mod sim;
pub mod transcript;

use num_rational::Ratio;

pub use error::{AuditError, Result};

/// Exact arithmetic for assorter values, margins and group means.
pub type Rational = Ratio<i128>;

pub fn rat(numer: i128, denom: i128) -> Rational {
    Rational::new(numer, denom)
}

/// Serde helpers writing rationals as `"p/q"` (or `"p"`) decimal strings.
pub mod rational_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::Rational;

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let raw = String::deserialize(d)?;
        parse(&raw).map_err(D::Error::custom)
    }

    pub fn parse(raw: &str) -> Result<Rational, String> {
        let bad = || format!("not a rational: {raw:?}");
        match raw.split_once('/') {
            Some((n, d)) => {
                let n: i128 = n.trim().parse().map_err(|_| bad())?;
                let d: i128 = d.trim().parse().map_err(|_| bad())?;
                if d == 0 {
                    return Err(bad());
                }
                Ok(Rational::new(n, d))
            }
            None => raw
                .trim()
                .parse::<i128>()
                .map(Rational::from_integer)
                .map_err(|_| bad()),
        }
    }
}
