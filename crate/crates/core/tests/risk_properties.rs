use oneaudit_core::risk::{Estimator, KmState, MeasuredRisk, PollVote, RiskState, SprtState};
use oneaudit_core::sim::rep_rng;
use proptest::prelude::*;
use rand::Rng;

fn estimator() -> impl Strategy<Value = Estimator> {
    prop_oneof![
        (0.0f64..2.0).prop_map(|eta| Estimator::Fixed { eta }),
        (0.5f64..1.5, prop::option::of(1.0f64..1000.0), 0.0f64..1.0)
            .prop_map(|(eta0, d, c)| Estimator::ShrinkTrunc { eta0, d, c }),
    ]
}

proptest! {
    #[test]
    fn datum_at_null_mean_never_moves_the_martingale(
        est in estimator(),
        prefix in prop::collection::vec(0.0f64..=1.0, 0..20),
    ) {
        let mut s = RiskState::new(est, 1_000, 1.0).unwrap();
        for x in prefix {
            s.update(x).unwrap();
        }
        let mu = s.null_mean();
        prop_assume!(mu > 0.0 && mu < 1.0);
        prop_assert!((s.term(mu) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn measured_risk_is_a_nonincreasing_probability(
        est in estimator(),
        upper in 0.6f64..3.0,
        xs in prop::collection::vec(0.0f64..=1.0, 1..60),
    ) {
        let mut s = RiskState::new(est, 500, upper).unwrap();
        let mut last = 1.0;
        for x in xs {
            s.update(x * upper).unwrap();
            let r = s.measured_risk();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn raising_the_latest_datum_never_lowers_the_martingale(
        est in estimator(),
        xs in prop::collection::vec(0.0f64..=1.0, 1..40),
        y in 0.0f64..=1.0,
    ) {
        let run = |xs: &[f64]| {
            let mut s = RiskState::new(est, 200, 1.0).unwrap();
            for &x in xs {
                s.update(x).unwrap();
            }
            s.log_t
        };
        let mut raised = xs.clone();
        let last = raised.len() - 1;
        raised[last] = raised[last].max(y);
        prop_assert!(run(&raised) >= run(&xs) - 1e-12);
    }

    #[test]
    fn km_matches_closed_form(n in 0usize..200, u in 1.5f64..100.0) {
        let mut k = KmState::new(u).unwrap();
        for _ in 0..n {
            k.update(0.0).unwrap();
        }
        let closed = (1.0 - 1.0 / u).powi(n as i32);
        prop_assert!((k.p_value() - closed).abs() <= 1e-9 * closed.max(1e-300));
    }
}

/// Fraction of null populations (true mean exactly 1/2) in which the test
/// ever reaches measured risk `alpha`.
fn alpha_false_alarm(alpha: f64, est: Estimator, reps: u64) -> f64 {
    let mut pop: Vec<f64> = [0.2; 100].into_iter().chain([0.8; 100]).collect();
    let mut hits = 0;
    for r in 0..reps {
        let mut rng = rep_rng(99, r);
        let mut s = RiskState::new(est, pop.len() as u64, 1.0).unwrap();
        for j in 0..pop.len() {
            let k = rng.random_range(j..pop.len());
            pop.swap(j, k);
            s.update(pop[j]).unwrap();
            if s.measured_risk() <= alpha {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / reps as f64
}

#[test]
fn alpha_is_anytime_valid_under_the_null() {
    let reps = 4_000;
    for alpha in [0.05, 0.10] {
        for est in [
            Estimator::Fixed { eta: 0.9 },
            Estimator::ShrinkTrunc {
                eta0: 0.9,
                d: Some(10.0),
                c: 0.5,
            },
        ] {
            let rate = alpha_false_alarm(alpha, est, reps);
            let se = (alpha * (1.0 - alpha) / reps as f64).sqrt();
            assert!(rate <= alpha + 3.0 * se, "{est:?} alpha {alpha}: {rate}");
        }
    }
}

#[test]
fn sprt_is_valid_at_a_tie() {
    let reps = 4_000u64;
    let alpha = 0.05;
    let votes: Vec<PollVote> = [PollVote::Winner; 150]
        .into_iter()
        .chain([PollVote::Loser; 150])
        .chain([PollVote::Other; 50])
        .collect();
    let mut hits = 0;
    for r in 0..reps {
        let mut rng = rep_rng(5, r);
        let mut order = votes.clone();
        let mut s = SprtState::new(0.6).unwrap();
        for j in 0..order.len() {
            let k = rng.random_range(j..order.len());
            order.swap(j, k);
            s.update(order[j]);
            if s.measured_risk() <= alpha {
                hits += 1;
                break;
            }
        }
    }
    let rate = hits as f64 / reps as f64;
    assert!(
        rate <= alpha + 3.0 * (alpha * 0.95 / reps as f64).sqrt(),
        "{rate}"
    );
}
