use crate::error::{contract, Result};

use super::types::{AuctionOutcome, ImpressionOpportunity};

/// Bid `lambda_0 * v + sum_j lambda_j * p_ij * C_j`, floored at 0.
///
/// `coeffs` holds `J + 1` non-negative coefficients, `constraints` the `J`
/// bounds matching `imp.perf_indicators`.
pub fn compute_bid(coeffs: &[f64], imp: &ImpressionOpportunity, constraints: &[f64]) -> Result<f64> {
    contract!(
        coeffs.len() == constraints.len() + 1,
        "expected {} coefficients, got {}",
        constraints.len() + 1,
        coeffs.len()
    );
    contract!(
        imp.perf_indicators.len() == constraints.len(),
        "impression carries {} indicators for {} constraints",
        imp.perf_indicators.len(),
        constraints.len()
    );
    contract!(coeffs.iter().all(|c| *c >= 0.0), "coefficients must be non-negative");
    let mut bid = coeffs[0] * imp.value;
    for ((lambda, p), c) in coeffs[1..].iter().zip(&imp.perf_indicators).zip(constraints) {
        bid += lambda * p * c;
    }
    Ok(bid.max(0.0))
}

/// Second-price clearing with the affordability rule.
///
/// The impression is won only on a strictly higher bid whose price fits the
/// remaining budget; ties lose.
pub fn run_auction(my_bid: f64, imp: &ImpressionOpportunity, remaining_budget: f64) -> AuctionOutcome {
    let price = imp.max_competitor_bid();
    let won = my_bid > price && price <= remaining_budget;
    if won {
        AuctionOutcome { won, cost: price, conversion: imp.conversion_draw < imp.value }
    } else {
        AuctionOutcome { won: false, cost: 0.0, conversion: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imp(value: f64, competitors: Vec<f64>, perf: Vec<f64>) -> ImpressionOpportunity {
        let max = competitors.iter().copied().fold(0.0, f64::max);
        let costs = vec![max; perf.len()];
        ImpressionOpportunity {
            index: 0,
            value,
            competitor_bids: competitors,
            perf_indicators: perf,
            constraint_costs: costs,
            conversion_draw: 0.5,
        }
    }

    #[test]
    fn bid_single_term() {
        assert_eq!(compute_bid(&[1.0], &imp(0.5, vec![1.0], vec![]), &[]).unwrap(), 0.5);
    }

    #[test]
    fn bid_with_constraint_term() {
        let b = compute_bid(&[1.0, 2.0], &imp(0.5, vec![1.0], vec![1.0]), &[10.0]).unwrap();
        assert_eq!(b, 20.5);
    }

    #[test]
    fn bid_zero_coefficients() {
        assert_eq!(compute_bid(&[0.0, 0.0], &imp(0.9, vec![1.0], vec![1.0]), &[10.0]).unwrap(), 0.0);
    }

    #[test]
    fn bid_length_mismatch_is_contract_violation() {
        let err = compute_bid(&[1.0, 1.0], &imp(0.5, vec![1.0], vec![]), &[]).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn auction_second_price_win() {
        let out = run_auction(5.0, &imp(0.2, vec![3.0, 2.0], vec![]), 100.0);
        assert!(out.won);
        assert_eq!(out.cost, 3.0);
    }

    #[test]
    fn auction_loss_and_tie() {
        let out = run_auction(2.0, &imp(0.2, vec![3.0], vec![]), 100.0);
        assert_eq!(out, AuctionOutcome { won: false, cost: 0.0, conversion: false });
        assert!(!run_auction(3.0, &imp(0.2, vec![3.0], vec![]), 100.0).won);
    }

    #[test]
    fn auction_unaffordable_is_forfeited() {
        let out = run_auction(5.0, &imp(0.2, vec![3.0], vec![]), 2.5);
        assert!(!out.won);
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn auction_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let n = rng.gen_range(1..8);
            let comps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let bid = rng.gen_range(0.0..10.0);
            let budget = rng.gen_range(0.0..10.0);
            let out = run_auction(bid, &imp(0.3, comps.clone(), vec![]), budget);
            let mut highest = 0.0;
            for c in &comps {
                if *c > highest {
                    highest = *c;
                }
            }
            let beats_all = comps.iter().all(|c| bid > *c);
            let expect_won = beats_all && highest <= budget;
            assert_eq!(out.won, expect_won);
            assert_eq!(out.cost, if expect_won { highest } else { 0.0 });
            if out.won {
                assert!(out.cost <= bid);
            }
        }
    }
}
