//! Contingent claim, gains from trading and terminal PnL.

use serde::{Deserialize, Serialize};

use crate::market_models::PathSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Long,
    Short,
}

impl Position {
    pub fn sign(&self) -> f64 {
        match self {
            Position::Long => 1.0,
            Position::Short => -1.0,
        }
    }
}

/// European call held long or short. The hedger receives `payoff` at maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub strike: f64,
    pub position: Position,
}

impl Claim {
    pub fn new(strike: f64, position: Position) -> Result<Self> {
        let claim = Self { strike, position };
        claim.validate()?;
        Ok(claim)
    }

    pub fn short_call(strike: f64) -> Result<Self> {
        Self::new(strike, Position::Short)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strike.is_finite() && self.strike > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("strike must be positive, got {}", self.strike)))
        }
    }

    /// Cash flow `sign * (S_T - K)^+`.
    pub fn payoff(&self, terminal_spot: f64) -> f64 {
        self.position.sign() * (terminal_spot - self.strike).max(0.0)
    }

    /// Unsigned call payoff `(S_T - K)^+`.
    pub fn call_value(&self, terminal_spot: f64) -> f64 {
        (terminal_spot - self.strike).max(0.0)
    }
}

/// `sum_k delta_k (S_{k+1} - S_k)`.
pub fn gains(deltas: &[f64], spots: &[f64]) -> Result<f64> {
    if spots.len() != deltas.len() + 1 {
        return Err(Error::DimensionMismatch { expected: deltas.len() + 1, actual: spots.len() });
    }
    Ok(deltas.iter().zip(spots.windows(2)).map(|(d, w)| d * (w[1] - w[0])).sum())
}

/// `Z + (delta . S)_T`, plus `p0` when `include_premium` is set.
pub fn terminal_pnl(claim: &Claim, deltas: &[f64], spots: &[f64], include_premium: bool, p0: f64) -> Result<f64> {
    let g = gains(deltas, spots)?;
    let z = claim.payoff(*spots.last().expect("non-empty spots"));
    Ok(if include_premium { z + g + p0 } else { z + g })
}

/// Fair premium of the claim on a path set: Monte Carlo mean of the
/// undiscounted call payoff (zero rates).
pub fn mc_premium(claim: &Claim, paths: &PathSet) -> f64 {
    let n = paths.n_paths();
    (0..n).map(|p| claim.call_value(paths.terminal(p))).sum::<f64>() / n as f64
}

/// Per-path hedge ratios and premium-exclusive terminal PnL of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeResult {
    pub task_id: usize,
    /// Row-major `n_paths x n_steps`.
    pub deltas: Vec<f64>,
    pub pnl: Vec<f64>,
    pub premium: f64,
    pub n_steps: usize,
}

impl HedgeResult {
    /// Evaluate the PnL of a given delta matrix on `paths`.
    pub fn from_deltas(claim: &Claim, paths: &PathSet, deltas: Vec<f64>) -> Result<Self> {
        let n_steps = paths.n_steps();
        if deltas.len() != paths.n_paths() * n_steps {
            return Err(Error::DimensionMismatch { expected: paths.n_paths() * n_steps, actual: deltas.len() });
        }
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidArgument("hedge ratios must be finite".into()));
        }
        let pnl = deltas
            .chunks_exact(n_steps)
            .zip(paths.paths())
            .map(|(d, s)| terminal_pnl(claim, d, s, false, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task_id: paths.task_id, deltas, pnl, premium: mc_premium(claim, paths), n_steps })
    }

    pub fn n_paths(&self) -> usize {
        self.pnl.len()
    }

    pub fn path_deltas(&self, p: usize) -> &[f64] {
        &self.deltas[p * self.n_steps..(p + 1) * self.n_steps]
    }

    /// PnL including the premium, `Z + p0 + (delta . S)_T`.
    pub fn pnl_with_premium(&self) -> Vec<f64> {
        self.pnl.iter().map(|x| x + self.premium).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_call_payoff() {
        let c = Claim::short_call(1.0).unwrap();
        assert!((c.payoff(1.2) + 0.2).abs() < 1e-15);
        assert_eq!(c.payoff(0.8), 0.0);
        assert_eq!(c.payoff(1.0), 0.0);
        assert!(Claim::short_call(0.0).is_err());
    }

    #[test]
    fn gains_cases() {
        assert_eq!(gains(&[0.0; 3], &[1.0, 1.2, 0.9, 1.4]).unwrap(), 0.0);
        let s = [1.0, 1.2, 0.9, 1.4];
        assert!((gains(&[1.0; 3], &s).unwrap() - 0.4).abs() < 1e-15);
        assert!((gains(&[0.5, 0.5], &[1.0, 1.1, 1.05]).unwrap() - 0.025).abs() < 1e-15);
        assert!(matches!(gains(&[0.5], &[1.0, 1.1, 1.05]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn terminal_pnl_cases() {
        let c = Claim::short_call(1.0).unwrap();
        assert_eq!(terminal_pnl(&c, &[0.0; 2], &[1.0, 1.1, 0.95], false, 0.0).unwrap(), 0.0);
        let with = terminal_pnl(&c, &[0.0; 2], &[1.0, 1.1, 1.3], true, 0.05).unwrap();
        assert!((with + 0.25).abs() < 1e-15);
        let hold = terminal_pnl(&c, &[1.0; 2], &[0.9, 1.2, 1.0], false, 0.0).unwrap();
        assert!((hold - 0.1).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig {
            rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
            failure_persistence: None,
            ..ProptestConfig::default()
        })]

        #[test]
        fn pnl_linear_in_deltas(
            d1 in prop::collection::vec(-2.0f64..2.0, 4),
            d2 in prop::collection::vec(-2.0f64..2.0, 4),
            s in prop::collection::vec(0.5f64..1.5, 5),
            a in -3.0f64..3.0,
        ) {
            let c = Claim::short_call(1.0).unwrap();
            let z = c.payoff(s[4]);
            let combo: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + y).collect();
            let lhs = terminal_pnl(&c, &combo, &s, false, 0.0).unwrap() - z;
            let rhs = a * (terminal_pnl(&c, &d1, &s, false, 0.0).unwrap() - z)
                + (terminal_pnl(&c, &d2, &s, false, 0.0).unwrap() - z);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn premium_shifts_pnl_by_p0(
            d in prop::collection::vec(-2.0f64..2.0, 3),
            s in prop::collection::vec(0.5f64..1.5, 4),
            p0 in 0.0f64..0.3,
        ) {
            let c = Claim::short_call(1.0).unwrap();
            let with = terminal_pnl(&c, &d, &s, true, p0).unwrap();
            let without = terminal_pnl(&c, &d, &s, false, 0.0).unwrap();
            prop_assert!((with - without - p0).abs() < 1e-14);
        }
    }
}
