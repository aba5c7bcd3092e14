//! Why contraction-constrained propagation forgets.
//!
//! A linear cycle model `h_i(t) = m_i * h_{i-1}(t-1) + b_i` with every
//! multiplier below `rho < 1` in magnitude is a contraction map. The
//! derivative of node t's state at time t with respect to node 1's initial
//! state is the product `m_2 * ... * m_t`, so its magnitude is bounded by
//! `rho^(t-1)`: influence across t hops dies exponentially. The demo runs
//! the recursion on the tape, differentiates it, and checks both the exact
//! product identity and the decay bound row by row.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Tolerance for the autodiff vs closed-form product comparison.
pub const PRODUCT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DecayRow {
    /// Time index: the derivative is taken after t - 1 update rounds.
    pub t: usize,
    /// d h_t(t) / d h_1(1) as computed by the reverse pass.
    pub autodiff: f64,
    /// The product m_2 * ... * m_t.
    pub closed_form: f64,
    /// rho^(t-1).
    pub bound: f64,
}

/// Run the cycle model for every horizon t in 2..=len and differentiate
/// through the unroll. Errors if any row's autodiff derivative strays from
/// the closed-form product by more than [`PRODUCT_TOL`] or reaches the
/// decay bound.
pub fn decay_table(
    multipliers: &[f64],
    biases: &[f64],
    init: &[f64],
    rho: f64,
) -> Result<Vec<DecayRow>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho must be in (0, 1), got {rho}")));
    }
    let n = multipliers.len();
    if n < 2 || biases.len() != n || init.len() != n {
        return Err(Error::Config(
            "need at least two nodes with one multiplier, bias and initial state each".into(),
        ));
    }
    if let Some(m) = multipliers.iter().find(|m| m.abs() >= rho) {
        return Err(Error::Config(format!("multiplier {m} not inside (-rho, rho)")));
    }

    // row i's predecessor on the cycle is row i-1 (wrapping)
    let shift: Vec<usize> = (0..n).map(|i| (i + n - 1) % n).collect();
    let column = |v: &[f64]| Tensor::from_vec(n, 1, v.to_vec());

    let mut rows = Vec::with_capacity(n - 1);
    for t in 2..=n {
        let mut store = ParamStore::new();
        let h1 = store.add("h1", column(init)?);
        let mut tape = Tape::new();
        let m = tape.constant(column(multipliers)?)?;
        let b = tape.constant(column(biases)?)?;
        let leaf = tape.param(&store, h1)?;
        let mut h = leaf;
        for _ in 0..t - 1 {
            let prev = tape.gather_rows(h, &shift)?;
            let scaled = tape.mul(prev, m)?;
            h = tape.add(scaled, b)?;
        }
        let loss = tape.slice_rows(h, t - 1, t)?;
        tape.backward(loss)?;
        let autodiff = tape.grad(leaf).get(0, 0);

        let closed_form: f64 = multipliers[1..t].iter().product();
        let bound = rho.powi(t as i32 - 1);
        if (autodiff - closed_form).abs() > PRODUCT_TOL {
            return Err(Error::Generate(format!(
                "derivative at t={t}: autodiff {autodiff} vs product {closed_form}"
            )));
        }
        if autodiff.abs() >= bound {
            return Err(Error::Generate(format!(
                "decay bound violated at t={t}: |{autodiff}| >= {bound}"
            )));
        }
        rows.push(DecayRow { t, autodiff, closed_form, bound });
    }
    Ok(rows)
}

/// Sample a random cycle model with multipliers strictly inside
/// (-rho, rho) and tabulate its decay.
pub fn contraction_decay_demo(cycle_len: usize, rho: f64, seed: u64) -> Result<Vec<DecayRow>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho must be in (0, 1), got {rho}")));
    }
    if cycle_len < 2 {
        return Err(Error::Config("cycle length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let multipliers: Vec<f64> = (0..cycle_len)
        .map(|_| loop {
            let m = rng.random_range(-rho..rho);
            if m.abs() < rho {
                break m;
            }
        })
        .collect();
    let biases: Vec<f64> = (0..cycle_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let init: Vec<f64> = (0..cycle_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    decay_table(&multipliers, &biases, &init, rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_halving_multipliers_give_the_closed_form_power() {
        let n = 20;
        let rows =
            decay_table(&vec![0.5; n], &vec![0.1; n], &vec![0.3; n], 0.9).unwrap();
        let row = rows.iter().find(|r| r.t == 11).unwrap();
        assert!((row.closed_form - 0.5f64.powi(10)).abs() == 0.0);
        assert!((row.autodiff - row.closed_form).abs() <= PRODUCT_TOL);
        assert!(row.autodiff.abs() < 0.9f64.powi(10));
    }

    #[test]
    fn a_zero_multiplier_kills_the_derivative_exactly() {
        let mut m = vec![0.4; 10];
        m[3] = 0.0;
        let rows = decay_table(&m, &vec![0.2; 10], &vec![0.1; 10], 0.5).unwrap();
        // the zero sits on the influence path once t reaches it
        for row in rows {
            if row.t >= 4 {
                assert_eq!(row.autodiff, 0.0);
            } else {
                assert_ne!(row.autodiff, 0.0);
            }
        }
    }

    #[test]
    fn random_models_respect_the_decay_bound() {
        for seed in 0..5 {
            let rows = contraction_decay_demo(20, 0.8, seed).unwrap();
            assert_eq!(rows.len(), 19);
            for row in &rows {
                assert!(row.autodiff.abs() < row.bound);
            }
        }
    }

    #[test]
    fn rho_outside_unit_interval_is_rejected() {
        assert!(contraction_decay_demo(10, 1.0, 0).is_err());
        assert!(contraction_decay_demo(10, 0.0, 0).is_err());
        assert!(decay_table(&[0.5, 0.5], &[0.0, 0.0], &[0.0, 0.0], 1.5).is_err());
    }
}
