//! Exhaustive W1 for tiny instances, independent of the flow solver.

use itertools::Itertools;

use super::{check_pair, cost_matrix, scaled_supplies, EmpiricalMeasure};
use crate::error::{Error, Result};

/// Largest scaled atom count per side the oracle will enumerate.
pub const ORACLE_MAX_ATOMS: u64 = 8;

/// Brute-force W1: minimum over all permutations for equal-size uniform
/// measures, otherwise minimum over every integral flow with the scaled
/// marginals.
pub fn w1_oracle_small(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let (lcd, supply, demand) = scaled_supplies(mu, nu)?;
    if lcd > ORACLE_MAX_ATOMS {
        return Err(Error::OracleTooLarge(lcd, ORACLE_MAX_ATOMS));
    }
    let cost = cost_matrix(mu, nu);
    let m = nu.len();

    if mu.len() == m && mu.is_uniform() && nu.is_uniform() {
        let n = m;
        let best = (0..n)
            .permutations(n)
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        return Ok(best / n as f64);
    }

    let mut search = FlowSearch {
        cost: &cost,
        m,
        row_rem: supply,
        col_rem: demand,
        best: f64::INFINITY,
    };
    search.visit(0, 0.0);
    Ok(search.best / lcd as f64)
}

struct FlowSearch<'a> {
    cost: &'a [f64],
    m: usize,
    row_rem: Vec<u64>,
    col_rem: Vec<u64>,
    best: f64,
}

impl FlowSearch<'_> {
    /// Assigns cell `cell` (row-major) every feasible integer flow in turn.
    fn visit(&mut self, cell: usize, acc: f64) {
        let n = self.row_rem.len();
        if cell == n * self.m {
            if self.col_rem.iter().all(|&c| c == 0) {
                self.best = self.best.min(acc);
            }
            return;
        }
        let (i, j) = (cell / self.m, cell % self.m);
        let hi = self.row_rem[i].min(self.col_rem[j]);
        // the last cell of a row must absorb whatever the row still owes
        let lo = if j + 1 == self.m { self.row_rem[i] } else { 0 };
        if lo > hi {
            return;
        }
        for f in lo..=hi {
            self.row_rem[i] -= f;
            self.col_rem[j] -= f;
            self.visit(cell + 1, acc + f as f64 * self.cost[cell]);
            self.row_rem[i] += f;
            self.col_rem[j] += f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{EmpiricalMeasure, Weight};
    use super::*;

    #[test]
    fn two_atom_example() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(w1_oracle_small(&mu, &nu).unwrap(), 1.0);
        assert_eq!(w1_oracle_small(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn non_uniform_by_enumeration() {
        // 3/4 at 0, 1/4 at 1  vs  1/4 at 0, 3/4 at 1: half the mass moves distance 1
        let mu = EmpiricalMeasure::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0],
            vec![Weight::new(3, 4), Weight::new(1, 4)],
        )
        .unwrap();
        let nu = EmpiricalMeasure::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0],
            vec![Weight::new(1, 4), Weight::new(3, 4)],
        )
        .unwrap();
        assert_eq!(w1_oracle_small(&mu, &nu).unwrap(), 0.5);
    }

    #[test]
    fn too_large_is_rejected() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.0; 18]).unwrap();
        assert!(matches!(
            w1_oracle_small(&mu, &mu),
            Err(Error::OracleTooLarge(9, 8))
        ));
    }
}
