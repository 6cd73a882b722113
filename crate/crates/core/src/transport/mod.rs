//! Empirical measures on phase space and their exact Wasserstein-1 distance.
//!
//! Atoms live in `R^{2d}` as `x || v`; the ground cost is the Euclidean norm of
//! the joint phase vector. Weights are exact rationals so the transport problem
//! can be scaled to integer supplies, where the min-cost flow optimum is
//! attained at an integral vertex.

mod flow;
mod oracle;

use num_integer::Integer;
use num_rational::Ratio;
use serde::Serialize;

use crate::dynamics::ParticleState;
use crate::error::{Error, Result};

pub use oracle::{w1_oracle_small, ORACLE_MAX_ATOMS};

pub type Weight = Ratio<u64>;

/// Largest common denominator accepted when scaling weights to integer supplies.
pub const MAX_DENOMINATOR: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    phase_dim: usize,
    atoms: Vec<f64>,
    weights: Vec<Weight>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureMoments {
    #[serde(serialize_with = "serialize_ratio")]
    pub mass: Weight,
    pub mean_v: Vec<f64>,
    pub second_moment: f64,
}

fn serialize_ratio<S: serde::Serializer>(r: &Weight, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

/// One W1 evaluation as emitted by the CLI and experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W1Record {
    pub n: usize,
    pub m: usize,
    pub t: Option<f64>,
    pub w1: f64,
}

impl EmpiricalMeasure {
    pub fn new(phase_dim: usize, atoms: Vec<f64>, weights: Vec<Weight>) -> Result<Self> {
        if phase_dim == 0 || phase_dim % 2 != 0 {
            return Err(Error::InvalidMeasure(format!(
                "phase dimension must be even and positive, got {phase_dim}"
            )));
        }
        if weights.is_empty() || atoms.len() != weights.len() * phase_dim {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not match {} atoms of dimension {phase_dim}",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite atom coordinate".into()));
        }
        if let Some(k) = weights.iter().position(|w| *w.numer() == 0) {
            return Err(Error::InvalidMeasure(format!("weight of atom {k} is zero")));
        }
        let total = weights
            .iter()
            .try_fold(Weight::from_integer(0), |acc, w| checked_add(acc, *w))
            .ok_or_else(|| Error::InvalidMeasure("weight sum overflows".into()))?;
        if total != Weight::from_integer(1) {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(EmpiricalMeasure {
            phase_dim,
            atoms,
            weights,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform(phase_dim: usize, atoms: Vec<f64>) -> Result<Self> {
        let n = if phase_dim == 0 { 0 } else { atoms.len() / phase_dim };
        Self::new(phase_dim, atoms, vec![Weight::new(1, n.max(1) as u64); n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn phase_dim(&self) -> usize {
        self.phase_dim
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.phase_dim..(i + 1) * self.phase_dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[Weight] {
        &self.weights
    }

    /// Same weights, atoms mapped through `f`.
    pub fn map_atoms(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let atoms: Vec<f64> = self
            .atoms
            .chunks_exact(self.phase_dim)
            .flat_map(|a| f(a))
            .collect();
        Self::new(self.phase_dim, atoms, self.weights.clone())
    }

    pub fn is_uniform(&self) -> bool {
        let n = self.len() as u64;
        self.weights.iter().all(|w| *w == Weight::new(1, n))
    }
}

fn checked_add(a: Weight, b: Weight) -> Option<Weight> {
    let l = a.denom().lcm(b.denom());
    let na = a.numer().checked_mul(l / a.denom())?;
    let nb = b.numer().checked_mul(l / b.denom())?;
    Some(Weight::new(na.checked_add(nb)?, l))
}

pub fn from_state(state: &ParticleState) -> EmpiricalMeasure {
    let d = state.d();
    let atoms: Vec<f64> = (0..state.n())
        .flat_map(|i| {
            state
                .position(i)
                .iter()
                .chain(state.velocity(i))
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    EmpiricalMeasure::uniform(2 * d, atoms).expect("a valid state yields a valid measure")
}

pub fn moments(mu: &EmpiricalMeasure) -> MeasureMoments {
    let d = mu.phase_dim / 2;
    let mut mean_v = vec![0.0; d];
    let mut second = 0.0;
    let mut mass = Weight::from_integer(0);
    for (i, w) in mu.weights.iter().enumerate() {
        mass += *w;
        let wf = *w.numer() as f64 / *w.denom() as f64;
        let a = mu.atom(i);
        for k in 0..d {
            mean_v[k] += wf * a[d + k];
        }
        second += wf * a.iter().map(|c| c * c).sum::<f64>();
    }
    MeasureMoments {
        mass,
        mean_v,
        second_moment: second,
    }
}

/// Integer supplies of both measures over their least common denominator.
pub(crate) fn scaled_supplies(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(u64, Vec<u64>, Vec<u64>)> {
    let mut lcd = 1u64;
    for w in mu.weights.iter().chain(&nu.weights) {
        lcd = lcd.lcm(w.denom());
        if lcd > MAX_DENOMINATOR {
            return Err(Error::InvalidMeasure(format!(
                "common weight denominator exceeds {MAX_DENOMINATOR}"
            )));
        }
    }
    let scale = |m: &EmpiricalMeasure| {
        m.weights
            .iter()
            .map(|w| w.numer() * (lcd / w.denom()))
            .collect::<Vec<_>>()
    };
    Ok((lcd, scale(mu), scale(nu)))
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.phase_dim != nu.phase_dim {
        return Err(Error::DimensionMismatch(mu.phase_dim, nu.phase_dim));
    }
    Ok(())
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let mut c = Vec::with_capacity(mu.len() * nu.len());
    for i in 0..mu.len() {
        for j in 0..nu.len() {
            c.push(distance(mu.atom(i), nu.atom(j)));
        }
    }
    c
}

/// Exact W1 by min-cost flow on the complete bipartite graph.
pub fn w1_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let (lcd, supply, demand) = scaled_supplies(mu, nu)?;
    let cost = cost_matrix(mu, nu);
    let plan = flow::min_cost_transport(&cost, &supply, &demand);
    debug_assert!(supply
        .iter()
        .enumerate()
        .all(|(i, &s)| plan.flow[i * nu.len()..(i + 1) * nu.len()].iter().sum::<u64>() == s));
    Ok(plan.cost / lcd as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> EmpiricalMeasure {
        // atoms on the position axis of R^1 phase space, zero velocity
        let atoms = points.iter().flat_map(|&x| [x, 0.0]).collect();
        EmpiricalMeasure::uniform(2, atoms).unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(EmpiricalMeasure::new(2, vec![0.0, 0.0], vec![Weight::new(1, 2)]).is_err());
        assert!(EmpiricalMeasure::new(3, vec![0.0; 3], vec![Weight::new(1, 1)]).is_err());
        assert!(EmpiricalMeasure::new(
            2,
            vec![0.0; 4],
            vec![Weight::new(1, 1), Weight::new(0, 1)]
        )
        .is_err());
        assert!(EmpiricalMeasure::new(2, vec![f64::NAN, 0.0], vec![Weight::new(1, 1)]).is_err());
        assert!(EmpiricalMeasure::new(
            2,
            vec![0.0; 6],
            vec![Weight::new(1, 3), Weight::new(1, 6), Weight::new(1, 2)]
        )
        .is_ok());
    }

    #[test]
    fn from_state_examples() {
        let s = ParticleState::new(0.0, 1, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let m = from_state(&s);
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[Weight::new(1, 2); 2]);
        assert_eq!(m.atom(1), &[2.0, 4.0]);
        let single = ParticleState::new(0.0, 1, vec![1.0], vec![3.0]).unwrap();
        assert_eq!(from_state(&single).weights(), &[Weight::from_integer(1)]);
        let dup = ParticleState::new(0.0, 1, vec![1.0; 3], vec![0.0; 3]).unwrap();
        let m = from_state(&dup);
        assert_eq!(m.len(), 3);
        assert!(m.is_uniform());
    }

    #[test]
    fn w1_examples() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(w1_exact(&mu, &nu).unwrap(), 5.0);
        assert!((w1_exact(&line(&[0.0, 1.0]), &line(&[0.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
        let m = line(&[0.3, -2.0, 5.0]);
        assert_eq!(w1_exact(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn w1_unequal_sizes() {
        // 1/2 at 0 and 1/2 at 2 versus 1/3 at each of 0, 1, 2:
        // mass 1/6 must move distance 1 from each end to the middle
        let mu = line(&[0.0, 2.0]);
        let nu = line(&[0.0, 1.0, 2.0]);
        assert!((w1_exact(&mu, &nu).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn w1_rejects_dimension_mismatch() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(4, vec![0.0; 4]).unwrap();
        assert!(matches!(w1_exact(&mu, &nu), Err(Error::DimensionMismatch(2, 4))));
    }

    #[test]
    fn denominator_guard() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 1009]).unwrap();
        let nu = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 1013]).unwrap();
        assert!(matches!(w1_exact(&mu, &nu), Err(Error::InvalidMeasure(_))));
    }

    #[test]
    fn moments_examples() {
        let m = EmpiricalMeasure::uniform(4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mo = moments(&m);
        assert_eq!(mo.mass, Weight::from_integer(1));
        assert_eq!(mo.mean_v, vec![3.0, 4.0]);
        assert_eq!(mo.second_moment, 30.0);
        let m = EmpiricalMeasure::uniform(4, vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let mo = moments(&m);
        assert_eq!(mo.mean_v, vec![0.0, 0.0]);
        assert_eq!(mo.second_moment, 1.0);
    }
}
