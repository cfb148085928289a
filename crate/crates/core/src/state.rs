use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{TorusVector, Vec3};

/// One configuration `Z = (X, V)` of `N` particles on `T^3 x R^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    positions: Vec<TorusVector>,
    velocities: Vec<Vec3>,
}

impl PhaseState {
    pub fn new(positions: Vec<TorusVector>, velocities: Vec<Vec3>) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::SizeMismatch {
                left: positions.len(),
                right: velocities.len(),
            });
        }
        if positions.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a phase state needs at least 2 particles, got {}",
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            velocities,
        })
    }

    /// Builds a state from raw coordinates, wrapping positions onto the torus.
    pub fn from_coords(positions: &[Vec3], velocities: &[Vec3]) -> Result<Self> {
        Self::new(
            positions.iter().map(|p| TorusVector::new(*p)).collect(),
            velocities.to_vec(),
        )
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[TorusVector] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [TorusVector], &mut [Vec3]) {
        (&mut self.positions, &mut self.velocities)
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self
            .velocities
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .sum::<f64>()
    }

    pub fn total_momentum(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for v in &self.velocities {
            p[0] += v[0];
            p[1] += v[1];
            p[2] += v[2];
        }
        p
    }

    /// The same state with every velocity negated (time reversal).
    pub fn reversed(&self) -> Self {
        Self {
            positions: self.positions.clone(),
            velocities: self.velocities.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }

    /// The state shifted by `(dx, dv)`; positions are wrapped onto the torus.
    pub fn shifted(&self, dx: &[Vec3], dv: &[Vec3]) -> Result<Self> {
        if dx.len() != self.n() || dv.len() != self.n() {
            return Err(Error::SizeMismatch {
                left: self.n(),
                right: dx.len().min(dv.len()),
            });
        }
        Ok(Self {
            positions: self
                .positions
                .iter()
                .zip(dx)
                .map(|(p, d)| p.translate(*d))
                .collect(),
            velocities: self
                .velocities
                .iter()
                .zip(dv)
                .map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
                .collect(),
        })
    }

    /// Relabels particles: particle `k` of the result is particle `perm[k]` here.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::SizeMismatch {
                left: self.n(),
                right: perm.len(),
            });
        }
        Ok(Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            velocities: perm.iter().map(|&i| self.velocities[i]).collect(),
        })
    }
}
