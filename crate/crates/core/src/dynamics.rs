//! Hamiltonian flow of the mean-field N-particle system.
//!
//! `dV_i/dt = (1/N) Σ_j K(X_i - X_j)`, integrated with velocity Verlet at a
//! fixed step. Close encounters are not softened: a trajectory whose minimum
//! pair distance drops below a floor is rejected by the paired evolution.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::PotentialSpec;
use crate::state::PhaseState;
use crate::torus::{wrap_coord, TorusVector, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Number of observation intervals over `[0, t_end]`.
    pub observations: usize,
    pub min_pair_distance_floor: f64,
    pub energy_drift_tolerance: f64,
    /// Reruns with `dt / 2` allowed when the drift tolerance is exceeded.
    pub max_halvings: u32,
    pub force_method: ForceMethod,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 1.0,
            observations: 20,
            min_pair_distance_floor: 1e-5,
            energy_drift_tolerance: 1e-3,
            max_halvings: 3,
            force_method: ForceMethod::AllPairs,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {} must be > 0", self.dt)));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "t_end = {} must be >= 0",
                self.t_end
            )));
        }
        if self.observations == 0 {
            return Err(Error::InvalidParameter("observations must be >= 1".into()));
        }
        if !(self.min_pair_distance_floor >= 0.0) || !(self.energy_drift_tolerance > 0.0) {
            return Err(Error::InvalidParameter(
                "distance floor must be >= 0 and drift tolerance > 0".into(),
            ));
        }
        self.steps_per_observation(self.dt).map(|_| ())
    }

    /// Steps between consecutive observations at step size `dt`; the
    /// observation interval must be an integer multiple of `dt`.
    pub fn steps_per_observation(&self, dt: f64) -> Result<usize> {
        let interval = self.t_end / self.observations as f64;
        if interval == 0.0 {
            return Ok(0);
        }
        let steps = (interval / dt).round();
        if steps < 1.0 || ((steps * dt - interval).abs() > 1e-9 * interval) {
            return Err(Error::InvalidParameter(format!(
                "observation interval {interval} is not a multiple of dt = {dt}"
            )));
        }
        Ok(steps as usize)
    }

    pub fn observation_times(&self) -> Vec<f64> {
        (0..=self.observations)
            .map(|k| self.t_end * k as f64 / self.observations as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForceMethod {
    #[default]
    AllPairs,
    /// Linked cells of side >= the taper radius. Falls back to all pairs when
    /// there is no cutoff or fewer than three cells per side.
    CellList,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    pub relative_drift: f64,
}

impl EnergyReport {
    /// Same report with the drift measured against `reference`.
    pub fn relative_to(mut self, reference: &EnergyReport) -> Self {
        let denom = reference.total.abs();
        let diff = (self.total - reference.total).abs();
        self.relative_drift = if denom > 0.0 { diff / denom } else { diff };
        self
    }
}

/// `E_pot = (1/(2N)) Σ_{i≠j} φ(X_i - X_j)`.
pub fn potential_energy(state: &PhaseState, spec: &PotentialSpec) -> Result<f64> {
    let n = state.n();
    let pos = state.positions();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = pair_displacement(&pos[i], &pos[j]);
            sum += spec.potential_value(d).map_err(|_| Error::Singularity { distance: 0.0 })?;
        }
    }
    Ok(sum / n as f64)
}

pub fn total_energy(state: &PhaseState, spec: &PotentialSpec) -> Result<EnergyReport> {
    let kinetic = state.kinetic_energy();
    let potential = potential_energy(state, spec)?;
    Ok(EnergyReport {
        kinetic,
        potential,
        total: kinetic + potential,
        relative_drift: 0.0,
    })
}

#[inline]
fn wrap_diff(d: f64) -> f64 {
    if d > 0.5 {
        d - 1.0
    } else if d < -0.5 {
        d + 1.0
    } else {
        d
    }
}

/// Minimal image of `a - b` for two wrapped positions.
#[inline]
fn pair_displacement(a: &TorusVector, b: &TorusVector) -> Vec3 {
    let a = a.coords();
    let b = b.coords();
    [wrap_diff(a[0] - b[0]), wrap_diff(a[1] - b[1]), wrap_diff(a[2] - b[2])]
}

/// Accumulates `F_i = (1/N) Σ_{j≠i} K(X_i - X_j)` into `out` and returns the
/// minimum pair distance seen among the visited pairs.
fn accumulate_forces(
    positions: &[TorusVector],
    spec: &PotentialSpec,
    method: ForceMethod,
    out: &mut [Vec3],
) -> Result<f64> {
    out.iter_mut().for_each(|f| *f = [0.0; 3]);
    let n = positions.len();
    let inv_n = 1.0 / n as f64;
    let mut min_d2 = f64::INFINITY;
    let mut visit = |i: usize, j: usize, out: &mut [Vec3]| -> Result<()> {
        let d = pair_displacement(&positions[i], &positions[j]);
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        if r2 < min_d2 {
            min_d2 = r2;
        }
        if spec.is_free() {
            return Ok(());
        }
        if r2 == 0.0 {
            return Err(Error::Singularity { distance: 0.0 });
        }
        let (_, k) = spec.pair_kernel(d);
        let fi = &mut out[i];
        fi[0] += k[0] * inv_n;
        fi[1] += k[1] * inv_n;
        fi[2] += k[2] * inv_n;
        let fj = &mut out[j];
        fj[0] -= k[0] * inv_n;
        fj[1] -= k[1] * inv_n;
        fj[2] -= k[2] * inv_n;
        Ok(())
    };

    let cells = match (method, spec.cutoff()) {
        (ForceMethod::CellList, Some(rc)) => CellGrid::build(positions, rc),
        _ => None,
    };
    match cells {
        None => {
            for i in 0..n {
                for j in (i + 1)..n {
                    visit(i, j, out)?;
                }
            }
        }
        Some(grid) => {
            for i in 0..n {
                let c = grid.cell_of[i];
                for nb in grid.neighbors(c) {
                    for &j in grid.members(nb) {
                        if j > i {
                            visit(i, j, out)?;
                        }
                    }
                }
            }
        }
    }
    Ok(min_d2.sqrt())
}

/// Linked-cell binning of the unit torus.
struct CellGrid {
    per_side: usize,
    cell_of: Vec<usize>,
    starts: Vec<usize>,
    sorted: Vec<usize>,
}

impl CellGrid {
    fn build(positions: &[TorusVector], cutoff: f64) -> Option<Self> {
        let per_side = (1.0 / cutoff).floor() as usize;
        if per_side < 3 {
            return None;
        }
        let ncells = per_side * per_side * per_side;
        let cell_of: Vec<usize> = positions
            .iter()
            .map(|p| {
                let c = p.coords();
                let ix = ((c[0] * per_side as f64) as usize).min(per_side - 1);
                let iy = ((c[1] * per_side as f64) as usize).min(per_side - 1);
                let iz = ((c[2] * per_side as f64) as usize).min(per_side - 1);
                (ix * per_side + iy) * per_side + iz
            })
            .collect();
        let mut counts = vec![0usize; ncells + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for k in 0..ncells {
            counts[k + 1] += counts[k];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut sorted = vec![0usize; positions.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            sorted[fill[c]] = i;
            fill[c] += 1;
        }
        Some(Self {
            per_side,
            cell_of,
            starts,
            sorted,
        })
    }

    fn members(&self, cell: usize) -> &[usize] {
        &self.sorted[self.starts[cell]..self.starts[cell + 1]]
    }

    fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.per_side as isize;
        let ix = (cell / (self.per_side * self.per_side)) as isize;
        let iy = ((cell / self.per_side) % self.per_side) as isize;
        let iz = (cell % self.per_side) as isize;
        (0..27).map(move |k| {
            let dx = k / 9 - 1;
            let dy = (k / 3) % 3 - 1;
            let dz = k % 3 - 1;
            let x = (ix + dx).rem_euclid(m) as usize;
            let y = (iy + dy).rem_euclid(m) as usize;
            let z = (iz + dz).rem_euclid(m) as usize;
            (x * self.per_side + y) * self.per_side + z
        })
    }
}

/// Forces on every particle, `F_i = (1/N) Σ_{j≠i} K(X_i - X_j)`.
pub fn force_all(state: &PhaseState, spec: &PotentialSpec) -> Result<Vec<Vec3>> {
    force_all_with(state, spec, ForceMethod::AllPairs)
}

pub fn force_all_with(
    state: &PhaseState,
    spec: &PotentialSpec,
    method: ForceMethod,
) -> Result<Vec<Vec3>> {
    let mut out = vec![[0.0; 3]; state.n()];
    accumulate_forces(state.positions(), spec, method, &mut out)?;
    Ok(out)
}

/// One velocity-Verlet step from `state`.
pub fn step(state: &PhaseState, spec: &PotentialSpec, dt: f64) -> Result<PhaseState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt = {dt} must be > 0")));
    }
    let mut traj = Trajectory::new(state.clone(), spec, ForceMethod::AllPairs)?;
    traj.step(dt)?;
    Ok(traj.into_state())
}

/// A state together with its cached forces, advanced step by step.
pub struct Trajectory<'a> {
    spec: &'a PotentialSpec,
    method: ForceMethod,
    state: PhaseState,
    forces: Vec<Vec3>,
    min_pair_distance: f64,
}

impl<'a> Trajectory<'a> {
    pub fn new(state: PhaseState, spec: &'a PotentialSpec, method: ForceMethod) -> Result<Self> {
        let mut forces = vec![[0.0; 3]; state.n()];
        let min_pair_distance = accumulate_forces(state.positions(), spec, method, &mut forces)?;
        Ok(Self {
            spec,
            method,
            state,
            forces,
            min_pair_distance,
        })
    }

    pub fn state(&self) -> &PhaseState {
        &self.state
    }

    pub fn into_state(self) -> PhaseState {
        self.state
    }

    /// Minimum pair distance at the current positions.
    pub fn min_pair_distance(&self) -> f64 {
        self.min_pair_distance
    }

    /// Kick, drift, kick. Returns the minimum pair distance after the step.
    pub fn step(&mut self, dt: f64) -> Result<f64> {
        let half = 0.5 * dt;
        {
            let (pos, vel) = self.state.parts_mut();
            for ((v, f), p) in vel.iter_mut().zip(&self.forces).zip(pos.iter_mut()) {
                v[0] += half * f[0];
                v[1] += half * f[1];
                v[2] += half * f[2];
                let c = p.coords();
                *p = TorusVector::new([
                    wrap_coord(c[0] + dt * v[0]),
                    wrap_coord(c[1] + dt * v[1]),
                    wrap_coord(c[2] + dt * v[2]),
                ]);
            }
        }
        self.min_pair_distance =
            accumulate_forces(self.state.positions(), self.spec, self.method, &mut self.forces)?;
        let (_, vel) = self.state.parts_mut();
        for (v, f) in vel.iter_mut().zip(&self.forces) {
            v[0] += half * f[0];
            v[1] += half * f[1];
            v[2] += half * f[2];
        }
        Ok(self.min_pair_distance)
    }
}

/// Evolves a single state to `t_end` with a fixed step, without checks.
pub fn evolve(
    state: &PhaseState,
    spec: &PotentialSpec,
    dt: f64,
    steps: usize,
    method: ForceMethod,
) -> Result<PhaseState> {
    let mut traj = Trajectory::new(state.clone(), spec, method)?;
    for _ in 0..steps {
        traj.step(dt)?;
    }
    Ok(traj.into_state())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    DistanceFloor,
    EnergyDrift,
    Singularity,
}

impl RejectionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DistanceFloor => "distance_floor",
            Self::EnergyDrift => "energy_drift",
            Self::Singularity => "singularity",
        }
    }
}

/// One observation of a pair of trajectories.
#[derive(Clone, Debug)]
pub struct PairRecord<T> {
    pub t: f64,
    pub energy: EnergyReport,
    pub energy_shifted: EnergyReport,
    pub observed: T,
}

#[derive(Clone, Debug)]
pub enum PairOutcome<T> {
    Accepted {
        records: Vec<PairRecord<T>>,
        dt_used: f64,
        halvings: u32,
        min_pair_distance: f64,
    },
    Rejected {
        reason: RejectionReason,
        halvings: u32,
    },
}

impl<T> PairOutcome<T> {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted { .. })
    }
}

enum Attempt<T> {
    Done(Vec<PairRecord<T>>, f64),
    Reject(RejectionReason),
}

/// Integrates `z0` and `z0_shifted` on the same step schedule, calling
/// `observe(t, z, z_shifted)` at every observation time (including `t = 0`).
/// When the relative energy drift of either trajectory exceeds the tolerance,
/// the pair is rerun with half the step, at most `cfg.max_halvings` times.
pub fn evolve_pair<T, F>(
    z0: &PhaseState,
    z0_shifted: &PhaseState,
    spec: &PotentialSpec,
    cfg: &IntegratorConfig,
    mut observe: F,
) -> Result<PairOutcome<T>>
where
    F: FnMut(f64, &PhaseState, &PhaseState) -> T,
{
    if z0.n() != z0_shifted.n() {
        return Err(Error::SizeMismatch {
            left: z0.n(),
            right: z0_shifted.n(),
        });
    }
    cfg.validate()?;
    let mut dt = cfg.dt;
    let mut halvings = 0;
    loop {
        match attempt_pair(z0, z0_shifted, spec, cfg, dt, &mut observe)? {
            Attempt::Done(records, min_pair_distance) => {
                return Ok(PairOutcome::Accepted {
                    records,
                    dt_used: dt,
                    halvings,
                    min_pair_distance,
                })
            }
            Attempt::Reject(RejectionReason::EnergyDrift) if halvings < cfg.max_halvings => {
                dt *= 0.5;
                halvings += 1;
            }
            Attempt::Reject(reason) => return Ok(PairOutcome::Rejected { reason, halvings }),
        }
    }
}

fn attempt_pair<T, F>(
    z0: &PhaseState,
    z0_shifted: &PhaseState,
    spec: &PotentialSpec,
    cfg: &IntegratorConfig,
    dt: f64,
    observe: &mut F,
) -> Result<Attempt<T>>
where
    F: FnMut(f64, &PhaseState, &PhaseState) -> T,
{
    let floor = cfg.min_pair_distance_floor;
    let (mut a, mut b) = match (
        Trajectory::new(z0.clone(), spec, cfg.force_method),
        Trajectory::new(z0_shifted.clone(), spec, cfg.force_method),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Ok(Attempt::Reject(RejectionReason::Singularity)),
    };
    let mut min_dist = a.min_pair_distance().min(b.min_pair_distance());
    if min_dist < floor {
        return Ok(Attempt::Reject(RejectionReason::DistanceFloor));
    }
    let (e0a, e0b) = match (total_energy(a.state(), spec), total_energy(b.state(), spec)) {
        (Ok(x), Ok(y)) => (x, y),
        _ => return Ok(Attempt::Reject(RejectionReason::Singularity)),
    };
    let steps_per_obs = cfg.steps_per_observation(dt)?;
    let times = cfg.observation_times();
    let mut records = Vec::with_capacity(times.len());
    records.push(PairRecord {
        t: 0.0,
        energy: e0a,
        energy_shifted: e0b,
        observed: observe(0.0, a.state(), b.state()),
    });
    for &t in &times[1..] {
        for _ in 0..steps_per_obs {
            let (da, db) = match (a.step(dt), b.step(dt)) {
                (Ok(x), Ok(y)) => (x, y),
                _ => return Ok(Attempt::Reject(RejectionReason::Singularity)),
            };
            min_dist = min_dist.min(da).min(db);
            if min_dist < floor {
                return Ok(Attempt::Reject(RejectionReason::DistanceFloor));
            }
        }
        let (ea, eb) = match (total_energy(a.state(), spec), total_energy(b.state(), spec)) {
            (Ok(x), Ok(y)) => (x.relative_to(&e0a), y.relative_to(&e0b)),
            _ => return Ok(Attempt::Reject(RejectionReason::Singularity)),
        };
        if ea.relative_drift > cfg.energy_drift_tolerance
            || eb.relative_drift > cfg.energy_drift_tolerance
        {
            return Ok(Attempt::Reject(RejectionReason::EnergyDrift));
        }
        records.push(PairRecord {
            t,
            energy: ea,
            energy_shifted: eb,
            observed: observe(t, a.state(), b.state()),
        });
    }
    Ok(Attempt::Done(records, min_dist))
}

/// Largest deviation between `force_all` and the central finite-difference
/// gradient `-∂E_pot/∂X_i` (step `h`), relative to the largest force component.
pub fn force_gradient_error(state: &PhaseState, spec: &PotentialSpec, h: f64) -> Result<f64> {
    let n = state.n();
    let f = force_all(state, spec)?;
    let zero = vec![[0.0; 3]; n];
    let mut scale: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..3 {
            let mut dx = vec![[0.0; 3]; n];
            dx[i][k] = h;
            let plus = potential_energy(&state.shifted(&dx, &zero)?, spec)?;
            dx[i][k] = -h;
            let minus = potential_energy(&state.shifted(&dx, &zero)?, spec)?;
            let fd = -(plus - minus) / (2.0 * h);
            worst = worst.max((f[i][k] - fd).abs());
            scale = scale.max(f[i][k].abs());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Appends one snapshot as CSV rows `t,particle,x,y,z,vx,vy,vz`.
pub fn write_trajectory_rows<W: Write>(w: &mut W, t: f64, state: &PhaseState) -> std::io::Result<()> {
    for (i, (p, v)) in state.positions().iter().zip(state.velocities()).enumerate() {
        let c = p.coords();
        writeln!(
            w,
            "{t},{i},{},{},{},{},{},{}",
            c[0], c[1], c[2], v[0], v[1], v[2]
        )?;
    }
    Ok(())
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,particle,x,y,z,vx,vy,vz";
