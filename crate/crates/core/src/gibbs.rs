//! Sampling of the Gibbs equilibrium `μ_N ∝ exp(-β H_N)` and numerical checks
//! of the partition-function and marginal bounds.
//!
//! The measure factorizes: velocities are i.i.d. centered Gaussians with
//! variance `1/β` per component, positions follow `ν_N ∝ exp(-β E_pot)` and
//! are drawn by a single-particle Metropolis chain.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::PotentialSpec;
use crate::quadrature::{adaptive_1d, adaptive_3d};
use crate::state::PhaseState;
use crate::stats::{batch_means_stderr, pairwise_sum};
use crate::torus::{minimal_image_coord, norm, wrap_coord, TorusVector, Vec3};

/// Proposals closer than this to another particle are rejected outright.
pub const HARD_CORE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsParams {
    pub beta: f64,
    pub n: usize,
    pub spec: PotentialSpec,
}

impl GibbsParams {
    pub fn new(beta: f64, n: usize, spec: PotentialSpec) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta = {beta} must be > 0")));
        }
        if n < 2 {
            return Err(Error::InvalidParameter(format!("n = {n} must be >= 2")));
        }
        Ok(Self { beta, n, spec })
    }

    /// `c_β = exp(-β φ_min)`, the marginal-density constant.
    pub fn c_beta(&self) -> f64 {
        (-self.beta * self.spec.phi_min()).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Burn-in length in sweeps (one sweep = N single-particle moves).
    pub burn_in_sweeps: usize,
    /// Sweeps between kept samples.
    pub thin_sweeps: usize,
    pub initial_step: f64,
    pub target_acceptance: f64,
    pub max_step: f64,
    /// Number of windows compared by the stationarity check.
    pub windows: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in_sweeps: 10_000,
            thin_sweeps: 1,
            initial_step: 0.1,
            target_acceptance: 0.3,
            max_step: 0.5,
            windows: 4,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin_sweeps == 0 {
            return Err(Error::InvalidParameter("thin_sweeps must be >= 1".into()));
        }
        if !(self.initial_step > 0.0 && self.max_step > 0.0) {
            return Err(Error::InvalidParameter("chain step sizes must be > 0".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidParameter(
                "target_acceptance must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    pub burn_in_moves: usize,
    pub thinning_moves: usize,
    pub step_size: f64,
    pub window_means: Vec<f64>,
    pub window_stderrs: Vec<f64>,
    pub stationary: bool,
}

pub fn sample_velocities<R: Rng + ?Sized>(params: &GibbsParams, rng: &mut R) -> Vec<Vec3> {
    let normal = Normal::new(0.0, 1.0 / params.beta.sqrt()).expect("beta > 0");
    (0..params.n)
        .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
        .collect()
}

/// Single-particle Metropolis chain targeting `exp(-β E_pot)`.
pub struct PositionChain<'a> {
    params: &'a GibbsParams,
    positions: Vec<TorusVector>,
    /// Σ_{i<j} g(X_i - X_j) without the mean shift.
    pair_sum: f64,
    step: f64,
    accepted: usize,
    proposed: usize,
}

impl<'a> PositionChain<'a> {
    /// Starts from uniform positions, re-drawing any particle that lands
    /// within the hard core of another.
    pub fn new<R: Rng + ?Sized>(params: &'a GibbsParams, step: f64, rng: &mut R) -> Self {
        let mut positions: Vec<TorusVector> = Vec::with_capacity(params.n);
        while positions.len() < params.n {
            let p = TorusVector::new([rng.random(), rng.random(), rng.random()]);
            if positions
                .iter()
                .all(|q| norm(displacement(&p, q)) > HARD_CORE)
            {
                positions.push(p);
            }
        }
        let mut chain = Self {
            params,
            positions,
            pair_sum: 0.0,
            step,
            accepted: 0,
            proposed: 0,
        };
        chain.pair_sum = chain.full_pair_sum();
        chain
    }

    fn full_pair_sum(&self) -> f64 {
        let n = self.positions.len();
        let mut terms = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                terms.push(
                    self.params
                        .spec
                        .pair_energy(displacement(&self.positions[i], &self.positions[j])),
                );
            }
        }
        pairwise_sum(&terms)
    }

    /// Interaction of particle `i`, placed at `p`, with all others. `None` if
    /// inside the hard core of another particle.
    fn particle_energy(&self, i: usize, p: &TorusVector) -> Option<f64> {
        let mut e = 0.0;
        for (j, q) in self.positions.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = displacement(p, q);
            if norm(d) < HARD_CORE {
                return None;
            }
            e += self.params.spec.pair_energy(d);
        }
        Some(e)
    }

    pub fn positions(&self) -> &[TorusVector] {
        &self.positions
    }

    /// Current `E_pot = (1/N) Σ_{i<j} φ(X_i - X_j)`.
    pub fn potential_energy(&self) -> f64 {
        let n = self.params.n as f64;
        self.pair_sum / n - self.params.spec.mean_shift() * (n - 1.0) / 2.0
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    fn reset_counters(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// One Metropolis move of particle `i`.
    pub fn move_particle<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        self.proposed += 1;
        let old = self.positions[i];
        let g: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let c = old.coords();
        let new = TorusVector::new([
            wrap_coord(c[0] + self.step * g[0]),
            wrap_coord(c[1] + self.step * g[1]),
            wrap_coord(c[2] + self.step * g[2]),
        ]);
        let u: f64 = rng.random();
        if self.params.spec.is_free() {
            self.positions[i] = new;
            self.accepted += 1;
            return;
        }
        let Some(e_new) = self.particle_energy(i, &new) else {
            return;
        };
        let e_old = self
            .particle_energy(i, &old)
            .unwrap_or(f64::INFINITY);
        let delta = (e_new - e_old) / self.params.n as f64;
        if delta <= 0.0 || u < (-self.params.beta * delta).exp() {
            self.positions[i] = new;
            self.pair_sum += e_new - e_old;
            self.accepted += 1;
        }
    }

    /// `sweeps` sweeps over the particles in index order.
    pub fn sweep<R: Rng + ?Sized>(&mut self, sweeps: usize, rng: &mut R) {
        for _ in 0..sweeps {
            for i in 0..self.params.n {
                self.move_particle(i, rng);
            }
        }
    }

    /// Burn-in with step-size adaptation towards the target acceptance; the
    /// step is frozen afterwards so the kept samples come from a fixed kernel.
    pub fn burn_in<R: Rng + ?Sized>(&mut self, cfg: &ChainConfig, rng: &mut R) {
        const BLOCK: usize = 10;
        let mut done = 0;
        while done < cfg.burn_in_sweeps {
            let k = BLOCK.min(cfg.burn_in_sweeps - done);
            self.reset_counters();
            self.sweep(k, rng);
            done += k;
            let acc = self.acceptance_rate();
            self.step = (self.step * (acc - cfg.target_acceptance).exp()).clamp(1e-5, cfg.max_step);
        }
        // resynchronize the running pair sum
        self.pair_sum = self.full_pair_sum();
        self.reset_counters();
    }
}

#[inline]
fn displacement(a: &TorusVector, b: &TorusVector) -> Vec3 {
    let a = a.coords();
    let b = b.coords();
    [
        minimal_image_coord(a[0] - b[0]),
        minimal_image_coord(a[1] - b[1]),
        minimal_image_coord(a[2] - b[2]),
    ]
}

/// Runs a chain and keeps `count` position samples, `thin_sweeps` apart.
pub fn sample_positions_mcmc<R: Rng + ?Sized>(
    params: &GibbsParams,
    chain_cfg: &ChainConfig,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<TorusVector>>, ChainDiagnostics)> {
    let mut out = Vec::with_capacity(count);
    let diag = run_chain(params, chain_cfg, count, rng, |chain| {
        out.push(chain.positions().to_vec());
    })?;
    Ok((out, diag))
}

/// Generic chain driver: calls `keep` at each kept sample.
pub fn run_chain<R: Rng + ?Sized, F: FnMut(&PositionChain<'_>)>(
    params: &GibbsParams,
    chain_cfg: &ChainConfig,
    count: usize,
    rng: &mut R,
    mut keep: F,
) -> Result<ChainDiagnostics> {
    chain_cfg.validate()?;
    let mut chain = PositionChain::new(params, chain_cfg.initial_step, rng);
    chain.burn_in(chain_cfg, rng);
    let mut energies = Vec::with_capacity(count);
    for _ in 0..count {
        chain.sweep(chain_cfg.thin_sweeps, rng);
        energies.push(chain.potential_energy());
        keep(&chain);
    }
    Ok(diagnostics(
        &energies,
        &chain,
        chain_cfg,
        chain_cfg.burn_in_sweeps * params.n,
    ))
}

fn diagnostics(
    energies: &[f64],
    chain: &PositionChain<'_>,
    cfg: &ChainConfig,
    burn_in_moves: usize,
) -> ChainDiagnostics {
    let w = cfg.windows.max(1);
    let size = energies.len() / w;
    let mut window_means = Vec::new();
    let mut window_stderrs = Vec::new();
    if size >= 2 {
        for k in 0..w {
            let win = &energies[k * size..(k + 1) * size];
            window_means.push(pairwise_sum(win) / size as f64);
            window_stderrs.push(batch_means_stderr(win, 10));
        }
    }
    let mut stationary = true;
    for a in 0..window_means.len() {
        for b in (a + 1)..window_means.len() {
            let se = (window_stderrs[a].powi(2) + window_stderrs[b].powi(2)).sqrt();
            if (window_means[a] - window_means[b]).abs() > 5.0 * se && se > 0.0 {
                stationary = false;
            }
        }
    }
    ChainDiagnostics {
        acceptance_rate: chain.acceptance_rate(),
        burn_in_moves,
        thinning_moves: cfg.thin_sweeps * chain.params.n,
        step_size: chain.step_size(),
        window_means,
        window_stderrs,
        stationary,
    }
}

/// One draw from `μ_N`: chain positions and independent Gaussian velocities.
pub fn sample_gibbs<R: Rng + ?Sized>(
    params: &GibbsParams,
    chain_cfg: &ChainConfig,
    rng: &mut R,
) -> Result<(PhaseState, ChainDiagnostics)> {
    let (mut pos, diag) = sample_positions_mcmc(params, chain_cfg, 1, rng)?;
    let vel = sample_velocities(params, rng);
    Ok((PhaseState::new(pos.pop().expect("one sample"), vel)?, diag))
}

/// `count` draws from one chain (`thin_sweeps` apart), each with fresh velocities.
pub fn sample_gibbs_many<R: Rng + ?Sized>(
    params: &GibbsParams,
    chain_cfg: &ChainConfig,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<PhaseState>, ChainDiagnostics)> {
    let (pos, diag) = sample_positions_mcmc(params, chain_cfg, count, rng)?;
    let states = pos
        .into_iter()
        .map(|p| PhaseState::new(p, sample_velocities(params, rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok((states, diag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Target relative error of the configurational integral.
    pub relative_tolerance: f64,
    pub max_evaluations: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-4,
            max_evaluations: 20_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionBoundReport {
    pub beta: f64,
    pub alpha: f64,
    pub amplitude: f64,
    pub phi_min: f64,
    /// `B_{2,X} = ∫ exp(-β φ(x)/2) dx`
    pub configurational: f64,
    pub b2: f64,
    /// Estimated absolute quadrature error on `b2`.
    pub b2_error: f64,
    pub relative_error: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
    pub status: CheckStatus,
}

/// Checks `(2π/β)^3 <= B_2 <= (2π e^{-β φ_min / 3} / β)^3` by cubature of the
/// two-particle configurational integral.
pub fn verify_partition_bounds(
    params: &GibbsParams,
    quad: &QuadratureConfig,
) -> Result<PartitionBoundReport> {
    if params.n != 2 {
        return Err(Error::InvalidParameter(format!(
            "partition-function quadrature needs n = 2, got {}",
            params.n
        )));
    }
    let beta = params.beta;
    let spec = &params.spec;
    // E_pot = φ/2 for two particles; the integrand is even in each coordinate
    let integrand = |x: Vec3| match spec.potential_value(x) {
        Ok(v) => (-0.5 * beta * v).exp(),
        Err(_) => 0.0,
    };
    let (value, error) = if spec.is_free() {
        (1.0, 0.0)
    } else {
        let tol = quad.relative_tolerance * 1e-2;
        let coarse = adaptive_3d(integrand, [0.0; 3], [0.5; 3], tol / 8.0, quad.max_evaluations);
        let fine = adaptive_3d(integrand, [0.0; 3], [0.5; 3], tol / 80.0, quad.max_evaluations);
        let v = 8.0 * fine.value;
        let e = 8.0 * (fine.error + (fine.value - coarse.value).abs());
        (v, e)
    };
    let gauss = (2.0 * PI / beta).powi(3);
    let b2 = gauss * value;
    let b2_error = gauss * error;
    let lower_bound = gauss;
    let upper_bound = (2.0 * PI * (-beta * spec.phi_min() / 3.0).exp() / beta).powi(3);
    let slack = 1e-12;
    let lower_holds = b2 - b2_error >= lower_bound * (1.0 - slack);
    let upper_holds = b2 + b2_error <= upper_bound * (1.0 + slack);
    let relative_error = b2_error / b2;
    let status = if relative_error > 5e-3 {
        CheckStatus::Inconclusive
    } else if lower_holds && upper_holds {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(PartitionBoundReport {
        beta,
        alpha: spec.alpha(),
        amplitude: spec.amplitude(),
        phi_min: spec.phi_min(),
        configurational: value,
        b2,
        b2_error,
        relative_error,
        lower_bound,
        upper_bound,
        lower_margin: b2 - lower_bound,
        upper_margin: upper_bound - b2,
        lower_holds,
        upper_holds,
        status,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub k: usize,
    pub samples: usize,
    pub bins_per_side: usize,
    pub widened: bool,
    pub bound: f64,
    pub max_density: f64,
    pub max_density_stderr: f64,
    /// Largest `(density - bound) / stderr` over bins.
    pub worst_z: f64,
    pub min_count: usize,
    pub holds: bool,
    pub note: Option<String>,
    pub densities: Vec<f64>,
}

/// Histogram estimate of the one-particle (`k = 1`) or pair-displacement
/// (`k = 2`) position marginal, compared against `c_β^k`.
pub fn verify_marginal_bounds<R: Rng + ?Sized>(
    params: &GibbsParams,
    k: usize,
    samples: usize,
    bins_per_side: usize,
    chain_cfg: &ChainConfig,
    rng: &mut R,
) -> Result<MarginalReport> {
    if !(k == 1 || k == 2) {
        return Err(Error::InvalidParameter(format!(
            "marginal check supports k = 1 or 2, got {k}"
        )));
    }
    let mut points: Vec<Vec3> = Vec::with_capacity(samples);
    run_chain(params, chain_cfg, samples, rng, |chain| {
        let p = chain.positions();
        let x = if k == 1 {
            p[0].coords()
        } else {
            TorusVector::new(displacement(&p[0], &p[1])).coords()
        };
        points.push(x);
    })?;
    let bound = params.c_beta().powi(k as i32);
    Ok(histogram_report(&points, k, bins_per_side, bound))
}

fn histogram_report(points: &[Vec3], k: usize, bins_per_side: usize, bound: f64) -> MarginalReport {
    let m = points.len();
    let mut b = bins_per_side.max(1);
    let mut widened = false;
    loop {
        let counts = bin_counts(points, b);
        let min_count = counts.iter().copied().min().unwrap_or(0);
        if min_count < 20 && b > 1 {
            b /= 2;
            widened = true;
            continue;
        }
        let vol = 1.0 / (b * b * b) as f64;
        let mut max_density = 0.0;
        let mut max_se = 0.0;
        let mut worst_z = f64::NEG_INFINITY;
        let mut densities = Vec::with_capacity(counts.len());
        for &c in &counts {
            let p = c as f64 / m as f64;
            let d = p / vol;
            let se = (p * (1.0 - p) / m as f64).sqrt() / vol;
            densities.push(d);
            if d > max_density {
                max_density = d;
                max_se = se;
            }
            let z = if se > 0.0 { (d - bound) / se } else if d > bound { f64::INFINITY } else { f64::NEG_INFINITY };
            worst_z = worst_z.max(z);
        }
        let holds = counts
            .iter()
            .zip(&densities)
            .all(|(&c, &d)| {
                let p = c as f64 / m as f64;
                let se = (p * (1.0 - p) / m as f64).sqrt() / vol;
                d <= bound + 3.0 * se
            });
        return MarginalReport {
            k,
            samples: m,
            bins_per_side: b,
            widened,
            bound,
            max_density,
            max_density_stderr: max_se,
            worst_z,
            min_count,
            holds,
            note: widened.then(|| {
                format!("bins widened from {bins_per_side} to {b} per side for >= 20 counts")
            }),
            densities,
        };
    }
}

fn bin_counts(points: &[Vec3], b: usize) -> Vec<usize> {
    let mut counts = vec![0usize; b * b * b];
    let bf = b as f64;
    for p in points {
        let ix = ((p[0] * bf) as usize).min(b - 1);
        let iy = ((p[1] * bf) as usize).min(b - 1);
        let iz = ((p[2] * bf) as usize).min(b - 1);
        counts[(ix * b + iy) * b + iz] += 1;
    }
    counts
}

/// Pair-distance density of `ν²` on radial shells `[edges[k], edges[k+1])`,
/// pooled over all pairs of every kept sample. Edges must stay below 1/2 so
/// that shells are full spheres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialDensity {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pairs: usize,
}

pub fn radial_pair_density<R: Rng + ?Sized>(
    params: &GibbsParams,
    chain_cfg: &ChainConfig,
    samples: usize,
    edges: &[f64],
    rng: &mut R,
) -> Result<RadialDensity> {
    if edges.windows(2).any(|w| w[1] <= w[0]) || edges.last().copied().unwrap_or(1.0) > 0.5 {
        return Err(Error::InvalidParameter(
            "radial edges must increase and stay <= 1/2".into(),
        ));
    }
    let nb = edges.len() - 1;
    let mut counts = vec![0usize; nb];
    let mut pairs = 0usize;
    let r_max = *edges.last().expect("edges");
    run_chain(params, chain_cfg, samples, rng, |chain| {
        let p = chain.positions();
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                pairs += 1;
                let r = norm(displacement(&p[i], &p[j]));
                if r < edges[0] || r >= r_max {
                    continue;
                }
                let k = edges.partition_point(|e| *e <= r) - 1;
                counts[k] += 1;
            }
        }
    })?;
    let mut density = Vec::with_capacity(nb);
    let mut stderr = Vec::with_capacity(nb);
    for k in 0..nb {
        let vol = 4.0 / 3.0 * PI * (edges[k + 1].powi(3) - edges[k].powi(3));
        let p = counts[k] as f64 / pairs as f64;
        density.push(p / vol);
        stderr.push((p * (1.0 - p) / pairs as f64).sqrt() / vol);
    }
    Ok(RadialDensity {
        edges: edges.to_vec(),
        counts,
        density,
        stderr,
        pairs,
    })
}

/// Probability that the minimal-image distance of a two-particle Gibbs pair
/// falls in each shell, from 1-D quadrature of `4πr² exp(-β φ(r)/2)`.
/// Requires a taper radius <= 1/2 so that `φ` is radial and constant beyond it.
pub fn two_particle_shell_probabilities(params: &GibbsParams, edges: &[f64]) -> Result<Vec<f64>> {
    let spec = &params.spec;
    let rc = match spec.taper_radius() {
        Some(rc) if rc <= 0.5 => rc,
        _ => {
            return Err(Error::InvalidParameter(
                "shell probabilities need a taper radius <= 1/2".into(),
            ))
        }
    };
    let beta = params.beta;
    let w = |r: f64| {
        let v = if r == 0.0 { f64::INFINITY } else { spec.radial(r).0 } - spec.mean_shift();
        4.0 * PI * r * r * (-0.5 * beta * v).exp()
    };
    let inside = adaptive_1d(w, 0.0, 0.5, 1e-13, 50).value;
    let outside = (1.0 - PI / 6.0) * (0.5 * beta * spec.mean_shift()).exp();
    let z = inside + outside;
    debug_assert!(rc <= 0.5);
    Ok(edges
        .windows(2)
        .map(|e| adaptive_1d(w, e[0], e[1], 1e-14, 50).value / z)
        .collect())
}
