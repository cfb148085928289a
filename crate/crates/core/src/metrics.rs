//! Trajectory-divergence statistics: the `‖·‖₁` phase-space distance, the
//! Monte Carlo estimator of
//! `Q(t) = E ln(1 + ‖Z(t, Z₀) - Z(t, Z₀ + δ)‖₁ / δ_N)`,
//! near-neighbour sets and the force-splitting diagnostics, and affine fits.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve_pair, IntegratorConfig, PairOutcome, RejectionReason};
use crate::error::{Error, Result};
use crate::gibbs::{sample_positions_mcmc, sample_velocities, ChainConfig, GibbsParams};
use crate::potential::PotentialSpec;
use crate::seed::stream;
use crate::shifts::{draw_shift, ShiftSpec};
use crate::state::PhaseState;
use crate::stats::{mean_and_stderr, pairwise_sum};
use crate::torus::{norm, sub, torus_displacement, torus_distance};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Norm1Distance {
    /// `(1/(2N)) Σ d_T(X_i, X_i^δ)`
    pub position: f64,
    /// `(1/(2N)) Σ |V_i - V_i^δ|`
    pub velocity: f64,
}

impl Norm1Distance {
    pub fn value(&self) -> f64 {
        self.position + self.velocity
    }
}

pub fn norm1(z: &PhaseState, zs: &PhaseState) -> Result<Norm1Distance> {
    if z.n() != zs.n() {
        return Err(Error::SizeMismatch {
            left: z.n(),
            right: zs.n(),
        });
    }
    let w = 1.0 / (2.0 * z.n() as f64);
    let mut pos = 0.0;
    let mut vel = 0.0;
    for (a, b) in z.positions().iter().zip(zs.positions()) {
        pos += torus_distance(a, b);
    }
    for (a, b) in z.velocities().iter().zip(zs.velocities()) {
        vel += norm(sub(*a, *b));
    }
    Ok(Norm1Distance {
        position: w * pos,
        velocity: w * vel,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremParams {
    pub alpha: f64,
    /// `δ_N = N^{-ε}`
    pub epsilon: f64,
    /// Exponent of the tail constant; must exceed `2α/3`.
    pub a: f64,
    /// Neighbour count; `None` uses `⌈36/(2-α)⌉` capped at `⌊√N⌋`.
    pub l_override: Option<usize>,
}

impl Default for TheoremParams {
    fn default() -> Self {
        Self::for_alpha(1.0)
    }
}

impl TheoremParams {
    /// Defaults: `ε = min(1 - α/3, 1/2)`, `a = 2α/3 + 0.1`.
    pub fn for_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            epsilon: (1.0 - alpha / 3.0).min(0.5),
            a: 2.0 * alpha / 3.0 + 0.1,
            l_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha = {} violates 0 < alpha < 2",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon = {} must be > 0",
                self.epsilon
            )));
        }
        if !(self.a > 2.0 * self.alpha / 3.0) {
            return Err(Error::InvalidParameter(format!(
                "a = {} must exceed 2 alpha / 3 = {}",
                self.a,
                2.0 * self.alpha / 3.0
            )));
        }
        if self.epsilon > 1.0 - self.alpha / 3.0 {
            warn!(
                "epsilon = {} exceeds 1 - alpha/3 = {}; outside the theorem's range",
                self.epsilon,
                1.0 - self.alpha / 3.0
            );
        }
        Ok(())
    }

    pub fn delta_n(&self, n: usize) -> f64 {
        (n as f64).powf(-self.epsilon)
    }

    /// `(L, capped)`; an override is only limited by `N - 1`.
    pub fn neighbor_count(&self, n: usize) -> (usize, bool) {
        if let Some(l) = self.l_override {
            return (l.min(n - 1), l > n - 1);
        }
        let ideal = (36.0 / (2.0 - self.alpha)).ceil() as usize;
        let cap = ((n as f64).sqrt().floor() as usize).clamp(1, n - 1);
        if ideal > cap {
            (cap, true)
        } else {
            (ideal, false)
        }
    }
}

/// `e^{-β φ_min}` (marginal bounds).
pub fn c_beta(params: &GibbsParams) -> f64 {
    params.c_beta()
}

/// `e^{-β φ_min / 2}` as written in the statement of the growth bound.
pub fn c_beta_half(params: &GibbsParams) -> f64 {
    (-0.5 * params.beta * params.spec.phi_min()).exp()
}

/// For each particle the `l` nearest others by torus distance (ties go to the
/// smaller index), sorted by increasing distance.
pub fn neighbor_sets(state: &PhaseState, l: usize) -> Result<Vec<Vec<usize>>> {
    let n = state.n();
    if l >= n {
        return Err(Error::InvalidParameter(format!(
            "neighbour count {l} must be < N = {n}"
        )));
    }
    let pos = state.positions();
    let mut out = Vec::with_capacity(n);
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (torus_distance(&pos[i], &pos[j]), j)),
        );
        if l < row.len() {
            row.select_nth_unstable_by(l, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            row.truncate(l);
        }
        row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(row.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Per-snapshot values of the force-splitting terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProofTermSample {
    /// `(1/(δ_N N²)) Σ_i Σ_{j ∈ C_i ∪ C_i^δ} |K(X_i - X_j)|`
    pub s1: f64,
    /// Same on the shifted configuration.
    pub s1_delta: f64,
    /// `max_i Σ_{j ∉ C_i ∪ C_i^δ} (|X_i - X_j|^{-(α+1)} + |X_i^δ - X_j^δ|^{-(α+1)}) / N`
    pub s2_majorant: f64,
}

pub fn proof_term_sample(
    z: &PhaseState,
    zs: &PhaseState,
    spec: &PotentialSpec,
    l: usize,
    delta_n: f64,
) -> Result<ProofTermSample> {
    let n = z.n();
    if zs.n() != n {
        return Err(Error::SizeMismatch {
            left: n,
            right: zs.n(),
        });
    }
    let c = neighbor_sets(z, l)?;
    let cs = neighbor_sets(zs, l)?;
    let p = z.positions();
    let ps = zs.positions();
    let expo = -(spec.alpha() + 1.0);
    let mut s1 = 0.0;
    let mut s1d = 0.0;
    let mut s2: f64 = 0.0;
    let mut near = vec![false; n];
    for i in 0..n {
        for &j in c[i].iter().chain(&cs[i]) {
            near[j] = true;
        }
        let mut far = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            if near[j] {
                if !spec.is_free() {
                    s1 += norm(spec.pair_kernel(torus_displacement(&p[i], &p[j])).1);
                    s1d += norm(spec.pair_kernel(torus_displacement(&ps[i], &ps[j])).1);
                }
            } else {
                far += torus_distance(&p[i], &p[j]).powf(expo)
                    + torus_distance(&ps[i], &ps[j]).powf(expo);
            }
        }
        s2 = s2.max(far / n as f64);
        near.iter_mut().for_each(|x| *x = false);
    }
    let w = 1.0 / (delta_n * (n * n) as f64);
    Ok(ProofTermSample {
        s1: s1 * w,
        s1_delta: s1d * w,
        s2_majorant: s2,
    })
}

/// Fraction of particles whose nearest partner in the shifted configuration,
/// in the distance `d_T(X) + |ΔV|`, carries the same index.
pub fn pairing_overlap(z: &PhaseState, zs: &PhaseState) -> Result<f64> {
    let n = z.n();
    if zs.n() != n {
        return Err(Error::SizeMismatch {
            left: n,
            right: zs.n(),
        });
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            let d = torus_distance(&z.positions()[i], &zs.positions()[j])
                + norm(sub(z.velocities()[i], zs.velocities()[j]));
            if d < best.0 {
                best = (d, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// What the Q estimator records per sample and observation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub distance: Norm1Distance,
    /// `ln(1 + ‖Z - Z^δ‖₁ / δ_N)`
    pub log_term: f64,
    /// Velocity-difference contribution to `d/dt ln(1 + D/δ_N)`:
    /// `(v/δ_N) / (1 + D/δ_N)` with `v` the velocity part of `D`.
    pub velocity_term: f64,
    pub proof: Option<ProofTermSample>,
    pub overlap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SampleOutcome {
    Accepted {
        observations: Vec<Observation>,
        dt_used: f64,
        halvings: u32,
    },
    Rejected {
        reason: RejectionReason,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QOptions {
    pub proof_terms: bool,
    pub overlap: bool,
    /// Evolve the pair over `[-τ, 0]` before observing (velocity shift
    /// applied at `-τ`, so the shift at `t = 0` has position components).
    pub pre_evolve: f64,
}

/// Everything the estimator needs; one sample is fully determined by this and its index.
#[derive(Clone, Debug)]
pub struct QSetup {
    pub params: GibbsParams,
    pub chain: ChainConfig,
    pub shift: ShiftSpec,
    pub theorem: TheoremParams,
    pub integrator: IntegratorConfig,
    pub samples: usize,
    pub master_seed: u64,
    pub options: QOptions,
}

impl QSetup {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "monte carlo sample count {} must be >= 2",
                self.samples
            )));
        }
        if (self.theorem.alpha - self.params.spec.alpha()).abs() > 0.0 {
            return Err(Error::InvalidParameter(format!(
                "theorem alpha {} differs from potential alpha {}",
                self.theorem.alpha,
                self.params.spec.alpha()
            )));
        }
        if !(self.options.pre_evolve >= 0.0 && self.options.pre_evolve.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "pre-evolution time {} must be >= 0",
                self.options.pre_evolve
            )));
        }
        self.theorem.validate()?;
        self.shift.validate()?;
        self.chain.validate()?;
        self.integrator.validate()
    }

    pub fn delta_n(&self) -> f64 {
        self.theorem.delta_n(self.params.n)
    }

    pub fn neighbor_count(&self) -> (usize, bool) {
        self.theorem.neighbor_count(self.params.n)
    }

    fn pre_evolve_config(&self) -> IntegratorConfig {
        IntegratorConfig {
            t_end: self.options.pre_evolve,
            observations: 1,
            ..self.integrator.clone()
        }
    }

    /// Draws `(Z₀, Z₀ + δ)` for sample `index` from its own random streams.
    pub fn initial_pair(&self, index: u64) -> Result<(PhaseState, PhaseState)> {
        let seed = self.master_seed;
        let mut rng = stream(seed, index, "positions");
        let (mut pos, _) = sample_positions_mcmc(&self.params, &self.chain, 1, &mut rng)?;
        let mut rng = stream(seed, index, "velocities");
        let vel = sample_velocities(&self.params, &mut rng);
        let z0 = PhaseState::new(pos.pop().expect("one sample"), vel)?;
        let shift = self.shift.resolve(self.params.n, self.delta_n());
        let mut rng = stream(seed, index, "shift");
        let delta = draw_shift(&shift, &z0, &mut rng)?;
        let zs = delta.apply(&z0)?;
        Ok((z0, zs))
    }

    /// The pair at `t = 0`, after the optional pre-evolution over `[-τ, 0]`.
    /// `Ok(Err(reason))` when the pre-evolution was rejected.
    pub fn start_pair(
        &self,
        index: u64,
    ) -> Result<std::result::Result<(PhaseState, PhaseState), RejectionReason>> {
        let (z0, zs) = self.initial_pair(index)?;
        if self.options.pre_evolve == 0.0 {
            return Ok(Ok((z0, zs)));
        }
        let cfg = self.pre_evolve_config();
        let outcome = evolve_pair(&z0, &zs, &self.params.spec, &cfg, |_, a, b| {
            (a.clone(), b.clone())
        })?;
        Ok(match outcome {
            PairOutcome::Accepted { mut records, .. } => {
                Ok(records.pop().expect("final record").observed)
            }
            PairOutcome::Rejected { reason, .. } => Err(reason),
        })
    }

    /// Runs one sample end to end.
    pub fn run_sample(&self, index: u64) -> Result<SampleOutcome> {
        let (z0, zs) = match self.start_pair(index)? {
            Ok(p) => p,
            Err(reason) => return Ok(SampleOutcome::Rejected { reason }),
        };
        let delta_n = self.delta_n();
        let (l, _) = self.neighbor_count();
        let spec = &self.params.spec;
        let opts = &self.options;
        let mut failure: Option<Error> = None;
        let outcome = evolve_pair(&z0, &zs, spec, &self.integrator, |t, a, b| {
            let distance = norm1(a, b).unwrap_or_default();
            let x = distance.value() / delta_n;
            let proof = if opts.proof_terms {
                match proof_term_sample(a, b, spec, l, delta_n) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        failure.get_or_insert(e);
                        None
                    }
                }
            } else {
                None
            };
            Observation {
                t,
                distance,
                log_term: x.ln_1p(),
                velocity_term: (distance.velocity / delta_n) / (1.0 + x),
                proof,
                overlap: if opts.overlap {
                    pairing_overlap(a, b).ok()
                } else {
                    None
                },
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(match outcome {
            PairOutcome::Accepted {
                records,
                dt_used,
                halvings,
                ..
            } => SampleOutcome::Accepted {
                observations: records.into_iter().map(|r| r.observed).collect(),
                dt_used,
                halvings,
            },
            PairOutcome::Rejected { reason, .. } => SampleOutcome::Rejected { reason },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QCurve {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub stderr: Vec<f64>,
    pub m_requested: usize,
    pub m_effective: usize,
    pub delta_n: f64,
    pub epsilon: f64,
    pub rejections: BTreeMap<String, usize>,
}

impl QCurve {
    pub fn rejected(&self) -> usize {
        self.m_requested - self.m_effective
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofTermReport {
    pub times: Vec<f64>,
    pub s1: Vec<f64>,
    pub s1_stderr: Vec<f64>,
    pub s1_delta: Vec<f64>,
    pub s1_delta_stderr: Vec<f64>,
    pub s2_majorant: Vec<f64>,
    pub s2_majorant_stderr: Vec<f64>,
    pub l: usize,
    pub l_capped: bool,
}

impl ProofTermReport {
    /// Trapezoidal time average of the mean S₂ majorant.
    pub fn s2_time_average(&self) -> f64 {
        time_average(&self.times, &self.s2_majorant)
    }
}

fn time_average(t: &[f64], y: &[f64]) -> f64 {
    if t.len() < 2 || t[t.len() - 1] == t[0] {
        return y.first().copied().unwrap_or(f64::NAN);
    }
    let mut s = 0.0;
    for k in 1..t.len() {
        s += 0.5 * (y[k] + y[k - 1]) * (t[k] - t[k - 1]);
    }
    s / (t[t.len() - 1] - t[0])
}

/// Split of `‖δ(0)‖₁` into position and velocity parts over accepted samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialShiftStats {
    pub mean_position: f64,
    pub mean_velocity: f64,
    /// `mean_position / (mean_position + mean_velocity)`
    pub position_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QRun {
    pub curve: QCurve,
    pub proof_terms: Option<ProofTermReport>,
    /// Mean pairing overlap per observation time.
    pub overlap: Option<Vec<f64>>,
    /// Largest velocity term over all samples and times (never above 1).
    pub max_velocity_term: f64,
    pub velocity_term_holds: bool,
    pub initial_shift: InitialShiftStats,
    pub total_halvings: u64,
    pub samples: Vec<SampleOutcome>,
}

/// Monte Carlo estimate of `Q(t)` on the integrator's observation grid.
///
/// Sample `i` uses streams derived from `(master_seed, i)` only and the
/// reduction runs in index order, so the result does not depend on `workers`.
pub fn estimate_q(setup: &QSetup, workers: usize) -> Result<QRun> {
    setup.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<SampleOutcome>> = pool.install(|| {
        (0..setup.samples as u64)
            .into_par_iter()
            .map(|i| setup.run_sample(i))
            .collect()
    });
    let samples = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    reduce(setup, samples)
}

fn reduce(setup: &QSetup, samples: Vec<SampleOutcome>) -> Result<QRun> {
    let times = setup.integrator.observation_times();
    let nt = times.len();
    let mut rejections: BTreeMap<String, usize> = BTreeMap::new();
    let mut accepted: Vec<&Vec<Observation>> = Vec::new();
    let mut total_halvings = 0u64;
    for s in &samples {
        match s {
            SampleOutcome::Accepted {
                observations,
                halvings,
                ..
            } => {
                accepted.push(observations);
                total_halvings += *halvings as u64;
            }
            SampleOutcome::Rejected { reason } => {
                *rejections.entry(reason.as_str().to_string()).or_default() += 1;
            }
        }
    }
    if accepted.is_empty() {
        let reasons = rejections
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::AllSamplesRejected {
            samples: samples.len(),
            reasons,
        });
    }
    let column = |f: &dyn Fn(&Observation) -> f64, k: usize| -> Vec<f64> {
        accepted.iter().map(|obs| f(&obs[k])).collect()
    };
    let mut q = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    for k in 0..nt {
        let e = mean_and_stderr(&column(&|o| o.log_term, k));
        q.push(e.mean);
        stderr.push(if e.stderr.is_nan() { 0.0 } else { e.stderr });
    }
    let proof_terms = if setup.options.proof_terms {
        let (l, l_capped) = setup.neighbor_count();
        let mut r = ProofTermReport {
            times: times.clone(),
            s1: vec![],
            s1_stderr: vec![],
            s1_delta: vec![],
            s1_delta_stderr: vec![],
            s2_majorant: vec![],
            s2_majorant_stderr: vec![],
            l,
            l_capped,
        };
        for k in 0..nt {
            let get = |f: fn(&ProofTermSample) -> f64| {
                mean_and_stderr(&column(&|o| o.proof.as_ref().map(f).unwrap_or(f64::NAN), k))
            };
            let a = get(|p| p.s1);
            let b = get(|p| p.s1_delta);
            let c = get(|p| p.s2_majorant);
            r.s1.push(a.mean);
            r.s1_stderr.push(a.stderr);
            r.s1_delta.push(b.mean);
            r.s1_delta_stderr.push(b.stderr);
            r.s2_majorant.push(c.mean);
            r.s2_majorant_stderr.push(c.stderr);
        }
        Some(r)
    } else {
        None
    };
    let overlap = setup.options.overlap.then(|| {
        (0..nt)
            .map(|k| {
                let c = column(&|o| o.overlap.unwrap_or(f64::NAN), k);
                pairwise_sum(&c) / c.len() as f64
            })
            .collect()
    });
    let mut max_velocity_term: f64 = 0.0;
    for obs in &accepted {
        for o in obs.iter() {
            max_velocity_term = max_velocity_term.max(o.velocity_term);
        }
    }
    let mp = pairwise_sum(&column(&|o| o.distance.position, 0)) / accepted.len() as f64;
    let mv = pairwise_sum(&column(&|o| o.distance.velocity, 0)) / accepted.len() as f64;
    let initial_shift = InitialShiftStats {
        mean_position: mp,
        mean_velocity: mv,
        position_share: if mp + mv > 0.0 { mp / (mp + mv) } else { 0.0 },
    };
    let m_effective = accepted.len();
    Ok(QRun {
        curve: QCurve {
            times,
            q,
            stderr,
            m_requested: samples.len(),
            m_effective,
            delta_n: setup.delta_n(),
            epsilon: setup.theorem.epsilon,
            rejections,
        },
        proof_terms,
        overlap,
        max_velocity_term,
        velocity_term_holds: max_velocity_term <= 1.0,
        initial_shift,
        total_halvings,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// 95% normal-approximation interval for the slope.
    pub slope_ci: (f64, f64),
    pub residuals: Vec<f64>,
    pub max_positive_residual: f64,
    /// `+`, `-` or `0` per point (residual relative to the fit).
    pub sign_pattern: String,
    pub weighted: bool,
}

/// Affine least-squares fit `Q ≈ intercept + slope · t`, weighted by the
/// inverse variance when all standard errors are positive.
pub fn fit_linear_growth(curve: &QCurve) -> Result<LinearFit> {
    fit_affine(&curve.times, &curve.q, &curve.stderr)
}

pub fn fit_affine(t: &[f64], y: &[f64], se: &[f64]) -> Result<LinearFit> {
    if t.len() < 4 || y.len() != t.len() || se.len() != t.len() {
        return Err(Error::DegenerateFit(format!(
            "need at least 4 points with matching lengths, got {}",
            t.len()
        )));
    }
    let weighted = se.iter().all(|s| *s > 0.0 && s.is_finite());
    let w: Vec<f64> = if weighted {
        se.iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; t.len()]
    };
    let sw: f64 = w.iter().sum();
    let tm = t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for k in 0..t.len() {
        stt += w[k] * (t[k] - tm) * (t[k] - tm);
        sty += w[k] * (t[k] - tm) * (y[k] - ym);
    }
    if !(stt > 0.0) || !stt.is_finite() {
        return Err(Error::DegenerateFit("time grid has no spread".into()));
    }
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let residuals: Vec<f64> = t
        .iter()
        .zip(y)
        .map(|(a, b)| b - (intercept + slope * a))
        .collect();
    let slope_stderr = if weighted {
        (1.0 / stt).sqrt()
    } else {
        let rss: f64 = residuals.iter().map(|r| r * r).sum();
        (rss / (t.len() as f64 - 2.0) / stt).sqrt()
    };
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let sign_pattern = residuals
        .iter()
        .map(|r| {
            if r.abs() <= 1e-12 * scale {
                '0'
            } else if *r > 0.0 {
                '+'
            } else {
                '-'
            }
        })
        .collect();
    let max_positive_residual = residuals.iter().cloned().fold(0.0, f64::max);
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
        slope_ci: (slope - 1.96 * slope_stderr, slope + 1.96 * slope_stderr),
        residuals,
        max_positive_residual,
        sign_pattern,
        weighted,
    })
}

/// Affine upper envelope `Q(0) + B t` anchored at the measured `Q(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub q0: f64,
    /// Smallest slope with `Q(t) <= Q(0) + B t` at every grid time:
    /// `max_{t > 0} (Q(t) - Q(0)) / t`, clamped at 0.
    pub slope: f64,
    /// Largest `Q(t) - (Q(0) + B t)`; zero up to rounding by construction.
    pub max_positive_residual: f64,
    /// Least-squares slope of `Q(t) - Q(0)` through the origin.
    pub ls_slope: f64,
    /// Largest excess of the curve over the least-squares line.
    pub ls_max_positive_residual: f64,
    /// Root-mean-square of the per-time standard errors.
    pub pooled_stderr: f64,
}

pub fn anchored_envelope(curve: &QCurve) -> Result<Envelope> {
    let t = &curve.times;
    if t.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "need at least 4 points, got {}",
            t.len()
        )));
    }
    let q0 = curve.q[0];
    let mut stt = 0.0;
    let mut sty = 0.0;
    let mut slope: f64 = 0.0;
    for k in 1..t.len() {
        if !(t[k] > 0.0) {
            return Err(Error::DegenerateFit("time grid must increase from 0".into()));
        }
        stt += t[k] * t[k];
        sty += t[k] * (curve.q[k] - q0);
        slope = slope.max((curve.q[k] - q0) / t[k]);
    }
    let ls_slope = sty / stt;
    let excess = |b: f64| {
        t.iter()
            .zip(&curve.q)
            .map(|(a, y)| y - (q0 + b * a))
            .fold(0.0, f64::max)
    };
    let pooled_stderr = (curve.stderr.iter().map(|s| s * s).sum::<f64>() / t.len() as f64).sqrt();
    Ok(Envelope {
        q0,
        slope,
        max_positive_residual: excess(slope),
        ls_slope,
        ls_max_positive_residual: excess(ls_slope),
        pooled_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{TorusVector, Vec3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> PhaseState {
        let pos = (0..n)
            .map(|_| TorusVector::new([rng.random(), rng.random(), rng.random()]))
            .collect();
        let vel = (0..n)
            .map(|_| {
                [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ]
            })
            .collect();
        PhaseState::new(pos, vel).unwrap()
    }

    #[test]
    fn norm1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_state(5, &mut rng);
        assert_eq!(norm1(&z, &z).unwrap().value(), 0.0);

        let dx: Vec<Vec3> = vec![[0.2, 0.0, 0.0]; 5];
        let zs = z.shifted(&dx, &[[0.0; 3]; 5]).unwrap();
        assert!((norm1(&z, &zs).unwrap().value() - 0.1).abs() < 1e-12);

        let z3 = random_state(3, &mut rng);
        let mut dv = vec![[0.0; 3]; 3];
        dv[1] = [3.0, 0.0, 0.0];
        let zs3 = z3.shifted(&[[0.0; 3]; 3], &dv).unwrap();
        assert!((norm1(&z3, &zs3).unwrap().value() - 0.5).abs() < 1e-12);

        assert!(norm1(&z, &z3).is_err());
    }

    #[test]
    fn neighbor_set_examples() {
        let pos = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.45, 0.0, 0.0]];
        let z = PhaseState::from_coords(&pos, &[[0.0; 3]; 3]).unwrap();
        let c = neighbor_sets(&z, 1).unwrap();
        assert_eq!(c, vec![vec![1], vec![0], vec![1]]);
        let all = neighbor_sets(&z, 2).unwrap();
        for (i, ci) in all.iter().enumerate() {
            let mut s = ci.clone();
            s.sort();
            let expect: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            assert_eq!(s, expect);
        }
        assert!(neighbor_sets(&z, 3).is_err());
    }

    #[test]
    fn neighbor_sets_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let z = random_state(30, &mut rng);
            for l in [1, 5, 29] {
                let c = neighbor_sets(&z, l).unwrap();
                for i in 0..30 {
                    let mut row: Vec<(f64, usize)> = (0..30)
                        .filter(|&j| j != i)
                        .map(|j| (torus_distance(&z.positions()[i], &z.positions()[j]), j))
                        .collect();
                    row.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let expect: Vec<usize> = row[..l].iter().map(|p| p.1).collect();
                    assert_eq!(c[i], expect);
                    assert!(!c[i].contains(&i));
                }
            }
        }
    }

    #[test]
    fn neighbor_ties_go_to_smaller_index() {
        let pos = [[0.5, 0.5, 0.5], [0.6, 0.5, 0.5], [0.4, 0.5, 0.5]];
        let z = PhaseState::from_coords(&pos, &[[0.0; 3]; 3]).unwrap();
        assert_eq!(neighbor_sets(&z, 1).unwrap()[0], vec![1]);
    }

    #[test]
    fn proof_terms_free_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_state(10, &mut rng);
        let zs = random_state(10, &mut rng);
        let spec = PotentialSpec::raw(1.5, 0.0).unwrap();
        let p = proof_term_sample(&z, &zs, &spec, 2, 0.3).unwrap();
        assert_eq!(p.s1, 0.0);
        assert_eq!(p.s1_delta, 0.0);
        assert!(p.s2_majorant > 0.0 && p.s2_majorant.is_finite());
    }

    #[test]
    fn proof_terms_match_hand_sum_at_n4() {
        let spec = PotentialSpec::new(1.0, 1.0).unwrap();
        let pos = [
            [0.1, 0.1, 0.1],
            [0.2, 0.1, 0.1],
            [0.1, 0.4, 0.1],
            [0.7, 0.7, 0.9],
        ];
        let z = PhaseState::from_coords(&pos, &[[0.0; 3]; 4]).unwrap();
        let dx = [[0.0; 3], [0.05, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 0.3]];
        let zs = z.shifted(&dx, &[[0.0; 3]; 4]).unwrap();
        let l = 1;
        let delta_n = 0.5;
        let got = proof_term_sample(&z, &zs, &spec, l, delta_n).unwrap();

        // brute force: union of nearest-neighbour sets in both configurations
        let nearest = |s: &PhaseState, i: usize| -> usize {
            (0..4)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = torus_distance(&s.positions()[i], &s.positions()[a]);
                    let db = torus_distance(&s.positions()[i], &s.positions()[b]);
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .unwrap()
        };
        let mut s1 = 0.0;
        let mut s1d = 0.0;
        let mut s2: f64 = 0.0;
        for i in 0..4 {
            let set = [nearest(&z, i), nearest(&zs, i)];
            let mut far = 0.0;
            for j in 0..4 {
                if j == i {
                    continue;
                }
                let d = torus_displacement(&z.positions()[i], &z.positions()[j]);
                let ds = torus_displacement(&zs.positions()[i], &zs.positions()[j]);
                if set.contains(&j) {
                    s1 += norm(spec.force(d).unwrap());
                    s1d += norm(spec.force(ds).unwrap());
                } else {
                    far += norm(d).powf(-2.0) + norm(ds).powf(-2.0);
                }
            }
            s2 = s2.max(far / 4.0);
        }
        let w = 1.0 / (delta_n * 16.0);
        assert!((got.s1 - s1 * w).abs() < 1e-12 * s1 * w);
        assert!((got.s1_delta - s1d * w).abs() < 1e-12 * s1d * w);
        assert!((got.s2_majorant - s2).abs() < 1e-12 * s2);
    }

    #[test]
    fn overlap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_state(6, &mut rng);
        assert_eq!(pairing_overlap(&z, &z).unwrap(), 1.0);
        let pos = [[0.0; 3], [0.25, 0.0, 0.0], [0.5, 0.0, 0.0], [0.75, 0.0, 0.0]];
        let vel = [[0.0; 3], [5.0, 0.0, 0.0], [10.0, 0.0, 0.0], [15.0, 0.0, 0.0]];
        let a = PhaseState::from_coords(&pos, &vel).unwrap();
        let b = a.permuted(&[1, 2, 3, 0]).unwrap();
        assert_eq!(pairing_overlap(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn theorem_defaults() {
        let t = TheoremParams::for_alpha(1.5);
        assert_eq!(t.epsilon, 0.5);
        assert_eq!(t.neighbor_count(10_000), (72, false));
        assert_eq!(t.neighbor_count(64), (8, true));
        assert!((t.delta_n(64) - 0.125).abs() < 1e-15);
        let t = TheoremParams::for_alpha(1.8);
        assert!((t.epsilon - 0.4).abs() < 1e-15);
        let bad = TheoremParams {
            a: 0.5,
            ..TheoremParams::for_alpha(1.5)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_exact_affine() {
        let t: Vec<f64> = (0..11).map(|k| 0.2 * k as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| 0.3 + 1.7 * t).collect();
        let f = fit_affine(&t, &y, &vec![0.1; 11]).unwrap();
        assert!((f.slope - 1.7).abs() < 1e-12);
        assert!((f.intercept - 0.3).abs() < 1e-12);
        assert!(f.max_positive_residual < 1e-12);

        let z = fit_affine(&t, &vec![0.0; 11], &vec![0.0; 11]).unwrap();
        assert_eq!(z.slope, 0.0);
        assert_eq!(z.intercept, 0.0);
    }

    #[test]
    fn fit_concave_curve_sign_pattern() {
        // a concave curve lies above its least-squares line in the middle and
        // below it at both ends
        let t: Vec<f64> = (0..21).map(|k| 0.1 * k as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| (1.0 + t).ln()).collect();
        let f = fit_affine(&t, &y, &vec![0.01; 21]).unwrap();
        let s = f.sign_pattern.as_bytes();
        assert_eq!(s[0], b'-');
        assert_eq!(s[20], b'-');
        assert_eq!(s[10], b'+');
        // reference value from an independent unweighted polynomial fit
        assert!((f.max_positive_residual - 0.052_017_536_859).abs() < 1e-9);
    }

    #[test]
    fn envelope_of_concave_curve() {
        let times: Vec<f64> = (0..11).map(|k| 0.2 * k as f64).collect();
        let q: Vec<f64> = times.iter().map(|t| (1.0 + t).ln()).collect();
        let curve = QCurve {
            stderr: vec![0.01; 11],
            times,
            q,
            m_requested: 2,
            m_effective: 2,
            delta_n: 1.0,
            epsilon: 0.5,
            rejections: BTreeMap::new(),
        };
        let e = anchored_envelope(&curve).unwrap();
        // steepest chord from the origin is the first one
        assert!((e.slope - 1.2f64.ln() / 0.2).abs() < 1e-12);
        assert!(e.max_positive_residual < 1e-12);
        assert!(e.ls_slope < e.slope);
        assert!(e.ls_max_positive_residual > 0.0);
        assert!((e.pooled_stderr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit_affine(&[0.0, 1.0, 2.0], &[0.0; 3], &[1.0; 3]).is_err());
        assert!(fit_affine(&[1.0; 5], &[0.0; 5], &[1.0; 5]).is_err());
    }

    fn small_setup(shift: ShiftSpec, amplitude: f64, samples: usize) -> QSetup {
        let spec = if amplitude == 0.0 {
            PotentialSpec::raw(1.5, 0.0).unwrap()
        } else {
            PotentialSpec::new(1.5, amplitude).unwrap()
        };
        QSetup {
            params: GibbsParams::new(1.0, 8, spec).unwrap(),
            chain: ChainConfig {
                burn_in_sweeps: 50,
                ..Default::default()
            },
            shift,
            theorem: TheoremParams::for_alpha(1.5),
            integrator: IntegratorConfig {
                dt: 1e-3,
                t_end: 0.2,
                observations: 4,
                ..Default::default()
            },
            samples,
            master_seed: 11,
            options: QOptions::default(),
        }
    }

    #[test]
    fn zero_shift_gives_zero_curve() {
        let run = estimate_q(&small_setup(ShiftSpec::Zero, 1.0, 6), 1).unwrap();
        assert!(run.curve.q.iter().all(|q| *q == 0.0));
        assert!(run.curve.stderr.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn free_flight_matches_closed_form() {
        let setup = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 0.0, 6);
        let run = estimate_q(&setup, 1).unwrap();
        let dn = setup.delta_n();
        for (i, s) in run.samples.iter().enumerate() {
            let SampleOutcome::Accepted { observations, .. } = s else {
                panic!("rejected")
            };
            let (z0, zs) = setup.initial_pair(i as u64).unwrap();
            for o in observations {
                let mut pos = 0.0;
                let mut vel = 0.0;
                for k in 0..8 {
                    let dv = sub(zs.velocities()[k], z0.velocities()[k]);
                    let a = z0.positions()[k].translate(crate::torus::scale(z0.velocities()[k], o.t));
                    let b = zs.positions()[k].translate(crate::torus::scale(zs.velocities()[k], o.t));
                    pos += torus_distance(&a, &b);
                    vel += norm(dv);
                }
                let d = (pos + vel) / 16.0;
                let expect = (d / dn).ln_1p();
                assert!((o.log_term - expect).abs() < 1e-10, "{} vs {}", o.log_term, expect);
            }
        }
    }

    #[test]
    fn q_is_monotone_in_delta_n() {
        let mut a = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 1.0, 4);
        a.theorem.epsilon = 0.3;
        let mut b = a.clone();
        b.theorem.epsilon = 0.6;
        let ra = estimate_q(&a, 1).unwrap();
        let rb = estimate_q(&b, 1).unwrap();
        for (sa, sb) in ra.samples.iter().zip(&rb.samples) {
            if let (
                SampleOutcome::Accepted { observations: oa, .. },
                SampleOutcome::Accepted { observations: ob, .. },
            ) = (sa, sb)
            {
                for (x, y) in oa.iter().zip(ob) {
                    assert!(y.log_term >= x.log_term);
                }
            }
        }
    }

    #[test]
    fn q_at_time_zero_matches_direct_sampling() {
        let setup = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 1.0, 40);
        let run = estimate_q(&setup, 2).unwrap();
        // independent draws of the shift alone, no dynamics
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let dn = setup.delta_n();
        let z = random_state(8, &mut rng);
        let xs: Vec<f64> = (0..4000)
            .map(|_| {
                let d = draw_shift(&setup.shift, &z, &mut rng).unwrap();
                (d.norm1 / dn).ln_1p()
            })
            .collect();
        let direct = mean_and_stderr(&xs);
        let joint = (direct.stderr.powi(2) + run.curve.stderr[0].powi(2)).sqrt();
        assert!((run.curve.q[0] - direct.mean).abs() < 2.0 * joint);
    }

    #[test]
    fn estimate_is_independent_of_worker_count() {
        let mut s = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 1.0, 6);
        s.options.proof_terms = true;
        s.options.overlap = true;
        let a = estimate_q(&s, 1).unwrap();
        let b = estimate_q(&s, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.velocity_term_holds);
    }

    #[test]
    fn relabeling_leaves_q_unchanged() {
        let setup = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 1.0, 3);
        let perm = [3, 1, 7, 0, 5, 2, 6, 4];
        for i in 0..3u64 {
            let (z0, zs) = setup.initial_pair(i).unwrap();
            let obs = |a: &PhaseState, b: &PhaseState| {
                evolve_pair(a, b, &setup.params.spec, &setup.integrator, |_, x, y| {
                    norm1(x, y).unwrap().value()
                })
                .unwrap()
            };
            let (PairOutcome::Accepted { records: r1, .. }, PairOutcome::Accepted { records: r2, .. }) = (
                obs(&z0, &zs),
                obs(&z0.permuted(&perm).unwrap(), &zs.permuted(&perm).unwrap()),
            ) else {
                panic!("rejected")
            };
            for (x, y) in r1.iter().zip(&r2) {
                assert!((x.observed - y.observed).abs() < 1e-9 * (1.0 + x.observed));
            }
        }
    }

    #[test]
    fn pre_evolution_in_free_flight_creates_position_shift() {
        let mut setup = small_setup(ShiftSpec::GaussianVelocity { sigma: 1.0 }, 0.0, 2);
        setup.options.pre_evolve = 1.0;
        for i in 0..2u64 {
            let (z0, zs) = setup.initial_pair(i).unwrap();
            let (a, b) = setup.start_pair(i).unwrap().unwrap();
            for k in 0..8 {
                let dv = sub(zs.velocities()[k], z0.velocities()[k]);
                let dx = torus_displacement(&b.positions()[k], &a.positions()[k]);
                for c in 0..3 {
                    let gap = crate::torus::minimal_image_coord(dx[c] - dv[c]);
                    assert!(gap.abs() < 1e-9, "{dx:?} {dv:?}");
                }
            }
        }
    }

    fn arb_state(n: usize) -> impl Strategy<Value = PhaseState> {
        (
            prop::collection::vec(prop::array::uniform3(0.0f64..1.0), n),
            prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), n),
        )
            .prop_map(|(p, v)| PhaseState::from_coords(&p, &v).unwrap())
    }

    proptest! {
        #[test]
        fn norm1_is_a_metric(a in arb_state(5), b in arb_state(5), c in arb_state(5)) {
            let ab = norm1(&a, &b).unwrap().value();
            let ba = norm1(&b, &a).unwrap().value();
            let bc = norm1(&b, &c).unwrap().value();
            let ac = norm1(&a, &c).unwrap().value();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(norm1(&a, &a).unwrap().value(), 0.0);
        }

        #[test]
        fn neighbor_sets_have_size_l(z in arb_state(12), l in 1usize..12) {
            let c = neighbor_sets(&z, l).unwrap();
            for (i, ci) in c.iter().enumerate() {
                prop_assert_eq!(ci.len(), l);
                prop_assert!(!ci.contains(&i));
            }
        }

        #[test]
        fn velocity_term_is_at_most_one(a in arb_state(6), b in arb_state(6), dn in 1e-4f64..1.0) {
            let d = norm1(&a, &b).unwrap();
            let x = d.value() / dn;
            prop_assert!((d.velocity / dn) / (1.0 + x) <= 1.0);
        }
    }
}
