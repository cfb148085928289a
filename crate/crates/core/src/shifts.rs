//! Random perturbations `δ = (δ_X, δ_V)` of an initial condition.
//!
//! All shifts here act on velocities only. The Gaussian and compact laws draw
//! `δ_{v_i} = u_i / √N` with `u_i` i.i.d. from a symmetric law on R³; the
//! energy-sphere law moves `V₀ ∈ R^{3N}` on the sphere of constant kinetic
//! energy.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::potential_energy;
use crate::error::{Error, Result};
use crate::gibbs::{sample_gibbs_many, ChainConfig, CheckStatus, GibbsParams};
use crate::state::PhaseState;
use crate::torus::{norm, Vec3};

/// Draws of the radius allowed before an infeasible sphere shift is an error.
pub const SPHERE_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum RadialLaw {
    Fixed { radius: f64 },
    Uniform { max: f64 },
    /// Uniform on `[0, √N δ_N]`; resolved once `N` and `δ_N` are known.
    UniformToDeltaN,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    Zero,
    GaussianVelocity { sigma: f64 },
    /// Radius uniform on `[0, delta_m]`, uniform direction, before the `1/√N` scaling.
    CompactVelocity { delta_m: f64 },
    EnergySphere { radial: RadialLaw },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSample {
    pub delta_x: Vec<Vec3>,
    pub delta_v: Vec<Vec3>,
    pub norm1: f64,
}

impl ShiftSample {
    fn from_velocity(delta_v: Vec<Vec3>) -> Self {
        let n = delta_v.len();
        let s: f64 = delta_v.iter().map(|d| norm(*d)).sum();
        Self {
            delta_x: vec![[0.0; 3]; n],
            delta_v,
            norm1: s / (2.0 * n as f64),
        }
    }

    pub fn apply(&self, z0: &PhaseState) -> Result<PhaseState> {
        z0.shifted(&self.delta_x, &self.delta_v)
    }

    pub fn negated(&self) -> Self {
        let neg = |v: &Vec<Vec3>| v.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
        Self {
            delta_x: neg(&self.delta_x),
            delta_v: neg(&self.delta_v),
            norm1: self.norm1,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!("shift {what} = {v} must be > 0")))
        };
        match *self {
            ShiftSpec::GaussianVelocity { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                bad("sigma", sigma)
            }
            ShiftSpec::CompactVelocity { delta_m } if !(delta_m > 0.0 && delta_m.is_finite()) => {
                bad("delta_m", delta_m)
            }
            ShiftSpec::EnergySphere {
                radial: RadialLaw::Fixed { radius },
            } if !(radius >= 0.0 && radius.is_finite()) => bad("radius", radius),
            ShiftSpec::EnergySphere {
                radial: RadialLaw::Uniform { max },
            } if !(max > 0.0 && max.is_finite()) => bad("max radius", max),
            _ => Ok(()),
        }
    }

    /// Replaces `UniformToDeltaN` by the concrete support `[0, √N δ_N]`.
    pub fn resolve(&self, n: usize, delta_n: f64) -> Self {
        match *self {
            ShiftSpec::EnergySphere {
                radial: RadialLaw::UniformToDeltaN,
            } => ShiftSpec::EnergySphere {
                radial: RadialLaw::Uniform {
                    max: (n as f64).sqrt() * delta_n,
                },
            },
            s => s,
        }
    }

    /// Largest possible `|δ'|` in R^{3N}, if bounded.
    pub fn sphere_support(&self) -> Option<f64> {
        match *self {
            ShiftSpec::EnergySphere { radial } => match radial {
                RadialLaw::Fixed { radius } => Some(radius),
                RadialLaw::Uniform { max } => Some(max),
                RadialLaw::UniformToDeltaN => None,
            },
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ShiftSpec::Zero)
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let g: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let r = norm(g);
        if r > 1e-300 {
            return [g[0] / r, g[1] / r, g[2] / r];
        }
    }
}

/// Draws one shift for the initial condition `z0`.
pub fn draw_shift<R: Rng + ?Sized>(
    spec: &ShiftSpec,
    z0: &PhaseState,
    rng: &mut R,
) -> Result<ShiftSample> {
    spec.validate()?;
    let n = z0.n();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    match *spec {
        ShiftSpec::Zero => Ok(ShiftSample::from_velocity(vec![[0.0; 3]; n])),
        ShiftSpec::GaussianVelocity { sigma } => {
            let s = sigma * inv_sqrt_n;
            let dv = (0..n)
                .map(|_| {
                    let g: [f64; 3] = [
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ];
                    [s * g[0], s * g[1], s * g[2]]
                })
                .collect();
            Ok(ShiftSample::from_velocity(dv))
        }
        ShiftSpec::CompactVelocity { delta_m } => {
            let dv = (0..n)
                .map(|_| {
                    let r = rng.random_range(0.0..delta_m) * inv_sqrt_n;
                    let u = unit_vector(rng);
                    [r * u[0], r * u[1], r * u[2]]
                })
                .collect();
            Ok(ShiftSample::from_velocity(dv))
        }
        ShiftSpec::EnergySphere { radial } => draw_sphere(radial, z0, rng),
    }
}

fn draw_sphere<R: Rng + ?Sized>(
    radial: RadialLaw,
    z0: &PhaseState,
    rng: &mut R,
) -> Result<ShiftSample> {
    let v0: Vec<f64> = z0.velocities().iter().flatten().copied().collect();
    let speed = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Err(Error::InvalidParameter(
            "energy-sphere shift needs a nonzero velocity vector".into(),
        ));
    }
    let limit = 2.0 * speed;
    let mut r = f64::NAN;
    let mut attempts = 0;
    while attempts < SPHERE_RETRIES {
        attempts += 1;
        r = match radial {
            RadialLaw::Fixed { radius } => radius,
            RadialLaw::Uniform { max } => rng.random_range(0.0..=max),
            RadialLaw::UniformToDeltaN => {
                return Err(Error::InvalidParameter(
                    "radial law uniform_to_delta_n must be resolved against N first".into(),
                ))
            }
        };
        if r <= limit {
            break;
        }
    }
    if !(r <= limit) {
        return Err(Error::ShiftInfeasible {
            radius: r,
            limit,
            attempts,
        });
    }
    let e: Vec<f64> = v0.iter().map(|x| x / speed).collect();
    let along = -r * r / (2.0 * speed);
    let perp_radius = (r * r - along * along).max(0.0).sqrt();
    // uniform direction in the orthogonal complement of e
    let dir = loop {
        let mut g: Vec<f64> = (0..v0.len()).map(|_| StandardNormal.sample(rng)).collect();
        let p: f64 = g.iter().zip(&e).map(|(a, b)| a * b).sum();
        for (gi, ei) in g.iter_mut().zip(&e) {
            *gi -= p * ei;
        }
        let len = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 || v0.len() == 1 {
            break g.into_iter().map(|x| if len > 0.0 { x / len } else { 0.0 }).collect::<Vec<_>>();
        }
    };
    let flat: Vec<f64> = e
        .iter()
        .zip(&dir)
        .map(|(ei, di)| along * ei + perp_radius * di)
        .collect();
    let dv = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(ShiftSample::from_velocity(dv))
}

/// `β'(N) = β (1 - 1/(1 + N/(βσ²)))`.
pub fn beta_prime(beta: f64, sigma: f64, n: usize) -> f64 {
    beta * (1.0 - 1.0 / (1.0 + n as f64 / (beta * sigma * sigma)))
}

/// Density ratio `μ̃_N(Z₀)/μ_N(Z₀)` for the Gaussian velocity shift, as a
/// function of the kinetic energy only.
pub fn tilde_mu_ratio_from_kinetic(beta: f64, sigma: f64, n: usize, kinetic: f64) -> f64 {
    let nf = n as f64;
    let s2 = sigma * sigma;
    (-1.5 * nf * (1.0 + beta * s2 / nf).ln() + beta * kinetic / (1.0 + nf / (beta * s2))).exp()
}

/// `μ̃_N(Z₀)/μ_N(Z₀)` for a Gaussian velocity shift (the normalization cancels).
pub fn tilde_mu_ratio(params: &GibbsParams, spec: &ShiftSpec, z0: &PhaseState) -> Result<f64> {
    match *spec {
        ShiftSpec::GaussianVelocity { sigma } => Ok(tilde_mu_ratio_from_kinetic(
            params.beta,
            sigma,
            z0.n(),
            z0.kinetic_energy(),
        )),
        ShiftSpec::Zero | ShiftSpec::EnergySphere { .. } => Ok(1.0),
        ShiftSpec::CompactVelocity { .. } => Err(Error::InvalidParameter(
            "no closed-form image density for the compact velocity shift".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub shift: ShiftSpec,
    pub beta: f64,
    pub beta_prime: f64,
    pub n: usize,
    pub samples: usize,
    pub phi_min: f64,
    /// Largest `μ̃_N(Z₀)/μ_N^{β'}(Z₀)` over the sampled states.
    pub empirical_max_ratio: f64,
    /// Monte Carlo estimate of `B_{N,X}(β')/B_{N,X}(β)`.
    pub partition_ratio_estimate: f64,
    /// `exp(-(β-β') (N-1) φ_min / 2)`: Jensen plus `E_pot >= (N-1) φ_min / 2`.
    pub k_derived: f64,
    /// `e^{-β²σ²φ_min/4} e^{3βσ²/4}`
    pub k_statement: f64,
    /// `e^{-β²σ²φ_min/4} e^{-3βσ²/4}`
    pub k_proof: f64,
    /// Largest `|E_kin(Z₀+δ) - E_kin(Z₀)| / E_kin(Z₀)` over the draws (sphere shifts).
    pub max_kinetic_change: Option<f64>,
    pub status: CheckStatus,
}

/// Checks `μ̃_N <= K μ_N^{β'}` on Gibbs-sampled states.
///
/// For the Gaussian shift the velocity Gaussians cancel exactly and
/// `μ̃_N/μ_N^{β'} = e^{-(β-β') E_pot} B_{N,X}(β')/B_{N,X}(β)`, where the
/// partition ratio equals `E_{ν_β}[e^{(β-β') E_pot}]` and is estimated from the
/// same samples. For the energy-sphere shift `μ̃ = μ` and `K = 1`; the
/// report then records the worst kinetic-energy change over one draw per state.
pub fn verify_condition_psi2<R: Rng + ?Sized>(
    params: &GibbsParams,
    spec: &ShiftSpec,
    samples: usize,
    chain_cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ConditionReport> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    let (states, _) = sample_gibbs_many(params, chain_cfg, samples, rng)?;
    let beta = params.beta;
    let phi_min = params.spec.phi_min();
    let n = params.n;
    match *spec {
        ShiftSpec::GaussianVelocity { sigma } => {
            let bp = beta_prime(beta, sigma, n);
            let db = beta - bp;
            let energies = states
                .iter()
                .map(|s| potential_energy(s, &params.spec))
                .collect::<Result<Vec<_>>>()?;
            // log-mean-exp of db * E
            let m = energies.iter().fold(f64::NEG_INFINITY, |a, &e| a.max(db * e));
            let terms: Vec<f64> = energies.iter().map(|e| (db * e - m).exp()).collect();
            let log_b_ratio = m + (crate::stats::pairwise_sum(&terms) / samples as f64).ln();
            let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
            let empirical_max_ratio = (-db * e_min + log_b_ratio).exp();
            let s2 = sigma * sigma;
            let k_derived = (-db * (n as f64 - 1.0) * phi_min / 2.0).exp();
            let k_statement = (-beta * beta * s2 * phi_min / 4.0 + 0.75 * beta * s2).exp();
            let k_proof = (-beta * beta * s2 * phi_min / 4.0 - 0.75 * beta * s2).exp();
            let status = if empirical_max_ratio <= k_derived * (1.0 + 1e-12) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            Ok(ConditionReport {
                shift: *spec,
                beta,
                beta_prime: bp,
                n,
                samples,
                phi_min,
                empirical_max_ratio,
                partition_ratio_estimate: log_b_ratio.exp(),
                k_derived,
                k_statement,
                k_proof,
                max_kinetic_change: None,
                status,
            })
        }
        ShiftSpec::EnergySphere { .. } | ShiftSpec::Zero => {
            let mut worst: f64 = 0.0;
            if let ShiftSpec::EnergySphere { .. } = spec {
                for s in &states {
                    let d = draw_shift(spec, s, rng)?;
                    let e0 = s.kinetic_energy();
                    let e1 = d.apply(s)?.kinetic_energy();
                    worst = worst.max((e1 - e0).abs() / e0);
                }
            }
            let status = if worst <= 1e-12 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            Ok(ConditionReport {
                shift: *spec,
                beta,
                beta_prime: beta,
                n,
                samples,
                phi_min,
                empirical_max_ratio: 1.0,
                partition_ratio_estimate: 1.0,
                k_derived: 1.0,
                k_statement: 1.0,
                k_proof: 1.0,
                max_kinetic_change: Some(worst),
                status,
            })
        }
        ShiftSpec::CompactVelocity { .. } => Err(Error::InvalidParameter(
            "condition check needs a Gaussian or energy-sphere shift".into(),
        )),
    }
}

/// `μ̃/μ` at `N = 1` in the free case by direct cubature of the velocity
/// convolution `∫ μ(v - d) ψ(d) dd / μ(v)`; an independent check of the closed form.
pub fn tilde_mu_ratio_quadrature(beta: f64, sigma: f64, v: Vec3) -> f64 {
    use crate::quadrature::adaptive_3d;
    use std::f64::consts::PI;
    let s2 = sigma * sigma;
    let norm_psi = (2.0 * PI * s2).powf(-1.5);
    let e0 = 0.5 * beta * crate::torus::norm_sq(v);
    let integrand = |d: Vec3| {
        let w = crate::torus::sub(v, d);
        (-0.5 * beta * crate::torus::norm_sq(w) + e0 - crate::torus::norm_sq(d) / (2.0 * s2)).exp()
            * norm_psi
    };
    // the integrand is a Gaussian centred at v/(1 + 1/(βσ²)) with width < σ
    let c = crate::torus::scale(v, 1.0 / (1.0 + 1.0 / (beta * s2)));
    let h = 12.0 * sigma;
    let lo = [c[0] - h, c[1] - h, c[2] - h];
    let hi = [c[0] + h, c[1] + h, c[2] + h];
    adaptive_3d(integrand, lo, hi, 1e-12, 50_000_000).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::PotentialSpec;
    use crate::torus::TorusVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(n: usize, rng: &mut ChaCha8Rng) -> PhaseState {
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
    fn gaussian_component_variance_is_sigma_sq_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = state(100, &mut rng);
        let spec = ShiftSpec::GaussianVelocity { sigma: 1.0 };
        let mut xs = Vec::new();
        for _ in 0..1000 {
            let d = draw_shift(&spec, &z, &mut rng).unwrap();
            assert!(d.delta_x.iter().all(|x| *x == [0.0; 3]));
            xs.extend(d.delta_v.iter().flatten().copied());
        }
        // 3e5 components; the variance of s² is 2σ⁴/(n-1)
        let var = crate::stats::variance(&xs);
        let se = 0.01 * (2.0 / (xs.len() as f64 - 1.0)).sqrt();
        assert!((var - 0.01).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn sphere_preserves_kinetic_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2, 5, 40] {
            let z = state(n, &mut rng);
            let speed = (2.0 * z.kinetic_energy()).sqrt();
            for radial in [
                RadialLaw::Fixed { radius: 0.3 * speed },
                RadialLaw::Uniform { max: 2.0 * speed },
            ] {
                let spec = ShiftSpec::EnergySphere { radial };
                for _ in 0..200 {
                    let d = draw_shift(&spec, &z, &mut rng).unwrap();
                    let e1 = d.apply(&z).unwrap().kinetic_energy();
                    assert!((e1 - z.kinetic_energy()).abs() <= 1e-12 * z.kinetic_energy());
                }
            }
        }
    }

    #[test]
    fn sphere_radius_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = state(10, &mut rng);
        let spec = ShiftSpec::EnergySphere {
            radial: RadialLaw::Fixed { radius: 0.7 },
        };
        let d = draw_shift(&spec, &z, &mut rng).unwrap();
        let r2: f64 = d.delta_v.iter().map(|v| crate::torus::norm_sq(*v)).sum();
        assert!((r2.sqrt() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn infeasible_sphere_radius_is_an_error() {
        let z = PhaseState::from_coords(&[[0.0; 3], [0.5; 3]], &[[0.1, 0.0, 0.0], [0.0; 3]]).unwrap();
        let spec = ShiftSpec::EnergySphere {
            radial: RadialLaw::Fixed { radius: 1.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            draw_shift(&spec, &z, &mut rng),
            Err(Error::ShiftInfeasible { .. })
        ));
    }

    #[test]
    fn sphere_support_bounds_norm1_by_delta_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [4usize, 16, 64] {
            let z = state(n, &mut rng);
            let delta_n = (n as f64).powf(-0.5);
            let spec = ShiftSpec::EnergySphere {
                radial: RadialLaw::UniformToDeltaN,
            }
            .resolve(n, delta_n);
            for _ in 0..200 {
                let d = draw_shift(&spec, &z, &mut rng).unwrap();
                let full: f64 = d
                    .delta_v
                    .iter()
                    .map(|v| crate::torus::norm_sq(*v))
                    .sum::<f64>()
                    .sqrt();
                assert!(d.norm1 <= full / (n as f64).sqrt() + 1e-15);
                assert!(d.norm1 <= delta_n + 1e-15);
            }
        }
    }

    #[test]
    fn compact_shift_respects_support_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 25;
        let z = state(n, &mut rng);
        let spec = ShiftSpec::CompactVelocity { delta_m: 0.4 };
        let mut mean = [0.0; 3];
        let draws = 4000;
        for _ in 0..draws {
            let d = draw_shift(&spec, &z, &mut rng).unwrap();
            for v in &d.delta_v {
                assert!(norm(*v) <= 0.4 / 5.0 + 1e-15);
                for k in 0..3 {
                    mean[k] += v[k];
                }
            }
        }
        // E|u|² = δ_m²/3 for a uniform radius, so each component of δ_v has variance δ_m²/(9N)
        let sd = (0.16 / 9.0 / n as f64).sqrt() / ((draws * n) as f64).sqrt();
        for m in mean {
            assert!((m / (draws * n) as f64).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn sign_flip_pairs_have_equal_density() {
        // the Gaussian law is symmetric: the density of δ and -δ coincide
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = state(8, &mut rng);
        let spec = ShiftSpec::GaussianVelocity { sigma: 0.8 };
        let d = draw_shift(&spec, &z, &mut rng).unwrap();
        let dens = |s: &ShiftSample| -> f64 {
            s.delta_v
                .iter()
                .map(|v| -crate::torus::norm_sq(*v) * 8.0 / (2.0 * 0.64))
                .sum()
        };
        assert_eq!(dens(&d), dens(&d.negated()));
        assert_eq!(d.norm1, d.negated().norm1);
    }

    #[test]
    fn ratio_tends_to_one_for_small_sigma() {
        for ekin in [0.0, 1.0, 30.0] {
            let r = tilde_mu_ratio_from_kinetic(1.0, 1e-6, 10, ekin);
            assert!((r - 1.0).abs() < 1e-9);
        }
        let r = tilde_mu_ratio_from_kinetic(1.0, 1.0, 10, 0.0);
        assert!((r - 1.1f64.powf(-15.0)).abs() < 1e-14);
        assert!(r < 1.0);
    }

    #[test]
    fn closed_form_matches_quadrature_at_n1() {
        for v in [[0.0, 0.0, 0.0], [0.7, -0.2, 1.1], [2.0, 0.5, -1.5]] {
            let exact = tilde_mu_ratio_from_kinetic(1.0, 1.0, 1, 0.5 * crate::torus::norm_sq(v));
            let quad = tilde_mu_ratio_quadrature(1.0, 1.0, v);
            assert!(((quad - exact) / exact).abs() < 1e-6, "{quad} vs {exact}");
        }
    }

    #[test]
    fn beta_prime_at_hundred() {
        assert!((beta_prime(1.0, 1.0, 100) - 100.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn condition_report_free_case() {
        let params = GibbsParams::new(1.0, 8, PotentialSpec::raw(1.0, 0.0).unwrap()).unwrap();
        let cfg = ChainConfig {
            burn_in_sweeps: 10,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ShiftSpec::GaussianVelocity { sigma: 1.0 };
        let rep = verify_condition_psi2(&params, &spec, 200, &cfg, &mut rng).unwrap();
        assert!((rep.k_statement - 0.75f64.exp()).abs() < 1e-12);
        assert!((rep.empirical_max_ratio - 1.0).abs() < 1e-12);
        assert_eq!(rep.status, CheckStatus::Pass);

        let sphere = ShiftSpec::EnergySphere {
            radial: RadialLaw::Uniform { max: 0.5 },
        };
        let rep = verify_condition_psi2(&params, &sphere, 200, &cfg, &mut rng).unwrap();
        assert_eq!(rep.k_derived, 1.0);
        assert_eq!(rep.status, CheckStatus::Pass);
    }

    #[test]
    fn condition_report_interacting() {
        let params = GibbsParams::new(1.0, 16, PotentialSpec::new(1.5, 1.0).unwrap()).unwrap();
        let cfg = ChainConfig {
            burn_in_sweeps: 300,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ShiftSpec::GaussianVelocity { sigma: 1.0 };
        let rep = verify_condition_psi2(&params, &spec, 300, &cfg, &mut rng).unwrap();
        assert_eq!(rep.status, CheckStatus::Pass, "{rep:?}");
        assert!(rep.empirical_max_ratio > 0.0);
    }
}
