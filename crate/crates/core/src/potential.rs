//! Periodized repulsive pair potential `φ` and its force `K = -∇φ`.
//!
//! The free-space profile is `C / r^(α-1)`. Periodic images are summed over a
//! finite number of shells, each image multiplied by a C² quintic taper that
//! switches the interaction off between `taper_radius / 2` and
//! `taper_radius`. A calibrated constant `mean_shift` is subtracted so that
//! `φ` has zero average over the torus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{adaptive_1d, adaptive_3d};
use crate::torus::{minimal_image_coord, norm, norm_sq, Vec3};

/// Onset of the taper as a fraction of the taper radius.
pub const TAPER_ONSET_FRACTION: f64 = 0.5;


/// `r^{-a}`, avoiding `powf` when `2a` is a small integer.
#[inline]
fn inv_pow(r: f64, a: f64) -> f64 {
    let k = 2.0 * a;
    if k == k.trunc() && k <= 8.0 {
        let k = k as i32;
        let whole = r.powi(-(k / 2));
        if k % 2 == 0 {
            whole
        } else {
            whole / r.sqrt()
        }
    } else {
        r.powf(-a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    alpha: f64,
    amplitude: f64,
    image_shells: u32,
    taper_radius: Option<f64>,
    mean_shift: f64,
    phi_min: f64,
}

impl PotentialSpec {
    /// Nearest-image power law with no taper and no mean subtraction.
    pub fn raw(alpha: f64, amplitude: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha = {alpha} must lie in (0, 2): the stability bound requires alpha < 2"
            )));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude = {amplitude} must be finite and non-negative"
            )));
        }
        Ok(Self {
            alpha,
            amplitude,
            image_shells: 0,
            taper_radius: None,
            mean_shift: 0.0,
            phi_min: 0.0,
        })
    }

    /// The default construction: one image shell, taper radius 1/2, calibrated
    /// zero mean and a certified lower bound.
    pub fn new(alpha: f64, amplitude: f64) -> Result<Self> {
        Self::with_options(alpha, amplitude, 1, Some(0.5))
    }

    pub fn with_options(
        alpha: f64,
        amplitude: f64,
        image_shells: u32,
        taper_radius: Option<f64>,
    ) -> Result<Self> {
        let mut spec = Self::raw(alpha, amplitude)?;
        spec.image_shells = image_shells;
        if let Some(rc) = taper_radius {
            if !(rc > 0.0 && rc <= 1.5) {
                return Err(Error::InvalidParameter(format!(
                    "taper_radius = {rc} must lie in (0, 1.5]"
                )));
            }
        }
        spec.taper_radius = taper_radius;
        spec.calibrate_mean();
        spec.estimate_phi_min();
        Ok(spec)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn image_shells(&self) -> u32 {
        self.image_shells
    }

    pub fn taper_radius(&self) -> Option<f64> {
        self.taper_radius
    }

    pub fn mean_shift(&self) -> f64 {
        self.mean_shift
    }

    pub fn phi_min(&self) -> f64 {
        self.phi_min
    }

    pub fn is_free(&self) -> bool {
        self.amplitude == 0.0
    }

    pub fn is_singular(&self) -> bool {
        self.alpha > 1.0 && !self.is_free()
    }

    /// Distance beyond which no image contributes, if the taper is active.
    pub fn cutoff(&self) -> Option<f64> {
        self.taper_radius
    }

    /// True when only the minimal image can contribute: any other image of a
    /// minimal-image displacement is at distance >= 1/2.
    #[inline]
    fn minimal_image_only(&self) -> bool {
        match self.taper_radius {
            Some(rc) => rc <= 0.5,
            None => self.image_shells == 0,
        }
    }

    #[inline]
    fn taper(&self, r: f64) -> (f64, f64) {
        match self.taper_radius {
            None => (1.0, 0.0),
            Some(rc) => {
                let onset = TAPER_ONSET_FRACTION * rc;
                if r <= onset {
                    (1.0, 0.0)
                } else if r >= rc {
                    (0.0, 0.0)
                } else {
                    let w = rc - onset;
                    let u = (r - onset) / w;
                    let u2 = u * u;
                    let u3 = u2 * u;
                    let s = 1.0 - u3 * (10.0 - 15.0 * u + 6.0 * u2);
                    let ds = -30.0 * u2 * (1.0 - u) * (1.0 - u) / w;
                    (s, ds)
                }
            }
        }
    }

    /// Radial profile `g(r)` of one image and its derivative `g'(r)`, for `r > 0`.
    #[inline]
    pub fn radial(&self, r: f64) -> (f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let (t, dt) = self.taper(r);
        if t == 0.0 && dt == 0.0 {
            return (0.0, 0.0);
        }
        let p = inv_pow(r, self.alpha); // r^{-α}
        let g0 = self.amplitude * r * p; // C r^{1-α}
        let dg0 = self.amplitude * (1.0 - self.alpha) * p;
        (g0 * t, dg0 * t + g0 * dt)
    }

    /// Profile value at `r = 0` for the bounded cases `α <= 1`.
    fn radial_at_origin(&self) -> f64 {
        if self.amplitude == 0.0 {
            0.0
        } else if self.alpha < 1.0 {
            0.0
        } else {
            self.amplitude
        }
    }

    fn for_each_image<F: FnMut(Vec3)>(&self, x: Vec3, mut f: F) {
        let m = [
            minimal_image_coord(x[0]),
            minimal_image_coord(x[1]),
            minimal_image_coord(x[2]),
        ];
        if self.minimal_image_only() {
            f(m);
            return;
        }
        let s = self.image_shells as i32;
        for i in -s..=s {
            for j in -s..=s {
                for k in -s..=s {
                    f([m[0] + i as f64, m[1] + j as f64, m[2] + k as f64]);
                }
            }
        }
    }

    /// `φ(x)` for a displacement `x` (any representative).
    pub fn potential_value(&self, x: Vec3) -> Result<f64> {
        let mut total = 0.0;
        let mut err = None;
        self.for_each_image(x, |y| {
            let r = norm(y);
            if r == 0.0 {
                if self.is_singular() {
                    err = Some(Error::Singularity { distance: 0.0 });
                } else {
                    total += self.radial_at_origin();
                }
            } else {
                total += self.radial(r).0;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(total - self.mean_shift),
        }
    }

    /// `K(x) = -∇φ(x)`.
    pub fn force(&self, x: Vec3) -> Result<Vec3> {
        let mut f = [0.0; 3];
        let mut err = None;
        self.for_each_image(x, |y| {
            let r = norm(y);
            if r == 0.0 {
                err = Some(Error::Singularity { distance: 0.0 });
                return;
            }
            let (_, dg) = self.radial(r);
            let s = -dg / r;
            f[0] += s * y[0];
            f[1] += s * y[1];
            f[2] += s * y[2];
        });
        match err {
            Some(e) => Err(e),
            None => Ok(f),
        }
    }

    /// Pair energy (without the mean shift) and force for a minimal-image
    /// displacement. Hot path of the force assembly; `r > 0` is assumed.
    #[inline]
    pub(crate) fn pair_kernel(&self, d: Vec3) -> (f64, Vec3) {
        if self.minimal_image_only() {
            let r2 = norm_sq(d);
            if let Some(rc) = self.taper_radius {
                if r2 >= rc * rc {
                    return (0.0, [0.0; 3]);
                }
            }
            let r = r2.sqrt();
            let (g, dg) = self.radial(r);
            let s = -dg / r;
            (g, [s * d[0], s * d[1], s * d[2]])
        } else {
            let mut e = 0.0;
            let mut f = [0.0; 3];
            self.for_each_image(d, |y| {
                let r = norm(y);
                let (g, dg) = self.radial(r);
                let s = -dg / r;
                e += g;
                f[0] += s * y[0];
                f[1] += s * y[1];
                f[2] += s * y[2];
            });
            (e, f)
        }
    }

    /// Pair energy without the mean shift for a minimal-image displacement;
    /// `+inf` at coincidence in the singular case.
    #[inline]
    pub(crate) fn pair_energy(&self, d: Vec3) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        if self.minimal_image_only() {
            let r2 = norm_sq(d);
            if let Some(rc) = self.taper_radius {
                if r2 >= rc * rc {
                    return 0.0;
                }
            }
            if r2 == 0.0 {
                return if self.is_singular() {
                    f64::INFINITY
                } else {
                    self.radial_at_origin()
                };
            }
            self.radial(r2.sqrt()).0
        } else {
            self.potential_value(d)
                .map(|v| v + self.mean_shift)
                .unwrap_or(f64::INFINITY)
        }
    }

    fn calibrate_mean(&mut self) {
        self.mean_shift = 0.0;
        self.mean_shift = self.integrate_raw();
    }

    /// `∫_{T^3} φ` before mean subtraction.
    fn integrate_raw(&self) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        match self.taper_radius {
            Some(rc) if rc <= 0.5 => {
                // radial: the support ball fits inside the unit cell
                let four_pi = 4.0 * std::f64::consts::PI;
                let onset = TAPER_ONSET_FRACTION * rc;
                let body = self.amplitude * onset.powf(4.0 - self.alpha) / (4.0 - self.alpha);
                let seam = adaptive_1d(|r| r * r * self.radial(r).0, onset, rc, 1e-15, 40);
                four_pi * (body + seam.value)
            }
            _ => {
                let f = |x: Vec3| self.potential_value(x).unwrap_or(0.0) + self.mean_shift;
                8.0 * adaptive_3d(f, [0.0; 3], [0.5; 3], 1e-10, 40_000_000).value
            }
        }
    }

    /// Grid minimum of `φ` on `[0, 1/2]^3` (step 1/128, the whole torus by
    /// reflection symmetry) minus a local Lipschitz margin. Stores the result.
    pub fn estimate_phi_min(&mut self) -> f64 {
        if self.amplitude == 0.0 {
            self.phi_min = -self.mean_shift;
            return self.phi_min;
        }
        const STEPS: usize = 64;
        let h = 0.5 / STEPS as f64;
        let n = STEPS + 1;
        let mut best = f64::INFINITY;
        let mut arg = [0usize; 3];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [i as f64 * h, j as f64 * h, k as f64 * h];
                    if let Ok(v) = self.potential_value(x) {
                        if v < best {
                            best = v;
                            arg = [i, j, k];
                        }
                    }
                }
            }
        }
        let mut grad_max: f64 = 0.0;
        let lo = |c: usize| c.saturating_sub(2);
        let hi = |c: usize| (c + 2).min(n - 1);
        for i in lo(arg[0])..=hi(arg[0]) {
            for j in lo(arg[1])..=hi(arg[1]) {
                for k in lo(arg[2])..=hi(arg[2]) {
                    let x = [i as f64 * h, j as f64 * h, k as f64 * h];
                    if let Ok(f) = self.force(x) {
                        grad_max = grad_max.max(norm(f));
                    }
                }
            }
        }
        let margin = grad_max * h * 3f64.sqrt() / 2.0 + 1e-12 * (1.0 + best.abs());
        self.phi_min = best - margin;
        self.phi_min
    }

    /// Sweeps `r` on a log grid in `(1e-4, 1/2]` along several directions and
    /// returns the smallest constants satisfying the power-law derivative
    /// bounds on that grid.
    pub fn certify_derivative_bounds(&self) -> DerivativeBoundReport {
        const POINTS: usize = 200;
        let r_min: f64 = 1e-4;
        let r_max: f64 = 0.5;
        let dirs: [Vec3; 5] = [
            [1.0, 0.0, 0.0],
            [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0],
            [1.0 / 3f64.sqrt(); 3],
            [0.48, 0.6, 0.64],
            [-0.36, 0.48, 0.8],
        ];
        let a = self.alpha;
        let mut c0: f64 = 0.0;
        let mut c1: f64 = 0.0;
        let mut c2: f64 = 0.0;
        let mut all_finite = true;
        for p in 0..POINTS {
            let r = r_min * (r_max / r_min).powf(p as f64 / (POINTS - 1) as f64);
            for d in &dirs {
                let x = [d[0] * r, d[1] * r, d[2] * r];
                let (Ok(v), Ok(f)) = (self.potential_value(x), self.force(x)) else {
                    all_finite = false;
                    continue;
                };
                c0 = c0.max(v * r.powf(a - 1.0));
                c1 = c1.max(norm(f) * r.powf(a));
                let hess = self.hessian_fd(x, 1e-6 * r);
                c2 = c2.max(hess * r.powf(a + 1.0));
            }
        }
        all_finite &= c0.is_finite() && c1.is_finite() && c2.is_finite();
        DerivativeBoundReport {
            alpha: self.alpha,
            amplitude: self.amplitude,
            c0,
            c1,
            c2,
            all_finite,
            r_min,
            r_max,
            grid_points: POINTS,
        }
    }

    /// Frobenius norm of the Hessian, by central differences of the analytic force.
    fn hessian_fd(&self, x: Vec3, h: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (Ok(fp), Ok(fm)) = (self.force(xp), self.force(xm)) else {
                return f64::INFINITY;
            };
            for l in 0..3 {
                let d = (fp[l] - fm[l]) / (2.0 * h);
                s += d * d;
            }
        }
        s.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBoundReport {
    pub alpha: f64,
    pub amplitude: f64,
    /// `sup φ(x) |x|^(α-1)` (clamped at 0)
    pub c0: f64,
    /// `sup |∇φ(x)| |x|^α`
    pub c1: f64,
    /// `sup |∇²φ(x)|_F |x|^(α+1)`
    pub c2: f64,
    pub all_finite: bool,
    pub r_min: f64,
    pub r_max: f64,
    pub grid_points: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn inv_pow_matches_powf() {
        for a in [0.5, 1.0, 1.5, 1.25, 0.3, 1.99] {
            for r in [1e-4f64, 0.01, 0.3, 0.5, 0.87] {
                let want = r.powf(-a);
                assert!((inv_pow(r, a) - want).abs() <= 1e-14 * want, "{a} {r}");
            }
        }
    }

    fn fd_gradient(spec: &PotentialSpec, x: Vec3, h: f64) -> Vec3 {
        let mut g = [0.0; 3];
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            g[k] = (spec.potential_value(xp).unwrap() - spec.potential_value(xm).unwrap()) / (2.0 * h);
        }
        g
    }

    #[test]
    fn rejects_alpha_at_or_above_two() {
        assert!(PotentialSpec::raw(2.0, 1.0).is_err());
        assert!(PotentialSpec::new(2.5, 1.0).is_err());
        assert!(PotentialSpec::raw(0.0, 1.0).is_err());
    }

    #[test]
    fn raw_power_law_value() {
        let spec = PotentialSpec::raw(1.5, 1.0).unwrap();
        let v = spec.potential_value([0.25, 0.0, 0.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_at_origin_only_when_alpha_above_one() {
        let s = PotentialSpec::new(1.5, 1.0).unwrap();
        assert!(matches!(s.potential_value([0.0; 3]), Err(Error::Singularity { .. })));
        assert!(s.force([0.0; 3]).is_err());
        let b = PotentialSpec::new(0.5, 1.0).unwrap();
        let v = b.potential_value([1e-12, 0.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(b.potential_value([0.0; 3]).unwrap().is_finite());
        // bounded: the profile near 0 is C |x|^{1/2}
        assert!((v + b.mean_shift()).abs() < 1e-5);
    }

    #[test]
    fn force_matches_finite_difference_raw() {
        let spec = PotentialSpec::raw(1.5, 1.0).unwrap();
        let x = [0.3, 0.0, 0.0];
        let f = spec.force(x).unwrap();
        let g = fd_gradient(&spec, x, 1e-5);
        let rel = ((f[0] + g[0]).abs()) / f[0].abs();
        assert!(rel < 1e-6, "rel = {rel}");
        assert!(f[1].abs() < 1e-15 && f[2].abs() < 1e-15);
    }

    #[test]
    fn force_is_repulsive_below_taper_onset() {
        let spec = PotentialSpec::new(1.5, 1.0).unwrap();
        for r in [1e-3, 0.01, 0.1, 0.2, 0.249] {
            assert!(spec.force([r, 0.0, 0.0]).unwrap()[0] > 0.0);
        }
    }

    #[test]
    fn even_potential_odd_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for spec in [
            PotentialSpec::new(1.5, 1.0).unwrap(),
            PotentialSpec::with_options(1.2, 0.7, 1, Some(0.8)).unwrap(),
            PotentialSpec::with_options(0.5, 1.0, 1, None).unwrap(),
        ] {
            for _ in 0..1000 {
                let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let mx = [-x[0], -x[1], -x[2]];
                let (a, b) = (spec.potential_value(x).unwrap(), spec.potential_value(mx).unwrap());
                assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
                let f = spec.force(x).unwrap();
                let g = spec.force(mx).unwrap();
                for k in 0..3 {
                    assert!((f[k] + g[k]).abs() <= 1e-13 * norm(f).max(1.0));
                }
            }
        }
    }

    #[test]
    fn force_matches_finite_difference_across_taper() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let spec = PotentialSpec::new(1.5, 1.0).unwrap();
        let rc = spec.taper_radius().unwrap();
        for _ in 0..2000 {
            let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let r = norm(x);
            if r < 0.02 {
                continue;
            }
            let f = spec.force(x).unwrap();
            let g = fd_gradient(&spec, x, 1e-6 * r.min(0.1));
            let err = norm([f[0] + g[0], f[1] + g[1], f[2] + g[2]]);
            let scale = norm(f).max(1e-3);
            let near_seam = (r - rc).abs() < 1e-3 || (r - 0.5 * rc).abs() < 1e-3;
            let tol = if near_seam { 1e-3 } else { 1e-5 };
            assert!(err / scale < tol, "r = {r}, err = {err}, |f| = {}", norm(f));
        }
    }

    /// Midpoint quadrature on an n^3 grid of the torus.
    fn midpoint_average(spec: &PotentialSpec, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h];
                    s += spec.potential_value(x).unwrap();
                }
            }
        }
        s / (n * n * n) as f64
    }

    #[test]
    fn zero_mean_on_midpoint_grid_bounded_case() {
        let spec = PotentialSpec::new(0.5, 1.0).unwrap();
        let avg = midpoint_average(&spec, 64);
        assert!(avg.abs() < 1e-6, "avg = {avg:e}");
    }

    #[test]
    fn zero_mean_singular_case_against_cubature() {
        // independent route: 3-D adaptive cubature of the calibrated function
        let spec = PotentialSpec::new(1.5, 1.0).unwrap();
        let f = |x: Vec3| spec.potential_value(x).unwrap_or(0.0);
        let avg = 8.0 * adaptive_3d(f, [0.0; 3], [0.5; 3], 1e-9, 40_000_000).value;
        assert!(avg.abs() < 1e-6, "avg = {avg:e}");
        // the 64^3 midpoint grid converges towards zero as the grid refines
        let m32 = midpoint_average(&spec, 32).abs();
        let m64 = midpoint_average(&spec, 64).abs();
        assert!(m64 < m32 && m64 < 1e-4, "m32 = {m32:e}, m64 = {m64:e}");
    }

    #[test]
    fn zero_mean_with_image_shells_and_wide_taper() {
        let spec = PotentialSpec::with_options(1.2, 1.0, 1, Some(0.9)).unwrap();
        let avg = midpoint_average(&spec, 48);
        assert!(avg.abs() < 5e-4, "avg = {avg:e}");
    }

    #[test]
    fn free_case_is_identically_zero() {
        let spec = PotentialSpec::new(1.5, 0.0).unwrap();
        assert_eq!(spec.mean_shift(), 0.0);
        assert_eq!(spec.phi_min(), 0.0);
        assert_eq!(spec.potential_value([0.1, 0.2, 0.3]).unwrap(), 0.0);
        assert_eq!(spec.force([0.1, 0.2, 0.3]).unwrap(), [0.0; 3]);
        let b = spec.certify_derivative_bounds();
        assert_eq!((b.c0, b.c1, b.c2), (0.0, 0.0, 0.0));
        assert!(b.all_finite);
    }

    #[test]
    fn phi_min_of_raw_power_law_is_at_the_corner() {
        let mut spec = PotentialSpec::raw(1.5, 1.0).unwrap();
        let corner = spec.potential_value([0.5, 0.5, 0.5]).unwrap();
        let m = spec.estimate_phi_min();
        assert!(m <= corner);
        assert!(corner - m < 1e-2, "corner {corner}, min {m}");
        assert_eq!(spec.phi_min(), m);
    }

    #[test]
    fn phi_min_is_negative_with_mean_subtraction() {
        let spec = PotentialSpec::new(1.5, 1.0).unwrap();
        assert!(spec.phi_min() < 0.0);
        // grid values never fall below the certified bound
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            assert!(spec.potential_value(x).unwrap() >= spec.phi_min());
        }
    }

    #[test]
    fn derivative_bounds_are_finite() {
        for alpha in [0.5, 1.5, 1.9] {
            let spec = PotentialSpec::new(alpha, 1.0).unwrap();
            let b = spec.certify_derivative_bounds();
            assert!(b.all_finite, "alpha {alpha}: {b:?}");
            assert!(b.c1 > 0.0 && b.c2 > 0.0);
        }
        // pure power law: r^{α-1} φ = C + mean envelope; here mean_shift = 0
        let raw = PotentialSpec::raw(1.5, 1.0).unwrap();
        let b = raw.certify_derivative_bounds();
        assert!((b.c0 - 1.0).abs() < 1e-12);
        assert!((b.c1 - 0.5).abs() < 1e-9);
    }
}
