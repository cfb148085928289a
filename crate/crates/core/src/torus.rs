//! Geometry of the unit 3-torus.
//!
//! Positions live in `[0, 1)^3`. Differences between positions are taken in
//! the minimal-image convention, so every displacement component lies in
//! `[-1/2, 1/2]` and the displacement is the shortest representative among
//! all periodic images.

use serde::{Deserialize, Serialize};

/// A plain 3-vector used for displacements, velocities and forces.
pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    norm_sq(a).sqrt()
}

/// Maps a real coordinate onto `[0, 1)`.
#[inline]
pub fn wrap_coord(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Minimal-image representative of a coordinate difference, in `[-1/2, 1/2]`.
#[inline]
pub fn minimal_image_coord(d: f64) -> f64 {
    d - d.round()
}

/// A point of the unit torus. Coordinates are always in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusVector([f64; 3]);

impl TorusVector {
    /// Builds a torus point from arbitrary real coordinates, wrapping them.
    pub fn new(coords: Vec3) -> Self {
        Self([
            wrap_coord(coords[0]),
            wrap_coord(coords[1]),
            wrap_coord(coords[2]),
        ])
    }

    pub fn origin() -> Self {
        Self([0.0; 3])
    }

    #[inline]
    pub fn coords(&self) -> Vec3 {
        self.0
    }

    /// Translates by a real vector and wraps back onto the torus.
    #[inline]
    pub fn translate(&self, d: Vec3) -> Self {
        Self::new(add(self.0, d))
    }
}

/// Minimal-image displacement `a - b`.
#[inline]
pub fn torus_displacement(a: &TorusVector, b: &TorusVector) -> Vec3 {
    [
        minimal_image_coord(a.0[0] - b.0[0]),
        minimal_image_coord(a.0[1] - b.0[1]),
        minimal_image_coord(a.0[2] - b.0[2]),
    ]
}

/// Geodesic distance on the torus.
#[inline]
pub fn torus_distance(a: &TorusVector, b: &TorusVector) -> f64 {
    norm(torus_displacement(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_displacement(a: &TorusVector, b: &TorusVector) -> Vec3 {
        let raw = sub(a.coords(), b.coords());
        let mut best = raw;
        let mut best_len = f64::INFINITY;
        for i in -1..=1 {
            for j in -1..=1 {
                for k in -1..=1 {
                    let c = add(raw, [i as f64, j as f64, k as f64]);
                    let l = norm_sq(c);
                    if l < best_len {
                        best_len = l;
                        best = c;
                    }
                }
            }
        }
        best
    }

    #[test]
    fn wraps_across_the_boundary() {
        let a = TorusVector::new([0.9, 0.0, 0.0]);
        let b = TorusVector::new([0.1, 0.0, 0.0]);
        let d = torus_displacement(&a, &b);
        assert!((d[0] + 0.2).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn identical_points_have_zero_displacement() {
        let a = TorusVector::new([0.3, 0.7, 0.11]);
        assert_eq!(torus_displacement(&a, &a), [0.0; 3]);
    }

    #[test]
    fn wrap_stays_in_unit_interval() {
        for x in [-1e-17, -0.5, 1.0, 2.0 - 1e-17, 3.25, -7.75] {
            let w = wrap_coord(x);
            assert!((0.0..1.0).contains(&w), "{x} -> {w}");
        }
    }

    #[test]
    fn matches_brute_force_over_images() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = TorusVector::new([rng.random(), rng.random(), rng.random()]);
            let b = TorusVector::new([rng.random(), rng.random(), rng.random()]);
            let d = torus_displacement(&a, &b);
            let e = brute_force_displacement(&a, &b);
            assert!((norm(d) - norm(e)).abs() < 1e-12);
            for k in 0..3 {
                assert!(d[k].abs() <= 0.5);
                assert!((d[k] - e[k]).abs() < 1e-12 || (d[k].abs() - 0.5).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn displacement_is_antisymmetric(ax in 0.0..1.0f64, ay in 0.0..1.0f64, az in 0.0..1.0f64,
                                          bx in 0.0..1.0f64, by in 0.0..1.0f64, bz in 0.0..1.0f64) {
            let a = TorusVector::new([ax, ay, az]);
            let b = TorusVector::new([bx, by, bz]);
            let d1 = torus_displacement(&a, &b);
            let d2 = torus_displacement(&b, &a);
            prop_assert!((torus_distance(&a, &b) - torus_distance(&b, &a)).abs() < 1e-15);
            for k in 0..3 {
                // antisymmetric except on the half-way tie where both signs are valid
                prop_assert!((d1[k] + d2[k]).abs() < 1e-15 || (d1[k].abs() - 0.5).abs() < 1e-12);
            }
        }

        #[test]
        fn translate_keeps_points_on_torus(x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
            let p = TorusVector::new([0.5, 0.5, 0.5]).translate([x, y, z]);
            for c in p.coords() {
                prop_assert!((0.0..1.0).contains(&c));
            }
        }
    }
}
