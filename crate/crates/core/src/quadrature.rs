//! Gauss–Legendre rules and adaptive integration in one and three dimensions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A fixed Gauss–Legendre rule mapped onto arbitrary intervals.
#[derive(Clone, Debug)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(c + h * x);
        }
        s * h
    }

    /// Tensor-product rule on an axis-aligned box.
    pub fn integrate_box<F: Fn([f64; 3]) -> f64>(&self, f: &F, lo: [f64; 3], hi: [f64; 3]) -> f64 {
        let h = [
            0.5 * (hi[0] - lo[0]),
            0.5 * (hi[1] - lo[1]),
            0.5 * (hi[2] - lo[2]),
        ];
        let c = [
            0.5 * (hi[0] + lo[0]),
            0.5 * (hi[1] + lo[1]),
            0.5 * (hi[2] + lo[2]),
        ];
        let mut s = 0.0;
        for (xi, wi) in self.nodes.iter().zip(&self.weights) {
            let x = c[0] + h[0] * xi;
            for (yj, wj) in self.nodes.iter().zip(&self.weights) {
                let y = c[1] + h[1] * yj;
                for (zk, wk) in self.nodes.iter().zip(&self.weights) {
                    let z = c[2] + h[2] * zk;
                    s += wi * wj * wk * f([x, y, z]);
                }
            }
        }
        s * h[0] * h[1] * h[2]
    }
}

/// Result of an adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct Integral {
    pub value: f64,
    /// Estimated absolute error (sum of local refinement differences).
    pub error: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Adaptive 1-D integration by interval bisection, comparing a rule on the
/// interval with the same rule on its two halves.
pub fn adaptive_1d<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_depth: usize,
) -> Integral {
    let rule = GaussRule::new(10);
    let mut evaluations = 0usize;
    let mut converged = true;
    let whole = rule.integrate(&f, a, b);
    evaluations += 10;
    let mut stack = vec![(a, b, whole, 0usize, abs_tol)];
    let mut value = 0.0;
    let mut error = 0.0;
    while let Some((lo, hi, coarse, depth, tol)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = rule.integrate(&f, lo, mid);
        let right = rule.integrate(&f, mid, hi);
        evaluations += 20;
        let fine = left + right;
        let diff = (fine - coarse).abs();
        if diff <= tol || depth >= max_depth {
            if diff > tol {
                converged = false;
            }
            value += fine;
            error += diff;
        } else {
            stack.push((lo, mid, left, depth + 1, 0.5 * tol));
            stack.push((mid, hi, right, depth + 1, 0.5 * tol));
        }
    }
    Integral {
        value,
        error,
        converged,
        evaluations,
    }
}

struct Cell {
    lo: [f64; 3],
    hi: [f64; 3],
    fine: f64,
    error: f64,
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive cubature over a box: the cell with the largest local
/// error estimate is split into eight octants until the summed estimate is
/// below `abs_tol` or the evaluation budget is spent.
pub fn adaptive_3d<F: Fn([f64; 3]) -> f64>(
    f: F,
    lo: [f64; 3],
    hi: [f64; 3],
    abs_tol: f64,
    max_evaluations: usize,
) -> Integral {
    let rule = GaussRule::new(4);
    let per_box = 64usize;
    let mut evaluations = 0usize;

    let make_cell = |lo: [f64; 3], hi: [f64; 3], evaluations: &mut usize| -> Cell {
        let coarse = rule.integrate_box(&f, lo, hi);
        let mut fine = 0.0;
        for child in octants(lo, hi) {
            fine += rule.integrate_box(&f, child.0, child.1);
        }
        *evaluations += 9 * per_box;
        Cell {
            lo,
            hi,
            fine,
            error: (fine - coarse).abs(),
        }
    };

    let mut heap = BinaryHeap::new();
    let root = make_cell(lo, hi, &mut evaluations);
    let mut total_error = root.error;
    heap.push(root);
    while total_error > abs_tol && evaluations < max_evaluations {
        let Some(worst) = heap.pop() else { break };
        total_error -= worst.error;
        for (clo, chi) in octants(worst.lo, worst.hi) {
            let c = make_cell(clo, chi, &mut evaluations);
            total_error += c.error;
            heap.push(c);
        }
    }
    // re-sum to avoid the drift of the running total
    let mut value = 0.0;
    let mut error = 0.0;
    let mut cells: Vec<Cell> = heap.into_vec();
    cells.sort_by(|a, b| {
        a.lo.partial_cmp(&b.lo)
            .unwrap_or(Ordering::Equal)
            .then(a.hi.partial_cmp(&b.hi).unwrap_or(Ordering::Equal))
    });
    for c in &cells {
        value += c.fine;
        error += c.error;
    }
    Integral {
        value,
        error,
        converged: error <= abs_tol,
        evaluations,
    }
}

fn octants(lo: [f64; 3], hi: [f64; 3]) -> impl Iterator<Item = ([f64; 3], [f64; 3])> {
    let mid = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    (0..8).map(move |k| {
        let mut clo = [0.0; 3];
        let mut chi = [0.0; 3];
        for d in 0..3 {
            if (k >> d) & 1 == 0 {
                clo[d] = lo[d];
                chi[d] = mid[d];
            } else {
                clo[d] = mid[d];
                chi[d] = hi[d];
            }
        }
        (clo, chi)
    })
}
