//! Small deterministic statistics helpers.

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    /// Standard error of the mean from the independent-sample variance.
    pub stderr: f64,
    pub count: usize,
}

pub fn mean_and_stderr(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    if n == 0 {
        return MeanEstimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            count: 0,
        };
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return MeanEstimate {
            mean,
            stderr: f64::NAN,
            count: 1,
        };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    MeanEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        count: n,
    }
}

/// Sample variance (unbiased).
pub fn variance(xs: &[f64]) -> f64 {
    let e = mean_and_stderr(xs);
    e.stderr * e.stderr * e.count as f64
}

/// Pearson correlation coefficient.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = pairwise_sum(xs) / xs.len() as f64;
    let my = pairwise_sum(ys) / ys.len() as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Standard error of the mean of a correlated series by batch means.
pub fn batch_means_stderr(xs: &[f64], batches: usize) -> f64 {
    let b = batches.max(2).min(xs.len().max(2));
    let size = xs.len() / b;
    if size == 0 {
        return mean_and_stderr(xs).stderr;
    }
    let means: Vec<f64> = (0..b)
        .map(|k| pairwise_sum(&xs[k * size..(k + 1) * size]) / size as f64)
        .collect();
    mean_and_stderr(&means).stderr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let e = mean_and_stderr(&[2.5; 10]);
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn stderr_of_two_points() {
        // var = 2, se = sqrt(2/2) = 1
        let e = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        assert!((e.stderr - 1.0).abs() < 1e-15);
    }
}
