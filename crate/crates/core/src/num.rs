//! Scalar abstraction and small statistics helpers shared by the analysis
//! modules. Everything here is generic over [`Scalar`] so the math runs on
//! f32 or f64; the pipeline instantiates it with [`crate::Value`].

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic mean; zero for an empty slice.
pub fn mean<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    let mut sum = S::zero();
    for &x in xs {
        sum += x;
    }
    sum / S::from_usize(xs.len()).unwrap()
}

/// Population standard deviation (divide by n); zero for an empty slice.
pub fn population_std<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    let m = mean(xs);
    let mut acc = S::zero();
    for &x in xs {
        let d = x - m;
        acc += d * d;
    }
    (acc / S::from_usize(xs.len()).unwrap()).sqrt()
}

/// Median of an unsorted slice; the even-length case is the mean of the two
/// central values. Panics on an empty slice.
pub fn median<S: Scalar>(xs: &[S]) -> S {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v: Vec<S> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in median input"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let two = S::from_f64(2.0).unwrap();
        (v[n / 2 - 1] + v[n / 2]) / two
    }
}

/// Median and median absolute deviation of a slice.
pub fn median_abs_deviation<S: Scalar>(xs: &[S]) -> (S, S) {
    let m = median(xs);
    let devs: Vec<S> = xs.iter().map(|&x| (x - m).abs()).collect();
    (m, median(&devs))
}

/// Manhattan (L1) distance between two 3-vectors.
pub fn manhattan3<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> S {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Distance from a point to a closed interval; zero inside.
pub fn interval_distance<S: Scalar>(x: S, lo: S, hi: S) -> S {
    if x < lo {
        lo - x
    } else if x > hi {
        x - hi
    } else {
        S::zero()
    }
}

/// Round to the given number of significant decimal digits.
///
/// Pattern components are rounded once at construction so that serialized
/// records round-trip bit-exactly.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits as i32 - 1 - magnitude);
    (x * factor).round() / factor
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std_basics() {
        assert_eq!(mean::<f64>(&[]), 0.0);
        assert_eq!(mean(&[1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(population_std(&[0.5, 0.5, 0.5]), 0.0);
        // Two-point distribution {0, 1}: std = 0.5.
        assert!((population_std(&[1.0, 0.0, 1.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn median_even_is_midpoint() {
        assert_eq!(median(&[0.1, 0.9]), 0.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[0.1, 0.1, 0.2, 0.2]), 0.15000000000000002);
    }

    #[test]
    fn mad_hand_example() {
        let (m, mad) = median_abs_deviation(&[0.1, 0.1, 0.2, 0.2, 0.9]);
        assert_eq!(m, 0.2);
        assert!((mad - 0.1).abs() < 1e-12);
    }

    #[test]
    fn interval_distance_projects() {
        assert_eq!(interval_distance(0.5, 0.0, 1.0), 0.0);
        assert!((interval_distance(0.05, 0.0, 0.01) - 0.04).abs() < 1e-12);
        assert_eq!(interval_distance(-0.5, 0.0, 1.0), 0.5);
    }

    #[test]
    fn round_sig_stable() {
        let x = 0.123456789123;
        let r = round_sig(x, 9);
        assert_eq!(r, round_sig(r, 9));
        assert!((r - 0.123456789).abs() < 1e-12);
        assert_eq!(round_sig(0.0, 9), 0.0);
    }

    #[test]
    fn generic_over_f32() {
        let xs: [f32; 3] = [0.25, 0.5, 0.75];
        assert!((mean(&xs) - 0.5).abs() < 1e-6);
        assert_eq!(manhattan3(&[1.0f32, 1.0, 1.0], &[0.0, 0.0, 0.0]), 3.0);
    }
}
