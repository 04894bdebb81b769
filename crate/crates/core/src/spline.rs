//! Clamped uniform B-spline basis on `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TnetError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    dim: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// `dim` basis functions of the given degree. End knots carry
    /// multiplicity `degree + 1`; the `dim - degree - 1` interior knots are
    /// equally spaced.
    pub fn clamped_uniform(degree: usize, dim: usize) -> Result<Self> {
        if dim < degree + 1 {
            return Err(TnetError::config(
                "spline_dim",
                format!("need at least degree + 1 = {} basis functions, got {dim}", degree + 1),
            ));
        }
        let segments = dim - degree;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..segments).map(|j| j as f64 / segments as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, dim, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index `s` with `knots[s] <= z < knots[s + 1]`; the right end belongs
    /// to the last non-empty span.
    fn span(&self, z: f64) -> usize {
        let p = self.degree;
        if z >= 1.0 {
            return self.dim - 1;
        }
        // Upper bound over the non-repeated part of the knot vector.
        let (mut lo, mut hi) = (p, self.dim);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if z < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of all `dim` basis functions at `z`.
    pub fn evaluate(&self, z: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&z) {
            return Err(TnetError::Domain {
                context: "spline evaluation",
                domain: "[0, 1]",
                value: z,
            });
        }
        let mut out = vec![0.0; self.dim];
        let (start, local) = self.nonzero(z);
        out[start..start + local.len()].copy_from_slice(&local);
        Ok(out)
    }

    /// Cox–de Boor triangle for the `degree + 1` functions that can be
    /// non-zero at `z`; returns the index of the first one and their values.
    fn nonzero(&self, z: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let s = self.span(z);
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = z - t[s + 1 - j];
            right[j] = t[s + j] - z;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (s - p, n)
    }

    /// `sum_k coeffs[k] * phi_k(z)`.
    pub fn combine(&self, coeffs: &[f64], z: f64) -> Result<f64> {
        if coeffs.len() != self.dim {
            return Err(TnetError::dim("spline coefficients", self.dim, coeffs.len()));
        }
        let basis = self.evaluate(z)?;
        Ok(basis.iter().zip(coeffs).map(|(b, c)| b * c).sum())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Textbook recursive definition, kept separate from the triangular
    /// scheme used by the implementation.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, z: f64, last: usize) -> f64 {
        if p == 0 {
            let inside = knots[i] <= z && z < knots[i + 1];
            // Close the final non-empty interval at z = 1.
            let right_end = i == last && z == knots[i + 1];
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (z - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, z, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - z) / d2 * cox_de_boor(knots, i + 1, p - 1, z, last);
        }
        v
    }

    fn oracle(basis: &SplineBasis, z: f64) -> Vec<f64> {
        let knots = basis.knots();
        let last = knots.len() - basis.degree() - 2;
        (0..basis.dim())
            .map(|i| cox_de_boor(knots, i, basis.degree(), z, last))
            .collect()
    }

    #[test]
    fn knot_vector_layout() {
        let b = SplineBasis::clamped_uniform(2, 5).unwrap();
        let expected = [0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0];
        assert_eq!(b.knots().len(), expected.len());
        for (a, e) in b.knots().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(SplineBasis::clamped_uniform(2, 2).is_err());
    }

    #[test]
    fn matches_recursive_definition() {
        for dim in [3, 4, 5, 10, 20] {
            let b = SplineBasis::clamped_uniform(2, dim).unwrap();
            for k in 0..=200 {
                let z = k as f64 / 200.0;
                let fast = b.evaluate(z).unwrap();
                let slow = oracle(&b, z);
                for (f, s) in fast.iter().zip(&slow) {
                    assert!((f - s).abs() < 1e-13, "dim {dim} z {z}: {fast:?} vs {slow:?}");
                }
            }
        }
    }

    #[test]
    fn second_function_vanishes_at_left_end() {
        let b = SplineBasis::clamped_uniform(2, 4).unwrap();
        assert_eq!(b.combine(&[0.0, 1.0, 0.0, 0.0], 0.0).unwrap(), 0.0);
        assert_eq!(oracle(&b, 0.0)[1], 0.0);
        // Clamped ends interpolate the outer coefficients.
        assert_eq!(b.evaluate(0.0).unwrap()[0], 1.0);
        assert_eq!(b.evaluate(1.0).unwrap()[3], 1.0);
    }

    #[test]
    fn constant_and_zero_coefficients() {
        let b = SplineBasis::clamped_uniform(2, 5).unwrap();
        for k in 0..=50 {
            let z = k as f64 / 50.0;
            assert_eq!(b.combine(&[0.0; 5], z).unwrap(), 0.0);
            assert!((b.combine(&[2.5; 5], z).unwrap() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_and_shape_errors() {
        let b = SplineBasis::clamped_uniform(2, 5).unwrap();
        assert!(matches!(b.evaluate(1.5), Err(TnetError::Domain { .. })));
        assert!(matches!(b.evaluate(-1e-9), Err(TnetError::Domain { .. })));
        assert!(b.combine(&[1.0; 4], 0.5).is_err());
    }

    #[test]
    fn local_support() {
        let b = SplineBasis::clamped_uniform(2, 10).unwrap();
        for k in 0..=100 {
            let v = b.evaluate(k as f64 / 100.0).unwrap();
            assert!(v.iter().filter(|&&x| x != 0.0).count() <= 3);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(dim in 3usize..25, z in 0.0f64..=1.0) {
            let b = SplineBasis::clamped_uniform(2, dim).unwrap();
            let v = b.evaluate(z).unwrap();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
