use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projective map of the plane, stored row-major with `h33 = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    coeffs: [f64; 9],
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(coeffs: [f64; 9]) -> Result<Self> {
        Homography::from_coeffs(coeffs)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.coeffs
    }
}

const MIN_H33: f64 = 1e-12;
const MIN_RCOND: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Homography {
            coeffs: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            coeffs: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    /// Normalizes so that `h33 = 1` and rejects singular matrices.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() <= MIN_H33 || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularHomography);
        }
        let m = m / h33;
        let sv = m.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if !(hi > 0.0) || lo / hi <= MIN_RCOND {
            return Err(Error::SingularHomography);
        }
        let mut coeffs = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                coeffs[r * 3 + c] = m[(r, c)];
            }
        }
        coeffs[8] = 1.0;
        Ok(Homography { coeffs })
    }

    pub fn from_coeffs(coeffs: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&coeffs))
    }

    pub fn coeffs(&self) -> [f64; 9] {
        self.coeffs
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.coeffs)
    }

    /// Maps `(x, y)`; `None` when the point lands on the line at infinity.
    #[inline]
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.coeffs;
        let w = h[6] * x + h[7] * y + h[8];
        if w.abs() < MIN_H33 {
            return None;
        }
        Some((
            (h[0] * x + h[1] * y + h[2]) / w,
            (h[3] * x + h[4] * y + h[5]) / w,
        ))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.matrix().try_inverse().ok_or(Error::SingularHomography)?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.matrix() * other.matrix())
    }

    /// Conjugates a transform expressed about the origin so that it acts
    /// about `(cx, cy)` instead.
    pub fn about_point(&self, cx: f64, cy: f64) -> Result<Self> {
        Homography::translation(cx, cy)
            .compose(self)?
            .compose(&Homography::translation(-cx, -cy))
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_scale() {
        let h = Homography::from_matrix(Matrix3::new(2.0, 0.0, 4.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0))
            .unwrap();
        assert_eq!(h, Homography::translation(2.0, 0.0));
    }

    #[test]
    fn rejects_singular() {
        assert!(Homography::from_matrix(Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(Homography::from_matrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let h = Homography::from_coeffs([1.02, 0.03, 4.0, -0.01, 0.98, -2.0, 1e-4, -2e-4, 1.0]).unwrap();
        let id = h.compose(&h.inverse().unwrap()).unwrap();
        assert!(id.max_abs_diff(&Homography::identity()) < 1e-12);
        let (x, y) = h.project(10.0, 20.0).unwrap();
        let (bx, by) = h.inverse().unwrap().project(x, y).unwrap();
        assert!((bx - 10.0).abs() < 1e-10 && (by - 20.0).abs() < 1e-10);
    }
}
