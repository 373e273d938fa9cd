//! Data-fit objectives and the constrained backprojected residual (CBR).
//!
//! Conventions: `D_LS = ‖Hx − y‖²` without weighting, and the Gaussian
//! gradient used by the CBR is `Hᵀ(Hx − y)`, i.e. half the gradient of
//! `D_LS`. The Poisson gradient `Hᵀ1 − Hᵀ(y/Hx)` is the exact gradient of
//! `D_KL`.

use std::fmt;

use crate::error::{check_len, Error, Result};
use crate::operators::{DataVector, ForwardOperator, ImageVector};

/// Below this a forward projection is treated as zero in ratios `y/Hx`.
pub const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// i.i.d. Gaussian noise with a single standard deviation.
    Gaussian { sigma: f64 },
    Poisson,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
        }
        Ok(NoiseModel::Gaussian { sigma })
    }

    pub fn is_poisson(&self) -> bool {
        matches!(self, NoiseModel::Poisson)
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            NoiseModel::Gaussian { sigma } => Some(sigma),
            NoiseModel::Poisson => None,
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            NoiseModel::Poisson => f.write_str("poisson"),
        }
    }
}

pub fn least_squares(y: &[f64], forward: &[f64]) -> f64 {
    forward
        .iter()
        .zip(y)
        .map(|(hx, y)| (hx - y) * (hx - y))
        .sum()
}

/// `Σ yᵢ log(yᵢ/(Hx)ᵢ) + (Hx)ᵢ − yᵢ` with `0·log 0 = 0`.
pub fn kl_divergence(y: &[f64], forward: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (index, (&yi, &hx)) in y.iter().zip(forward).enumerate() {
        if hx <= 0.0 {
            return Err(Error::NonPositiveForward { index, value: hx });
        }
        if yi < 0.0 {
            return Err(Error::NegativeValue {
                what: "data",
                index,
                value: yi,
            });
        }
        let log_term = if yi > 0.0 { yi * (yi / hx).ln() } else { 0.0 };
        total += log_term + hx - yi;
    }
    Ok(total)
}

pub fn d_ls(y: &DataVector, x: &ImageVector, op: &ForwardOperator) -> Result<f64> {
    check_len("data", op.n_data(), y.len())?;
    let forward = op.apply(x)?;
    Ok(least_squares(y.as_slice(), forward.as_slice()))
}

pub fn d_kl(y: &DataVector, x: &ImageVector, op: &ForwardOperator) -> Result<f64> {
    check_len("data", op.n_data(), y.len())?;
    let forward = op.apply(x)?;
    kl_divergence(y.as_slice(), forward.as_slice())
}

/// `yᵢ/(Hx)ᵢ`, taking `0` where `yᵢ = 0`.
pub(crate) fn data_ratio(y: &[f64], forward: &[f64]) -> Result<Vec<f64>> {
    y.iter()
        .zip(forward)
        .enumerate()
        .map(|(index, (&yi, &hx))| {
            if yi == 0.0 {
                Ok(0.0)
            } else if hx <= TINY {
                Err(Error::NonPositiveForward { index, value: hx })
            } else {
                Ok(yi / hx)
            }
        })
        .collect()
}

pub(crate) fn inverse_forward(forward: &[f64]) -> Result<Vec<f64>> {
    forward
        .iter()
        .enumerate()
        .map(|(index, &hx)| {
            if hx > 0.0 {
                Ok(1.0 / hx)
            } else {
                Err(Error::NonPositiveForward { index, value: hx })
            }
        })
        .collect()
}

/// `Σⱼ (xⱼ gⱼ)²`.
pub(crate) fn weighted_norm_sq(x: &[f64], gradient: &[f64]) -> f64 {
    x.iter().zip(gradient).map(|(x, g)| (x * g) * (x * g)).sum()
}

/// `Hᵀ(Hx) − Hᵀy` from the two backprojections.
pub(crate) fn gaussian_gradient(gram: &[f64], backprojected_data: &[f64]) -> Vec<f64> {
    gram.iter().zip(backprojected_data).map(|(a, b)| a - b).collect()
}

/// `Hᵀ1 − Hᵀ(y/Hx)` from the backprojected ratio.
pub(crate) fn poisson_gradient(column_sums: &[f64], backprojected_ratio: &[f64]) -> Vec<f64> {
    column_sums
        .iter()
        .zip(backprojected_ratio)
        .map(|(a, b)| a - b)
        .collect()
}

/// `σ² Σⱼ xⱼ² (H₂ᵀ1)ⱼ`.
pub(crate) fn gaussian_expected(x: &[f64], squared_column_sums: &[f64], sigma: f64) -> f64 {
    let var = sigma * sigma;
    x.iter()
        .zip(squared_column_sums)
        .map(|(x, s)| x * x * (s * var))
        .sum()
}

/// `Σⱼ xⱼ² (H₂ᵀ(1/Hx))ⱼ`.
pub(crate) fn poisson_expected(x: &[f64], squared_backprojected_inverse: &[f64]) -> f64 {
    x.iter()
        .zip(squared_backprojected_inverse)
        .map(|(x, s)| x * x * s)
        .sum()
}

/// Gradient of the negative log-likelihood in the CBR convention.
pub fn likelihood_gradient(
    y: &DataVector,
    x: &ImageVector,
    op: &ForwardOperator,
    noise: NoiseModel,
) -> Result<Vec<f64>> {
    check_len("data", op.n_data(), y.len())?;
    let forward = op.apply(x)?;
    let mut back = vec![0.0; op.n_params()];
    match noise {
        NoiseModel::Gaussian { .. } => {
            let mut back_y = vec![0.0; op.n_params()];
            op.adjoint_into(forward.as_slice(), &mut back);
            op.adjoint_into(y.as_slice(), &mut back_y);
            Ok(gaussian_gradient(&back, &back_y))
        }
        NoiseModel::Poisson => {
            let ratio = data_ratio(y.as_slice(), forward.as_slice())?;
            // the ratio is only well defined where Hx > 0
            inverse_forward(forward.as_slice())?;
            op.adjoint_into(&ratio, &mut back);
            Ok(poisson_gradient(
                op.column_sums().as_slice().expect("contiguous"),
                &back,
            ))
        }
    }
}

/// `‖x ⊙ ∇L_y(x)‖²`.
pub fn cbr_residual(
    y: &DataVector,
    x: &ImageVector,
    op: &ForwardOperator,
    noise: NoiseModel,
) -> Result<f64> {
    let gradient = likelihood_gradient(y, x, op, noise)?;
    Ok(weighted_norm_sq(x.as_slice(), &gradient))
}

/// Expected value of the CBR under the noise model, at iterate `x`.
pub fn cbr_expected(x: &ImageVector, op: &ForwardOperator, noise: NoiseModel) -> Result<f64> {
    check_len("image", op.n_params(), x.len())?;
    match noise {
        NoiseModel::Gaussian { sigma } => Ok(gaussian_expected(
            x.as_slice(),
            op.squared_column_sums().as_slice().expect("contiguous"),
            sigma,
        )),
        NoiseModel::Poisson => {
            let forward = op.apply(x)?;
            let inv = inverse_forward(forward.as_slice())?;
            let mut back = vec![0.0; op.n_params()];
            op.squared_adjoint_into(&inv, &mut back);
            Ok(poisson_expected(x.as_slice(), &back))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> ForwardOperator {
        ForwardOperator::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap()
    }

    fn x(v: &[f64]) -> ImageVector {
        ImageVector::from_vec(v.to_vec()).unwrap()
    }

    fn y(v: &[f64]) -> DataVector {
        DataVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn least_squares_examples() {
        let h = small();
        assert_eq!(d_ls(&y(&[2.0, 3.0]), &x(&[1.0, 1.0]), &h).unwrap(), 0.0);
        assert_eq!(d_ls(&y(&[3.0, 3.0]), &x(&[1.0, 1.0]), &h).unwrap(), 1.0);
        assert_eq!(d_ls(&y(&[0.0, 0.0]), &x(&[0.0, 0.0]), &h).unwrap(), 0.0);
    }

    #[test]
    fn kl_examples() {
        let h = small();
        assert_eq!(d_kl(&y(&[2.0, 3.0]), &x(&[1.0, 1.0]), &h).unwrap(), 0.0);
        let v = d_kl(&y(&[3.0, 3.0]), &x(&[1.0, 1.0]), &h).unwrap();
        assert_abs_diff_eq!(v, 3.0 * 1.5f64.ln() - 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.216395, epsilon = 1e-6);
        let v = d_kl(&y(&[0.0, 2.0]), &x(&[1.0, 1.0]), &h).unwrap();
        assert_abs_diff_eq!(v, 2.0 + 2.0 * (2.0f64 / 3.0).ln() + 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 2.189069, epsilon = 1e-6);
    }

    #[test]
    fn kl_errors() {
        let h = small();
        assert!(matches!(
            d_kl(&y(&[1.0, 1.0]), &x(&[0.0, 0.0]), &h),
            Err(Error::NonPositiveForward { .. })
        ));
        assert!(matches!(
            d_kl(&y(&[-1.0, 1.0]), &x(&[1.0, 1.0]), &h),
            Err(Error::NegativeValue { .. })
        ));
    }

    #[test]
    fn cbr_residual_examples() {
        let h = small();
        let g = NoiseModel::gaussian(1.0).unwrap();
        let r = cbr_residual(&y(&[3.0, 3.0]), &x(&[1.0, 1.0]), &h, g).unwrap();
        assert_eq!(r, 2.0);
        let r = cbr_residual(&y(&[3.0, 3.0]), &x(&[1.0, 1.0]), &h, NoiseModel::Poisson).unwrap();
        assert_eq!(r, 0.5);
        for noise in [g, NoiseModel::Poisson] {
            let r = cbr_residual(&y(&[2.0, 3.0]), &x(&[1.0, 1.0]), &h, noise).unwrap();
            assert_eq!(r, 0.0);
        }
        assert!(cbr_residual(&y(&[3.0, 3.0]), &x(&[0.0, 0.0]), &h, NoiseModel::Poisson).is_err());
    }

    #[test]
    fn cbr_expected_examples() {
        let h = small();
        let g = NoiseModel::gaussian(1.0).unwrap();
        assert_eq!(cbr_expected(&x(&[1.0, 1.0]), &h, g).unwrap(), 7.0);
        let p = cbr_expected(&x(&[1.0, 1.0]), &h, NoiseModel::Poisson).unwrap();
        assert_abs_diff_eq!(p, 8.0 / 3.0, epsilon = 1e-14);
        assert_eq!(cbr_expected(&x(&[0.0, 0.0]), &h, g).unwrap(), 0.0);
        assert!(cbr_expected(&x(&[0.0, 0.0]), &h, NoiseModel::Poisson).is_err());
    }

    #[test]
    fn gaussian_sigma_must_be_positive() {
        assert!(NoiseModel::gaussian(0.0).is_err());
        assert!(NoiseModel::gaussian(-1.0).is_err());
        assert!(NoiseModel::gaussian(f64::NAN).is_err());
    }
}
