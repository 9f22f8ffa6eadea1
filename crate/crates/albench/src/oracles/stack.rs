//! Thin-film reflectance by the characteristic-matrix method, normal
//! incidence, lossless dispersionless media.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub ambient_index: f64,
    /// One refractive index per layer, top to bottom.
    pub layer_indices: Vec<f64>,
    pub substrate_index: f64,
    pub wavelength_min_nm: f64,
    pub wavelength_max_nm: f64,
    pub n_wavelengths: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            ambient_index: 1.0,
            layer_indices: vec![1.45, 2.10, 1.45, 2.10, 1.45],
            substrate_index: 1.45,
            wavelength_min_nm: 400.0,
            wavelength_max_nm: 800.0,
            n_wavelengths: 201,
        }
    }
}

impl StackConfig {
    pub fn wavelengths(&self) -> Vec<f64> {
        let n = self.n_wavelengths;
        (0..n)
            .map(|i| {
                self.wavelength_min_nm
                    + (self.wavelength_max_nm - self.wavelength_min_nm) * i as f64
                        / (n - 1).max(1) as f64
            })
            .collect()
    }
}

/// Reflectance |r|^2 at one wavelength for the given layer thicknesses (nm).
pub fn reflectance_at(cfg: &StackConfig, thicknesses: &[f64], wavelength_nm: f64) -> f64 {
    // Characteristic matrix product over layers; (B, C) = M (1, n_sub).
    let mut m00 = Complex64::new(1.0, 0.0);
    let mut m01 = Complex64::new(0.0, 0.0);
    let mut m10 = Complex64::new(0.0, 0.0);
    let mut m11 = Complex64::new(1.0, 0.0);
    for (&d, &n) in thicknesses.iter().zip(&cfg.layer_indices) {
        let phase = 2.0 * std::f64::consts::PI * n * d / wavelength_nm;
        let (s, c) = phase.sin_cos();
        let a00 = Complex64::new(c, 0.0);
        let a01 = Complex64::new(0.0, s / n);
        let a10 = Complex64::new(0.0, s * n);
        let a11 = Complex64::new(c, 0.0);
        let b00 = m00 * a00 + m01 * a10;
        let b01 = m00 * a01 + m01 * a11;
        let b10 = m10 * a00 + m11 * a10;
        let b11 = m10 * a01 + m11 * a11;
        m00 = b00;
        m01 = b01;
        m10 = b10;
        m11 = b11;
    }
    let ns = Complex64::new(cfg.substrate_index, 0.0);
    let b = m00 + m01 * ns;
    let c = m10 + m11 * ns;
    let n0 = cfg.ambient_index;
    let r = (n0 * b - c) / (n0 * b + c);
    r.norm_sqr()
}

/// Full reflectance spectrum over the configured wavelength grid.
pub fn stack_oracle(cfg: &StackConfig, thicknesses: &[f64]) -> Result<Vec<f64>> {
    if thicknesses.len() != cfg.layer_indices.len() {
        return Err(Error::InvalidInput(format!(
            "{} thicknesses for {} layers",
            thicknesses.len(),
            cfg.layer_indices.len()
        )));
    }
    if thicknesses.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidInput("non-positive layer thickness".into()));
    }
    Ok(cfg
        .wavelengths()
        .iter()
        .map(|&wl| reflectance_at(cfg, thicknesses, wl))
        .collect())
}
