//! Microscope geometry: wavelength, objective NA, grids and illumination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3.45 µm sensor pitch / 2x magnification / stride 4.
pub const DEFAULT_PX_HIGH_UM: f64 = 0.43125;
pub const DEFAULT_LAMBDA_UM: f64 = 0.532;

/// Red, green and blue LED wavelengths in µm.
pub const LED_WAVELENGTHS_UM: [f64; 3] = [0.632, 0.532, 0.470];

/// Optical parameters shared by all Fourier ptychography operators.
///
/// Wave vectors are stored as sines of the illumination angles, i.e. in
/// units of `k0 = 2π/λ`.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    pub lambda_um: f64,
    pub na: f64,
    pub n_high: usize,
    pub stride: usize,
    pub px_high_um: f64,
    #[serde(default)]
    pub wavevectors: Vec<(f64, f64)>,
}

impl OpticsConfig {
    pub fn new(lambda_um: f64, na: f64, n_high: usize, stride: usize, px_high_um: f64) -> Self {
        Self { lambda_um, na, n_high, stride, px_high_um, wavevectors: Vec::new() }
    }

    pub fn with_wavevectors(mut self, wavevectors: Vec<(f64, f64)>) -> Self {
        self.wavevectors = wavevectors;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_high < 2 {
            return bad(format!("n_high must be >= 2, got {}", self.n_high));
        }
        if self.stride == 0 || !self.n_high.is_multiple_of(self.stride) {
            return bad(format!(
                "n_high {} is not divisible by stride {}",
                self.n_high, self.stride
            ));
        }
        if !(self.lambda_um > 0.0) || !self.lambda_um.is_finite() {
            return bad(format!("lambda_um must be positive, got {}", self.lambda_um));
        }
        if !(self.px_high_um > 0.0) || !self.px_high_um.is_finite() {
            return bad(format!("px_high_um must be positive, got {}", self.px_high_um));
        }
        if !(self.na > 0.0 && self.na < 1.0) {
            return bad(format!("na must lie in (0, 1), got {}", self.na));
        }
        for (i, &(kx, ky)) in self.wavevectors.iter().enumerate() {
            if !(kx.abs() < 1.0 && ky.abs() < 1.0) {
                return bad(format!("wave vector {i} = ({kx}, {ky}) is not a sine (|k| < 1)"));
            }
        }
        let half = self.n_high as f64 / 2.0;
        if self.pupil_radius_bins() >= half {
            return bad(format!(
                "pupil radius {:.3} bins does not fit inside the {}-bin spectrum",
                self.pupil_radius_bins(),
                self.n_high
            ));
        }
        Ok(())
    }

    /// Side of the low-resolution measurement grid.
    pub fn m_side(&self) -> usize {
        self.n_high / self.stride
    }

    pub fn px_low_um(&self) -> f64 {
        self.px_high_um * self.stride as f64
    }

    /// Frequency bin spacing of the high-resolution spectrum, cycles/µm.
    pub fn dk(&self) -> f64 {
        1.0 / (self.n_high as f64 * self.px_high_um)
    }

    /// Coherent cutoff `NA/λ` in cycles/µm.
    pub fn cutoff(&self) -> f64 {
        self.na / self.lambda_um
    }

    pub fn pupil_radius_bins(&self) -> f64 {
        self.cutoff() / self.dk()
    }

    /// Strict circle condition of the objective pupil at bin offset `(u, v)`.
    pub fn in_pupil(&self, u: isize, v: isize) -> bool {
        ((u * u + v * v) as f64).sqrt() * self.dk() < self.cutoff()
    }

    /// Integer spectral shift `(sx, sy)` of illumination `n`, in bins.
    pub fn shift_bins(&self, n: usize) -> Result<(isize, isize)> {
        let &(kx, ky) = self.wavevectors.get(n).ok_or_else(|| {
            Error::Domain(format!(
                "illumination index {n} out of range (have {})",
                self.wavevectors.len()
            ))
        })?;
        let scale = self.n_high as f64 * self.px_high_um / self.lambda_um;
        Ok(((kx * scale).round() as isize, (ky * scale).round() as isize))
    }

    /// Objective NA plus the largest illumination sine.
    pub fn synthetic_na(&self) -> f64 {
        let kmax = self
            .wavevectors
            .iter()
            .map(|&(kx, ky)| kx.hypot(ky))
            .fold(0.0, f64::max);
        self.na + kmax
    }

    pub fn n_illuminations(&self) -> usize {
        self.wavevectors.len()
    }
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA_UM, 0.1, 256, 4, DEFAULT_PX_HIGH_UM)
    }
}
