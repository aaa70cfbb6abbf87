//! Forward models mapping an object estimate to predicted measurements.

use ndarray::{Array2, Zip};

use crate::error::{dim_err, Error, Result};
use crate::field::{
    self, convolve_array, crop_subspectrum, decimate, dft2_array, idft2_array, square_side,
    Boundary, ComplexField, Pupil, RealImage, Spectrum, C64,
};
use crate::optics::OpticsConfig;

/// Magnitudes below this get a unit phase factor in the Fourier-magnitude
/// projection.
pub const PHASE_EPS: f64 = 1e-12;

/// Complex object held as two real channels, the parameters of the intensity
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct FpObject {
    pub o_r: Array2<f64>,
    pub o_i: Array2<f64>,
}

impl FpObject {
    pub fn new(o_r: Array2<f64>, o_i: Array2<f64>) -> Result<Self> {
        square_side(&o_r, "object")?;
        if o_r.dim() != o_i.dim() {
            return dim_err(format!("object channels differ: {:?} vs {:?}", o_r.dim(), o_i.dim()));
        }
        if o_r.iter().chain(o_i.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("object contains non-finite samples".into()));
        }
        Ok(Self { o_r, o_i })
    }

    pub fn from_complex(data: &Array2<C64>) -> Self {
        Self { o_r: data.mapv(|z| z.re), o_i: data.mapv(|z| z.im) }
    }

    pub fn to_complex(&self) -> Array2<C64> {
        Zip::from(&self.o_r).and(&self.o_i).map_collect(|&r, &i| C64::new(r, i))
    }

    pub fn to_field(&self, px: f64) -> ComplexField {
        ComplexField { data: self.to_complex(), px }
    }

    pub fn side(&self) -> usize {
        self.o_r.nrows()
    }
}

/// Object spectrum held as two real channels, the parameters of the exit-wave
/// model. Centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FpSpectrumObject {
    pub spec_r: Array2<f64>,
    pub spec_i: Array2<f64>,
}

impl FpSpectrumObject {
    pub fn new(spec_r: Array2<f64>, spec_i: Array2<f64>) -> Result<Self> {
        square_side(&spec_r, "spectrum")?;
        if spec_r.dim() != spec_i.dim() {
            return dim_err("spectrum channels differ in shape");
        }
        Ok(Self { spec_r, spec_i })
    }

    pub fn from_complex(data: &Array2<C64>) -> Self {
        Self { spec_r: data.mapv(|z| z.re), spec_i: data.mapv(|z| z.im) }
    }

    pub fn to_complex(&self) -> Array2<C64> {
        Zip::from(&self.spec_r).and(&self.spec_i).map_collect(|&r, &i| C64::new(r, i))
    }

    /// Spectrum of a spatial object.
    pub fn from_object(obj: &FpObject) -> Self {
        Self::from_complex(&dft2_array(&obj.to_complex()))
    }

    /// Spatial object, by inverse transform.
    pub fn to_object(&self) -> FpObject {
        FpObject::from_complex(&idft2_array(&self.to_complex()))
    }

    pub fn side(&self) -> usize {
        self.spec_r.nrows()
    }
}

/// Object, illumination patterns and incoherent PSF of a SIM acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub object: Array2<f64>,
    pub patterns: Vec<Array2<f64>>,
    pub psf_inc: Array2<f64>,
}

impl SimScene {
    pub fn new(object: Array2<f64>, patterns: Vec<Array2<f64>>, psf_inc: Array2<f64>) -> Result<Self> {
        let scene = Self { object, patterns, psf_inc };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = square_side(&self.object, "SIM object")?;
        if self.psf_inc.dim() != (n, n) || self.patterns.iter().any(|p| p.dim() != (n, n)) {
            return dim_err("SIM object, patterns and PSF must share one shape");
        }
        if self.object.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("SIM object must be non-negative".into()));
        }
        if self.patterns.iter().flat_map(|p| p.iter()).any(|&v| v < 0.0) {
            return Err(Error::Domain("SIM patterns must be non-negative".into()));
        }
        if self.psf_inc.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("incoherent PSF must be non-negative".into()));
        }
        let total: f64 = self.psf_inc.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("incoherent PSF sums to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Precomputed geometry for the Fourier ptychography operators: pupil bins
/// and per-illumination spectral shifts.
#[derive(Debug, Clone)]
pub struct FpOperator {
    pub cfg: OpticsConfig,
    pub pupil: Pupil,
    pub shifts: Vec<(isize, isize)>,
}

impl FpOperator {
    /// Validates the config and checks every shifted pupil stays in band.
    pub fn new(cfg: &OpticsConfig) -> Result<Self> {
        cfg.validate()?;
        let pupil = Pupil::new(cfg);
        let n = cfg.n_high as isize;
        let c = n / 2;
        let mut shifts = Vec::with_capacity(cfg.n_illuminations());
        for i in 0..cfg.n_illuminations() {
            let s = cfg.shift_bins(i)?;
            let lo = c - pupil.reach;
            let hi = c + pupil.reach;
            if lo + s.0.min(s.1) < 0 || hi + s.0.max(s.1) >= n {
                return Err(Error::OutOfBand(format!(
                    "illumination {i} shifts the pupil by ({}, {}) bins, outside the {n}-bin spectrum",
                    s.0, s.1
                )));
            }
            shifts.push(s);
        }
        Ok(Self { cfg: cfg.clone(), pupil, shifts })
    }

    pub fn n_high(&self) -> usize {
        self.cfg.n_high
    }

    pub fn m_side(&self) -> usize {
        self.cfg.m_side()
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub(crate) fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.shifts.len() {
            return Err(Error::Domain(format!(
                "illumination index {n} out of range (have {})",
                self.shifts.len()
            )));
        }
        Ok(())
    }

    /// Spectral bin `(row, col)` of pupil offset `k` under illumination `n`.
    #[inline]
    pub(crate) fn bin(&self, n: usize, k: usize) -> (usize, usize) {
        let c = (self.cfg.n_high / 2) as isize;
        let (u, v) = self.pupil.offsets[k];
        let (sx, sy) = self.shifts[n];
        ((c + sy + v) as usize, (c + sx + u) as usize)
    }

    /// `Ô ⊙ CTF_n` on the full grid.
    pub fn band(&self, spec: &Array2<C64>, n: usize) -> Array2<C64> {
        let mut out = Array2::zeros(spec.dim());
        for k in 0..self.pupil.len() {
            let b = self.bin(n, k);
            out[b] = spec[b];
        }
        out
    }

    /// `O ∗ PSF_n` computed from the object spectrum: `N · idft2(Ô ⊙ CTF_n)`.
    pub fn coherent_image(&self, spec: &Array2<C64>, n: usize) -> Array2<C64> {
        let scale = self.cfg.n_high as f64;
        let mut psi = idft2_array(&self.band(spec, n));
        psi.mapv_inplace(|z| z * scale);
        psi
    }

    /// Checks the pupil fits inside the `m×m` crop window.
    pub fn check_crop_fits(&self) -> Result<()> {
        let m = self.m_side() as isize;
        if self.pupil.reach > m / 2 - 1 {
            return Err(Error::OutOfBand(format!(
                "pupil reach {} bins exceeds the {m}-bin measurement window",
                self.pupil.reach
            )));
        }
        Ok(())
    }

    /// Centered pupil on the `m×m` measurement grid.
    pub fn ctf0(&self) -> Result<Array2<f64>> {
        self.check_crop_fits()?;
        self.pupil.mask(self.m_side(), (0, 0), Boundary::Reject)
    }
}

/// Predicted intensity `decimate((PSF_nr∗O_r − PSF_ni∗O_i)² + (PSF_ni∗O_r + PSF_nr∗O_i)²)`,
/// built from four real convolutions.
pub fn fp_intensity_forward(obj: &FpObject, cfg: &OpticsConfig, n: usize) -> Result<RealImage> {
    check_object_side(obj.side(), cfg)?;
    let psf = field::make_psf_n(cfg, n)?;
    let real = |a: &Array2<f64>| a.mapv(|x| C64::new(x, 0.0));
    let psf_r = real(&psf.data.mapv(|z| z.re));
    let psf_i = real(&psf.data.mapv(|z| z.im));
    let o_r = real(&obj.o_r);
    let o_i = real(&obj.o_i);
    let conv = |a: &Array2<C64>, b: &Array2<C64>| convolve_array(a, b).mapv(|z| z.re);
    let a = conv(&psf_r, &o_r) - conv(&psf_i, &o_i);
    let b = conv(&psf_i, &o_r) + conv(&psf_r, &o_i);
    let full = Zip::from(&a).and(&b).map_collect(|&x, &y| x * x + y * y);
    Ok(RealImage { data: decimate(&full, cfg.stride)?, px: cfg.px_low_um() })
}

/// Same prediction as [`fp_intensity_forward`] via the complex convolution
/// `|O ∗ PSF_n|²`.
pub fn fp_intensity_forward_complex(obj: &FpObject, cfg: &OpticsConfig, n: usize) -> Result<RealImage> {
    check_object_side(obj.side(), cfg)?;
    let psf = field::make_psf_n(cfg, n)?;
    let psi = field::circular_convolve(&obj.to_field(cfg.px_high_um), &psf)?;
    let full = psi.data.mapv(|z| z.norm_sqr());
    Ok(RealImage { data: decimate(&full, cfg.stride)?, px: cfg.px_low_um() })
}

fn check_object_side(side: usize, cfg: &OpticsConfig) -> Result<()> {
    if side != cfg.n_high {
        return dim_err(format!("object side {side} does not match n_high {}", cfg.n_high));
    }
    Ok(())
}

/// Band-selected exit wave on the low-resolution grid:
/// `ψ_n = idft2(crop(Ô, shift_n, m) ⊙ CTF₀)`.
pub fn fp_exitwave_forward(obj: &FpSpectrumObject, cfg: &OpticsConfig, n: usize) -> Result<ComplexField> {
    let op = FpOperator::new(cfg)?;
    check_object_side(obj.side(), cfg)?;
    op.check_index(n)?;
    let phi_hat = exit_spectrum(&op, &obj.to_complex(), n)?;
    Ok(ComplexField { data: idft2_array(&phi_hat), px: cfg.px_low_um() })
}

/// `crop(Ô, shift_n, m) ⊙ CTF₀`.
pub(crate) fn exit_spectrum(op: &FpOperator, spec: &Array2<C64>, n: usize) -> Result<Array2<C64>> {
    let ctf0 = op.ctf0()?;
    let full = Spectrum { data: spec.clone(), centered: true, dk: op.cfg.dk() };
    let mut win = crop_subspectrum(&full, op.shifts[n], op.m_side())?.data;
    Zip::from(&mut win).and(&ctf0).for_each(|z, &c| *z *= c);
    Ok(win)
}

/// Fourier-magnitude projection: keep the phase of `psi`, impose the measured
/// amplitude, and return the spectrum of the result.
pub fn fmp_project(psi: &ComplexField, sqrt_meas: &RealImage) -> Result<Spectrum> {
    if psi.data.dim() != sqrt_meas.data.dim() {
        return dim_err(format!(
            "exit wave {:?} and amplitude {:?} differ in shape",
            psi.data.dim(),
            sqrt_meas.data.dim()
        ));
    }
    let projected = project_magnitude(&psi.data, &sqrt_meas.data)?;
    let n = psi.side();
    Ok(Spectrum { data: dft2_array(&projected), centered: true, dk: 1.0 / (n as f64 * psi.px) })
}

pub(crate) fn project_magnitude(psi: &Array2<C64>, amp: &Array2<f64>) -> Result<Array2<C64>> {
    if amp.iter().any(|&a| a < 0.0 || a.is_nan()) {
        return Err(Error::Domain("measured amplitude must be non-negative".into()));
    }
    Ok(Zip::from(psi).and(amp).map_collect(|&z, &a| {
        let m = z.norm();
        if m < PHASE_EPS {
            C64::new(a, 0.0)
        } else {
            z * (a / m)
        }
    }))
}

/// Single-pixel measurement `Σ O·P`.
pub fn spi_forward(object: &Array2<f64>, pattern: &Array2<f64>) -> Result<f64> {
    if object.dim() != pattern.dim() {
        return dim_err(format!("object {:?} and pattern {:?} differ", object.dim(), pattern.dim()));
    }
    Ok(Zip::from(object).and(pattern).fold(0.0, |acc, &o, &p| acc + o * p))
}

/// SIM image `(O ⊙ P_n) ∗ PSF_inc`.
pub fn sim_forward(scene: &SimScene, n: usize) -> Result<RealImage> {
    let pattern = scene.patterns.get(n).ok_or_else(|| {
        Error::Domain(format!("pattern index {n} out of range (have {})", scene.patterns.len()))
    })?;
    if pattern.dim() != scene.object.dim() || scene.psf_inc.dim() != scene.object.dim() {
        return dim_err("SIM object, pattern and PSF must share one shape");
    }
    let lit = Zip::from(&scene.object).and(pattern).map_collect(|&o, &p| C64::new(o * p, 0.0));
    let psf = scene.psf_inc.mapv(|x| C64::new(x, 0.0));
    Ok(RealImage { data: convolve_array(&lit, &psf).mapv(|z| z.re), px: 1.0 })
}

/// `|PSF|²` of the coherent objective, normalized to unit sum.
pub fn incoherent_psf(cfg: &OpticsConfig) -> Result<Array2<f64>> {
    let ctf = field::make_ctf(cfg)?;
    let psf = idft2_array(&ctf.data);
    let mut inc = psf.mapv(|z| z.norm_sqr());
    let total = inc.sum();
    inc.mapv_inplace(|v| v / total);
    Ok(inc)
}
