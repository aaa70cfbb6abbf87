//! Synthetic scenes, illumination geometry, patterns and dataset generation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::field::{dft2_array, idft2_array, RealImage, C64};
use crate::models::{exit_spectrum, incoherent_psf, sim_forward, spi_forward, FpObject, FpOperator, SimScene};
use crate::optics::OpticsConfig;
use crate::par;

/// Plane-wave illumination sines on a centered `rows × cols` grid, raster
/// order. The first component varies with the row index.
pub fn gen_illumination_grid(rows: usize, cols: usize, step: f64) -> Result<Vec<(f64, f64)>> {
    if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "illumination grid {rows}x{cols} has no normal-incidence vector; use odd sizes or gen_illumination_grid_any"
        )));
    }
    Ok(gen_illumination_grid_any(rows, cols, step))
}

/// As [`gen_illumination_grid`] without the odd-size requirement.
pub fn gen_illumination_grid_any(rows: usize, cols: usize, step: f64) -> Vec<(f64, f64)> {
    let ci = (rows as f64 - 1.0) / 2.0;
    let cj = (cols as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(((i as f64 - ci) * step, (j as f64 - cj) * step));
        }
    }
    out
}

/// Illumination sines of an LED matrix at height `distance_mm` below the
/// sample, centered on the optical axis.
pub fn led_wavevectors(rows: usize, cols: usize, pitch_mm: f64, distance_mm: f64) -> Result<Vec<(f64, f64)>> {
    if !(distance_mm > 0.0) {
        return Err(Error::Config(format!("LED distance must be positive, got {distance_mm}")));
    }
    Ok(gen_illumination_grid_any(rows, cols, pitch_mm)
        .into_iter()
        .map(|(dx, dy)| {
            let r = (dx * dx + dy * dy + distance_mm * distance_mm).sqrt();
            (dx / r, dy / r)
        })
        .collect())
}

/// Complex object `A·e^{iΦ}` where the phase image, read as a fraction in
/// `[0, 1]`, is mapped linearly onto `phase_range`.
pub fn synth_object(amplitude: &Array2<f64>, phase: &Array2<f64>, phase_range: (f64, f64)) -> Result<FpObject> {
    if amplitude.dim() != phase.dim() {
        return dim_err(format!("amplitude {:?} and phase {:?} differ", amplitude.dim(), phase.dim()));
    }
    if amplitude.iter().any(|&a| a < 0.0) {
        return Err(Error::Domain("amplitude must be non-negative".into()));
    }
    let (lo, hi) = phase_range;
    let field = Zip::from(amplitude)
        .and(phase)
        .map_collect(|&a, &p| C64::from_polar(a, lo + p * (hi - lo)));
    FpObject::new(field.mapv(|z| z.re), field.mapv(|z| z.im))
}

pub const DEFAULT_PHASE_RANGE: (f64, f64) = (0.0, PI / 2.0);

/// Smooth procedural test image in `[0, 1]`: random Gaussian blobs, a ring
/// and a bar grating, normalized.
pub fn test_pattern(side: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side as f64;
    let mut img = Array2::<f64>::zeros((side, side));
    for _ in 0..12 {
        let cx = rng.random::<f64>() * n;
        let cy = rng.random::<f64>() * n;
        let w = (0.03 + 0.1 * rng.random::<f64>()) * n;
        let a = rng.random::<f64>() * 2.0 - 0.6;
        img.indexed_iter_mut().for_each(|((r, c), v)| {
            let dx = periodic_dist(c as f64, cx, n);
            let dy = periodic_dist(r as f64, cy, n);
            *v += a * (-(dx * dx + dy * dy) / (2.0 * w * w)).exp();
        });
    }
    let (rcx, rcy, rr) = (rng.random::<f64>() * n, rng.random::<f64>() * n, 0.15 * n);
    let period = 0.06 * n;
    img.indexed_iter_mut().for_each(|((r, c), v)| {
        let d = periodic_dist(c as f64, rcx, n).hypot(periodic_dist(r as f64, rcy, n));
        *v += 0.8 * (-((d - rr) / (0.02 * n)).powi(2)).exp();
        let in_bar = (r as f64) > 0.1 * n && (r as f64) < 0.35 * n && (c as f64) > 0.55 * n && (c as f64) < 0.9 * n;
        if in_bar {
            *v += 0.4 * (1.0 + (2.0 * PI * c as f64 / period).cos());
        }
    });
    normalize_unit(&mut img);
    img
}

fn periodic_dist(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

fn normalize_unit(img: &mut Array2<f64>) {
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.mapv_inplace(|v| (v - lo) / span);
}

/// Test object with amplitude in `[amp_floor, 1]` and phase in
/// [`DEFAULT_PHASE_RANGE`].
pub fn test_object(side: usize, seed: u64, amp_floor: f64) -> Result<FpObject> {
    let amp = test_pattern(side, seed).mapv(|v| amp_floor + (1.0 - amp_floor) * v);
    let phase = test_pattern(side, seed.wrapping_add(0x5eed));
    synth_object(&amp, &phase, DEFAULT_PHASE_RANGE)
}

/// Union of all shifted pupils on the high-resolution grid: the spectral
/// support the measurements can constrain.
pub fn synthetic_support(op: &FpOperator) -> Array2<f64> {
    let n = op.n_high();
    let mut mask = Array2::zeros((n, n));
    for i in 0..op.len() {
        for k in 0..op.pupil.len() {
            mask[op.bin(i, k)] = 1.0;
        }
    }
    mask
}

/// Removes every spectral component outside [`synthetic_support`].
pub fn band_limit(obj: &FpObject, op: &FpOperator) -> FpObject {
    let support = synthetic_support(op);
    let mut spec = dft2_array(&obj.to_complex());
    Zip::from(&mut spec).and(&support).for_each(|z, &m| *z *= m);
    FpObject::from_complex(&idft2_array(&spec))
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormationMode {
    /// `I_n = decimate(|O ∗ PSF_n|², stride)` on the high-res grid.
    Stride,
    /// `I_n = |ψ_n|²` from band selection at the low-res grid.
    Crop,
}

impl FormationMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stride => "stride",
            Self::Crop => "crop",
        }
    }
}

/// Factor that converts crop-mode intensities into stride-mode intensities.
///
/// When the pupil fits inside the crop window the stride-mode samples of
/// `O ∗ PSF_n` equal `m_side · ψ_n` times a unit phase ramp, so the two
/// intensity conventions differ by exactly `m_side²`.
pub fn crop_to_stride_scale(cfg: &OpticsConfig) -> f64 {
    let m = cfg.m_side() as f64;
    m * m
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseModel {
    /// Additive zero-mean Gaussian noise, clipped at zero.
    Gaussian { sigma: f64, seed: u64 },
    /// Poisson counts with `photons` expected at the brightest pixel of each
    /// image, rescaled back to intensity units.
    Poisson { photons: f64, seed: u64 },
}

impl NoiseModel {
    fn apply(&self, img: &mut Array2<f64>, index: usize) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { sigma, seed } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
                img.mapv_inplace(|v| (v + normal.sample(&mut rng)).max(0.0));
            }
            NoiseModel::Poisson { photons, seed } => {
                if !(photons > 0.0) {
                    return Err(Error::Config(format!("photon count must be positive, got {photons}")));
                }
                let peak = img.iter().cloned().fold(0.0, f64::max);
                if peak <= 0.0 {
                    return Ok(());
                }
                let gain = photons / peak;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
                for v in img.iter_mut() {
                    let lambda = *v * gain;
                    let k = if lambda > 0.0 {
                        Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    };
                    *v = k / gain;
                }
            }
        }
        Ok(())
    }
}

/// Free-form record of how a dataset was produced.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
    pub noise: Option<NoiseModel>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

/// Fourier ptychography measurements with their optics.
#[derive(Debug, Clone, PartialEq)]
pub struct FpDataset {
    pub cfg: OpticsConfig,
    pub mode: FormationMode,
    pub measurements: Vec<RealImage>,
    pub ground_truth: Option<FpObject>,
    pub provenance: Provenance,
}

impl FpDataset {
    /// Element-wise square roots of the measurements.
    pub fn amplitudes(&self) -> Vec<RealImage> {
        self.measurements
            .iter()
            .map(|m| RealImage { data: m.data.mapv(|v| v.max(0.0).sqrt()), px: m.px })
            .collect()
    }

    /// Measurements rescaled into the intensity convention of `mode`.
    pub fn measurements_as(&self, mode: FormationMode) -> Vec<RealImage> {
        let k = match (self.mode, mode) {
            (FormationMode::Crop, FormationMode::Stride) => crop_to_stride_scale(&self.cfg),
            (FormationMode::Stride, FormationMode::Crop) => 1.0 / crop_to_stride_scale(&self.cfg),
            _ => 1.0,
        };
        self.measurements.iter().map(|m| RealImage { data: &m.data * k, px: m.px }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.measurements.len() != self.cfg.n_illuminations() {
            return dim_err(format!(
                "{} measurements for {} illuminations",
                self.measurements.len(),
                self.cfg.n_illuminations()
            ));
        }
        let m = self.cfg.m_side();
        for (i, img) in self.measurements.iter().enumerate() {
            if img.data.dim() != (m, m) {
                return dim_err(format!("measurement {i} is {:?}, expected {m}x{m}", img.data.dim()));
            }
            if img.data.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Domain(format!("measurement {i} has negative or NaN samples")));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.side() != self.cfg.n_high {
                return dim_err("ground truth side differs from n_high");
            }
        }
        Ok(())
    }

    /// Rounds all measurement samples to `f32` precision.
    pub fn quantize_f32(&mut self) {
        for m in &mut self.measurements {
            m.data.mapv_inplace(|v| v as f32 as f64);
        }
        if let Some(gt) = &mut self.ground_truth {
            gt.o_r.mapv_inplace(|v| v as f32 as f64);
            gt.o_i.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Simulates one measurement per illumination in `cfg`.
pub fn generate_dataset(
    cfg: &OpticsConfig,
    obj: &FpObject,
    mode: FormationMode,
    noise: Option<NoiseModel>,
) -> Result<FpDataset> {
    let op = FpOperator::new(cfg)?;
    if obj.side() != cfg.n_high {
        return dim_err(format!("object side {} does not match n_high {}", obj.side(), cfg.n_high));
    }
    if mode == FormationMode::Crop {
        op.check_crop_fits()?;
    }
    let spec = dft2_array(&obj.to_complex());
    let s = cfg.stride;
    let m = cfg.m_side();
    let images: Vec<Result<RealImage>> = par::map_range(op.len(), |n| {
        let mut data = match mode {
            FormationMode::Stride => {
                let psi = op.coherent_image(&spec, n);
                Array2::from_shape_fn((m, m), |(r, c)| psi[[r * s, c * s]].norm_sqr())
            }
            FormationMode::Crop => idft2_array(&exit_spectrum(&op, &spec, n)?).mapv(|z| z.norm_sqr()),
        };
        if let Some(noise) = &noise {
            noise.apply(&mut data, n)?;
        }
        Ok(RealImage { data, px: cfg.px_low_um() })
    });
    let measurements = images.into_iter().collect::<Result<Vec<_>>>()?;
    let mut params = BTreeMap::new();
    params.insert("mode".into(), mode.name().into());
    params.insert("illuminations".into(), op.len().to_string());
    Ok(FpDataset {
        cfg: cfg.clone(),
        mode,
        measurements,
        ground_truth: Some(obj.clone()),
        provenance: Provenance {
            generator: "generate_dataset".into(),
            seed: noise.map(|n| match n {
                NoiseModel::Gaussian { seed, .. } | NoiseModel::Poisson { seed, .. } => seed,
            }),
            noise,
            params,
        },
    })
}

/// Sinusoidal fringes `0.5·(1 + modulation·cos(2π·f·(x cosθ + y sinθ) + φ₀))`,
/// with `f` in cycles per pixel and θ, φ₀ in radians.
pub fn gen_sim_patterns(
    side: usize,
    freq_cycles_per_px: f64,
    orientations: &[f64],
    phases: &[f64],
    modulation: f64,
) -> Result<Vec<Array2<f64>>> {
    if orientations.len() != phases.len() {
        return Err(Error::Config(format!(
            "{} orientations but {} phases",
            orientations.len(),
            phases.len()
        )));
    }
    if !(0.0..=1.0).contains(&modulation) {
        return Err(Error::Domain(format!("modulation must lie in [0, 1], got {modulation}")));
    }
    Ok(orientations
        .iter()
        .zip(phases)
        .map(|(&theta, &phi0)| {
            let (ct, st) = (theta.cos(), theta.sin());
            Array2::from_shape_fn((side, side), |(y, x)| {
                let arg = 2.0 * PI * freq_cycles_per_px * (x as f64 * ct + y as f64 * st) + phi0;
                (0.5 * (1.0 + modulation * arg.cos())).max(0.0)
            })
        })
        .collect())
}

/// Fraction of the incoherent cutoff used for the default SIM fringes.
pub const SIM_FREQ_FRACTION: f64 = 0.9;

/// Incoherent (intensity) cutoff `2·NA/λ` expressed in cycles per high-res pixel.
pub fn incoherent_cutoff_cycles_per_px(cfg: &OpticsConfig) -> f64 {
    2.0 * cfg.na / cfg.lambda_um * cfg.px_high_um
}

/// Default four-frame SIM set: orientations 0°, 45°, 90°, 135°, zero phase,
/// full modulation, frequency at 0.9× the incoherent cutoff.
pub fn default_sim_patterns(cfg: &OpticsConfig) -> Result<Vec<Array2<f64>>> {
    let f = SIM_FREQ_FRACTION * incoherent_cutoff_cycles_per_px(cfg);
    let orient: Vec<f64> = (0..4).map(|i| i as f64 * PI / 4.0).collect();
    gen_sim_patterns(cfg.n_high, f, &orient, &[0.0; 4], 1.0)
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpiPatternKind {
    RandomBinary,
    /// Rows of a Sylvester–Hadamard matrix, entries ±1.
    Orthogonal,
}

/// Single-pixel illumination patterns.
pub fn gen_spi_patterns(kind: SpiPatternKind, count: usize, side: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    let len = side * side;
    match kind {
        SpiPatternKind::RandomBinary => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count)
                .map(|_| Array2::from_shape_fn((side, side), |_| if rng.random::<bool>() { 1.0 } else { 0.0 }))
                .collect())
        }
        SpiPatternKind::Orthogonal => {
            if !side.is_power_of_two() {
                return Err(Error::Config(format!("orthogonal patterns need a power-of-two side, got {side}")));
            }
            if count > len {
                return Err(Error::Config(format!("at most {len} orthogonal patterns exist for side {side}")));
            }
            Ok((0..count)
                .map(|row| {
                    Array2::from_shape_fn((side, side), |(r, c)| {
                        let col = r * side + c;
                        if (row & col).count_ones().is_multiple_of(2) {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                })
                .collect())
        }
    }
}

/// SIM acquisition with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub patterns: Vec<Array2<f64>>,
    pub psf_inc: Array2<f64>,
    pub measurements: Vec<RealImage>,
    pub ground_truth: Option<Array2<f64>>,
    pub provenance: Provenance,
}

pub fn generate_sim_dataset(
    object: &Array2<f64>,
    patterns: Vec<Array2<f64>>,
    psf_inc: Array2<f64>,
    noise: Option<NoiseModel>,
) -> Result<SimDataset> {
    let scene = SimScene::new(object.clone(), patterns, psf_inc)?;
    let measurements = par::map_range(scene.patterns.len(), |n| -> Result<RealImage> {
        let mut img = sim_forward(&scene, n)?;
        img.data.mapv_inplace(|v| v.max(0.0));
        if let Some(noise) = &noise {
            noise.apply(&mut img.data, n)?;
        }
        Ok(img)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SimDataset {
        patterns: scene.patterns,
        psf_inc: scene.psf_inc,
        measurements,
        ground_truth: Some(scene.object),
        provenance: Provenance { generator: "generate_sim_dataset".into(), noise, ..Default::default() },
    })
}

/// Incoherent PSF and default fringes for `cfg`, then the SIM dataset.
pub fn generate_default_sim(cfg: &OpticsConfig, object: &Array2<f64>) -> Result<SimDataset> {
    generate_sim_dataset(object, default_sim_patterns(cfg)?, incoherent_psf(cfg)?, None)
}

/// Single-pixel acquisition with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiDataset {
    pub patterns: Vec<Array2<f64>>,
    pub measurements: Vec<f64>,
    pub ground_truth: Option<Array2<f64>>,
    pub provenance: Provenance,
}

pub fn generate_spi_dataset(object: &Array2<f64>, patterns: Vec<Array2<f64>>) -> Result<SpiDataset> {
    let measurements = patterns.iter().map(|p| spi_forward(object, p)).collect::<Result<Vec<_>>>()?;
    Ok(SpiDataset {
        patterns,
        measurements,
        ground_truth: Some(object.clone()),
        provenance: Provenance { generator: "generate_spi_dataset".into(), ..Default::default() },
    })
}
