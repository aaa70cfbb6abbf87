//! JSON configuration files. Unknown keys are errors; parse errors carry the
//! file, line and column.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use ndarray::Array2;
use ptychonet::engine::{ReconConfig, SweepAxes};
use ptychonet::models::{incoherent_psf, FpOperator};
use ptychonet::simdata::{
    band_limit, gen_illumination_grid_any, gen_sim_patterns, gen_spi_patterns, generate_dataset, generate_sim_dataset,
    generate_spi_dataset, incoherent_cutoff_cycles_per_px, led_wavevectors, test_object, test_pattern, FormationMode,
    NoiseModel, SpiPatternKind, SIM_FREQ_FRACTION,
};
use ptychonet::OpticsConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::store::Dataset;

/// What `simulate` generates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimulateConfig {
    /// Fourier ptychography stack.
    Fp(FpSimulation),
    /// Structured illumination frames.
    Sim(SimSimulation),
    /// Single-pixel bucket measurements.
    Spi(SpiSimulation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FpSimulation {
    /// Seeds the test object; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Optics. Give either `optics.wavevectors` or `illumination`.
    pub optics: OpticsConfig,
    #[serde(default)]
    pub illumination: Option<Illumination>,
    #[serde(default)]
    pub object: ObjectSpec,
    pub mode: FormationMode,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
}

/// Illumination layout, centred on normal incidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "layout", rename_all = "lowercase", deny_unknown_fields)]
pub enum Illumination {
    /// Uniform grid of illumination sines with spacing `step`.
    Grid { rows: usize, cols: usize, step: f64 },
    /// Planar LED matrix with `pitch_mm` spacing at `distance_mm` below the sample.
    Led { rows: usize, cols: usize, pitch_mm: f64, distance_mm: f64 },
}

fn default_amp_floor() -> f64 {
    0.4
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Smallest amplitude of the procedural test object (the largest is 1).
    #[serde(default = "default_amp_floor")]
    pub amp_floor: f64,
    /// Remove spectral content no illumination can reach.
    #[serde(default = "default_true")]
    pub band_limit: bool,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self { amp_floor: default_amp_floor(), band_limit: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimSimulation {
    #[serde(default)]
    pub seed: u64,
    /// Objective used for the incoherent PSF; `n_high` is the image side.
    pub optics: OpticsConfig,
    /// Fringe set; the default four-frame set when absent.
    #[serde(default)]
    pub patterns: Option<SimPatternSpec>,
    /// Sinusoidal component added to the test object.
    #[serde(default)]
    pub grating: Option<GratingSpec>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimPatternSpec {
    /// Fringe frequency as a fraction of the incoherent cutoff.
    pub freq_fraction: f64,
    pub orientations_deg: Vec<f64>,
    pub phases_deg: Vec<f64>,
    #[serde(default = "default_modulation")]
    pub modulation: f64,
}

fn default_modulation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GratingSpec {
    /// Frequency as a multiple of the incoherent cutoff, rounded to a whole
    /// number of periods across the image.
    pub freq_factor: f64,
    #[serde(default)]
    pub orientation_deg: f64,
    /// Weight of the grating against the test pattern, in `[0, 1]`.
    pub weight: f64,
}

impl GratingSpec {
    /// Frequency in cycles per pixel actually used on a `side` grid.
    pub fn freq(&self, optics: &OpticsConfig, side: usize) -> f64 {
        (self.freq_factor * incoherent_cutoff_cycles_per_px(optics) * side as f64).round() / side as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SpiSimulation {
    #[serde(default)]
    pub seed: u64,
    pub side: usize,
    pub patterns: SpiPatternKind,
    /// Number of patterns; all `side²` when absent.
    #[serde(default)]
    pub count: Option<usize>,
}

/// `sweep` configuration: a base run and the axes to vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ReconConfig,
    pub axes: SweepAxes,
}

/// Simulation presets shipped with the binary.
pub const PRESETS: [(&str, &str); 6] = [
    ("paper-sec2", include_str!("../presets/paper-sec2.json")),
    ("paper-fig4", include_str!("../presets/paper-fig4.json")),
    ("paper-sim", include_str!("../presets/paper-sim.json")),
    ("paper-spi", include_str!("../presets/paper-spi.json")),
    ("desk-crop", include_str!("../presets/desk-crop.json")),
    ("desk-stride", include_str!("../presets/desk-stride.json")),
];

pub fn preset(name: &str) -> Result<SimulateConfig> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| anyhow!("unknown preset {name:?}; available: {}", PRESETS.map(|p| p.0).join(", ")))?;
    parse(text, &format!("preset {name}"))
}

pub fn parse<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let (line, col) = if e.line() > 0 { (e.line(), e.column()) } else { locate(text, &e.to_string()) };
        anyhow!("{origin}:{line}:{col}: {e}")
    })
}

/// Tagged enums buffer their input, so serde reports no position for errors
/// inside them; fall back to the first occurrence of the quoted name the
/// message complains about.
fn locate(text: &str, message: &str) -> (usize, usize) {
    let name = message.split('`').nth(1).map(|n| format!("\"{n}\""));
    let offset = name.and_then(|n| text.find(&n));
    match offset {
        Some(off) => {
            let before = &text[..off];
            let line = before.matches('\n').count() + 1;
            let col = off - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
            (line, col)
        }
        None => (1, 1),
    }
}

pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow!("cannot read config {}: {e}", path.display()))?;
    parse(&text, &path.display().to_string())
}

/// Config kinds with a published schema.
pub const SCHEMA_KINDS: [&str; 3] = ["simulate", "reconstruct", "sweep"];

pub fn schema(kind: &str) -> Result<serde_json::Value> {
    let schema = match kind {
        "simulate" => schemars::schema_for!(SimulateConfig),
        "reconstruct" => schemars::schema_for!(ReconConfig),
        "sweep" => schemars::schema_for!(SweepConfig),
        _ => bail!("no schema for {kind:?}; choose one of {}", SCHEMA_KINDS.join(", ")),
    };
    Ok(serde_json::to_value(schema)?)
}

impl SimulateConfig {
    pub fn seed(&self) -> u64 {
        match self {
            Self::Fp(c) => c.seed,
            Self::Sim(c) => c.seed,
            Self::Spi(c) => c.seed,
        }
    }

    /// Replaces the object seed and any noise seed.
    pub fn set_seed(&mut self, seed: u64) {
        let reseed = |noise: &mut Option<NoiseModel>| {
            if let Some(NoiseModel::Gaussian { seed: s, .. } | NoiseModel::Poisson { seed: s, .. }) = noise {
                *s = seed;
            }
        };
        match self {
            Self::Fp(c) => {
                c.seed = seed;
                reseed(&mut c.noise);
            }
            Self::Sim(c) => {
                c.seed = seed;
                reseed(&mut c.noise);
            }
            Self::Spi(c) => c.seed = seed,
        }
    }

    /// Generates the in-memory dataset, rounded to the stored precision.
    pub fn generate(&self) -> Result<Dataset> {
        let mut data = match self {
            Self::Fp(c) => Dataset::Fp(c.generate()?),
            Self::Sim(c) => Dataset::Sim(c.generate()?),
            Self::Spi(c) => {
                let count = c.count.unwrap_or(c.side * c.side);
                let patterns = gen_spi_patterns(c.patterns, count, c.side, c.seed)?;
                let mut ds = generate_spi_dataset(&test_pattern(c.side, c.seed), patterns)?;
                ds.provenance.seed = Some(c.seed);
                Dataset::Spi(ds)
            }
        };
        data.quantize_f32();
        Ok(data)
    }
}

impl FpSimulation {
    pub fn optics(&self) -> Result<OpticsConfig> {
        let mut cfg = self.optics.clone();
        match (&self.illumination, cfg.wavevectors.is_empty()) {
            (Some(_), false) => bail!("give either optics.wavevectors or illumination, not both"),
            (None, true) => bail!("no illumination: set optics.wavevectors or illumination"),
            (Some(Illumination::Grid { rows, cols, step }), true) => {
                cfg.wavevectors = gen_illumination_grid_any(*rows, *cols, *step);
            }
            (Some(Illumination::Led { rows, cols, pitch_mm, distance_mm }), true) => {
                cfg.wavevectors = led_wavevectors(*rows, *cols, *pitch_mm, *distance_mm)?;
            }
            (None, false) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generate(&self) -> Result<ptychonet::simdata::FpDataset> {
        let cfg = self.optics()?;
        let op = FpOperator::new(&cfg)?;
        let mut obj = test_object(cfg.n_high, self.seed, self.object.amp_floor)?;
        if self.object.band_limit {
            obj = band_limit(&obj, &op);
        }
        let mut ds = generate_dataset(&cfg, &obj, self.mode, self.noise)?;
        ds.provenance.seed = Some(self.seed);
        ds.provenance.params.insert("amp_floor".into(), self.object.amp_floor.to_string());
        ds.provenance.params.insert("band_limit".into(), self.object.band_limit.to_string());
        Ok(ds)
    }
}

impl SimSimulation {
    /// The object: the test pattern blended with the optional grating.
    pub fn object(&self) -> Array2<f64> {
        let side = self.optics.n_high;
        let base = test_pattern(side, self.seed);
        match &self.grating {
            None => base,
            Some(g) => {
                let f = g.freq(&self.optics, side);
                let (ct, st) = (g.orientation_deg.to_radians().cos(), g.orientation_deg.to_radians().sin());
                Array2::from_shape_fn((side, side), |(y, x)| {
                    let fringe = 0.5 * (1.0 + (2.0 * PI * f * (x as f64 * ct + y as f64 * st)).cos());
                    (1.0 - g.weight) * base[[y, x]] + g.weight * fringe
                })
            }
        }
    }

    pub fn generate(&self) -> Result<ptychonet::simdata::SimDataset> {
        self.optics.validate()?;
        if let Some(g) = &self.grating {
            if !(0.0..=1.0).contains(&g.weight) {
                bail!("grating weight must lie in [0, 1], got {}", g.weight);
            }
        }
        let side = self.optics.n_high;
        let patterns = match &self.patterns {
            None => {
                let f = SIM_FREQ_FRACTION * incoherent_cutoff_cycles_per_px(&self.optics);
                gen_sim_patterns(side, f, &[0.0, 0.25 * PI, 0.5 * PI, 0.75 * PI], &[0.0; 4], 1.0)?
            }
            Some(p) => {
                let f = p.freq_fraction * incoherent_cutoff_cycles_per_px(&self.optics);
                let rad = |v: &[f64]| v.iter().map(|d| d.to_radians()).collect::<Vec<_>>();
                gen_sim_patterns(side, f, &rad(&p.orientations_deg), &rad(&p.phases_deg), p.modulation)?
            }
        };
        let mut ds = generate_sim_dataset(&self.object(), patterns, incoherent_psf(&self.optics)?, self.noise)?;
        ds.provenance.seed = Some(self.seed);
        Ok(ds)
    }
}
