//! The reconstruction loop: batches, analytic gradients, optimizer steps,
//! metrics, checkpoints and parameter sweeps.

use std::time::Instant;

use log::warn;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::field::{dft2_array, idft2_array, nearest_upsample, RealImage, C64};
use crate::grad::{exitwave_loss_grad, intensity_loss, intensity_loss_grad, sim_loss_grad, spi_loss_grad, LossGrad, LossSpec, Norm, Target};
use crate::models::{FpObject, FpOperator, FpSpectrumObject, SimScene};
use crate::optim::{self, BatchOrder, BatchSchedule, OptState, OptimizerConfig, OptimizerKind};
use crate::par;
use crate::simdata::{synthetic_support, FormationMode, FpDataset, SimDataset, SpiDataset};

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two-channel spatial object, intensity loss.
    Intensity,
    /// Two-channel centered object spectrum, exit-wave loss.
    Exitwave,
    Spi,
    Sim,
}

impl ModelKind {
    pub fn for_target(target: Target) -> Self {
        match target {
            Target::Intensity => Self::Intensity,
            Target::Exitwave => Self::Exitwave,
            Target::Singlepixel => Self::Spi,
            Target::Sim => Self::Sim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Intensity => "intensity",
            Self::Exitwave => "exitwave",
            Self::Spi => "spi",
            Self::Sim => "sim",
        }
    }
}

/// Starting point of a reconstruction.
///
/// * `ones` — flat field. For the FP models its level matches the mean
///   normal-incidence amplitude; for SIM the mean measurement; for SPI 1.
/// * `upsampled_center` — FP: nearest-neighbour upsampled amplitude of the
///   normal-incidence image with zero phase (transformed for the exit-wave
///   model); SIM: twice the mean of the measurements; SPI: zeros.
/// * `provided` — supplied by the caller through [`RunOptions::initial`].
///
/// FP starting points are projected onto the spectral support covered by the
/// illuminations, since components outside it receive no gradient.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Ones,
    #[default]
    UpsampledCenter,
    Provided,
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: usize,
    pub epochs: usize,
    /// Reshuffle the measurement order every epoch, seeded by the run seed.
    /// On by default; a fixed raster order converges markedly slower with
    /// adaptive optimizers.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Schedule {
    pub fn new(batch_size: usize, epochs: usize) -> Self {
        Self { batch_size, epochs, shuffle: true }
    }

    pub fn for_dataset(&self, n_total: usize, seed: u64) -> BatchSchedule {
        BatchSchedule {
            n_total,
            batch_size: self.batch_size,
            epochs: self.epochs,
            order: if self.shuffle { BatchOrder::Shuffled { seed } } else { BatchOrder::Sequential },
        }
    }
}

fn default_true() -> bool {
    true
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub model: ModelKind,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default)]
    pub seed: u64,
    /// Results are reproducible bit for bit in either setting, since every
    /// reduction has a fixed order; the flag is carried into run summaries.
    #[serde(default)]
    pub deterministic: bool,
    /// Stop after this many optimizer steps, possibly mid-epoch.
    #[serde(default)]
    pub max_updates: Option<usize>,
    /// Track relative error against ground truth when available.
    #[serde(default = "default_true")]
    pub track_error: bool,
    /// Track low/high spatial-frequency error split (FP models only).
    #[serde(default)]
    pub band_metrics: bool,
}

impl ReconConfig {
    pub fn new(loss: LossSpec, optimizer: OptimizerConfig, schedule: Schedule) -> Self {
        Self {
            model: ModelKind::for_target(loss.target),
            loss,
            optimizer,
            schedule,
            init: InitKind::UpsampledCenter,
            seed: 0,
            deterministic: false,
            max_updates: None,
            track_error: true,
            band_metrics: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ModelKind::for_target(self.loss.target) != self.model {
            return Err(Error::Config(format!(
                "model '{}' does not match loss target {:?}",
                self.model.name(),
                self.loss.target
            )));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Batch loss before each optimizer step.
    pub loss_per_update: Vec<f64>,
    /// Full-dataset loss after each completed epoch.
    pub loss_per_epoch: Vec<f64>,
    pub rel_error_per_epoch: Option<Vec<f64>>,
    /// Relative error restricted to the objective pupil passband and to the
    /// rest of the recoverable band, after each epoch.
    pub band_error_per_epoch: Option<Vec<(f64, f64)>>,
    /// Full-dataset loss at the starting point.
    pub initial_loss: f64,
    /// Full-dataset loss at the returned estimate.
    pub final_loss: f64,
    pub final_rel_error: Option<f64>,
    pub wall_time_s: f64,
    pub update_count: usize,
    pub batches_per_epoch: usize,
}

/// Borrowed view of any supported acquisition.
#[derive(Debug, Clone, Copy)]
pub enum DataRef<'a> {
    Fp(&'a FpDataset),
    Sim(&'a SimDataset),
    Spi(&'a SpiDataset),
}

impl<'a> From<&'a FpDataset> for DataRef<'a> {
    fn from(d: &'a FpDataset) -> Self {
        Self::Fp(d)
    }
}

impl<'a> From<&'a SimDataset> for DataRef<'a> {
    fn from(d: &'a SimDataset) -> Self {
        Self::Sim(d)
    }
}

impl<'a> From<&'a SpiDataset> for DataRef<'a> {
    fn from(d: &'a SpiDataset) -> Self {
        Self::Spi(d)
    }
}

/// Resumable state saved at epoch boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Array2<f64>>,
    pub state: OptState,
    pub epochs_done: usize,
    pub metrics: RunMetrics,
}

/// Receives each checkpoint as it is taken; an error aborts the run.
pub type CheckpointSink<'a> = &'a mut dyn FnMut(&Checkpoint) -> Result<()>;

/// Optional inputs beyond the config.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Starting parameters for [`InitKind::Provided`].
    pub initial: Option<Vec<Array2<f64>>>,
    /// Continue from a saved checkpoint instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Invoke `on_checkpoint` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub on_checkpoint: Option<CheckpointSink<'a>>,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// Raw model parameters: `(o_r, o_i)`, `(spec_r, spec_i)` or the real object.
    pub params: Vec<Array2<f64>>,
    /// Recovered object in the spatial domain.
    pub object: Array2<C64>,
    pub metrics: RunMetrics,
    pub state: OptState,
}

/// The per-model pieces the loop needs.
trait Objective: Sync {
    fn len(&self) -> usize;
    fn loss_grad(&self, params: &[Array2<f64>], batch: &[usize]) -> Result<LossGrad>;
    fn loss(&self, params: &[Array2<f64>]) -> Result<f64>;
    fn object(&self, params: &[Array2<f64>]) -> Array2<C64>;
    fn truth(&self) -> Option<&Array2<C64>>;
    fn init(&self, kind: InitKind) -> Result<Vec<Array2<f64>>>;
    fn project(&self, _params: &mut [Array2<f64>]) {}
    fn band_error(&self, _object: &Array2<C64>) -> Option<(f64, f64)> {
        None
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Index of the illumination closest to normal incidence.
fn center_index(cfg: &crate::OpticsConfig) -> usize {
    let mut best = 0;
    for (i, &(kx, ky)) in cfg.wavevectors.iter().enumerate() {
        let (bx, by) = cfg.wavevectors[best];
        if kx.hypot(ky) < bx.hypot(by) {
            best = i;
        }
    }
    best
}

struct FpGeometry {
    op: FpOperator,
    support: Array2<f64>,
    /// Objective passband on the full grid, centered.
    passband: Array2<f64>,
    truth: Option<Array2<C64>>,
    center: usize,
}

impl FpGeometry {
    fn new(ds: &FpDataset) -> Result<Self> {
        let op = FpOperator::new(&ds.cfg)?;
        let support = synthetic_support(&op);
        let n = op.n_high();
        let c = (n / 2) as isize;
        let passband =
            Array2::from_shape_fn((n, n), |(r, col)| if ds.cfg.in_pupil(col as isize - c, r as isize - c) { 1.0 } else { 0.0 });
        Ok(Self {
            support,
            passband,
            truth: ds.ground_truth.as_ref().map(FpObject::to_complex),
            center: center_index(&ds.cfg),
            op,
        })
    }

    fn mask_spectrum(&self, spec: &mut Array2<C64>) {
        Zip::from(spec).and(&self.support).for_each(|z, &m| *z *= m);
    }

    fn band_error(&self, object: &Array2<C64>) -> Option<(f64, f64)> {
        let truth = self.truth.as_ref()?;
        let c = align_scalar(object, truth).ok()?;
        let err = dft2_array(&Zip::from(object).and(truth).map_collect(|&r, &t| r - c * t));
        let tspec = dft2_array(truth);
        let split = |spec: &Array2<C64>, inner: bool| -> f64 {
            Zip::from(spec)
                .and(&self.passband)
                .and(&self.support)
                .fold(0.0, |a, z, &p, &s| if (p > 0.0) == inner && s > 0.0 { a + z.norm_sqr() } else { a })
        };
        let ratio = |e: f64, t: f64| if t > 0.0 { (e / t).sqrt() } else { 0.0 };
        Some((ratio(split(&err, true), split(&tspec, true)), ratio(split(&err, false), split(&tspec, false))))
    }
}

struct IntensityObjective {
    geo: FpGeometry,
    meas: Vec<RealImage>,
    norm: Norm,
}

impl IntensityObjective {
    fn as_object(params: &[Array2<f64>]) -> FpObject {
        FpObject { o_r: params[0].clone(), o_i: params[1].clone() }
    }
}

impl Objective for IntensityObjective {
    fn len(&self) -> usize {
        self.meas.len()
    }
    fn loss_grad(&self, params: &[Array2<f64>], batch: &[usize]) -> Result<LossGrad> {
        intensity_loss_grad(&self.geo.op, &Self::as_object(params), batch, &self.meas, self.norm)
    }
    fn loss(&self, params: &[Array2<f64>]) -> Result<f64> {
        intensity_loss(&self.geo.op, &Self::as_object(params), &all(self.len()), &self.meas, self.norm)
    }
    fn object(&self, params: &[Array2<f64>]) -> Array2<C64> {
        Self::as_object(params).to_complex()
    }
    fn truth(&self) -> Option<&Array2<C64>> {
        self.geo.truth.as_ref()
    }
    fn init(&self, kind: InitKind) -> Result<Vec<Array2<f64>>> {
        let n = self.geo.op.n_high();
        let scale = 1.0 / n as f64;
        let amp = self.meas[self.geo.center].data.mapv(|v| v.max(0.0).sqrt());
        let o_r = match kind {
            InitKind::Ones => Array2::from_elem((n, n), amp.mean().unwrap_or(0.0) * scale),
            InitKind::UpsampledCenter => nearest_upsample(&amp, self.geo.op.cfg.stride) * scale,
            InitKind::Provided => return Err(Error::Config("provided initialization requires starting parameters".into())),
        };
        let mut p = vec![o_r, Array2::zeros((n, n))];
        self.project(&mut p);
        Ok(p)
    }
    fn project(&self, params: &mut [Array2<f64>]) {
        let mut spec = dft2_array(&Self::as_object(params).to_complex());
        self.geo.mask_spectrum(&mut spec);
        let o = FpObject::from_complex(&idft2_array(&spec));
        params[0] = o.o_r;
        params[1] = o.o_i;
    }
    fn band_error(&self, object: &Array2<C64>) -> Option<(f64, f64)> {
        self.geo.band_error(object)
    }
}

struct ExitwaveObjective {
    geo: FpGeometry,
    amps: Vec<RealImage>,
    norm: Norm,
}

impl ExitwaveObjective {
    fn as_spectrum(params: &[Array2<f64>]) -> FpSpectrumObject {
        FpSpectrumObject { spec_r: params[0].clone(), spec_i: params[1].clone() }
    }
}

impl Objective for ExitwaveObjective {
    fn len(&self) -> usize {
        self.amps.len()
    }
    fn loss_grad(&self, params: &[Array2<f64>], batch: &[usize]) -> Result<LossGrad> {
        exitwave_loss_grad(&self.geo.op, &Self::as_spectrum(params), batch, &self.amps, self.norm)
    }
    fn loss(&self, params: &[Array2<f64>]) -> Result<f64> {
        Ok(self.loss_grad(params, &all(self.len()))?.loss)
    }
    fn object(&self, params: &[Array2<f64>]) -> Array2<C64> {
        Self::as_spectrum(params).to_object().to_complex()
    }
    fn truth(&self) -> Option<&Array2<C64>> {
        self.geo.truth.as_ref()
    }
    fn init(&self, kind: InitKind) -> Result<Vec<Array2<f64>>> {
        let n = self.geo.op.n_high();
        let scale = self.geo.op.m_side() as f64 / n as f64;
        let amp = &self.amps[self.geo.center].data;
        let field = match kind {
            InitKind::Ones => Array2::from_elem((n, n), amp.mean().unwrap_or(0.0) * scale),
            InitKind::UpsampledCenter => nearest_upsample(amp, self.geo.op.cfg.stride) * scale,
            InitKind::Provided => return Err(Error::Config("provided initialization requires starting parameters".into())),
        };
        let mut spec = dft2_array(&field.mapv(|v| C64::new(v, 0.0)));
        self.geo.mask_spectrum(&mut spec);
        Ok(vec![spec.mapv(|z| z.re), spec.mapv(|z| z.im)])
    }
    fn project(&self, params: &mut [Array2<f64>]) {
        for p in params.iter_mut() {
            Zip::from(p).and(&self.geo.support).for_each(|v, &m| *v *= m);
        }
    }
    fn band_error(&self, object: &Array2<C64>) -> Option<(f64, f64)> {
        self.geo.band_error(object)
    }
}

struct SpiObjective<'a> {
    ds: &'a SpiDataset,
    truth: Option<Array2<C64>>,
    norm: Norm,
}

impl Objective for SpiObjective<'_> {
    fn len(&self) -> usize {
        self.ds.patterns.len()
    }
    fn loss_grad(&self, params: &[Array2<f64>], batch: &[usize]) -> Result<LossGrad> {
        spi_loss_grad(&params[0], &self.ds.patterns, batch, &self.ds.measurements, self.norm)
    }
    fn loss(&self, params: &[Array2<f64>]) -> Result<f64> {
        Ok(self.loss_grad(params, &all(self.len()))?.loss)
    }
    fn object(&self, params: &[Array2<f64>]) -> Array2<C64> {
        params[0].mapv(|v| C64::new(v, 0.0))
    }
    fn truth(&self) -> Option<&Array2<C64>> {
        self.truth.as_ref()
    }
    fn init(&self, kind: InitKind) -> Result<Vec<Array2<f64>>> {
        let dim = self.ds.patterns.first().map(|p| p.dim()).ok_or_else(|| Error::Config("no patterns".into()))?;
        match kind {
            InitKind::Ones => Ok(vec![Array2::ones(dim)]),
            InitKind::UpsampledCenter => Ok(vec![Array2::zeros(dim)]),
            InitKind::Provided => Err(Error::Config("provided initialization requires starting parameters".into())),
        }
    }
}

struct SimObjective<'a> {
    ds: &'a SimDataset,
    truth: Option<Array2<C64>>,
    norm: Norm,
}

impl SimObjective<'_> {
    fn scene(&self, params: &[Array2<f64>]) -> SimScene {
        SimScene { object: params[0].clone(), patterns: self.ds.patterns.clone(), psf_inc: self.ds.psf_inc.clone() }
    }
}

impl Objective for SimObjective<'_> {
    fn len(&self) -> usize {
        self.ds.measurements.len()
    }
    fn loss_grad(&self, params: &[Array2<f64>], batch: &[usize]) -> Result<LossGrad> {
        sim_loss_grad(&self.scene(params), batch, &self.ds.measurements, self.norm)
    }
    fn loss(&self, params: &[Array2<f64>]) -> Result<f64> {
        Ok(self.loss_grad(params, &all(self.len()))?.loss)
    }
    fn object(&self, params: &[Array2<f64>]) -> Array2<C64> {
        params[0].mapv(|v| C64::new(v, 0.0))
    }
    fn truth(&self) -> Option<&Array2<C64>> {
        self.truth.as_ref()
    }
    fn init(&self, kind: InitKind) -> Result<Vec<Array2<f64>>> {
        let first = self.ds.measurements.first().ok_or_else(|| Error::Config("no measurements".into()))?;
        let mean = self
            .ds
            .measurements
            .iter()
            .fold(Array2::<f64>::zeros(first.data.dim()), |a, m| a + &m.data)
            / self.len() as f64;
        match kind {
            InitKind::Ones => Ok(vec![Array2::from_elem(mean.dim(), mean.mean().unwrap_or(0.0))]),
            InitKind::UpsampledCenter => Ok(vec![mean * 2.0]),
            InitKind::Provided => Err(Error::Config("provided initialization requires starting parameters".into())),
        }
    }
}

fn build_objective<'a>(data: DataRef<'a>, cfg: &ReconConfig) -> Result<Box<dyn Objective + 'a>> {
    let norm = cfg.loss.norm;
    Ok(match (cfg.model, data) {
        (ModelKind::Intensity, DataRef::Fp(ds)) => {
            ds.validate()?;
            if ds.mode != FormationMode::Stride {
                warn!("crop-mode data fed to the intensity model; rescaling intensities by the squared stride window");
            }
            Box::new(IntensityObjective { geo: FpGeometry::new(ds)?, meas: ds.measurements_as(FormationMode::Stride), norm })
        }
        (ModelKind::Exitwave, DataRef::Fp(ds)) => {
            ds.validate()?;
            if ds.mode != FormationMode::Crop {
                warn!("stride-mode data fed to the exit-wave model; rescaling intensities to the crop convention");
            }
            let geo = FpGeometry::new(ds)?;
            geo.op.check_crop_fits()?;
            let amps = ds
                .measurements_as(FormationMode::Crop)
                .into_iter()
                .map(|m| RealImage { data: m.data.mapv(f64::sqrt), px: m.px })
                .collect();
            Box::new(ExitwaveObjective { geo, amps, norm })
        }
        (ModelKind::Spi, DataRef::Spi(ds)) => {
            if ds.patterns.len() != ds.measurements.len() || ds.patterns.is_empty() {
                return dim_err("single-pixel data needs one measurement per pattern");
            }
            let truth = ds.ground_truth.as_ref().map(|t| t.mapv(|v| C64::new(v, 0.0)));
            Box::new(SpiObjective { ds, truth, norm })
        }
        (ModelKind::Sim, DataRef::Sim(ds)) => {
            if ds.patterns.len() != ds.measurements.len() || ds.patterns.is_empty() {
                return dim_err("SIM data needs one measurement per pattern");
            }
            let truth = ds.ground_truth.as_ref().map(|t| t.mapv(|v| C64::new(v, 0.0)));
            Box::new(SimObjective { ds, truth, norm })
        }
        (model, _) => {
            return Err(Error::Config(format!("model '{}' cannot be used with this kind of data", model.name())));
        }
    })
}

/// Runs a reconstruction with default options.
pub fn run_reconstruction<'a>(data: impl Into<DataRef<'a>>, cfg: &ReconConfig) -> Result<ReconOutput> {
    run_with(data, cfg, RunOptions::default())
}

/// Runs a reconstruction: for each epoch and batch, evaluates the batch loss
/// and analytic gradient, then applies one optimizer step.
///
/// Fails with [`Error::NonFinite`] naming the epoch and batch if the loss or
/// gradient stops being finite.
pub fn run_with<'a>(data: impl Into<DataRef<'a>>, cfg: &ReconConfig, mut opts: RunOptions<'_>) -> Result<ReconOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let obj = build_objective(data.into(), cfg)?;
    let n_total = obj.len();
    let schedule = cfg.schedule.for_dataset(n_total, cfg.seed);
    schedule.validate()?;

    let (mut params, mut state, first_epoch, mut metrics) = match opts.resume.take() {
        Some(ck) => (ck.params, ck.state, ck.epochs_done, ck.metrics),
        None => {
            let params = match (cfg.init, opts.initial.take()) {
                (InitKind::Provided, Some(mut p)) => {
                    let expected = obj.init(InitKind::Ones)?;
                    if p.len() != expected.len() || p.iter().zip(&expected).any(|(a, b)| a.dim() != b.dim()) {
                        return dim_err("provided starting parameters have the wrong shape");
                    }
                    obj.project(&mut p);
                    p
                }
                (kind, _) => obj.init(kind)?,
            };
            let state = OptState::new(&params);
            let mut metrics = RunMetrics { batches_per_epoch: schedule.batches_per_epoch(), ..Default::default() };
            metrics.initial_loss = obj.loss(&params)?;
            if cfg.track_error && obj.truth().is_some() {
                metrics.rel_error_per_epoch = Some(Vec::new());
            }
            if cfg.band_metrics && obj.truth().is_some() && matches!(cfg.model, ModelKind::Intensity | ModelKind::Exitwave) {
                metrics.band_error_per_epoch = Some(Vec::new());
            }
            (params, state, 0, metrics)
        }
    };
    if params.iter().flat_map(|p| p.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("starting parameters contain non-finite values".into()));
    }

    let budget = cfg.max_updates.unwrap_or(usize::MAX);
    'epochs: for epoch in first_epoch..schedule.epochs {
        for (b, batch) in schedule.epoch_batches(epoch).iter().enumerate() {
            if metrics.update_count >= budget {
                break 'epochs;
            }
            let lg = obj.loss_grad(&params, batch)?;
            let finite = lg.loss.is_finite() && lg.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::NonFinite(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (update {}, measurements {:?})",
                    metrics.update_count, batch
                )));
            }
            optim::step(&cfg.optimizer, &mut state, &mut params, &lg.grads)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            metrics.loss_per_update.push(lg.loss);
            metrics.update_count += 1;
        }
        let loss = obj.loss(&params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("non-finite dataset loss after epoch {epoch} (last batch {})", schedule.batches_per_epoch() - 1)));
        }
        metrics.loss_per_epoch.push(loss);
        if metrics.rel_error_per_epoch.is_some() || metrics.band_error_per_epoch.is_some() {
            let object = obj.object(&params);
            if let (Some(list), Some(t)) = (metrics.rel_error_per_epoch.as_mut(), obj.truth()) {
                list.push(relative_error(&object, t)?);
            }
            if let Some(list) = metrics.band_error_per_epoch.as_mut() {
                list.push(obj.band_error(&object).unwrap_or((f64::NAN, f64::NAN)));
            }
        }
        let done = epoch + 1;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
            if let Some(cb) = opts.on_checkpoint.as_mut() {
                cb(&Checkpoint { params: params.clone(), state: state.clone(), epochs_done: done, metrics: metrics.clone() })?;
            }
        }
    }

    let object = obj.object(&params);
    metrics.final_loss = obj.loss(&params)?;
    metrics.final_rel_error = match obj.truth() {
        Some(t) if cfg.track_error => Some(relative_error(&object, t)?),
        _ => None,
    };
    metrics.wall_time_s += started.elapsed().as_secs_f64();
    Ok(ReconOutput { params, object, metrics, state })
}

/// Full-dataset loss of `params` under `cfg`'s model.
pub fn dataset_loss<'a>(data: impl Into<DataRef<'a>>, cfg: &ReconConfig, params: &[Array2<f64>]) -> Result<f64> {
    build_objective(data.into(), cfg)?.loss(params)
}

/// Starting parameters `cfg.init` would produce.
pub fn initial_params<'a>(data: impl Into<DataRef<'a>>, cfg: &ReconConfig) -> Result<Vec<Array2<f64>>> {
    build_objective(data.into(), cfg)?.init(cfg.init)
}

fn align_scalar(recon: &Array2<C64>, truth: &Array2<C64>) -> Result<C64> {
    if recon.dim() != truth.dim() {
        return dim_err(format!("reconstruction {:?} and truth {:?} differ in shape", recon.dim(), truth.dim()));
    }
    let tt: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    if !(tt > 0.0) {
        return Err(Error::Domain("relative error against a zero ground truth".into()));
    }
    Ok(crate::field::inner(truth, recon) / tt)
}

/// `min_c ‖recon − c·truth‖ / ‖truth‖` over complex scalars `c`, which removes
/// the global phase and scale ambiguity of phase retrieval.
pub fn relative_error(recon: &Array2<C64>, truth: &Array2<C64>) -> Result<f64> {
    let c = align_scalar(recon, truth)?;
    let tt: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    let rr = Zip::from(recon).and(truth).fold(0.0, |a, &r, &t| a + (r - c * t).norm_sqr());
    Ok((rr / tt).sqrt())
}

/// Axes of a parameter sweep. `None` keeps the base config's value; an empty
/// list is an error.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub lrs: Option<Vec<f64>>,
    #[serde(default)]
    pub optimizers: Option<Vec<OptimizerKind>>,
    #[serde(default)]
    pub batch_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub losses: Option<Vec<LossSpec>>,
    /// Instead of sweeping `lrs`, pick for every cell the learning rate from
    /// this grid with the lowest final loss.
    #[serde(default)]
    pub tune_lr: Option<Vec<f64>>,
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, len: Option<usize>| match len {
            Some(0) => Err(Error::Config(format!("sweep axis '{name}' is empty"))),
            _ => Ok(()),
        };
        empty("lrs", self.lrs.as_ref().map(Vec::len))?;
        empty("optimizers", self.optimizers.as_ref().map(Vec::len))?;
        empty("batch_sizes", self.batch_sizes.as_ref().map(Vec::len))?;
        empty("losses", self.losses.as_ref().map(Vec::len))?;
        empty("tune_lr", self.tune_lr.as_ref().map(Vec::len))?;
        if self.lrs.is_some() && self.tune_lr.is_some() {
            return Err(Error::Config("'lrs' and 'tune_lr' are mutually exclusive".into()));
        }
        Ok(())
    }

    /// Config for every cell of the Cartesian product, in row-major order of
    /// (loss, optimizer, batch size, lr).
    pub fn cells(&self, base: &ReconConfig) -> Vec<ReconConfig> {
        let losses = self.losses.clone().unwrap_or_else(|| vec![base.loss]);
        let opts = self.optimizers.clone().unwrap_or_else(|| vec![base.optimizer.kind]);
        let bss = self.batch_sizes.clone().unwrap_or_else(|| vec![base.schedule.batch_size]);
        let lrs = self.lrs.clone().unwrap_or_else(|| vec![base.optimizer.lr]);
        let mut out = Vec::new();
        for &loss in &losses {
            for &kind in &opts {
                for &bs in &bss {
                    for &lr in &lrs {
                        let mut c = base.clone();
                        c.loss = loss;
                        c.model = ModelKind::for_target(loss.target);
                        c.optimizer.kind = kind;
                        c.optimizer.lr = lr;
                        c.schedule.batch_size = bs;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub config: ReconConfig,
    /// Metrics of the cell's run; a failed run is recorded as its message.
    pub outcome: std::result::Result<RunMetrics, String>,
    /// `(lr, final loss or failure)` for every candidate when tuning.
    pub tuning: Vec<(f64, std::result::Result<f64, String>)>,
}

/// Runs every cell of the sweep from the same seed and initialization.
/// Cells run in parallel; the returned order is that of [`SweepAxes::cells`].
pub fn benchmark_sweep<'a>(data: impl Into<DataRef<'a>>, base: &ReconConfig, axes: &SweepAxes) -> Result<Vec<SweepCell>> {
    axes.validate()?;
    let data = data.into();
    let cells = axes.cells(base);
    let run = |c: &ReconConfig| run_reconstruction(data, c).map(|o| o.metrics).map_err(|e| e.to_string());
    Ok(par::map(&cells, |cell| match &axes.tune_lr {
        None => SweepCell { config: cell.clone(), outcome: run(cell), tuning: Vec::new() },
        Some(grid) => {
            let runs: Vec<(ReconConfig, std::result::Result<RunMetrics, String>)> = par::map(grid, |&lr| {
                let mut c = cell.clone();
                c.optimizer.lr = lr;
                let r = run(&c);
                (c, r)
            });
            let tuning = runs
                .iter()
                .map(|(c, r)| {
                    let loss = r.as_ref().map_err(Clone::clone).and_then(|m| {
                        if m.final_loss.is_finite() {
                            Ok(m.final_loss)
                        } else {
                            Err("non-finite final loss".to_string())
                        }
                    });
                    (c.optimizer.lr, loss)
                })
                .collect::<Vec<_>>();
            let best = runs
                .iter()
                .enumerate()
                .filter_map(|(i, (_, r))| r.as_ref().ok().filter(|m| m.final_loss.is_finite()).map(|m| (i, m.final_loss)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            match best {
                Some(i) => {
                    let (config, outcome) = runs.into_iter().nth(i).expect("index in range");
                    SweepCell { config, outcome, tuning }
                }
                None => SweepCell {
                    config: cell.clone(),
                    outcome: Err("every candidate learning rate failed".into()),
                    tuning,
                },
            }
        }
    }))
}
