//! Losses and analytic gradients for the four forward models, plus a
//! finite-difference checker.
//!
//! All losses are plain sums over the batch and over pixels (no averaging).
//! Gradients with respect to a complex quantity `z = a + ib` are formed from
//! the Wirtinger derivative `∂L/∂z*`; the real-channel gradients are
//! `∂L/∂a = 2·Re(∂L/∂z*)` and `∂L/∂b = 2·Im(∂L/∂z*)`.

use ndarray::{Array2, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::field::{dft2_array, idft2_array, square_side, RealImage, Spectrum, C64};
use crate::models::{exit_spectrum, project_magnitude, FpObject, FpOperator, FpSpectrumObject, SimScene};
use crate::optics::OpticsConfig;
use crate::par;

/// Below this residual modulus the complex L1 sub-gradient is taken as zero.
pub const L1_COMPLEX_EPS: f64 = 1e-12;

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Intensity,
    Exitwave,
    Singlepixel,
    Sim,
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub norm: Norm,
    pub target: Target,
}

impl LossSpec {
    pub fn new(norm: Norm, target: Target) -> Self {
        Self { norm, target }
    }

    /// The four Fourier ptychography cases compared against each other:
    /// {L1, L2} × {intensity, exit wave}.
    pub fn fp_cases() -> [LossSpec; 4] {
        [
            LossSpec::new(Norm::L2, Target::Intensity),
            LossSpec::new(Norm::L1, Target::Intensity),
            LossSpec::new(Norm::L2, Target::Exitwave),
            LossSpec::new(Norm::L1, Target::Exitwave),
        ]
    }

    pub fn label(&self) -> String {
        let norm = match self.norm {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        };
        let target = match self.target {
            Target::Intensity => "intensity",
            Target::Exitwave => "exitwave",
            Target::Singlepixel => "singlepixel",
            Target::Sim => "sim",
        };
        format!("{norm}-{target}")
    }
}

impl Norm {
    /// Penalty of a real residual.
    #[inline]
    pub fn penalty(self, r: f64) -> f64 {
        match self {
            Norm::L1 => r.abs(),
            Norm::L2 => r * r,
        }
    }

    /// Derivative of the penalty of `meas − pred` with respect to `pred`.
    /// `sign(0)` is 0, so exact fits are stationary.
    #[inline]
    pub fn sensitivity(self, meas: f64, pred: f64) -> f64 {
        let r = meas - pred;
        match self {
            Norm::L1 => {
                if r > 0.0 {
                    -1.0
                } else if r < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Norm::L2 => -2.0 * r,
        }
    }

    /// Penalty of a complex residual.
    #[inline]
    pub fn penalty_complex(self, r: C64) -> f64 {
        match self {
            Norm::L1 => r.norm(),
            Norm::L2 => r.norm_sqr(),
        }
    }

    /// `∂penalty/∂r*` of a complex residual.
    #[inline]
    pub fn wirtinger_complex(self, r: C64) -> C64 {
        match self {
            Norm::L1 => {
                let m = r.norm();
                if m < L1_COMPLEX_EPS {
                    C64::new(0.0, 0.0)
                } else {
                    r / (2.0 * m)
                }
            }
            Norm::L2 => r,
        }
    }
}

fn check_batch(batch: &[usize], len: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&n| n >= len) {
        return Err(Error::Domain(format!("batch index {bad} out of range (have {len})")));
    }
    Ok(())
}

/// `Σ_n Σ_pixels penalty(I_n − I_pred,n)`.
pub fn loss_intensity(meas: &[RealImage], pred: &[RealImage], norm: Norm) -> Result<f64> {
    if meas.len() != pred.len() {
        return dim_err(format!("{} measurements vs {} predictions", meas.len(), pred.len()));
    }
    let mut total = 0.0;
    for (m, p) in meas.iter().zip(pred) {
        if m.data.dim() != p.data.dim() {
            return dim_err("measurement and prediction shapes differ");
        }
        total += Zip::from(&m.data).and(&p.data).fold(0.0, |acc, &a, &b| acc + norm.penalty(a - b));
    }
    Ok(total)
}

/// `Σ_n Σ_bins penalty(|φ_update − φ̂|)`.
pub fn loss_exitwave(phi_update: &[Spectrum], phi_hat: &[Spectrum], norm: Norm) -> Result<f64> {
    if phi_update.len() != phi_hat.len() {
        return dim_err("exit-wave lists differ in length");
    }
    let mut total = 0.0;
    for (u, h) in phi_update.iter().zip(phi_hat) {
        if u.data.dim() != h.data.dim() {
            return dim_err("exit-wave spectra differ in shape");
        }
        total += Zip::from(&u.data).and(&h.data).fold(0.0, |acc, &a, &b| acc + norm.penalty_complex(a - b));
    }
    Ok(total)
}

/// Loss value together with per-channel gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Intensity-model loss and gradient over `batch`, using precomputed geometry.
///
/// Per measurement the pupil-band values of `conj(CTF_n) ⊙ dft2(W_n)` are
/// kept, with `W_n = zero_upsample(g_n) ⊙ ψ_n`, and accumulated in batch
/// order before a single inverse transform.
pub fn intensity_loss_grad(
    op: &FpOperator,
    obj: &FpObject,
    batch: &[usize],
    meas: &[RealImage],
    norm: Norm,
) -> Result<LossGrad> {
    check_batch(batch, meas.len().min(op.len()))?;
    let n_high = op.n_high();
    if obj.side() != n_high {
        return dim_err(format!("object side {} does not match n_high {n_high}", obj.side()));
    }
    let m = op.m_side();
    let s = op.cfg.stride;
    for &n in batch {
        if meas[n].data.dim() != (m, m) {
            return dim_err(format!("measurement {n} is not {m}x{m}"));
        }
    }
    let spec = dft2_array(&obj.to_complex());
    let parts = par::map(batch, |&n| {
        let psi = op.coherent_image(&spec, n);
        let mut loss = 0.0;
        let mut w = Array2::<C64>::zeros((n_high, n_high));
        for ((r, c), &i_meas) in meas[n].data.indexed_iter() {
            let z = psi[[r * s, c * s]];
            let pred = z.norm_sqr();
            loss += norm.penalty(i_meas - pred);
            w[[r * s, c * s]] = z * norm.sensitivity(i_meas, pred);
        }
        let wf = dft2_array(&w);
        let band: Vec<C64> = (0..op.pupil.len()).map(|k| wf[op.bin(n, k)]).collect();
        (loss, band)
    });
    let mut loss = 0.0;
    let mut acc = Array2::<C64>::zeros((n_high, n_high));
    for (&n, (l, band)) in batch.iter().zip(parts) {
        loss += l;
        for (k, v) in band.into_iter().enumerate() {
            acc[op.bin(n, k)] += v;
        }
    }
    let mut dconj = idft2_array(&acc);
    let scale = n_high as f64;
    dconj.mapv_inplace(|z| z * scale);
    Ok(LossGrad { loss, grads: split_wirtinger(&dconj) })
}

fn split_wirtinger(dconj: &Array2<C64>) -> Vec<Array2<f64>> {
    vec![dconj.mapv(|z| 2.0 * z.re), dconj.mapv(|z| 2.0 * z.im)]
}

/// Gradient of the intensity loss with respect to `(o_r, o_i)`.
pub fn grad_fp_intensity(
    obj: &FpObject,
    cfg: &OpticsConfig,
    batch: &[usize],
    meas: &[RealImage],
    norm: Norm,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let op = FpOperator::new(cfg)?;
    let mut lg = intensity_loss_grad(&op, obj, batch, meas, norm)?;
    let gi = lg.grads.pop().expect("two channels");
    let gr = lg.grads.pop().expect("two channels");
    Ok((gr, gi))
}

/// Intensity-model loss only.
pub fn intensity_loss(op: &FpOperator, obj: &FpObject, batch: &[usize], meas: &[RealImage], norm: Norm) -> Result<f64> {
    check_batch(batch, meas.len().min(op.len()))?;
    let spec = dft2_array(&obj.to_complex());
    let s = op.cfg.stride;
    let parts = par::map(batch, |&n| {
        let psi = op.coherent_image(&spec, n);
        meas[n]
            .data
            .indexed_iter()
            .map(|((r, c), &i)| norm.penalty(i - psi[[r * s, c * s]].norm_sqr()))
            .sum::<f64>()
    });
    Ok(parts.into_iter().sum())
}

/// Projected exit-wave spectra `φ_update` for each index in `batch`.
pub fn exitwave_targets(
    op: &FpOperator,
    spec: &Array2<C64>,
    batch: &[usize],
    sqrt_meas: &[RealImage],
) -> Result<Vec<Array2<C64>>> {
    check_batch(batch, sqrt_meas.len().min(op.len()))?;
    op.check_crop_fits()?;
    par::map(batch, |&n| {
        let phi_hat = exit_spectrum(op, spec, n)?;
        let psi = idft2_array(&phi_hat);
        Ok(dft2_array(&project_magnitude(&psi, &sqrt_meas[n].data)?))
    })
    .into_iter()
    .collect()
}

/// Exit-wave loss and gradient with `φ_update` supplied and held fixed.
pub fn exitwave_loss_grad_frozen(
    op: &FpOperator,
    obj: &FpSpectrumObject,
    batch: &[usize],
    targets: &[Array2<C64>],
    norm: Norm,
) -> Result<LossGrad> {
    if targets.len() != batch.len() {
        return dim_err("one projected exit wave per batch entry is required");
    }
    let n_high = op.n_high();
    if obj.side() != n_high {
        return dim_err(format!("spectrum side {} does not match n_high {n_high}", obj.side()));
    }
    let spec = obj.to_complex();
    let ctf0 = op.ctf0()?;
    let items: Vec<(usize, &Array2<C64>)> = batch.iter().copied().zip(targets.iter()).collect();
    let parts = par::map(&items, |&(n, phi_up)| -> Result<(f64, Array2<C64>)> {
        let phi_hat = exit_spectrum(op, &spec, n)?;
        let mut loss = 0.0;
        let g = Zip::from(&phi_hat).and(phi_up).and(&ctf0).map_collect(|&h, &u, &c| {
            let r = h - u;
            loss += norm.penalty_complex(r);
            norm.wirtinger_complex(r) * c
        });
        Ok((loss, g))
    });
    let mut loss = 0.0;
    let mut dconj = Array2::<C64>::zeros((n_high, n_high));
    for (&(n, _), part) in items.iter().zip(parts) {
        let (l, g) = part?;
        loss += l;
        crate::field::embed_add(&mut dconj, &g, op.shifts[n])?;
    }
    Ok(LossGrad { loss, grads: split_wirtinger(&dconj) })
}

/// Exit-wave loss and gradient: project first, then differentiate with the
/// projection output treated as a constant.
pub fn exitwave_loss_grad(
    op: &FpOperator,
    obj: &FpSpectrumObject,
    batch: &[usize],
    sqrt_meas: &[RealImage],
    norm: Norm,
) -> Result<LossGrad> {
    let targets = exitwave_targets(op, &obj.to_complex(), batch, sqrt_meas)?;
    exitwave_loss_grad_frozen(op, obj, batch, &targets, norm)
}

/// Gradient of the exit-wave loss with respect to `(spec_r, spec_i)`.
pub fn grad_fp_exitwave(
    obj: &FpSpectrumObject,
    cfg: &OpticsConfig,
    batch: &[usize],
    sqrt_meas: &[RealImage],
    norm: Norm,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let op = FpOperator::new(cfg)?;
    let mut lg = exitwave_loss_grad(&op, obj, batch, sqrt_meas, norm)?;
    let gi = lg.grads.pop().expect("two channels");
    let gr = lg.grads.pop().expect("two channels");
    Ok((gr, gi))
}

/// Single-pixel loss and gradient.
pub fn spi_loss_grad(
    object: &Array2<f64>,
    patterns: &[Array2<f64>],
    batch: &[usize],
    meas: &[f64],
    norm: Norm,
) -> Result<LossGrad> {
    check_batch(batch, patterns.len().min(meas.len()))?;
    if batch.iter().any(|&n| patterns[n].dim() != object.dim()) {
        return dim_err("pattern shape differs from object");
    }
    let parts = par::map(batch, |&n| {
        let p = &patterns[n];
        let pred = Zip::from(object).and(p).fold(0.0, |acc, &o, &q| acc + o * q);
        (norm.penalty(meas[n] - pred), norm.sensitivity(meas[n], pred))
    });
    let mut loss = 0.0;
    let mut grad = Array2::zeros(object.dim());
    for (&n, (l, g)) in batch.iter().zip(parts) {
        loss += l;
        if g != 0.0 {
            grad.scaled_add(g, &patterns[n]);
        }
    }
    Ok(LossGrad { loss, grads: vec![grad] })
}

pub fn grad_spi(
    object: &Array2<f64>,
    patterns: &[Array2<f64>],
    batch: &[usize],
    meas: &[f64],
    norm: Norm,
) -> Result<Array2<f64>> {
    Ok(spi_loss_grad(object, patterns, batch, meas, norm)?.grads.remove(0))
}

/// Index reversal `k[x] → k[−x mod N]`, turning convolution into correlation.
pub fn flip(kernel: &Array2<f64>) -> Array2<f64> {
    let (r, c) = kernel.dim();
    Array2::from_shape_fn((r, c), |(i, j)| kernel[[(r - i) % r, (c - j) % c]])
}

/// SIM loss and gradient with respect to the object.
pub fn sim_loss_grad(scene: &SimScene, batch: &[usize], meas: &[RealImage], norm: Norm) -> Result<LossGrad> {
    let side = square_side(&scene.object, "SIM object")?;
    check_batch(batch, scene.patterns.len().min(meas.len()))?;
    if batch.iter().any(|&n| meas[n].data.dim() != (side, side) || scene.patterns[n].dim() != (side, side)) {
        return dim_err("SIM measurement or pattern shape differs from object");
    }
    // Convolution with the PSF and correlation (adjoint) share one spectrum
    // up to conjugation because the PSF is real.
    let kernel = dft2_array(&scene.psf_inc.mapv(|x| C64::new(x, 0.0)));
    let scale = side as f64;
    let apply = |x: &Array2<f64>, adjoint: bool| -> Array2<f64> {
        let mut f = dft2_array(&x.mapv(|v| C64::new(v, 0.0)));
        Zip::from(&mut f).and(&kernel).for_each(|a, &k| {
            *a *= if adjoint { k.conj() } else { k } * scale;
        });
        idft2_array(&f).mapv(|z| z.re)
    };
    let parts = par::map(batch, |&n| {
        let p = &scene.patterns[n];
        let lit = &scene.object * p;
        let pred = apply(&lit, false);
        let mut loss = 0.0;
        let g = Zip::from(&meas[n].data).and(&pred).map_collect(|&i, &q| {
            loss += norm.penalty(i - q);
            norm.sensitivity(i, q)
        });
        (loss, apply(&g, true) * p)
    });
    let mut loss = 0.0;
    let mut grad = Array2::zeros((side, side));
    for (l, g) in parts {
        loss += l;
        grad += &g;
    }
    Ok(LossGrad { loss, grads: vec![grad] })
}

pub fn grad_sim(scene: &SimScene, batch: &[usize], meas: &[RealImage], norm: Norm) -> Result<Array2<f64>> {
    Ok(sim_loss_grad(scene, batch, meas, norm)?.grads.remove(0))
}

/// A differentiable problem over a flat parameter vector, for
/// [`finite_diff_check`].
pub trait FdProblem {
    fn params(&self) -> Vec<f64>;
    fn loss(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64]) -> Vec<f64>;
    /// Signs of every real residual at `theta`. L1 problems return these so
    /// that perturbations crossing a kink can be excluded; smooth problems
    /// return an empty vector.
    fn residual_signs(&self, _theta: &[f64]) -> Vec<i8> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Parameter index of the worst error.
    pub worst: Option<usize>,
}

/// Central finite-difference check on a random subset of at least 200
/// parameters (all of them when fewer exist).
///
/// The per-parameter error is `|fd − an| / max(|an|, |fd|, 1e-6·max|an|)`.
/// Parameters whose ±step perturbation flips any residual sign are skipped.
pub fn finite_diff_check<P: FdProblem + ?Sized>(problem: &P, seed: u64, step: f64) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let theta = problem.params();
    let analytic = problem.gradient(&theta);
    if analytic.len() != theta.len() {
        return dim_err("gradient length differs from parameter count");
    }
    let count = theta.len().min(200.max(theta.len() / 4));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, theta.len(), count).into_vec();
    idx.sort_unstable();
    let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-6 * gmax + f64::MIN_POSITIVE;
    let base_signs = problem.residual_signs(&theta);
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, excluded: 0, worst: None };
    let mut work = theta.clone();
    for i in idx {
        work[i] = theta[i] + step;
        let fp = problem.loss(&work);
        let sp = problem.residual_signs(&work);
        work[i] = theta[i] - step;
        let fm = problem.loss(&work);
        let sm = problem.residual_signs(&work);
        work[i] = theta[i];
        if !base_signs.is_empty() && (sp != base_signs || sm != base_signs) {
            report.excluded += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * step);
        let an = analytic[i];
        let err = (fd - an).abs() / an.abs().max(fd.abs()).max(floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

fn unflatten(theta: &[f64], side: usize, channels: usize) -> Vec<Array2<f64>> {
    (0..channels)
        .map(|c| Array2::from_shape_vec((side, side), theta[c * side * side..(c + 1) * side * side].to_vec()).expect("shape"))
        .collect()
}

fn flatten(channels: &[Array2<f64>]) -> Vec<f64> {
    channels.iter().flat_map(|a| a.iter().copied()).collect()
}

/// Intensity-model problem for the finite-difference check.
pub struct IntensityProblem {
    pub op: FpOperator,
    pub obj: FpObject,
    pub batch: Vec<usize>,
    pub meas: Vec<RealImage>,
    pub norm: Norm,
}

impl IntensityProblem {
    fn object(&self, theta: &[f64]) -> FpObject {
        let mut ch = unflatten(theta, self.obj.side(), 2);
        let o_i = ch.pop().expect("channel");
        let o_r = ch.pop().expect("channel");
        FpObject { o_r, o_i }
    }
}

impl FdProblem for IntensityProblem {
    fn params(&self) -> Vec<f64> {
        flatten(&[self.obj.o_r.clone(), self.obj.o_i.clone()])
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        intensity_loss(&self.op, &self.object(theta), &self.batch, &self.meas, self.norm).expect("loss")
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        flatten(&intensity_loss_grad(&self.op, &self.object(theta), &self.batch, &self.meas, self.norm).expect("grad").grads)
    }
    fn residual_signs(&self, theta: &[f64]) -> Vec<i8> {
        if self.norm == Norm::L2 {
            return Vec::new();
        }
        let spec = dft2_array(&self.object(theta).to_complex());
        let s = self.op.cfg.stride;
        let mut signs = Vec::new();
        for &n in &self.batch {
            let psi = self.op.coherent_image(&spec, n);
            for ((r, c), &i) in self.meas[n].data.indexed_iter() {
                signs.push(sign_of(i - psi[[r * s, c * s]].norm_sqr()));
            }
        }
        signs
    }
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Exit-wave problem with `φ_update` frozen at the base point.
pub struct ExitwaveProblem {
    pub op: FpOperator,
    pub obj: FpSpectrumObject,
    pub batch: Vec<usize>,
    pub targets: Vec<Array2<C64>>,
    pub norm: Norm,
}

impl ExitwaveProblem {
    pub fn new(op: FpOperator, obj: FpSpectrumObject, batch: Vec<usize>, sqrt_meas: &[RealImage], norm: Norm) -> Result<Self> {
        let targets = exitwave_targets(&op, &obj.to_complex(), &batch, sqrt_meas)?;
        Ok(Self { op, obj, batch, targets, norm })
    }

    fn object(&self, theta: &[f64]) -> FpSpectrumObject {
        let mut ch = unflatten(theta, self.obj.side(), 2);
        let spec_i = ch.pop().expect("channel");
        let spec_r = ch.pop().expect("channel");
        FpSpectrumObject { spec_r, spec_i }
    }
}

impl FdProblem for ExitwaveProblem {
    fn params(&self) -> Vec<f64> {
        flatten(&[self.obj.spec_r.clone(), self.obj.spec_i.clone()])
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        exitwave_loss_grad_frozen(&self.op, &self.object(theta), &self.batch, &self.targets, self.norm).expect("loss").loss
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        flatten(&exitwave_loss_grad_frozen(&self.op, &self.object(theta), &self.batch, &self.targets, self.norm).expect("grad").grads)
    }
}

/// Single-pixel problem.
pub struct SpiProblem {
    pub object: Array2<f64>,
    pub patterns: Vec<Array2<f64>>,
    pub batch: Vec<usize>,
    pub meas: Vec<f64>,
    pub norm: Norm,
}

impl FdProblem for SpiProblem {
    fn params(&self) -> Vec<f64> {
        self.object.iter().copied().collect()
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        let o = unflatten(theta, self.object.nrows(), 1).remove(0);
        spi_loss_grad(&o, &self.patterns, &self.batch, &self.meas, self.norm).expect("loss").loss
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let o = unflatten(theta, self.object.nrows(), 1).remove(0);
        flatten(&spi_loss_grad(&o, &self.patterns, &self.batch, &self.meas, self.norm).expect("grad").grads)
    }
    fn residual_signs(&self, theta: &[f64]) -> Vec<i8> {
        if self.norm == Norm::L2 {
            return Vec::new();
        }
        let o = unflatten(theta, self.object.nrows(), 1).remove(0);
        self.batch
            .iter()
            .map(|&n| sign_of(self.meas[n] - Zip::from(&o).and(&self.patterns[n]).fold(0.0, |a, &x, &p| a + x * p)))
            .collect()
    }
}

/// SIM problem.
pub struct SimProblem {
    pub scene: SimScene,
    pub batch: Vec<usize>,
    pub meas: Vec<RealImage>,
    pub norm: Norm,
}

impl SimProblem {
    fn scene_at(&self, theta: &[f64]) -> SimScene {
        SimScene {
            object: unflatten(theta, self.scene.object.nrows(), 1).remove(0),
            patterns: self.scene.patterns.clone(),
            psf_inc: self.scene.psf_inc.clone(),
        }
    }
}

impl FdProblem for SimProblem {
    fn params(&self) -> Vec<f64> {
        self.scene.object.iter().copied().collect()
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        sim_loss_grad(&self.scene_at(theta), &self.batch, &self.meas, self.norm).expect("loss").loss
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        flatten(&sim_loss_grad(&self.scene_at(theta), &self.batch, &self.meas, self.norm).expect("grad").grads)
    }
    fn residual_signs(&self, theta: &[f64]) -> Vec<i8> {
        if self.norm == Norm::L2 {
            return Vec::new();
        }
        let scene = self.scene_at(theta);
        let mut signs = Vec::new();
        for &n in &self.batch {
            let pred = crate::models::sim_forward(&scene, n).expect("forward");
            signs.extend(Zip::from(&self.meas[n].data).and(&pred.data).map_collect(|&i, &p| sign_of(i - p)).iter());
        }
        signs
    }
}
