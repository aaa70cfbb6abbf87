//! Finite-difference verification of every model's analytic gradient on
//! small random problems.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Result};
use ndarray::Array2;
use ptychonet::field::RealImage;
use ptychonet::grad::{finite_diff_check, ExitwaveProblem, FdProblem, FdReport, IntensityProblem, Norm, SimProblem, SpiProblem};
use ptychonet::models::{fp_intensity_forward, incoherent_psf, sim_forward, spi_forward, FpObject, FpOperator, FpSpectrumObject, SimScene};
use ptychonet::OpticsConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{LossArg, ModelArg};

pub const FD_STEP: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub fn threshold(norm: Norm) -> f64 {
    match norm {
        Norm::L1 => 1e-5,
        Norm::L2 => 1e-6,
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub model: &'static str,
    pub norm: Norm,
    pub report: FdReport,
    pub threshold: f64,
    pub pass: bool,
}

/// Negative control: every analytic gradient entry scaled by `1.01`.
struct Scaled<'a>(&'a dyn FdProblem, f64);

impl FdProblem for Scaled<'_> {
    fn params(&self) -> Vec<f64> {
        self.0.params()
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        self.0.loss(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.0.gradient(theta).into_iter().map(|g| g * self.1).collect()
    }
    fn residual_signs(&self, theta: &[f64]) -> Vec<i8> {
        self.0.residual_signs(theta)
    }
}

fn uniform(side: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((side, side), |_| lo + (hi - lo) * rng.random::<f64>())
}

/// Fourier ptychography geometry for a `side` grid: stride 2, pupil radius
/// 0.3·m bins and four illuminations a few bins apart.
fn fp_optics(side: usize) -> OpticsConfig {
    let (lambda, px) = (0.532, 0.43125);
    let m = side / 2;
    let per_bin = lambda / (side as f64 * px);
    let radius = 0.3 * m as f64;
    let b = (m / 8).max(1) as f64;
    let shifts = [(0.0, 0.0), (b, 0.0), (0.0, -b), (-b, b)];
    OpticsConfig::new(lambda, radius * per_bin, side, 2, px).with_wavevectors(shifts.iter().map(|&(x, y)| (x * per_bin, y * per_bin)).collect())
}

fn perturbed(obj: &FpObject, rng: &mut ChaCha8Rng) -> FpObject {
    let side = obj.side();
    FpObject::new(&obj.o_r + &uniform(side, -0.1, 0.1, rng), &obj.o_i + &uniform(side, -0.1, 0.1, rng)).expect("same shape")
}

fn check(problem: &dyn FdProblem, corrupt: bool, seed: u64) -> Result<FdReport> {
    Ok(if corrupt {
        finite_diff_check(&Scaled(problem, 1.01), seed, FD_STEP)?
    } else {
        finite_diff_check(problem, seed, FD_STEP)?
    })
}

fn problem(model: ModelArg, norm: Norm, side: usize, rng: &mut ChaCha8Rng) -> Result<Box<dyn FdProblem>> {
    Ok(match model {
        ModelArg::Intensity | ModelArg::Exitwave => {
            let cfg = fp_optics(side);
            let op = FpOperator::new(&cfg)?;
            let obj = FpObject::new(uniform(side, 0.0, 1.0, rng), uniform(side, -0.5, 0.5, rng))?;
            let other = perturbed(&obj, rng);
            let meas = (0..cfg.n_illuminations()).map(|n| fp_intensity_forward(&other, &cfg, n)).collect::<ptychonet::Result<Vec<_>>>()?;
            let batch: Vec<usize> = (0..cfg.n_illuminations()).collect();
            if model == ModelArg::Intensity {
                Box::new(IntensityProblem { op, obj, batch, meas, norm })
            } else {
                // amplitudes in the band-selection convention
                let m2 = (cfg.m_side() * cfg.m_side()) as f64;
                let amps: Vec<RealImage> = meas.iter().map(|m| RealImage { data: m.data.mapv(|v| (v / m2).sqrt()), px: m.px }).collect();
                Box::new(ExitwaveProblem::new(op, FpSpectrumObject::from_object(&obj), batch, &amps, norm)?)
            }
        }
        ModelArg::Spi => {
            let object = uniform(side, 0.0, 1.0, rng);
            let patterns: Vec<_> = (0..2 * side).map(|_| uniform(side, 0.0, 1.0, rng)).collect();
            let meas = patterns
                .iter()
                .map(|p| Ok(spi_forward(&object, p)? + rng.random::<f64>() - 0.5))
                .collect::<ptychonet::Result<Vec<_>>>()?;
            Box::new(SpiProblem { object, patterns, batch: (0..2 * side).collect(), meas, norm })
        }
        ModelArg::Sim => {
            let cfg = OpticsConfig::new(0.532, 0.3, side, 1, 0.43125);
            let psf = incoherent_psf(&cfg)?;
            // kept clear of zero so the perturbed truth stays non-negative
            let object = uniform(side, 0.2, 1.0, rng);
            let patterns: Vec<_> = (0..4).map(|_| uniform(side, 0.0, 1.0, rng)).collect();
            let truth = SimScene::new(&object + &uniform(side, -0.15, 0.15, rng), patterns.clone(), psf.clone())?;
            let meas = (0..4).map(|n| sim_forward(&truth, n)).collect::<ptychonet::Result<Vec<_>>>()?;
            Box::new(SimProblem { scene: SimScene::new(object, patterns, psf)?, batch: vec![0, 1, 2, 3], meas, norm })
        }
        ModelArg::All => unreachable!("expanded by the caller"),
    })
}

fn name(model: ModelArg) -> &'static str {
    match model {
        ModelArg::Intensity => "intensity",
        ModelArg::Exitwave => "exitwave",
        ModelArg::Spi => "spi",
        ModelArg::Sim => "sim",
        ModelArg::All => "all",
    }
}

/// Checks the selected models and norms on random `size × size` problems.
pub fn run(model: ModelArg, loss: LossArg, size: usize, seed: u64, corrupt: bool) -> Result<Vec<Row>> {
    ensure!((8..=32).contains(&size) && size.is_multiple_of(2), "gradcheck size must be even and within 8..=32, got {size}");
    let models = match model {
        ModelArg::All => vec![ModelArg::Intensity, ModelArg::Exitwave, ModelArg::Spi, ModelArg::Sim],
        m => vec![m],
    };
    let norms = match loss {
        LossArg::All => vec![Norm::L1, Norm::L2],
        LossArg::L1 => vec![Norm::L1],
        LossArg::L2 => vec![Norm::L2],
    };
    let mut rows = Vec::new();
    for (i, &m) in models.iter().enumerate() {
        for (j, &norm) in norms.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((10 * i + j) as u64));
            let p = problem(m, norm, size, &mut rng)?;
            let report = check(p.as_ref(), corrupt, seed)?;
            let threshold = threshold(norm);
            let pass = report.checked > 0 && report.max_rel_error <= threshold;
            rows.push(Row { model: name(m), norm, report, threshold, pass });
        }
    }
    Ok(rows)
}

fn norm_name(n: Norm) -> &'static str {
    match n {
        Norm::L1 => "l1",
        Norm::L2 => "l2",
    }
}

pub fn table(rows: &[Row]) -> String {
    let mut s = format!("{:<10} {:<4} {:>12} {:>8} {:>9} {:>10}  result\n", "model", "loss", "max_rel_err", "checked", "excluded", "threshold");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<4} {:>12.3e} {:>8} {:>9} {:>10.0e}  {}",
            r.model,
            norm_name(r.norm),
            r.report.max_rel_error,
            r.report.checked,
            r.report.excluded,
            r.threshold,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

pub fn write_csv(dir: &Path, rows: &[Row]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
    w.write_record(["model", "loss", "max_rel_error", "checked", "excluded", "threshold", "result"])?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            norm_name(r.norm).into(),
            r.report.max_rel_error.to_string(),
            r.report.checked.to_string(),
            r.report.excluded.to_string(),
            r.threshold.to_string(),
            if r.pass { "PASS".into() } else { "FAIL".into() },
        ])?;
    }
    w.flush()?;
    Ok(())
}
