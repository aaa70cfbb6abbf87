//! On-disk dataset format: a JSON manifest plus raw little-endian planes.
//!
//! Every numeric array is a separate file of row-major samples whose shape
//! is declared in the manifest; complex arrays are two consecutive planes
//! (real, then imaginary). Datasets use `f32` samples. Checkpoints use `f64`
//! so that a resumed run continues bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use ndarray::{Array2, ArrayView2};
use ptychonet::engine::{Checkpoint, DataRef, ReconConfig, RunMetrics};
use ptychonet::models::FpObject;
use ptychonet::optim::OptState;
use ptychonet::simdata::{FormationMode, FpDataset, Provenance, SimDataset, SpiDataset};
use ptychonet::{OpticsConfig, RealImage};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: &str = "ptychonet-data/1";
pub const CHECKPOINT_VERSION: &str = "ptychonet-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    /// 16-bit grayscale PNG, mapped linearly onto `range` at load.
    Png16,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Png16 => 0,
        }
    }
}

fn one() -> usize {
    1
}

/// One array file referenced from a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRef {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// 2 for complex arrays stored as (real, imaginary) planes.
    #[serde(default = "one")]
    pub planes: usize,
    /// For `png16`: the values that 0 and 65535 stand for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl ArrayRef {
    fn len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.planes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Fp,
    Sim,
    Spi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<FormationMode>,
    /// Optics and illumination wave vectors (Fourier ptychography and SIM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optics: Option<OpticsConfig>,
    /// Sample pitch of the measurement images in µm (1 = pixel units).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_um: Option<f64>,
    pub measurements: Vec<ArrayRef>,
    /// Illumination patterns, one `[count, side, side]` array.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<ArrayRef>,
    /// Incoherent PSF used by the SIM forward model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psf: Option<ArrayRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<ArrayRef>,
    #[serde(default)]
    pub provenance: Provenance,
}

/// Any acquisition the engine can reconstruct from.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Fp(FpDataset),
    Sim(SimDataset),
    Spi(SpiDataset),
}

impl Dataset {
    pub fn as_ref(&self) -> DataRef<'_> {
        match self {
            Dataset::Fp(d) => d.into(),
            Dataset::Sim(d) => d.into(),
            Dataset::Spi(d) => d.into(),
        }
    }

    pub fn kind(&self) -> DataKind {
        match self {
            Dataset::Fp(_) => DataKind::Fp,
            Dataset::Sim(_) => DataKind::Sim,
            Dataset::Spi(_) => DataKind::Spi,
        }
    }

    pub fn has_ground_truth(&self) -> bool {
        match self {
            Dataset::Fp(d) => d.ground_truth.is_some(),
            Dataset::Sim(d) => d.ground_truth.is_some(),
            Dataset::Spi(d) => d.ground_truth.is_some(),
        }
    }

    /// Rounds every array to `f32` precision, which is exactly what a
    /// save/load cycle does.
    pub fn quantize_f32(&mut self) {
        let q = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
        match self {
            Dataset::Fp(d) => d.quantize_f32(),
            Dataset::Sim(d) => {
                d.patterns.iter_mut().for_each(q);
                q(&mut d.psf_inc);
                renormalize(&mut d.psf_inc);
                d.measurements.iter_mut().for_each(|m| q(&mut m.data));
                d.ground_truth.iter_mut().for_each(q);
            }
            Dataset::Spi(d) => {
                d.patterns.iter_mut().for_each(q);
                d.measurements.iter_mut().for_each(|v| *v = *v as f32 as f64);
                d.ground_truth.iter_mut().for_each(q);
            }
        }
    }
}

/// Restores the unit sum of an incoherent PSF after `f32` rounding. The
/// correction is far below half an `f32` ulp, so the stored values are
/// unchanged and a save/load cycle stays exact.
fn renormalize(psf: &mut Array2<f64>) {
    let total = psf.sum();
    psf.mapv_inplace(|v| v / total);
}

fn write_raw(dir: &Path, file: &str, planes: &[ArrayView2<f64>], dtype: DType) -> Result<ArrayRef> {
    let shape = planes.first().map(|p| vec![p.nrows(), p.ncols()]).unwrap_or_default();
    let mut bytes = Vec::with_capacity(planes.len() * shape.iter().product::<usize>() * dtype.width());
    for p in planes {
        ensure!(p.dim() == planes[0].dim(), "planes of {file} differ in shape");
        for &v in p.iter() {
            match dtype {
                DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                DType::Png16 => bail!("png16 arrays are read-only"),
            }
        }
    }
    let path = dir.join(file);
    fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(ArrayRef { file: file.into(), shape, dtype, planes: planes.len(), range: None })
}

/// Writes a stack of equally shaped 2-D arrays as one `[count, rows, cols]` file.
fn write_stack(dir: &Path, file: &str, stack: &[Array2<f64>]) -> Result<ArrayRef> {
    let views: Vec<_> = stack.iter().map(|a| a.view()).collect();
    let mut r = write_raw(dir, file, &views, DType::F32)?;
    r.shape.insert(0, stack.len());
    r.planes = 1;
    Ok(r)
}

/// Reads the flat samples of `r`, checking the file against its declared shape.
pub fn read_flat(dir: &Path, r: &ArrayRef) -> Result<Vec<f64>> {
    let path = dir.join(&r.file);
    ensure!(r.planes >= 1, "{}: planes must be at least 1", r.file);
    if r.dtype == DType::Png16 {
        return read_png16(&path, r);
    }
    let bytes = fs::read(&path).with_context(|| format!("missing array file {}", path.display()))?;
    let want = r.len() * r.dtype.width();
    ensure!(
        bytes.len() == want,
        "{} holds {} bytes but shape {:?} × {} plane(s) of {:?} needs {want}",
        path.display(),
        bytes.len(),
        r.shape,
        r.planes,
        r.dtype
    );
    Ok(match r.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    })
}

fn read_png16(path: &Path, r: &ArrayRef) -> Result<Vec<f64>> {
    let [lo, hi] = r.range.ok_or_else(|| anyhow!("{}: png16 arrays need a range", r.file))?;
    ensure!(r.planes == 1 && r.shape.len() == 2, "{}: png16 arrays are single 2-D planes", r.file);
    let img = image::open(path).with_context(|| format!("cannot read {}", path.display()))?.into_luma16();
    ensure!(
        [img.height() as usize, img.width() as usize] == r.shape[..],
        "{} is {}×{} but the manifest declares {:?}",
        path.display(),
        img.height(),
        img.width(),
        r.shape
    );
    // Converted through f32 like every other stored array.
    Ok(img.pixels().map(|p| (lo + (hi - lo) * p.0[0] as f64 / 65535.0) as f32 as f64).collect())
}

fn read_2d(dir: &Path, r: &ArrayRef) -> Result<Vec<Array2<f64>>> {
    ensure!(r.shape.len() == 2, "{}: expected a 2-D array, got shape {:?}", r.file, r.shape);
    let flat = read_flat(dir, r)?;
    let n = r.shape[0] * r.shape[1];
    Ok(flat.chunks_exact(n).map(|c| Array2::from_shape_vec((r.shape[0], r.shape[1]), c.to_vec()).unwrap()).collect())
}

fn read_stack(dir: &Path, r: &ArrayRef) -> Result<Vec<Array2<f64>>> {
    ensure!(r.shape.len() == 3 && r.planes == 1, "{}: expected a [count, rows, cols] array, got {:?}", r.file, r.shape);
    let flat = read_flat(dir, r)?;
    let n = r.shape[1] * r.shape[2];
    Ok(flat.chunks_exact(n).map(|c| Array2::from_shape_vec((r.shape[1], r.shape[2]), c.to_vec()).unwrap()).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
}

/// Writes `data` to `dir` (created if needed) and returns the manifest.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let digits = |n: usize| n.saturating_sub(1).to_string().len().max(3);
    let manifest = match data {
        Dataset::Fp(d) => {
            let w = digits(d.measurements.len());
            let measurements = d
                .measurements
                .iter()
                .enumerate()
                .map(|(i, m)| write_raw(dir, &format!("meas_{i:0w$}.f32"), &[m.data.view()], DType::F32))
                .collect::<Result<_>>()?;
            let ground_truth = match &d.ground_truth {
                Some(gt) => Some(write_raw(dir, "ground_truth.f32", &[gt.o_r.view(), gt.o_i.view()], DType::F32)?),
                None => None,
            };
            Manifest {
                format_version: FORMAT_VERSION.into(),
                kind: DataKind::Fp,
                mode: Some(d.mode),
                optics: Some(d.cfg.clone()),
                pixel_um: Some(d.cfg.px_low_um()),
                measurements,
                patterns: None,
                psf: None,
                ground_truth,
                provenance: d.provenance.clone(),
            }
        }
        Dataset::Sim(d) => {
            let measurements = d
                .measurements
                .iter()
                .enumerate()
                .map(|(i, m)| write_raw(dir, &format!("meas_{i:03}.f32"), &[m.data.view()], DType::F32))
                .collect::<Result<_>>()?;
            Manifest {
                format_version: FORMAT_VERSION.into(),
                kind: DataKind::Sim,
                mode: None,
                optics: None,
                pixel_um: d.measurements.first().map(|m| m.px),
                measurements,
                patterns: Some(write_stack(dir, "patterns.f32", &d.patterns)?),
                psf: Some(write_raw(dir, "psf.f32", &[d.psf_inc.view()], DType::F32)?),
                ground_truth: match &d.ground_truth {
                    Some(gt) => Some(write_raw(dir, "ground_truth.f32", &[gt.view()], DType::F32)?),
                    None => None,
                },
                provenance: d.provenance.clone(),
            }
        }
        Dataset::Spi(d) => {
            let row = Array2::from_shape_vec((1, d.measurements.len()), d.measurements.clone())?;
            let mut meas = write_raw(dir, "measurements.f32", &[row.view()], DType::F32)?;
            meas.shape = vec![d.measurements.len()];
            Manifest {
                format_version: FORMAT_VERSION.into(),
                kind: DataKind::Spi,
                mode: None,
                optics: None,
                pixel_um: None,
                measurements: vec![meas],
                patterns: Some(write_stack(dir, "patterns.f32", &d.patterns)?),
                psf: None,
                ground_truth: match &d.ground_truth {
                    Some(gt) => Some(write_raw(dir, "ground_truth.f32", &[gt.view()], DType::F32)?),
                    None => None,
                },
                provenance: d.provenance.clone(),
            }
        }
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Resolves `path` to a manifest file: either the file itself or
/// `manifest.json` inside a directory.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let file = manifest_path(path);
    let manifest: Manifest = read_json(&file)?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        "{}: unsupported format version {:?} (expected {FORMAT_VERSION:?})",
        file.display(),
        manifest.format_version
    );
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

/// Loads a dataset written by [`save_dataset`] or assembled by hand.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (m, dir) = read_manifest(path)?;
    let data = match m.kind {
        DataKind::Fp => {
            let cfg = m.optics.clone().ok_or_else(|| anyhow!("Fourier ptychography manifest lacks optics"))?;
            let px = m.pixel_um.unwrap_or_else(|| cfg.px_low_um());
            let measurements = m
                .measurements
                .iter()
                .map(|r| {
                    let mut planes = read_2d(&dir, r)?;
                    ensure!(planes.len() == 1, "{}: measurements are real", r.file);
                    Ok(RealImage { data: planes.remove(0), px })
                })
                .collect::<Result<Vec<_>>>()?;
            let ground_truth = match &m.ground_truth {
                Some(r) => {
                    let mut planes = read_2d(&dir, r)?;
                    ensure!(planes.len() == 2, "{}: ground truth must be complex (2 planes)", r.file);
                    let o_i = planes.pop().unwrap();
                    Some(FpObject::new(planes.pop().unwrap(), o_i)?)
                }
                None => None,
            };
            let ds = FpDataset {
                cfg,
                mode: m.mode.unwrap_or(FormationMode::Stride),
                measurements,
                ground_truth,
                provenance: m.provenance,
            };
            ds.validate()?;
            Dataset::Fp(ds)
        }
        DataKind::Sim => {
            let px = m.pixel_um.unwrap_or(1.0);
            let measurements = m
                .measurements
                .iter()
                .map(|r| Ok(RealImage { data: read_2d(&dir, r)?.remove(0), px }))
                .collect::<Result<Vec<_>>>()?;
            let patterns = read_stack(&dir, m.patterns.as_ref().ok_or_else(|| anyhow!("SIM manifest lacks patterns"))?)?;
            let mut psf = read_2d(&dir, m.psf.as_ref().ok_or_else(|| anyhow!("SIM manifest lacks a psf"))?)?.remove(0);
            ensure!(psf.iter().all(|&v| v >= 0.0) && psf.sum() > 0.0, "SIM psf must be non-negative with a positive sum");
            renormalize(&mut psf);
            let ground_truth = match &m.ground_truth {
                Some(r) => Some(read_2d(&dir, r)?.remove(0)),
                None => None,
            };
            ensure!(patterns.len() == measurements.len(), "{} patterns but {} measurements", patterns.len(), measurements.len());
            Dataset::Sim(SimDataset { patterns, psf_inc: psf, measurements, ground_truth, provenance: m.provenance })
        }
        DataKind::Spi => {
            ensure!(m.measurements.len() == 1, "single-pixel manifests hold one measurement vector");
            let measurements = read_flat(&dir, &m.measurements[0])?;
            let patterns = read_stack(&dir, m.patterns.as_ref().ok_or_else(|| anyhow!("single-pixel manifest lacks patterns"))?)?;
            ensure!(patterns.len() == measurements.len(), "{} patterns but {} measurements", patterns.len(), measurements.len());
            let ground_truth = match &m.ground_truth {
                Some(r) => Some(read_2d(&dir, r)?.remove(0)),
                None => None,
            };
            Dataset::Spi(SpiDataset { patterns, measurements, ground_truth, provenance: m.provenance })
        }
    };
    Ok(data)
}

/// Writes a complex (or real, when `im` is `None`) image as an array file
/// with its own small manifest, e.g. `object.json` + `object.f32`.
pub fn save_image(dir: &Path, stem: &str, re: &Array2<f64>, im: Option<&Array2<f64>>) -> Result<ArrayRef> {
    let mut planes = vec![re.view()];
    planes.extend(im.map(|a| a.view()));
    let r = write_raw(dir, &format!("{stem}.f32"), &planes, DType::F32)?;
    write_json(&dir.join(format!("{stem}.json")), &r)?;
    Ok(r)
}

/// Reads an array written by [`save_image`] from its `.json` descriptor.
pub fn load_image(descriptor: &Path) -> Result<Vec<Array2<f64>>> {
    let r: ArrayRef = read_json(descriptor)?;
    read_2d(descriptor.parent().unwrap_or(Path::new(".")), &r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: String,
    config: ReconConfig,
    epochs_done: usize,
    step_count: u64,
    params: ArrayRef,
    m: ArrayRef,
    v: ArrayRef,
    metrics: RunMetrics,
}

fn views(a: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
    a.iter().map(|x| x.view()).collect()
}

pub fn save_checkpoint(dir: &Path, cfg: &ReconConfig, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION.into(),
        config: cfg.clone(),
        epochs_done: ck.epochs_done,
        step_count: ck.state.step_count,
        params: write_raw(dir, "params.f64", &views(&ck.params), DType::F64)?,
        m: write_raw(dir, "moment1.f64", &views(&ck.state.m), DType::F64)?,
        v: write_raw(dir, "moment2.f64", &views(&ck.state.v), DType::F64)?,
        metrics: ck.metrics.clone(),
    };
    write_json(&dir.join(CHECKPOINT_FILE), &manifest)
}

/// Loads a checkpoint and the config it was written under.
pub fn load_checkpoint(path: &Path) -> Result<(ReconConfig, Checkpoint)> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let m: CheckpointManifest = read_json(&file)?;
    ensure!(m.format_version == CHECKPOINT_VERSION, "{}: unsupported checkpoint version {:?}", file.display(), m.format_version);
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let state = OptState { m: read_2d(&dir, &m.m)?, v: read_2d(&dir, &m.v)?, step_count: m.step_count };
    let ck = Checkpoint { params: read_2d(&dir, &m.params)?, state, epochs_done: m.epochs_done, metrics: m.metrics };
    Ok((m.config, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_files_are_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let b = a.mapv(|v| -v);
        let r = save_image(dir.path(), "x", &a, Some(&b)).unwrap();
        assert_eq!((r.shape.clone(), r.planes, r.dtype), (vec![2, 3], 2, DType::F32));
        let bytes = fs::read(dir.path().join("x.f32")).unwrap();
        assert_eq!(bytes.len(), 2 * 6 * 4);
        assert_eq!(&bytes[4..8], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-1.0f32).to_le_bytes());
        let back = load_image(&dir.path().join("x.json")).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array2::<f64>::zeros((4, 4));
        let r = save_image(dir.path(), "x", &a, None).unwrap();
        fs::write(dir.path().join(&r.file), [0u8; 10]).unwrap();
        let err = load_image(&dir.path().join("x.json")).unwrap_err().to_string();
        assert!(err.contains("needs 64"), "{err}");
    }

    #[test]
    fn png16_maps_onto_its_range() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        img.save(dir.path().join("m.png")).unwrap();
        let r = ArrayRef { file: "m.png".into(), shape: vec![1, 2], dtype: DType::Png16, planes: 1, range: Some([0.5, 2.5]) };
        assert_eq!(read_flat(dir.path(), &r).unwrap(), vec![0.5, 2.5]);
        let bad = ArrayRef { shape: vec![2, 1], ..r };
        assert!(read_flat(dir.path(), &bad).is_err());
    }
}
