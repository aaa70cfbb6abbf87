//! The verbs behind the `ptychonet` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array2, Zip};
use ptychonet::engine::{benchmark_sweep, run_with, Checkpoint, ReconConfig, ReconOutput, RunMetrics, RunOptions, SweepCell};
use ptychonet::C64;
use serde::Serialize;
use serde_json::json;

use crate::config::{self, SimulateConfig, SweepConfig, SCHEMA_KINDS};
use crate::render::{self, Series, AMPLITUDE_CONVENTION, PHASE_CONVENTION};
use crate::store::{self, DataKind, Dataset, CHECKPOINT_FILE, MANIFEST_FILE};

/// Flags shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Globals {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    fn config(&self) -> Result<&Path> {
        self.config.as_deref().ok_or_else(|| anyhow!("--config is required"))
    }

    fn apply(&self, cfg: &mut ReconConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.deterministic |= self.deterministic;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn simulate(g: &Globals, preset: Option<&str>) -> Result<Dataset> {
    let mut cfg: SimulateConfig = match (preset, &g.config) {
        (Some(name), None) => config::preset(name)?,
        (None, Some(path)) => config::load(path)?,
        (Some(_), Some(_)) => bail!("give either --preset or --config, not both"),
        (None, None) => bail!("simulate needs --config <file> or --preset <name>"),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    let out = g.out()?;
    let data = cfg.generate()?;
    store::save_dataset(out, &data)?;
    store::write_json(&out.join("simulate-config.json"), &cfg)?;
    log::info!("wrote {:?} dataset with {} measurements to {}", data.kind(), measurement_count(&data), out.display());
    Ok(data)
}

fn measurement_count(d: &Dataset) -> usize {
    match d {
        Dataset::Fp(d) => d.measurements.len(),
        Dataset::Sim(d) => d.measurements.len(),
        Dataset::Spi(d) => d.measurements.len(),
    }
}

/// Per-update loss table: `update_index, epoch, loss[, rel_error]`.
///
/// Updates and epochs count from 1; `rel_error` (only with ground truth)
/// is filled on the last update of each epoch.
pub fn write_loss_csv(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let rel = m.rel_error_per_epoch.as_ref();
    let mut header = vec!["update_index", "epoch", "loss"];
    if rel.is_some() {
        header.push("rel_error");
    }
    w.write_record(&header)?;
    let bpe = m.batches_per_epoch.max(1);
    for (i, loss) in m.loss_per_update.iter().enumerate() {
        let epoch = i / bpe;
        let mut row = vec![(i + 1).to_string(), (epoch + 1).to_string(), loss.to_string()];
        if let Some(rel) = rel {
            let closes_epoch = (i + 1) % bpe == 0;
            row.push(if closes_epoch { rel.get(epoch).map(|v| v.to_string()).unwrap_or_default() } else { String::new() });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch table: `epoch, loss[, rel_error][, passband_error, outer_band_error]`.
fn write_epoch_csv(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch", "loss"];
    if m.rel_error_per_epoch.is_some() {
        header.push("rel_error");
    }
    if m.band_error_per_epoch.is_some() {
        header.extend(["passband_error", "outer_band_error"]);
    }
    w.write_record(&header)?;
    for (e, loss) in m.loss_per_epoch.iter().enumerate() {
        let mut row = vec![(e + 1).to_string(), loss.to_string()];
        if let Some(r) = &m.rel_error_per_epoch {
            row.push(r[e].to_string());
        }
        if let Some(b) = &m.band_error_per_epoch {
            row.extend([b[e].0.to_string(), b[e].1.to_string()]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    tool_version: &'static str,
    data: String,
    config: &'a ReconConfig,
    initial_loss: f64,
    final_loss: f64,
    final_rel_error: Option<f64>,
    epochs: usize,
    update_count: usize,
    batches_per_epoch: usize,
    /// Zero under `--deterministic`.
    wall_time_s: f64,
    resumed_from_epoch: Option<usize>,
    rendering: BTreeMap<&'static str, &'static str>,
}

/// Writes the recovered object as raw planes plus PNG views.
fn write_object(out: &Path, kind: DataKind, object: &Array2<C64>) -> Result<()> {
    match kind {
        DataKind::Fp => {
            store::save_image(out, "object", &object.mapv(|z| z.re), Some(&object.mapv(|z| z.im)))?;
            render::save_complex(out, object)
        }
        DataKind::Sim | DataKind::Spi => {
            let re = object.mapv(|z| z.re);
            store::save_image(out, "object", &re, None)?;
            render::save_gray(&out.join("object.png"), &render::normalized(&re))
        }
    }
}

pub fn reconstruct(g: &Globals, data_dir: &Path, checkpoint_every: usize, resume: Option<&Path>) -> Result<ReconOutput> {
    let out = g.out()?.to_path_buf();
    let data = store::load_dataset(data_dir)?;
    let (mut cfg, checkpoint) = match (resume, &g.config) {
        (Some(ck), cfg_path) => {
            let (saved, ck) = store::load_checkpoint(ck)?;
            let cfg = match cfg_path {
                Some(p) => config::load(p)?,
                None => saved,
            };
            (cfg, Some(ck))
        }
        (None, Some(p)) => (config::load::<ReconConfig>(p)?, None),
        (None, None) => bail!("reconstruct needs --config <file> (or --resume <checkpoint>)"),
    };
    g.apply(&mut cfg);
    create_dir(&out)?;
    let resumed_from = checkpoint.as_ref().map(|c| c.epochs_done);

    let ck_root = out.join("checkpoints");
    let cfg_for_ck = cfg.clone();
    let mut sink = |ck: &Checkpoint| -> ptychonet::Result<()> {
        let dir = ck_root.join(format!("epoch_{:04}", ck.epochs_done));
        store::save_checkpoint(&dir, &cfg_for_ck, ck).map_err(|e| ptychonet::Error::Config(format!("checkpoint: {e:#}")))
    };
    let opts = RunOptions {
        resume: checkpoint,
        checkpoint_every,
        on_checkpoint: if checkpoint_every > 0 { Some(&mut sink) } else { None },
        ..Default::default()
    };
    let result = run_with(data.as_ref(), &cfg, opts).with_context(|| format!("reconstruction of {} failed", data_dir.display()))?;

    let mut metrics = result.metrics.clone();
    if g.deterministic {
        metrics.wall_time_s = 0.0;
    }
    write_object(&out, data.kind(), &result.object)?;
    write_loss_csv(&out.join("loss.csv"), &metrics)?;
    write_epoch_csv(&out.join("epochs.csv"), &metrics)?;
    if !metrics.loss_per_epoch.is_empty() {
        let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect::<Vec<_>>();
        let mut series = vec![Series { label: "loss".into(), points: pts(&metrics.loss_per_epoch) }];
        if let Some(rel) = &metrics.rel_error_per_epoch {
            series.push(Series { label: "relative error".into(), points: pts(rel) });
        }
        render::plot_log(&out.join("loss.png"), &format!("{} / {}", cfg.loss.label(), cfg.optimizer.kind.name()), "epoch", "value", &series)?;
    }
    let rendering = BTreeMap::from([("phase.png", PHASE_CONVENTION), ("amplitude.png", AMPLITUDE_CONVENTION)]);
    let summary = RunSummary {
        tool_version: env!("CARGO_PKG_VERSION"),
        data: data_dir.display().to_string(),
        config: &cfg,
        initial_loss: metrics.initial_loss,
        final_loss: metrics.final_loss,
        final_rel_error: metrics.final_rel_error,
        epochs: metrics.loss_per_epoch.len(),
        update_count: metrics.update_count,
        batches_per_epoch: metrics.batches_per_epoch,
        wall_time_s: metrics.wall_time_s,
        resumed_from_epoch: resumed_from,
        rendering,
    };
    store::write_json(&out.join("summary.json"), &summary)?;
    log::info!(
        "final loss {:.4e}{} after {} updates; outputs in {}",
        metrics.final_loss,
        metrics.final_rel_error.map(|e| format!(", relative error {e:.4}")).unwrap_or_default(),
        metrics.update_count,
        out.display()
    );
    Ok(ReconOutput { metrics, ..result })
}

fn cell_label(c: &ReconConfig) -> String {
    format!("{} {} lr={:e} batch={}", c.loss.label(), c.optimizer.kind.name(), c.optimizer.lr, c.schedule.batch_size)
}

/// Long-format sweep table: one row per cell and series point.
fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "loss_case", "optimizer", "lr", "batch_size", "status", "series", "index", "epoch", "loss", "rel_error"])?;
    for (i, cell) in cells.iter().enumerate() {
        let c = &cell.config;
        let base = [i.to_string(), c.loss.label(), c.optimizer.kind.name().into(), c.optimizer.lr.to_string(), c.schedule.batch_size.to_string()];
        let row = |status: &str, series: &str, index: String, epoch: String, loss: String, rel: String| {
            let mut r = base.to_vec();
            r.extend([status.to_string(), series.into(), index, epoch, loss, rel]);
            r
        };
        match &cell.outcome {
            Err(e) => w.write_record(row(&format!("error: {e}"), "", String::new(), String::new(), String::new(), String::new()))?,
            Ok(m) => {
                let bpe = m.batches_per_epoch.max(1);
                for (u, l) in m.loss_per_update.iter().enumerate() {
                    w.write_record(row("ok", "update", (u + 1).to_string(), (u / bpe + 1).to_string(), l.to_string(), String::new()))?;
                }
                for (e, l) in m.loss_per_epoch.iter().enumerate() {
                    let rel = m.rel_error_per_epoch.as_ref().map(|r| r[e].to_string()).unwrap_or_default();
                    w.write_record(row("ok", "epoch", ((e + 1) * bpe).to_string(), (e + 1).to_string(), l.to_string(), rel))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One summary row per cell, including the tuned learning rate.
fn write_cells_csv(path: &Path, cells: &[SweepCell], deterministic: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "label", "status", "final_loss", "final_rel_error", "update_count", "wall_time_s", "tuning"])?;
    for (i, cell) in cells.iter().enumerate() {
        let tuning = cell
            .tuning
            .iter()
            .map(|(lr, r)| match r {
                Ok(l) => format!("{lr:e}:{l:e}"),
                Err(_) => format!("{lr:e}:failed"),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let mut rec = vec![i.to_string(), cell_label(&cell.config)];
        match &cell.outcome {
            Ok(m) => rec.extend([
                "ok".into(),
                m.final_loss.to_string(),
                m.final_rel_error.map(|e| e.to_string()).unwrap_or_default(),
                m.update_count.to_string(),
                if deterministic { "0".into() } else { m.wall_time_s.to_string() },
            ]),
            Err(e) => rec.extend([format!("error: {e}"), String::new(), String::new(), String::new(), String::new()]),
        }
        rec.push(tuning);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(g: &Globals, data_dir: &Path) -> Result<Vec<SweepCell>> {
    let mut cfg: SweepConfig = config::load(g.config()?)?;
    g.apply(&mut cfg.base);
    let out = g.out()?;
    let data = store::load_dataset(data_dir)?;
    create_dir(out)?;
    let cells = benchmark_sweep(data.as_ref(), &cfg.base, &cfg.axes)?;
    for cell in &cells {
        if let Err(e) = &cell.outcome {
            log::warn!("cell {} failed: {e}", cell_label(&cell.config));
        }
    }
    write_sweep_csv(&out.join("sweep.csv"), &cells)?;
    write_cells_csv(&out.join("cells.csv"), &cells, g.deterministic)?;
    store::write_json(&out.join("sweep-config.json"), &cfg)?;

    let axes = &cfg.axes;
    let mut figures: Vec<&str> = Vec::new();
    if axes.lrs.is_some() || axes.tune_lr.is_some() {
        figures.push("lr");
    }
    if axes.optimizers.is_some() {
        figures.push("optimizer");
    }
    if axes.losses.is_some() {
        figures.push("loss_case");
    }
    if axes.batch_sizes.is_some() {
        figures.push("batch_size");
    }
    if figures.is_empty() {
        figures.push("cell");
    }
    let curves = |per_update: bool| -> Vec<Series> {
        cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().map(|m| (c, m)))
            .map(|(c, m)| {
                let bpe = m.batches_per_epoch.max(1) as f64;
                let points = m
                    .loss_per_epoch
                    .iter()
                    .enumerate()
                    .map(|(e, &l)| ((e + 1) as f64 * if per_update { bpe } else { 1.0 }, l))
                    .collect();
                Series { label: cell_label(&c.config), points }
            })
            .collect()
    };
    let by_epoch = curves(false);
    if by_epoch.iter().any(|s| !s.points.is_empty()) {
        for axis in &figures {
            render::plot_log(&out.join(format!("sweep_{axis}_epoch.png")), &format!("loss vs epoch ({axis})"), "epoch", "loss", &by_epoch)?;
        }
        if axes.batch_sizes.is_some() {
            render::plot_log(&out.join("sweep_batch_size_update.png"), "loss vs update count", "updates", "loss", &curves(true))?;
        }
    }
    Ok(cells)
}

fn load_object(path: &Path) -> Result<Array2<C64>> {
    let descriptor = if path.is_dir() { path.join("object.json") } else { path.to_path_buf() };
    let planes = store::load_image(&descriptor)?;
    Ok(match planes.as_slice() {
        [re] => re.mapv(|v| C64::new(v, 0.0)),
        [re, im] => Zip::from(re).and(im).map_collect(|&r, &i| C64::new(r, i)),
        _ => bail!("{}: expected one or two planes", descriptor.display()),
    })
}

pub fn render(g: &Globals, input: Option<&Path>, fuse: Option<&[PathBuf]>) -> Result<()> {
    let out = g.out()?;
    match (input, fuse) {
        (Some(input), None) => {
            create_dir(out)?;
            let obj = load_object(input)?;
            render::save_complex(out, &obj)
        }
        (None, Some(paths)) => {
            let channels = paths
                .iter()
                .map(|p| {
                    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                        render::read_gray_levels(p)
                    } else {
                        Ok(render::amplitude_levels(&load_object(p)?))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let img = render::fuse_color([&channels[0], &channels[1], &channels[2]])?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            img.save(out).with_context(|| format!("cannot write {}", out.display()))
        }
        (Some(_), Some(_)) => bail!("give either --input or --fuse-color, not both"),
        (None, None) => bail!("render needs --input <run dir> or --fuse-color <r> <g> <b>"),
    }
}

pub fn info(g: &Globals, path: Option<&Path>, schema: Option<&str>) -> Result<()> {
    if let Some(kind) = schema {
        let kinds: Vec<&str> = if kind == "all" { SCHEMA_KINDS.to_vec() } else { vec![kind] };
        for k in kinds {
            let value = config::schema(k)?;
            match &g.out {
                Some(dir) => {
                    create_dir(dir)?;
                    store::write_json(&dir.join(format!("{k}.schema.json")), &value)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
        }
        return Ok(());
    }
    let path = path.ok_or_else(|| anyhow!("info needs a path or --schema <kind>"))?;
    let has = |f: &str| path.join(f).is_file();
    let report = if has(MANIFEST_FILE) || path.file_name().is_some_and(|f| f == MANIFEST_FILE) {
        let (m, _) = store::read_manifest(path)?;
        let data = store::load_dataset(path)?;
        let shapes: Vec<_> = m.measurements.iter().take(1).map(|r| r.shape.clone()).collect();
        let mut v = json!({
            "format_version": m.format_version,
            "kind": m.kind,
            "measurements": measurement_count(&data),
            "measurement_shape": shapes.first(),
            "ground_truth": data.has_ground_truth(),
            "provenance": m.provenance,
        });
        if let Some(o) = &m.optics {
            v["mode"] = json!(m.mode);
            v["optics"] = json!({
                "lambda_um": o.lambda_um, "na": o.na, "n_high": o.n_high, "stride": o.stride,
                "px_high_um": o.px_high_um, "illuminations": o.n_illuminations(), "synthetic_na": o.synthetic_na(),
            });
        }
        v
    } else if has("summary.json") {
        store::read_json::<serde_json::Value>(&path.join("summary.json"))?
    } else if has(CHECKPOINT_FILE) {
        let (cfg, ck) = store::load_checkpoint(path)?;
        json!({ "checkpoint_epochs": ck.epochs_done, "updates": ck.state.step_count, "loss": cfg.loss.label(), "optimizer": cfg.optimizer.kind.name() })
    } else {
        bail!("{} is not a dataset, run or checkpoint directory", path.display());
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
