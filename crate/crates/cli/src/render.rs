//! PNG views of arrays and log-scale loss plots. These are outputs only;
//! nothing downstream reads them back as data.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, ensure, Context, Result};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use plotters::prelude::*;
use ptychonet::C64;

/// How phase images are encoded; repeated in run summaries.
pub const PHASE_CONVENTION: &str = "phase in [-pi, pi] mapped linearly to gray levels [0, 255]";
pub const AMPLITUDE_CONVENTION: &str = "amplitude divided by its maximum, mapped linearly to gray levels [0, 255]";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray(values: &Array2<f64>) -> GrayImage {
    let (h, w) = values.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(values[[y as usize, x as usize]])]))
}

/// Scales `values` linearly so its range spans [0, 1].
pub fn normalized(values: &Array2<f64>) -> Array2<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.mapv(|v| (v - lo) / span)
}

pub fn amplitude_levels(obj: &Array2<C64>) -> Array2<f64> {
    let amp = obj.mapv(|z| z.norm());
    let peak = amp.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        amp / peak
    } else {
        amp
    }
}

pub fn phase_levels(obj: &Array2<C64>) -> Array2<f64> {
    obj.mapv(|z| (z.arg() + PI) / (2.0 * PI))
}

pub fn save_gray(path: &Path, levels: &Array2<f64>) -> Result<()> {
    gray(levels).save(path).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes `amplitude.png` and `phase.png` for a complex object.
pub fn save_complex(dir: &Path, obj: &Array2<C64>) -> Result<()> {
    save_gray(&dir.join("amplitude.png"), &amplitude_levels(obj))?;
    save_gray(&dir.join("phase.png"), &phase_levels(obj))
}

/// Stacks three gray channels into one RGB image.
pub fn fuse_color(channels: [&Array2<f64>; 3]) -> Result<RgbImage> {
    let dim = channels[0].dim();
    ensure!(channels.iter().all(|c| c.dim() == dim), "colour channels differ in size");
    let (h, w) = dim;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: &Array2<f64>| to_u8(c[[y as usize, x as usize]]);
        Rgb([at(channels[0]), at(channels[1]), at(channels[2])])
    }))
}

/// Reads an 8- or 16-bit grayscale PNG as levels in [0, 1].
pub fn read_gray_levels(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).with_context(|| format!("cannot read {}", path.display()))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0))
}

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
];

/// Registers a system TTF for plot labels once. `PTYCHONET_FONT` overrides
/// the search; without any font, plots are drawn unlabelled.
fn fonts_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("PTYCHONET_FONT").ok();
        let found = env.iter().map(String::as_str).chain(FONT_CANDIDATES).find_map(|p| std::fs::read(p).ok());
        match found {
            Some(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            None => {
                log::warn!("no TTF font found; plots will have no axis labels (set PTYCHONET_FONT)");
                false
            }
        }
    })
}

/// One curve of a loss plot.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Log-scale line plot of several loss curves.
pub fn plot_log(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let positive: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
    ensure!(!positive.is_empty(), "nothing to plot for {title}");
    let x_max = positive.iter().map(|p| p.0).fold(1.0, f64::max);
    let x_min = positive.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).min(0.0);
    let y_min = positive.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = positive.iter().map(|p| p.1).fold(0.0, f64::max);
    let (y_lo, y_hi) = if y_max > y_min { (y_min / 1.5, y_max * 1.5) } else { (y_min / 10.0, y_min * 10.0) };
    let labelled = fonts_available();

    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if labelled {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(45).y_label_area_size(80);
    }
    let mut chart = builder.build_cartesian_2d(x_min..x_max, (y_lo..y_hi).log_scale()).map_err(|e| err(&e))?;
    if labelled {
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .y_label_formatter(&|v| format!("{v:.1e}"))
            .draw()
            .map_err(|e| err(&e))?;
    } else {
        chart.configure_mesh().disable_x_mesh().disable_y_mesh().draw().map_err(|e| err(&e))?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<_> = s.points.iter().copied().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
        let drawn = chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(|e| err(&e))?;
        if labelled {
            drawn.label(s.label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if labelled && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperRight)
            .draw()
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
