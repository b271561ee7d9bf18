//! Minimal PNG plotting for training logs and qualitative outputs.
//!
//! Everything here is deliberately font-free: charts are axes, gridlines and
//! polylines only, so the module has no text-rendering dependency. Callers
//! that need labels write a sidecar text file next to the image.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::FrameImage;

/// One polyline on a [`line_chart`]. Colors are assigned from a fixed
/// palette by series index; `label` goes into the sidecar legend file.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points }
    }

    /// Convenience: y-values plotted against their index.
    pub fn from_values(label: impl Into<String>, values: &[f64]) -> Self {
        let points = values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
        Self::new(label, points)
    }
}

const CHART_WIDTH: u32 = 640;
const CHART_HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Palette used in series order (wraps around when exhausted).
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

pub fn series_color(index: usize) -> Rgb<u8> {
    PALETTE[index % PALETTE.len()]
}

fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn finite_bounds(series: &[Series]) -> Option<((f64, f64), (f64, f64))> {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    if xmin.is_finite() && ymin.is_finite() {
        // Degenerate ranges still need a drawable span.
        if xmax - xmin < 1e-12 {
            xmin -= 0.5;
            xmax += 0.5;
        }
        if ymax - ymin < 1e-12 {
            ymin -= 0.5;
            ymax += 0.5;
        }
        Some(((xmin, xmax), (ymin, ymax)))
    } else {
        None
    }
}

/// Render polylines into a fixed-size chart with a framed plot area and
/// light gridlines. A `<stem>.legend.txt` sidecar lists series labels in
/// palette order, since the chart itself carries no text.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::validation("line_chart needs at least one series"));
    }
    let ((xmin, xmax), (ymin, ymax)) = finite_bounds(series)
        .ok_or_else(|| Error::validation("line_chart needs at least one finite point"))?;

    let mut img = ImageBuffer::from_pixel(CHART_WIDTH, CHART_HEIGHT, BACKGROUND);
    let x0 = MARGIN as f64;
    let x1 = (CHART_WIDTH - MARGIN) as f64;
    let y0 = (CHART_HEIGHT - MARGIN) as f64; // bottom (y grows downward)
    let y1 = MARGIN as f64; // top
    let to_px = |x: f64, y: f64| {
        let fx = (x - xmin) / (xmax - xmin);
        let fy = (y - ymin) / (ymax - ymin);
        (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
    };

    for i in 1..10 {
        let fx = x0 + (x1 - x0) * i as f64 / 10.0;
        let fy = y0 + (y1 - y0) * i as f64 / 10.0;
        draw_segment(&mut img, (fx, y0), (fx, y1), GRID);
        draw_segment(&mut img, (x0, fy), (x1, fy), GRID);
    }
    draw_segment(&mut img, (x0, y0), (x1, y0), AXIS);
    draw_segment(&mut img, (x0, y0), (x0, y1), AXIS);
    draw_segment(&mut img, (x1, y0), (x1, y1), AXIS);
    draw_segment(&mut img, (x0, y1), (x1, y1), AXIS);

    for (i, s) in series.iter().enumerate() {
        let color = series_color(i);
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for pair in pts.windows(2) {
            draw_segment(&mut img, pair[0], pair[1], color);
        }
        if pts.len() == 1 {
            draw_segment(&mut img, pts[0], pts[0], color);
        }
    }
    save_rgb(path, &img)?;

    let legend: String = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = series_color(i);
            format!("#{:02x}{:02x}{:02x} {}\n", c.0[0], c.0[1], c.0[2], s.label)
        })
        .collect();
    let legend_path = path.with_extension("legend.txt");
    std::fs::write(&legend_path, legend).map_err(|e| Error::io(&legend_path, e))?;
    Ok(())
}

/// Eye-openness raster: one horizontal strip per row (clip), frames along
/// x, brightness proportional to openness so blinks show as dark ticks.
pub fn blink_raster(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::validation("blink_raster needs non-empty rows"));
    }
    const STRIP_HEIGHT: u32 = 12;
    const GAP: u32 = 2;
    const SCALE_X: u32 = 3;
    let frames = rows.iter().map(Vec::len).max().unwrap() as u32;
    let width = frames * SCALE_X;
    let height = rows.len() as u32 * (STRIP_HEIGHT + GAP) - GAP;
    let mut img = ImageBuffer::from_pixel(width, height, BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        let top = r as u32 * (STRIP_HEIGHT + GAP);
        for (f, v) in row.iter().enumerate() {
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let color = Rgb([level, level, level]);
            for dx in 0..SCALE_X {
                for dy in 0..STRIP_HEIGHT {
                    img.put_pixel(f as u32 * SCALE_X + dx, top + dy, color);
                }
            }
        }
    }
    save_rgb(path, &img)
}

fn luma_from_frame(frame: &FrameImage) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let (h, w) = frame.pixels.dim();
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for ((y, x), v) in frame.pixels.indexed_iter() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, Luma([level]));
    }
    img
}

/// Write one grayscale frame as PNG.
pub fn save_frame_png(path: &Path, frame: &FrameImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    luma_from_frame(frame)
        .save(path)
        .map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
}

/// Horizontal concatenation of equally sized frames with a thin separator,
/// e.g. a latent-interpolation sweep laid out left to right.
pub fn image_strip(path: &Path, frames: &[FrameImage]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::validation("image_strip needs at least one frame"));
    }
    let (h, w) = frames[0].pixels.dim();
    if frames.iter().any(|f| f.pixels.dim() != (h, w)) {
        return Err(Error::validation("image_strip frames must share one size"));
    }
    const SEP: u32 = 2;
    let total_w = frames.len() as u32 * w as u32 + (frames.len() as u32 - 1) * SEP;
    let mut img = ImageBuffer::from_pixel(total_w, h as u32, Luma([255u8]));
    for (i, frame) in frames.iter().enumerate() {
        let left = i as u32 * (w as u32 + SEP);
        for ((y, x), v) in frame.pixels.indexed_iter() {
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(left + x as u32, y as u32, Luma([level]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path)
        .map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
}

/// Load a grayscale PNG back into a [`FrameImage`] (values in `[0, 1]`).
pub fn load_frame_png(path: &Path) -> Result<FrameImage> {
    let img = image::open(path)
        .map_err(|e| Error::validation(format!("png decode {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut pixels = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        pixels[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(FrameImage::new(pixels))
}
