//! Evaluation: PSNR / SSIM / MSE with a pluggable perceptual hook, paired
//! comparisons with sign tests, and file emission (CSV tables, PNG image
//! grids, SVG loss curves).

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, TensorF};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Sentinel for identical images, so tables never carry infinities.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips: Option<f64>,
    /// True when mse was exactly zero and psnr reports the cap sentinel.
    pub psnr_capped: bool,
}

/// External perceptual scorer (e.g. a learned patch similarity); the crate
/// ships none.
pub type PerceptualScorer = dyn Fn(&ImageBatch, &ImageBatch) -> Result<f64> + Sync;

/// Mean squared error over all pixels.
pub fn mse(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    a.pixels.check_same_shape(&b.pixels)?;
    let mut acc = 0.0_f64;
    for (x, y) in a.pixels.data().iter().zip(b.pixels.data()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    Ok(acc / a.pixels.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> (f64, bool) {
    if mse == 0.0 {
        (PSNR_CAP_DB, true)
    } else {
        (10.0 * (1.0 / mse).log10(), false)
    }
}

/// PSNR in dB at unit dynamic range.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindow {
    /// 11x11 Gaussian window with the given sigma (reference formulation).
    Gaussian11 { sigma: f64 },
    /// 8x8 uniform window.
    Uniform8,
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Gaussian11 { sigma: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self { c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

fn window_weights(window: SsimWindow) -> (usize, Vec<f64>) {
    match window {
        SsimWindow::Uniform8 => (8, vec![1.0 / 64.0; 64]),
        SsimWindow::Gaussian11 { sigma } => {
            let n = 11;
            let c = (n as f64 - 1.0) / 2.0;
            let mut w = Vec::with_capacity(n * n);
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    w.push(v);
                    total += v;
                }
            }
            for v in w.iter_mut() {
                *v /= total;
            }
            (n, w)
        }
    }
}

/// Single-scale SSIM averaged over valid window positions, channels, and
/// batch samples.
pub fn ssim(
    a: &ImageBatch,
    b: &ImageBatch,
    window: SsimWindow,
    constants: SsimConstants,
) -> Result<f64> {
    a.pixels.check_same_shape(&b.pixels)?;
    let (batch, ch, h, w) = (a.batch_size(), a.channels(), a.height(), a.width());
    let (n, weights) = window_weights(window);
    if h < n || w < n {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {n}x{n} SSIM window"
        )));
    }
    let mut acc = 0.0_f64;
    let mut count = 0usize;
    for bc in 0..batch * ch {
        let pa = &a.pixels.data()[bc * h * w..(bc + 1) * h * w];
        let pb = &b.pixels.data()[bc * h * w..(bc + 1) * h * w];
        for i0 in 0..=(h - n) {
            for j0 in 0..=(w - n) {
                let (mut mx, mut my) = (0.0_f64, 0.0_f64);
                let (mut sxx, mut syy, mut sxy) = (0.0_f64, 0.0_f64, 0.0_f64);
                let mut widx = 0usize;
                for di in 0..n {
                    let row = (i0 + di) * w + j0;
                    for dj in 0..n {
                        let wt = weights[widx];
                        widx += 1;
                        let x = pa[row + dj] as f64;
                        let y = pb[row + dj] as f64;
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                let num = (2.0 * mx * my + constants.c1) * (2.0 * cxy + constants.c2);
                let den = (mx * mx + my * my + constants.c1) * (vx + vy + constants.c2);
                acc += num / den;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// All metrics between a reconstruction and ground truth.
pub fn evaluate(
    recon: &ImageBatch,
    truth: &ImageBatch,
    scorer: Option<&PerceptualScorer>,
) -> Result<MetricResult> {
    let m = mse(recon, truth)?;
    let (p, capped) = psnr_from_mse(m);
    let s = ssim(recon, truth, SsimWindow::default(), SsimConstants::default())?;
    let lpips = match scorer {
        Some(f) => Some(f(recon, truth)?),
        None => None,
    };
    Ok(MetricResult { psnr: p, ssim: s, mse: m, lpips, psnr_capped: capped })
}

/// Two-sided sign test: ties dropped, binomial tail doubled, capped at 1.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.max(losses);
    let mut tail = 0.0_f64;
    for i in k..=n {
        tail += binomial(n, i);
    }
    (2.0 * tail / 2.0_f64.powi(n as i32)).min(1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0_f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct PairedSummary {
    /// metric name -> (mean A, mean B)
    pub means: BTreeMap<String, (f64, f64)>,
    /// metric name -> A win rate with ties counted half
    pub win_rates: BTreeMap<String, f64>,
    /// metric name -> two-sided sign-test p-value
    pub p_values: BTreeMap<String, f64>,
}

/// Seed-paired comparison of two equal-length metric lists.
pub fn paired_compare(a: &[MetricResult], b: &[MetricResult]) -> Result<PairedSummary> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired lists of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut means = BTreeMap::new();
    let mut win_rates = BTreeMap::new();
    let mut p_values = BTreeMap::new();
    // higher-is-better flag per metric
    let metrics: [(&str, fn(&MetricResult) -> f64, bool); 3] = [
        ("psnr", |m| m.psnr, true),
        ("ssim", |m| m.ssim, true),
        ("mse", |m| m.mse, false),
    ];
    for (name, get, higher) in metrics {
        let n = a.len() as f64;
        let mean_a = a.iter().map(|m| get(m)).sum::<f64>() / n.max(1.0);
        let mean_b = b.iter().map(|m| get(m)).sum::<f64>() / n.max(1.0);
        let mut wins = 0usize;
        let mut losses = 0usize;
        let mut score = 0.0_f64;
        for (ma, mb) in a.iter().zip(b) {
            let (va, vb) = (get(ma), get(mb));
            let better = if higher { va > vb } else { va < vb };
            let worse = if higher { va < vb } else { va > vb };
            if better {
                wins += 1;
                score += 1.0;
            } else if worse {
                losses += 1;
            } else {
                score += 0.5;
            }
        }
        means.insert(name.to_string(), (mean_a, mean_b));
        win_rates.insert(name.to_string(), if a.is_empty() { 0.5 } else { score / n });
        p_values.insert(name.to_string(), sign_test_p(wins, losses));
    }
    Ok(PairedSummary { means, win_rates, p_values })
}

/// One row of the result table.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub method: String,
    pub seed: u64,
    pub metrics: MetricResult,
    pub chosen_stage: String,
    pub best_loss: f64,
    pub wall_time_s: f64,
    /// (stage id, loss curve) pairs for the loss plot.
    pub loss_curves: Vec<(String, Vec<f64>)>,
    pub original: Option<ImageBatch>,
    pub reconstruction: Option<ImageBatch>,
}

pub const CSV_HEADER: &str = "method,seed,psnr,ssim,mse,lpips,chosen_stage,best_loss,wall_time_s";

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn results_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let lpips = r.metrics.lpips.map(fmt_f).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            fmt_f(r.metrics.psnr),
            fmt_f(r.metrics.ssim),
            fmt_f(r.metrics.mse),
            lpips,
            r.chosen_stage,
            fmt_f(r.best_loss),
            fmt_f(r.wall_time_s),
        ));
    }
    out
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Round-half-even quantization from [0, 1] to u8.
pub fn quantize_unit(v: f32) -> u8 {
    let t = (v.clamp(0.0, 1.0) as f64) * 255.0;
    let floor = t.floor();
    let frac = t - floor;
    let low = floor as u8;
    if frac > 0.5 || (frac == 0.5 && low % 2 == 1) {
        low.saturating_add(1)
    } else {
        low
    }
}

/// Write batches as a PNG grid: one row per batch, one column per sample.
/// Single-channel batches become grayscale, three-channel become RGB.
pub fn write_png_grid(rows: &[&ImageBatch], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no image rows".into()));
    }
    let (c, h, w) = (rows[0].channels(), rows[0].height(), rows[0].width());
    let cols = rows.iter().map(|b| b.batch_size()).max().unwrap();
    for b in rows {
        if b.channels() != c || b.height() != h || b.width() != w {
            return Err(Error::InvalidArgument("image rows with mixed shapes".into()));
        }
    }
    let (gh, gw) = (rows.len() * h, cols * w);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let pixel_at = |batch: &ImageBatch, s: usize, ch: usize, y: usize, x: usize| -> u8 {
        quantize_unit(batch.pixels.data()[((s * batch.channels() + ch) * h + y) * w + x])
    };
    match c {
        1 => {
            let mut img = image::GrayImage::new(gw as u32, gh as u32);
            for (row, batch) in rows.iter().enumerate() {
                for s in 0..batch.batch_size() {
                    for y in 0..h {
                        for x in 0..w {
                            let px = pixel_at(batch, s, 0, y, x);
                            img.put_pixel(
                                (s * w + x) as u32,
                                (row * h + y) as u32,
                                image::Luma([px]),
                            );
                        }
                    }
                }
            }
            img.save(path).map_err(|e| Error::InvalidArgument(format!("png write: {e}")))?;
        }
        3 => {
            let mut img = image::RgbImage::new(gw as u32, gh as u32);
            for (row, batch) in rows.iter().enumerate() {
                for s in 0..batch.batch_size() {
                    for y in 0..h {
                        for x in 0..w {
                            let px = [
                                pixel_at(batch, s, 0, y, x),
                                pixel_at(batch, s, 1, y, x),
                                pixel_at(batch, s, 2, y, x),
                            ];
                            img.put_pixel(
                                (s * w + x) as u32,
                                (row * h + y) as u32,
                                image::Rgb(px),
                            );
                        }
                    }
                }
            }
            img.save(path).map_err(|e| Error::InvalidArgument(format!("png write: {e}")))?;
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "PNG emission supports 1 or 3 channels, got {other}"
            )))
        }
    }
    Ok(())
}

/// Read a PNG grid back into batches of the given tile layout.
pub fn read_png_grid(path: &Path, rows: usize, cols: usize) -> Result<Vec<ImageBatch>> {
    let img = image::open(path).map_err(|e| Error::InvalidArgument(format!("png read: {e}")))?;
    let (gw, gh) = (img.width() as usize, img.height() as usize);
    if gh % rows != 0 || gw % cols != 0 {
        return Err(Error::InvalidArgument("grid does not divide image".into()));
    }
    let (h, w) = (gh / rows, gw / cols);
    let rgb = img.to_rgb8();
    let gray = img.to_luma8();
    let channels = match img.color().channel_count() {
        1 => 1,
        _ => 3,
    };
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut data = Vec::with_capacity(cols * channels * h * w);
        for s in 0..cols {
            for ch in 0..channels {
                for y in 0..h {
                    for x in 0..w {
                        let v = if channels == 1 {
                            gray.get_pixel((s * w + x) as u32, (r * h + y) as u32)[0]
                        } else {
                            rgb.get_pixel((s * w + x) as u32, (r * h + y) as u32)[ch]
                        };
                        data.push(v as f32 / 255.0);
                    }
                }
            }
        }
        out.push(ImageBatch::new(
            TensorF::new(vec![cols, channels, h, w], data)?,
            None,
        )?);
    }
    Ok(out)
}

/// Minimal SVG polyline plot of per-stage loss curves.
pub fn loss_curves_svg(curves: &[(String, Vec<f64>)]) -> String {
    let (width, height, margin) = (640.0_f64, 360.0_f64, 40.0_f64);
    let total: usize = curves.iter().map(|(_, c)| c.len()).sum();
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for (_, c) in curves {
        for &v in c {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() || total == 0 {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    let mut offset = 0usize;
    for (ci, (name, curve)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let mut points = String::new();
        for (i, &v) in curve.iter().enumerate() {
            let x = margin + (offset + i) as f64 / total.max(1) as f64 * (width - 2.0 * margin);
            let y = height - margin - (v - lo) / (hi - lo) * (height - 2.0 * margin);
            points.push_str(&format!("{x:.2},{y:.2} "));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>\n"
        ));
        let ly = margin + 14.0 * ci as f64;
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{ly:.2}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            width - margin - 120.0
        ));
        offset += curve.len();
    }
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"{:.2}\" font-size=\"11\" fill=\"#333\">min {lo:.4} max {hi:.4}</text>\n",
        height - 8.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Emit the result table, loss-curve plots, and original/reconstruction
/// grids into `out_dir`.
pub fn emit_report(records: &[BenchRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv_path = out_dir.join("results.csv");
    let mut f = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    f.write_all(results_csv(records).as_bytes()).map_err(|e| io_err(&csv_path, e))?;

    for r in records {
        let tag = format!("{}_seed{}", r.method, r.seed);
        if !r.loss_curves.is_empty() {
            let svg_path = out_dir.join(format!("loss_{tag}.svg"));
            std::fs::write(&svg_path, loss_curves_svg(&r.loss_curves))
                .map_err(|e| io_err(&svg_path, e))?;
        }
        if let (Some(orig), Some(recon)) = (&r.original, &r.reconstruction) {
            let png_path = out_dir.join(format!("grid_{tag}.png"));
            write_png_grid(&[orig, recon], &png_path)?;
        }
    }
    Ok(())
}
