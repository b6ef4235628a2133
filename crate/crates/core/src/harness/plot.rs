//! Static PNG plots: cumulative error curves and match overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::report::EvalReport;
use crate::error::Result;
use crate::geometry::MatchSet;
use crate::imageio::Image;

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

fn line(img: &mut RgbImage, p: (f64, f64), q: (f64, f64), c: [u8; 3]) {
    let n = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Fraction of pairs with error below x, one curve per report row, up to
/// the largest AUC threshold.
pub fn error_curves(report: &EvalReport, path: &Path) -> Result<()> {
    let (w, h, m) = (480u32, 320u32, 30.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let xmax = report.rows.iter().flat_map(|r| r.thresholds.iter().copied()).fold(1.0, f64::max);
    let to_px = |x: f64, y: f64| (m + x / xmax * (w as f64 - 2.0 * m), h as f64 - m - y * (h as f64 - 2.0 * m));
    line(&mut img, to_px(0.0, 0.0), to_px(xmax, 0.0), [0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), [0, 0, 0]);
    for (k, row) in report.rows.iter().enumerate() {
        let mut errs: Vec<f64> = row.errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
        errs.sort_by(|a, b| a.total_cmp(b));
        let n = errs.len().max(1) as f64;
        let c = PALETTE[k % PALETTE.len()];
        let mut prev = (0.0, 0.0);
        for (i, &e) in errs.iter().enumerate() {
            if e > xmax {
                break;
            }
            line(&mut img, to_px(prev.0, prev.1), to_px(e, prev.1), c);
            line(&mut img, to_px(e, prev.1), to_px(e, (i + 1) as f64 / n), c);
            prev = (e, (i + 1) as f64 / n);
        }
        line(&mut img, to_px(prev.0, prev.1), to_px(xmax, prev.1), c);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Both images side by side with one line per match, coloured by confidence
/// (blue low, red high). At most `max_lines` matches are drawn, evenly spaced.
pub fn match_overlay(a: &Image, b: &Image, matches: &MatchSet, max_lines: usize, path: &Path) -> Result<()> {
    let (w, h) = (a.width + b.width, a.height.max(b.height));
    let mut img = RgbImage::new(w as u32, h as u32);
    for (im, off) in [(a, 0), (b, a.width)] {
        for y in 0..im.height {
            for x in 0..im.width {
                let v = (im.at(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((x + off) as u32, y as u32, Rgb([v, v, v]));
            }
        }
    }
    let step = matches.len().div_ceil(max_lines.max(1)).max(1);
    for m in matches.entries.iter().step_by(step) {
        let c = m.conf.clamp(0.0, 1.0);
        let col = [(255.0 * c) as u8, 64, (255.0 * (1.0 - c)) as u8];
        line(&mut img, (m.xa, m.ya), (m.xb + a.width as f64, m.yb), col);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Match;
    use crate::harness::report::{EvalRow, Task};

    #[test]
    fn writes_pngs() {
        let d = tempfile::tempdir().unwrap();
        let r = EvalReport {
            task: Task::Homography,
            source: "oracle".into(),
            rows: vec![EvalRow {
                detector: "none".into(),
                size: None,
                scales: vec![8],
                thresholds: vec![3.0, 5.0, 10.0],
                auc: vec![0.5; 3],
                pairs: 3,
                failures: 1,
                mean_matches: 1.0,
                mean_raw_matches: 1.0,
                errors: vec![Some(0.5), Some(4.0), None],
                timings_ms: Default::default(),
            }],
        };
        error_curves(&r, &d.path().join("c.png")).unwrap();
        let img = Image::from_fn(20, 10, |r, c| (r + c) as f32 / 30.0);
        let ms = MatchSet::new(vec![Match { xa: 1.0, ya: 1.0, xb: 5.0, yb: 8.0, conf: 0.9, scale: 0.5 }]);
        match_overlay(&img, &img, &ms, 100, &d.path().join("o.png")).unwrap();
        assert_eq!(image::open(d.path().join("o.png")).unwrap().width(), 40);
    }
}
