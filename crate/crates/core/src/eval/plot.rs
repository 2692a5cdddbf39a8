use std::path::Path;

use image::{Rgb, RgbImage};

use super::EvalError;

const PALETTE: [[u8; 3]; 6] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189], [90, 90, 90]];
const MARGIN: u32 = 20;

/// Line chart of each series against its index, written as PNG. Series are
/// coloured red, blue, green, orange, purple, gray in order. The y range
/// spans all finite values.
pub fn plot_curves(path: &Path, series: &[(String, Vec<f64>)], width: u32, height: u32) -> Result<(), EvalError> {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, width.saturating_sub(MARGIN), height.saturating_sub(MARGIN));
    for x in x0..=x1 {
        put(&mut img, x as i64, y1 as i64, axis);
    }
    for y in y0..=y1 {
        put(&mut img, x0 as i64, y as i64, axis);
    }

    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let longest = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2) - 1;
    let to_px = |i: usize, v: f64| {
        let x = x0 as f64 + (x1 - x0) as f64 * i as f64 / longest as f64;
        let y = y1 as f64 - (y1 - y0) as f64 * (v - lo) / (hi - lo);
        (x.round() as i64, y.round() as i64)
    };
    for (k, (_, values)) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let points: Vec<(i64, i64)> =
            values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| to_px(i, v)).collect();
        if let [only] = points.as_slice() {
            put(&mut img, only.0, only.1, color);
        }
        for pair in points.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
    }
    img.save(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

/// Trailing moving average over `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            values[start..=i].iter().sum::<f64>() / (i + 1 - start) as f64
        })
        .collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x_end, y_end): (i64, i64), color: Rgb<u8>) {
    let dx = (x_end - x).abs();
    let dy = -(y_end - y).abs();
    let (sx, sy) = (if x < x_end { 1 } else { -1 }, if y < y_end { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if x == x_end && y == y_end {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
        assert_eq!(smooth(&[2.0], 10), vec![2.0]);
    }

    #[test]
    fn writes_png_with_series_colour() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.png");
        plot_curves(&path, &[("a".into(), vec![0.0, 1.0, 0.5])], 120, 80).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (120, 80));
        assert!(img.pixels().any(|p| p.0 == PALETTE[0]));
    }
}
