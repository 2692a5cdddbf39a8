use std::io::Cursor;

use image::{imageops, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::ImageError;

/// Side length of every image fed to the encoder.
pub const DEFAULT_SIZE: usize = 64;

/// RGB image with values in `[0, 1]`, stored row-major with the three
/// channels of each pixel adjacent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::Shape { expected: height * width * 3, found: data.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageError::Range);
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageTensor { height, width, data: vec![value; height * width * 3] }
    }

    /// All-zero image, used when a step produced no queries.
    pub fn blank(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Uniform mid-gray stand-in for unresolvable retrieval queries.
    pub fn placeholder(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.5)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c];
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sums.map(|s| s / n)
    }

    fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer matches dimensions")
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        ImageTensor { height: img.height() as usize, width: img.width() as usize, data }
    }

    /// Rounds every value to the nearest 8-bit level, so the tensor survives
    /// a PNG round trip unchanged.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        ImageTensor { height: self.height, width: self.width, data }
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Decodes an image file and center-crops/resizes it to `size x size`.
    pub fn load_canonical(path: &std::path::Path, size: usize) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Decode(format!("{}: {e}", path.display())))?;
        Ok(Self::crop_resize(&img.to_rgb8(), size))
    }

    /// Center-crops to a square and resizes to `size x size`.
    pub fn to_canonical(&self, size: usize) -> Self {
        if self.height == size && self.width == size {
            return self.clone();
        }
        Self::crop_resize(&self.to_rgb8(), size)
    }

    fn crop_resize(rgb: &RgbImage, size: usize) -> Self {
        let side = rgb.width().min(rgb.height());
        let x0 = (rgb.width() - side) / 2;
        let y0 = (rgb.height() - side) / 2;
        let square = imageops::crop_imm(rgb, x0, y0, side, side).to_image();
        let resized = if side as usize == size {
            square
        } else {
            imageops::resize(&square, size as u32, size as u32, imageops::FilterType::Triangle)
        };
        Self::from_rgb8(&resized)
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_png()).map_err(|e| ImageError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_tensor_is_exact() {
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64 * 0.37).fract()).collect();
        let img = ImageTensor::new(4, 5, data).unwrap().quantized();
        let back = ImageTensor::from_png(&img.to_png()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(matches!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.0]), Err(ImageError::Range)));
        assert!(matches!(ImageTensor::new(1, 2, vec![0.0; 3]), Err(ImageError::Shape { .. })));
    }

    #[test]
    fn channel_means_of_filled_image() {
        assert_eq!(ImageTensor::placeholder(3, 3).channel_means(), [0.5; 3]);
    }
}
