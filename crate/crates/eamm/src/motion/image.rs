//! RGB float images and binary PPM serialization.

use std::io::{Read, Write};

use super::MotionError;
use crate::diffmath::Tensor;

/// H x W x 3 image with values in [0, 1] (clamped at construction).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, MotionError> {
        if data.len() != height * width * 3 {
            return Err(MotionError::Contract(format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(MotionError::Contract("non-finite pixel value".to_string()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o] = rgb[0].clamp(0.0, 1.0);
        self.data[o + 1] = rgb[1].clamp(0.0, 1.0);
        self.data[o + 2] = rgb[2].clamp(0.0, 1.0);
    }

    /// Flat `[h*w, 3]` tensor view for graph ops.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, 3], self.data.clone())
            .expect("image data is finite")
    }

    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self, MotionError> {
        Image::new(height, width, t.data().to_vec())
    }

    /// Mean absolute per-element difference.
    pub fn l1_distance(&self, other: &Image) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// 2x2 box-average downsample (even dimensions required).
    pub fn box_down2(&self) -> Image {
        let (oh, ow) = (self.height / 2, self.width / 2);
        let mut data = vec![0.0; oh * ow * 3];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += self.data[((2 * oy + dy) * self.width + 2 * ox + dx) * 3 + ch];
                        }
                    }
                    data[(oy * ow + ox) * 3 + ch] = acc * 0.25;
                }
            }
        }
        Image { height: oh, width: ow, data }
    }

    /// Binary PPM (P6, 8-bit, max 255); values quantized by `round(p * 255)`.
    pub fn write_ppm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: Read>(r: &mut R) -> Result<Self, MotionError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut token = |bytes: &[u8]| -> Result<String, MotionError> {
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(MotionError::MalformedPpm("truncated header".to_string()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
        };
        let magic = token(&bytes)?;
        if magic != "P6" {
            return Err(MotionError::MalformedPpm(format!("bad magic {magic:?}")));
        }
        let width: usize = token(&bytes)?
            .parse()
            .map_err(|_| MotionError::MalformedPpm("bad width".to_string()))?;
        let height: usize = token(&bytes)?
            .parse()
            .map_err(|_| MotionError::MalformedPpm("bad height".to_string()))?;
        let maxval: usize = token(&bytes)?
            .parse()
            .map_err(|_| MotionError::MalformedPpm("bad maxval".to_string()))?;
        if maxval != 255 {
            return Err(MotionError::MalformedPpm(format!(
                "unsupported maxval {maxval}"
            )));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(MotionError::MalformedPpm("truncated pixel data".to_string()));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Image { height, width, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_out_of_range_values() {
        let img = Image::new(1, 2, vec![-0.5, 0.5, 2.0, 0.0, 1.0, 0.25]).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn ppm_round_trip_preserves_quantized_values() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&mut buf.as_slice()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second write is byte-identical.
        let mut buf2 = Vec::new();
        back.write_ppm(&mut buf2).unwrap();
        let mut buf3 = Vec::new();
        back.write_ppm(&mut buf3).unwrap();
        assert_eq!(buf2, buf3);
    }

    #[test]
    fn rejects_malformed_ppm() {
        let garbage = b"P5\n2 2\n255\nxxxx";
        assert!(Image::read_ppm(&mut garbage.as_slice()).is_err());
    }
}
