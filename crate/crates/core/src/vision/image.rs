//! Plain pixel images: HWC row-major, 3 channels, values in [0, 1].

use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>, // h * w * 3, row-major HWC
}

impl Image {
    pub fn new(h: usize, w: usize) -> Image {
        Image {
            h,
            w,
            data: vec![0.0; h * w * CHANNELS],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), h * w * CHANNELS);
        Image { h, w, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.w + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Flat `[H*W*C]` tensor view, not clamped.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.data.len()], self.data.clone())
    }

    /// Builds an image from a flat tensor, clamping into [0, 1]. Clamping is
    /// only legitimate at final output emission, never inside a loss path.
    pub fn from_tensor_clamped(t: &Tensor, h: usize, w: usize) -> Image {
        assert_eq!(t.len(), h * w * CHANNELS);
        Image {
            h,
            w,
            data: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// 8-bit binary PPM (P6) preview bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}
