//! Lightweight pixel containers shared by the prior pipeline, the data
//! augmentation, and the corpus generator in the companion crate.

use alloc::vec;
use alloc::vec::Vec;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            rgb: vec![0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// Normalizes pixels into [-1, 1] in CHW order.
    pub fn to_chw(&self) -> Vec<f64> {
        let sp = self.h * self.w;
        let mut out = vec![0.0; 3 * sp];
        for p in 0..sp {
            for ch in 0..3 {
                out[ch * sp + p] = self.rgb[p * 3 + ch] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        out
    }
}

/// Single-channel 8-bit grid (label map or binary mask), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}
