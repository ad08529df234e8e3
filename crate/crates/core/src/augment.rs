//! Online training augmentation: horizontal flip and random erasing.

use rand::Rng;

use crate::image::{Grid, Image};
use crate::prior::MapPair;

/// Random-erasing parameters (probability, area fraction range, aspect
/// ratio range) following the cited method's defaults.
#[derive(Debug, Clone, Copy)]
pub struct EraseParams {
    pub prob: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for EraseParams {
    fn default() -> Self {
        EraseParams {
            prob: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.3),
        }
    }
}

pub fn flip_image(img: &mut Image) {
    for y in 0..img.h {
        let mut lo = 0;
        let mut hi = img.w - 1;
        while lo < hi {
            let a = img.pixel(y, lo);
            let b = img.pixel(y, hi);
            img.set_pixel(y, lo, b);
            img.set_pixel(y, hi, a);
            lo += 1;
            hi -= 1;
        }
    }
}

pub fn flip_grid(grid: &mut Grid) {
    for y in 0..grid.h {
        grid.data[y * grid.w..(y + 1) * grid.w].reverse();
    }
}

/// Erases one random rectangle with random pixel values. Follows the usual
/// sample-until-it-fits scheme; gives up after 100 attempts.
pub fn random_erase(img: &mut Image, params: &EraseParams, rng: &mut impl Rng) {
    let area = (img.h * img.w) as f64;
    for _ in 0..100 {
        let target = area * (params.area.0 + (params.area.1 - params.area.0) * rng.gen::<f64>());
        let aspect = params.aspect.0 + (params.aspect.1 - params.aspect.0) * rng.gen::<f64>();
        let eh = crate::math::sqrt(target * aspect) as usize;
        let ew = crate::math::sqrt(target / aspect) as usize;
        if eh == 0 || ew == 0 || eh >= img.h || ew >= img.w {
            continue;
        }
        let y0 = rng.gen_range(0..=img.h - eh);
        let x0 = rng.gen_range(0..=img.w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                img.set_pixel(y, x, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        return;
    }
}

/// Applies flip (to image and maps together) and random erasing (image
/// only; the maps stay the ground truth of the un-erased figure).
pub fn augment(img: &mut Image, maps: &mut MapPair, params: &EraseParams, rng: &mut impl Rng) {
    if rng.gen_bool(0.5) {
        flip_image(img);
        flip_grid(&mut maps.parsing);
        flip_grid(&mut maps.segmentation);
    }
    if rng.gen_bool(params.prob) {
        random_erase(img, params, rng);
    }
}
