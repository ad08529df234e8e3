//! Coarse prior of body part locations.
//!
//! Fuses a per-pixel parsing map with a binary segmentation map into a
//! feature-map-sized mask, the vertical region of interest of the body, and
//! K horizontal strips. When the parsing map lacks a head or both legs the
//! pipeline falls back to an even division of the full height.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid_err, shape_err, Result};
use crate::image::Grid;
use crate::ops;

/// Default pixel-count threshold for the head/leg presence check.
pub const MIN_PIXELS: usize = 10;
/// Background label in parsing maps.
pub const BACKGROUND: u8 = 0;

static CONSTRUCTED: AtomicUsize = AtomicUsize::new(0);

/// How many `PartPrior` values have been built since process start. Lets
/// tests assert that inference paths never touch the prior pipeline.
pub fn construction_count() -> usize {
    CONSTRUCTED.load(Ordering::Relaxed)
}

/// Parsing + segmentation maps for one image, at image resolution.
#[derive(Debug, Clone)]
pub struct MapPair {
    pub parsing: Grid,
    pub segmentation: Grid,
}

impl MapPair {
    pub fn new(parsing: Grid, segmentation: Grid) -> Result<Self> {
        if parsing.h != segmentation.h || parsing.w != segmentation.w {
            return Err(shape_err!(
                "parsing {}x{} vs segmentation {}x{}",
                parsing.h,
                parsing.w,
                segmentation.h,
                segmentation.w
            ));
        }
        Ok(MapPair {
            parsing,
            segmentation,
        })
    }
}

/// Feature-map-sized body mask with ROI boundaries and K strip extents.
///
/// `strips` are half-open row intervals partitioning `[roi_top,
/// roi_bottom+1)`, or the full height when `fallback_used` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartPrior {
    pub mask: Grid,
    pub roi_top: usize,
    pub roi_bottom: usize,
    pub strips: Vec<(usize, usize)>,
    pub fallback_used: bool,
}

impl PartPrior {
    fn new(mask: Grid, roi_top: usize, roi_bottom: usize, strips: Vec<(usize, usize)>, fallback_used: bool) -> Self {
        CONSTRUCTED.fetch_add(1, Ordering::Relaxed);
        PartPrior {
            mask,
            roi_top,
            roi_bottom,
            strips,
            fallback_used,
        }
    }
}

/// True iff the parsing map contains at least `min_pixels` head pixels and
/// at least `min_pixels` pixels of some leg label.
pub fn presence_check(parsing: &Grid, head_label: u8, leg_labels: &[u8], min_pixels: usize) -> bool {
    if parsing.count(head_label) < min_pixels {
        return false;
    }
    leg_labels
        .iter()
        .any(|&leg| parsing.count(leg) >= min_pixels)
}

/// Splits `rows` rows starting at `base` into `k` near-equal strips; the
/// first `rows % k` strips take the extra row.
fn partition_rows(base: usize, rows: usize, k: usize) -> Vec<(usize, usize)> {
    let small = rows / k;
    let extra = rows % k;
    let mut out = Vec::with_capacity(k);
    let mut at = base;
    for i in 0..k {
        let size = if i < extra { small + 1 } else { small };
        out.push((at, at + size));
        at += size;
    }
    out
}

fn fallback_prior(feat_h: usize, feat_w: usize, k: usize, fallback_used: bool) -> PartPrior {
    let mask = Grid {
        h: feat_h,
        w: feat_w,
        data: vec![1; feat_h * feat_w],
    };
    PartPrior::new(mask, 0, feat_h - 1, partition_rows(0, feat_h, k), fallback_used)
}

fn check_geometry(feat_h: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid_err!("K must be at least 1"));
    }
    if feat_h < k {
        return Err(invalid_err!("feature height {} below K={}", feat_h, k));
    }
    Ok(())
}

/// Union of the two foreground maps, resized to the feature grid with
/// bilinear interpolation, binarized at 0.5, then dilated with a horizontal
/// 1x2 kernel (each foreground cell also claims its right neighbour).
fn fused_mask(maps: &MapPair, feat_h: usize, feat_w: usize) -> Grid {
    let (h, w) = (maps.parsing.h, maps.parsing.w);
    let mut union = vec![0.0f64; h * w];
    for i in 0..h * w {
        if maps.parsing.data[i] != BACKGROUND || maps.segmentation.data[i] != 0 {
            union[i] = 1.0;
        }
    }
    let resized = ops::bilinear_forward(&union, (1, 1, h, w), (feat_h, feat_w));
    let mut mask = Grid::new(feat_h, feat_w);
    for y in 0..feat_h {
        for x in 0..feat_w {
            let v = resized[y * feat_w + x] >= 0.5;
            let left = x > 0 && resized[y * feat_w + x - 1] >= 0.5;
            if v || left {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}

fn roi_of(mask: &Grid) -> Option<(usize, usize)> {
    let mut top = None;
    let mut bottom = None;
    for y in 0..mask.h {
        if (0..mask.w).any(|x| mask.get(y, x) != 0) {
            if top.is_none() {
                top = Some(y);
            }
            bottom = Some(y);
        }
    }
    Some((top?, bottom?))
}

/// Full coarse-prior pipeline for one image.
pub fn build_prior(maps: &MapPair, feat_h: usize, feat_w: usize, k: usize) -> Result<PartPrior> {
    check_geometry(feat_h, k)?;
    if !presence_check(&maps.parsing, head_label(), leg_labels(), MIN_PIXELS) {
        return Ok(fallback_prior(feat_h, feat_w, k, true));
    }
    let mask = fused_mask(maps, feat_h, feat_w);
    match roi_of(&mask) {
        Some((top, bottom)) => {
            let strips = partition_rows(top, bottom - top + 1, k);
            Ok(PartPrior::new(mask, top, bottom, strips, false))
        }
        None => Ok(fallback_prior(feat_h, feat_w, k, true)),
    }
}

/// The "Uniform Division" prior variant: no maps consulted at all.
pub fn uniform_prior(feat_h: usize, feat_w: usize, k: usize) -> Result<PartPrior> {
    check_geometry(feat_h, k)?;
    Ok(fallback_prior(feat_h, feat_w, k, false))
}

/// The "ROI Resize" prior variant: boundaries as in [`build_prior`] but the
/// mask forced to all ones, so the masking step becomes a no-op.
pub fn roi_resize_prior(maps: &MapPair, feat_h: usize, feat_w: usize, k: usize) -> Result<PartPrior> {
    let mut prior = build_prior(maps, feat_h, feat_w, k)?;
    prior.mask.data.fill(1);
    Ok(prior)
}

/// Label ids used by the synthetic corpus and the map sidecar files.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const LEFT_ARM: u8 = 3;
    pub const RIGHT_ARM: u8 = 4;
    pub const LEFT_LEG: u8 = 5;
    pub const RIGHT_LEG: u8 = 6;

    pub const ALL: [(&str, u8); 7] = [
        ("background", BACKGROUND),
        ("head", HEAD),
        ("torso", TORSO),
        ("left_arm", LEFT_ARM),
        ("right_arm", RIGHT_ARM),
        ("left_leg", LEFT_LEG),
        ("right_leg", RIGHT_LEG),
    ];
}

pub fn head_label() -> u8 {
    labels::HEAD
}

pub fn leg_labels() -> &'static [u8] {
    &[labels::LEFT_LEG, labels::RIGHT_LEG]
}
