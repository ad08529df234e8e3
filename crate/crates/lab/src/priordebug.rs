//! Text rendering of the coarse-prior pipeline for one image.

use std::fmt::Write as _;
use std::path::Path;

use mpn_core::prior::{self, MapPair, PartPrior};

use crate::error::Result;
use crate::pnm;

/// Loads a parsing/segmentation PGM pair.
pub fn load_maps(parse_path: &Path, seg_path: &Path) -> Result<MapPair> {
    let parsing = pnm::read_pgm(parse_path)?;
    let segmentation = pnm::read_pgm(seg_path)?;
    MapPair::new(parsing, segmentation).map_err(Into::into)
}

/// Renders the mask, boundaries, and strips as diff-friendly text.
pub fn render(maps: &MapPair, prior: &PartPrior, k: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "maps: {}x{}", maps.parsing.h, maps.parsing.w);
    let head = prior::presence_check(&maps.parsing, prior::head_label(), &[prior::labels::LEFT_LEG], 0)
        .then_some(())
        .is_some();
    let _ = head;
    let presence = prior::presence_check(
        &maps.parsing,
        prior::head_label(),
        prior::leg_labels(),
        prior::MIN_PIXELS,
    );
    let _ = writeln!(out, "presence: {}", if presence { "head+leg" } else { "missing" });
    if prior.fallback_used {
        let _ = writeln!(out, "fallback: uniform division");
    }
    let _ = writeln!(out, "mask {}x{}:", prior.mask.h, prior.mask.w);
    for y in 0..prior.mask.h {
        let boundary = if y == prior.roi_top || y == prior.roi_bottom {
            '<'
        } else {
            ' '
        };
        let row: String = (0..prior.mask.w)
            .map(|x| if prior.mask.get(y, x) != 0 { '#' } else { '.' })
            .collect();
        let _ = writeln!(out, "  {row}{boundary}");
    }
    let _ = writeln!(out, "roi rows: {}..{}", prior.roi_top, prior.roi_bottom);
    let mut strips = String::new();
    for (i, &(s, e)) in prior.strips.iter().enumerate() {
        let _ = write!(strips, "{}:[{},{}) ", i + 1, s, e);
    }
    let _ = writeln!(out, "strips (K={k}): {}", strips.trim_end());
    out
}
