//! Synthetic pedestrian corpus with ground-truth parsing/segmentation maps
//! and controllable misalignment.
//!
//! Each identity is a tuple of part colors drawn from a small shared pool
//! plus a texture seed, so different identities frequently share colors on
//! *some* parts and the arrangement of colors over parts carries the
//! identity. Per-image crop/scale jitter moves and rescales the whole
//! figure (emulating detection box error); limb swing tilts arms and legs.
//! Maps are exact by construction; a configurable fraction of images gets
//! its parsing map zeroed to exercise the fallback path downstream.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mpn_core::image::{Grid, Image};
use mpn_core::prior::labels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{contract_err, Error, Result};

/// Saturated part-color pool. Kept clearly non-grayscale so figure pixels
/// can never collide with the grayscale background.
pub const PALETTE: [[u8; 3]; 10] = [
    [200, 30, 30],
    [30, 170, 30],
    [40, 60, 210],
    [220, 200, 30],
    [190, 40, 190],
    [30, 190, 190],
    [230, 120, 20],
    [120, 40, 200],
    [20, 140, 110],
    [230, 70, 130],
];

pub const NUM_PARTS: usize = 6;
pub const NUM_CAMERAS: usize = 2;

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub crop_jitter: f64,
    pub scale_jitter: f64,
    pub limb_swing_deg: f64,
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    pub corrupt_frac: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            identities: 20,
            images_per_identity: 40,
            image_h: 96,
            image_w: 32,
            crop_jitter: 0.2,
            scale_jitter: 0.1,
            limb_swing_deg: 10.0,
            occlusion_prob: 0.0,
            blur_prob: 0.0,
            corrupt_frac: 0.1,
            seed: 7,
        }
    }
}

pub const SPEC_KEYS: [&str; 11] = [
    "identities",
    "images_per_identity",
    "image_h",
    "image_w",
    "crop_jitter",
    "scale_jitter",
    "limb_swing_deg",
    "occlusion_prob",
    "blur_prob",
    "corrupt_frac",
    "seed",
];

impl CorpusSpec {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.ensure_known_keys(&SPEC_KEYS)?;
        let d = CorpusSpec::default();
        let spec = CorpusSpec {
            identities: cfg.parse_or("identities", d.identities)?,
            images_per_identity: cfg.parse_or("images_per_identity", d.images_per_identity)?,
            image_h: cfg.parse_or("image_h", d.image_h)?,
            image_w: cfg.parse_or("image_w", d.image_w)?,
            crop_jitter: cfg.parse_or("crop_jitter", d.crop_jitter)?,
            scale_jitter: cfg.parse_or("scale_jitter", d.scale_jitter)?,
            limb_swing_deg: cfg.parse_or("limb_swing_deg", d.limb_swing_deg)?,
            occlusion_prob: cfg.parse_or("occlusion_prob", d.occlusion_prob)?,
            blur_prob: cfg.parse_or("blur_prob", d.blur_prob)?,
            corrupt_frac: cfg.parse_or("corrupt_frac", d.corrupt_frac)?,
            seed: cfg.parse_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.images_per_identity == 0 {
            return Err(contract_err!("corpus must have identities and images"));
        }
        if self.image_h < 24 || self.image_w < 8 {
            return Err(contract_err!("image extent below the 24x8 feature floor"));
        }
        for (name, v) in [("crop_jitter", self.crop_jitter), ("scale_jitter", self.scale_jitter)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(contract_err!("{} must lie in [0, 0.5], got {}", name, v));
            }
        }
        for (name, v) in [
            ("occlusion_prob", self.occlusion_prob),
            ("blur_prob", self.blur_prob),
            ("corrupt_frac", self.corrupt_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(contract_err!("{} must lie in [0, 1], got {}", name, v));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("identities".into(), self.identities.to_string()),
            ("images_per_identity".into(), self.images_per_identity.to_string()),
            ("image_h".into(), self.image_h.to_string()),
            ("image_w".into(), self.image_w.to_string()),
            ("crop_jitter".into(), self.crop_jitter.to_string()),
            ("scale_jitter".into(), self.scale_jitter.to_string()),
            ("limb_swing_deg".into(), self.limb_swing_deg.to_string()),
            ("occlusion_prob".into(), self.occlusion_prob.to_string()),
            ("blur_prob".into(), self.blur_prob.to_string()),
            ("corrupt_frac".into(), self.corrupt_frac.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Stable appearance signature of one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityStyle {
    /// Palette index per part: head, torso, left arm, right arm, left leg,
    /// right leg.
    pub colors: [usize; NUM_PARTS],
    pub texture_seed: u64,
}

fn hamming(a: &[usize; NUM_PARTS], b: &[usize; NUM_PARTS]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Draws identity styles; any candidate closer than Hamming distance 2 to
/// an existing identity is rejected and redrawn, which keeps signatures
/// separated while letting identities share individual part colors.
pub fn draw_styles(count: usize, rng: &mut ChaCha8Rng) -> Vec<IdentityStyle> {
    let mut styles: Vec<IdentityStyle> = Vec::with_capacity(count);
    while styles.len() < count {
        let mut colors = [0usize; NUM_PARTS];
        for c in colors.iter_mut() {
            *c = rng.gen_range(0..PALETTE.len());
        }
        if styles.iter().all(|s| hamming(&s.colors, &colors) >= 2) {
            styles.push(IdentityStyle {
                colors,
                texture_seed: rng.gen(),
            });
        }
    }
    styles
}

/// Per-image geometry of the rendered figure.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    /// Top row of the body in pixels.
    pub top: f64,
    /// Body height in pixels.
    pub height: f64,
    pub arm_swing_deg: f64,
    pub leg_swing_deg: f64,
}

impl Placement {
    /// Base placement plus the spec's independent crop/scale jitter,
    /// clamped so the whole figure stays in frame (the misalignment is in
    /// position and scale, not truncation).
    pub fn draw(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Placement {
        let h = spec.image_h as f64;
        let base_height = 0.8 * h;
        let height = (base_height * (1.0 + spec.scale_jitter * sym(rng))).min(h - 2.0);
        let base_top = 0.1 * h;
        let top = (base_top + spec.crop_jitter * h * sym(rng))
            .max(1.0)
            .min(h - 1.0 - height);
        Placement {
            top,
            height,
            arm_swing_deg: spec.limb_swing_deg * sym(rng),
            leg_swing_deg: spec.limb_swing_deg * sym(rng),
        }
    }
}

fn sym(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>() * 2.0 - 1.0
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed ^ mix(a ^ mix(b)))
}

/// Per-image RNG stream, independent of generation order.
pub fn image_rng(seed: u64, identity: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash3(seed, identity as u64, index as u64))
}

fn part_label(p: usize) -> u8 {
    [
        labels::HEAD,
        labels::TORSO,
        labels::LEFT_ARM,
        labels::RIGHT_ARM,
        labels::LEFT_LEG,
        labels::RIGHT_LEG,
    ][p]
}

/// Which body part (if any) covers image pixel (y, x) in body-frame
/// coordinates; returns the part index and body-frame (u, v).
fn cover(y: f64, x: f64, cx: f64, p: &Placement) -> Option<(usize, f64, f64)> {
    let v = (y - p.top) / p.height;
    if !(0.0..=1.0).contains(&v) {
        return None;
    }
    let u = (x - cx) / p.height;
    // Head: disc around (0.08, 0).
    let dv = v - 0.08;
    if dv * dv + u * u <= 0.075 * 0.075 {
        return Some((0, u, v));
    }
    // Arms: tilted strips beside the torso.
    if (0.18..0.50).contains(&v) {
        let drop = v - 0.18;
        let tilt = (p.arm_swing_deg.to_radians()).tan() * drop;
        if (u - (0.205 + tilt)).abs() <= 0.045 {
            return Some((3, u, v));
        }
        if (u + 0.205 + tilt).abs() <= 0.045 {
            return Some((2, u, v));
        }
    }
    // Torso block.
    if (0.16..0.52).contains(&v) && u.abs() <= 0.16 {
        return Some((1, u, v));
    }
    // Legs: tilted strips below the hips, mirrored swing.
    if (0.52..=1.0).contains(&v) {
        let drop = v - 0.52;
        let tilt = (p.leg_swing_deg.to_radians()).tan() * drop;
        if (u - (0.08 + tilt)).abs() <= 0.07 {
            return Some((5, u, v));
        }
        if (u + 0.08 + tilt).abs() <= 0.07 {
            return Some((4, u, v));
        }
    }
    None
}

fn background_pixel(corpus_seed: u64, y: usize, x: usize, h: usize) -> u8 {
    let base = 110.0 + 50.0 * (y as f64 / h as f64);
    let noise = (hash3(corpus_seed, y as u64, x as u64) % 24) as f64;
    (base + noise) as u8
}

/// Deterministic per-identity texture factor in body-frame coordinates, so
/// the pattern travels with the figure under jitter.
fn texture_factor(style: &IdentityStyle, u: f64, v: f64) -> f64 {
    let qu = ((u + 0.5) * 12.0).floor() as i64 as u64;
    let qv = (v * 20.0).floor() as i64 as u64;
    let t = (hash3(style.texture_seed, qu, qv) % 1000) as f64 / 1000.0;
    0.78 + 0.44 * t
}

/// Renders one image and its ground-truth maps.
pub fn render(
    spec: &CorpusSpec,
    style: &IdentityStyle,
    placement: &Placement,
) -> (Image, Grid, Grid) {
    let (h, w) = (spec.image_h, spec.image_w);
    let mut img = Image::new(h, w);
    let mut parsing = Grid::new(h, w);
    let mut seg = Grid::new(h, w);
    let cx = w as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            match cover(y as f64 + 0.5, x as f64 + 0.5, cx, placement) {
                Some((part, u, v)) => {
                    let base = PALETTE[style.colors[part]];
                    let f = texture_factor(style, u, v);
                    let px = [
                        (base[0] as f64 * f).clamp(0.0, 255.0) as u8,
                        (base[1] as f64 * f).clamp(0.0, 255.0) as u8,
                        (base[2] as f64 * f).clamp(0.0, 255.0) as u8,
                    ];
                    img.set_pixel(y, x, px);
                    parsing.set(y, x, part_label(part));
                    seg.set(y, x, 1);
                }
                None => {
                    let g = background_pixel(spec.seed, y, x, h);
                    img.set_pixel(y, x, [g, g, g]);
                }
            }
        }
    }
    (img, parsing, seg)
}

fn occlude(img: &mut Image, parsing: &mut Grid, seg: &mut Grid, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.h, img.w);
    let eh = rng.gen_range(h / 8..h / 3);
    let ew = rng.gen_range(w / 4..w / 2 + 1);
    let y0 = rng.gen_range(0..h - eh);
    let x0 = rng.gen_range(0..w - ew);
    let gray = rng.gen_range(60..200u8);
    for y in y0..y0 + eh {
        for x in x0..x0 + ew {
            img.set_pixel(y, x, [gray, gray, gray]);
            parsing.set(y, x, 0);
            seg.set(y, x, 0);
        }
    }
}

fn box_blur(img: &Image) -> Image {
    let (h, w) = (img.h, img.w);
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut count = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        let p = img.pixel(yy as usize, xx as usize);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                        count += 1;
                    }
                }
            }
            out.set_pixel(y, x, [
                (acc[0] / count) as u8,
                (acc[1] / count) as u8,
                (acc[2] / count) as u8,
            ]);
        }
    }
    out
}

/// Everything known about one generated image.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub file_stem: String,
    pub identity: usize,
    pub camera: usize,
    pub image: Image,
    pub parsing: Grid,
    pub segmentation: Grid,
    pub body_top: usize,
    pub body_bottom: usize,
    pub corrupted: bool,
}

pub fn generate_one(spec: &CorpusSpec, styles: &[IdentityStyle], identity: usize, index: usize) -> GeneratedImage {
    let mut rng = image_rng(spec.seed, identity, index);
    let placement = Placement::draw(spec, &mut rng);
    let (mut image, mut parsing, mut seg) = render(spec, &styles[identity], &placement);
    if rng.gen_bool(spec.occlusion_prob) {
        occlude(&mut image, &mut parsing, &mut seg, &mut rng);
    }
    if rng.gen_bool(spec.blur_prob) {
        image = box_blur(&image);
    }
    let corrupted = rng.gen_bool(spec.corrupt_frac);
    if corrupted {
        parsing.data.fill(0);
    }
    let rows: Vec<usize> = (0..seg.h)
        .filter(|&y| (0..seg.w).any(|x| seg.get(y, x) != 0))
        .collect();
    let (body_top, body_bottom) = match (rows.first(), rows.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, seg.h - 1),
    };
    GeneratedImage {
        file_stem: format!("id{identity:03}_cam{}_{index:03}", index % NUM_CAMERAS),
        identity,
        camera: index % NUM_CAMERAS,
        image,
        parsing,
        segmentation: seg,
        body_top,
        body_bottom,
        corrupted,
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub images: usize,
    pub identities: usize,
    pub corrupted: usize,
}

/// One generator ground-truth row from `meta.csv`.
#[derive(Debug, Clone)]
pub struct MetaRow {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub body_top: usize,
    pub body_bottom: usize,
    pub corrupted: bool,
}

pub fn read_meta(dir: &Path) -> Result<Vec<MetaRow>> {
    let path = dir.join("meta.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(contract_err!("bad meta line {:?}", line));
        }
        rows.push(MetaRow {
            path: f[0].to_string(),
            identity: f[1].parse().map_err(|_| contract_err!("bad meta identity"))?,
            camera: f[2].parse().map_err(|_| contract_err!("bad meta camera"))?,
            body_top: f[3].parse().map_err(|_| contract_err!("bad meta body_top"))?,
            body_bottom: f[4].parse().map_err(|_| contract_err!("bad meta body_bottom"))?,
            corrupted: f[5] == "1",
        });
    }
    Ok(rows)
}

/// Generates the corpus on disk: PPM images, PGM map pairs, the label-table
/// sidecar, the `path,identity,camera` index, and generator metadata.
pub fn generate(spec: &CorpusSpec, out: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut style_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed));
    let styles = draw_styles(spec.identities, &mut style_rng);

    let mut index = String::new();
    let mut meta = String::from("path,identity,camera,body_top,body_bottom,corrupted\n");
    let mut corrupted = 0;
    for identity in 0..spec.identities {
        for image_index in 0..spec.images_per_identity {
            let g = generate_one(spec, &styles, identity, image_index);
            let img_name = format!("{}.ppm", g.file_stem);
            crate::pnm::write_ppm(&out.join(&img_name), &g.image)?;
            crate::pnm::write_pgm(&out.join(format!("{}_parse.pgm", g.file_stem)), &g.parsing)?;
            crate::pnm::write_pgm(&out.join(format!("{}_seg.pgm", g.file_stem)), &g.segmentation)?;
            let _ = writeln!(index, "{img_name},{},{}", g.identity, g.camera);
            let _ = writeln!(
                meta,
                "{img_name},{},{},{},{},{}",
                g.identity,
                g.camera,
                g.body_top,
                g.body_bottom,
                if g.corrupted { 1 } else { 0 }
            );
            corrupted += g.corrupted as usize;
        }
    }
    let labels_path = out.join("labels.txt");
    let mut labels_text = String::new();
    for (name, id) in labels::ALL {
        let _ = writeln!(labels_text, "{name}={id}");
    }
    fs::write(&labels_path, labels_text).map_err(|e| Error::io(&labels_path, e))?;
    let index_path = out.join("index.csv");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let meta_path = out.join("meta.csv");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(CorpusSummary {
        images: spec.identities * spec.images_per_identity,
        identities: spec.identities,
        corrupted,
    })
}
