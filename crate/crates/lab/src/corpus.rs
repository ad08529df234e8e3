//! Corpus loading, identity splits, the S x A batch sampler, and batch
//! assembly (augmentation + priors + tensor conversion).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mpn_core::augment::{augment, EraseParams};
use mpn_core::image::Image;
use mpn_core::prior::{self, MapPair, PartPrior};
use mpn_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::pnm;

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub items: Vec<CorpusItem>,
    by_identity: BTreeMap<usize, Vec<usize>>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.csv");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut items = Vec::new();
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(contract_err!(
                    "{}:{}: expected path,identity,camera",
                    index_path.display(),
                    lineno + 1
                ));
            }
            let identity = fields[1]
                .parse()
                .map_err(|_| contract_err!("bad identity in index line {}", lineno + 1))?;
            let camera = fields[2]
                .parse()
                .map_err(|_| contract_err!("bad camera in index line {}", lineno + 1))?;
            by_identity.entry(identity).or_default().push(items.len());
            items.push(CorpusItem {
                path: fields[0].to_string(),
                identity,
                camera,
            });
        }
        if items.is_empty() {
            return Err(contract_err!("empty corpus index {}", index_path.display()));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            items,
            by_identity,
        })
    }

    pub fn identities(&self) -> Vec<usize> {
        self.by_identity.keys().copied().collect()
    }

    pub fn items_of(&self, identity: usize) -> &[usize] {
        self.by_identity
            .get(&identity)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn load_image(&self, item: usize) -> Result<Image> {
        pnm::read_ppm(&self.dir.join(&self.items[item].path))
    }

    fn map_paths(&self, item: usize) -> (PathBuf, PathBuf) {
        let stem = self.items[item].path.trim_end_matches(".ppm");
        (
            self.dir.join(format!("{stem}_parse.pgm")),
            self.dir.join(format!("{stem}_seg.pgm")),
        )
    }

    pub fn load_maps(&self, item: usize) -> Result<MapPair> {
        let (parse_path, seg_path) = self.map_paths(item);
        let parsing = pnm::read_pgm(&parse_path)?;
        let segmentation = pnm::read_pgm(&seg_path)?;
        MapPair::new(parsing, segmentation).map_err(Into::into)
    }
}

/// Last `frac` of the sorted identities become the held-out query/gallery
/// pool; the rest train.
pub fn holdout_split(identities: &[usize], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((identities.len() as f64 * frac).round() as usize)
        .max(1)
        .min(identities.len().saturating_sub(1));
    let cut = identities.len() - held;
    (identities[..cut].to_vec(), identities[cut..].to_vec())
}

/// Which prior feeds the auxiliary branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Coarse,
    Uniform,
    RoiResize,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Coarse => "coarse",
            PriorKind::Uniform => "uniform",
            PriorKind::RoiResize => "roi_resize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(PriorKind::Coarse),
            "uniform" => Ok(PriorKind::Uniform),
            "roi_resize" => Ok(PriorKind::RoiResize),
            other => Err(contract_err!("unknown prior kind {:?}", other)),
        }
    }
}

/// One training batch of S identities x A images.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per-image priors; `None` when the uniform layout is in force.
    pub priors: Option<Vec<PartPrior>>,
    pub s: usize,
    pub a: usize,
}

pub struct BatchOptions<'a> {
    pub prior: PriorKind,
    pub k: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Erasing parameters; `None` disables augmentation entirely.
    pub augment: Option<EraseParams>,
    /// Maps corpus identity to a dense class label.
    pub label_map: &'a BTreeMap<usize, usize>,
}

/// Assembles a batch from A random images of each listed identity.
pub fn load_batch(
    corpus: &Corpus,
    identity_ids: &[usize],
    per_id: usize,
    rng: &mut ChaCha8Rng,
    opts: &BatchOptions,
) -> Result<Batch> {
    let picks: Vec<(usize, Vec<usize>)> = identity_ids
        .iter()
        .map(|&id| {
            let pool = corpus.items_of(id);
            if pool.len() < per_id {
                return Err(contract_err!(
                    "identity {} has {} images, batch needs {}",
                    id,
                    pool.len(),
                    per_id
                ));
            }
            let mut shuffled = pool.to_vec();
            shuffled.shuffle(rng);
            shuffled.truncate(per_id);
            Ok((id, shuffled))
        })
        .collect::<Result<_>>()?;
    assemble_batch(corpus, &picks, rng, opts)
}

/// Assembles a batch from explicit item picks (the epoch sampler's path).
pub fn assemble_batch(
    corpus: &Corpus,
    picks: &[(usize, Vec<usize>)],
    rng: &mut ChaCha8Rng,
    opts: &BatchOptions,
) -> Result<Batch> {
    let s = picks.len();
    let a = picks.first().map(|(_, v)| v.len()).unwrap_or(0);
    if s == 0 || a == 0 {
        return Err(contract_err!("empty batch"));
    }
    let mut chw = Vec::new();
    let mut labels = Vec::with_capacity(s * a);
    let mut priors = Vec::with_capacity(s * a);
    let mut dims = None;
    for (identity, item_ids) in picks {
        let label = *opts
            .label_map
            .get(identity)
            .ok_or_else(|| contract_err!("identity {} missing from label map", identity))?;
        for &item in item_ids {
            let mut image = corpus.load_image(item)?;
            match dims {
                None => dims = Some((image.h, image.w)),
                Some(d) if d != (image.h, image.w) => {
                    return Err(contract_err!("mixed image extents in corpus"));
                }
                _ => {}
            }
            if opts.prior == PriorKind::Uniform {
                if let Some(params) = &opts.augment {
                    // No maps in play; only the image is augmented.
                    if rng.gen_bool(0.5) {
                        mpn_core::augment::flip_image(&mut image);
                    }
                    if rng.gen_bool(params.prob) {
                        mpn_core::augment::random_erase(&mut image, params, rng);
                    }
                }
            } else {
                let mut maps = corpus.load_maps(item)?;
                if let Some(params) = &opts.augment {
                    augment(&mut image, &mut maps, params, rng);
                }
                let prior = match opts.prior {
                    PriorKind::Coarse => prior::build_prior(&maps, opts.feat_h, opts.feat_w, opts.k)?,
                    PriorKind::RoiResize => {
                        prior::roi_resize_prior(&maps, opts.feat_h, opts.feat_w, opts.k)?
                    }
                    PriorKind::Uniform => unreachable!(),
                };
                priors.push(prior);
            }
            labels.push(label);
            chw.extend(image.to_chw());
        }
    }
    let (h, w) = dims.unwrap();
    let images = Tensor::new(&[s * a, 3, h, w], chw)?;
    Ok(Batch {
        images,
        labels,
        priors: (opts.prior != PriorKind::Uniform).then_some(priors),
        s,
        a,
    })
}

/// Balanced epoch plan: each identity appears ceil(n_i / a) times; each
/// appearance consumes a distinct chunk of its shuffled image list
/// (wrapping at the end); batches take `s` distinct identities each, and a
/// trailing remainder that cannot fill a batch is dropped.
pub fn epoch_plan(
    corpus: &Corpus,
    train_ids: &[usize],
    s: usize,
    a: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(usize, Vec<usize>)>>> {
    if train_ids.len() < s {
        return Err(contract_err!(
            "{} training identities cannot fill S={} batches",
            train_ids.len(),
            s
        ));
    }
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    let mut occurrences = Vec::new();
    for &id in train_ids {
        let pool = corpus.items_of(id);
        if pool.len() < a {
            return Err(contract_err!(
                "identity {} has {} images, sampler needs at least {}",
                id,
                pool.len(),
                a
            ));
        }
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(rng);
        let occ = pool.len().div_ceil(a);
        let mut id_chunks = Vec::with_capacity(occ);
        for i in 0..occ {
            let chunk: Vec<usize> = (0..a)
                .map(|j| shuffled[(i * a + j) % shuffled.len()])
                .collect();
            id_chunks.push(chunk);
            occurrences.push(id);
        }
        chunks.insert(id, id_chunks);
    }
    occurrences.shuffle(rng);
    let mut used: BTreeMap<usize, usize> = BTreeMap::new();
    let mut batches = Vec::new();
    let mut pending = occurrences;
    loop {
        let mut batch_ids: Vec<usize> = Vec::with_capacity(s);
        let mut taken = Vec::new();
        for (pos, &id) in pending.iter().enumerate() {
            if batch_ids.len() == s {
                break;
            }
            if !batch_ids.contains(&id) {
                batch_ids.push(id);
                taken.push(pos);
            }
        }
        if batch_ids.len() < s {
            break;
        }
        for &pos in taken.iter().rev() {
            pending.remove(pos);
        }
        let picks = batch_ids
            .into_iter()
            .map(|id| {
                let next = used.entry(id).or_insert(0);
                let chunk = chunks[&id][*next].clone();
                *next += 1;
                (id, chunk)
            })
            .collect();
        batches.push(picks);
    }
    Ok(batches)
}

/// Query/gallery split inside the held-out identities: every fourth image
/// of each identity queries against the rest.
pub fn query_gallery(corpus: &Corpus, eval_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for &id in eval_ids {
        for (pos, &item) in corpus.items_of(id).iter().enumerate() {
            if pos % 4 == 0 {
                query.push(item);
            } else {
                gallery.push(item);
            }
        }
    }
    (query, gallery)
}
