//! Embedding extraction over a corpus split, ranking, and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mpn_core::metrics::{rank, EntryMeta, RankingResult};
use mpn_core::model::MpnModel;
use mpn_core::tensor::Tensor;

use crate::corpus::{holdout_split, query_gallery, Corpus};
use crate::error::{Error, Result};

const EMBED_CHUNK: usize = 32;

/// Inference embeddings for the listed corpus items, in order.
pub fn embed_items(model: &mut MpnModel, corpus: &Corpus, items: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EMBED_CHUNK) {
        let mut chw = Vec::new();
        let mut dims = (0, 0);
        for &item in chunk {
            let img = corpus.load_image(item)?;
            dims = (img.h, img.w);
            chw.extend(img.to_chw());
        }
        let batch = Tensor::new(&[chunk.len(), 3, dims.0, dims.1], chw)?;
        out.extend(model.extract_embedding(&batch)?);
    }
    Ok(out)
}

pub struct EvalOutput {
    pub ranking: RankingResult,
    pub query_items: Vec<usize>,
    pub gallery_items: Vec<usize>,
    pub query_embeds: Vec<Vec<f64>>,
    pub gallery_embeds: Vec<Vec<f64>>,
}

fn metas(corpus: &Corpus, items: &[usize]) -> Vec<EntryMeta> {
    items
        .iter()
        .map(|&i| EntryMeta {
            identity: corpus.items[i].identity,
            camera: corpus.items[i].camera,
        })
        .collect()
}

/// Ranks the held-out identities of the corpus under the trained model.
pub fn evaluate_holdout(model: &mut MpnModel, corpus: &Corpus, holdout_frac: f64) -> Result<EvalOutput> {
    let identities = corpus.identities();
    let (_, eval_ids) = holdout_split(&identities, holdout_frac);
    let (query_items, gallery_items) = query_gallery(corpus, &eval_ids);
    let query_embeds = embed_items(model, corpus, &query_items)?;
    let gallery_embeds = embed_items(model, corpus, &gallery_items)?;
    let ranking = rank(
        &query_embeds,
        &gallery_embeds,
        &metas(corpus, &query_items),
        &metas(corpus, &gallery_items),
    )?;
    Ok(EvalOutput {
        ranking,
        query_items,
        gallery_items,
        query_embeds,
        gallery_embeds,
    })
}

fn embed_tensor(embeds: &[Vec<f64>]) -> Result<Tensor> {
    let rows = embeds.len();
    let cols = embeds.first().map(|e| e.len()).unwrap_or(0);
    let flat: Vec<f64> = embeds.iter().flatten().copied().collect();
    Tensor::new(&[rows, cols], flat).map_err(Into::into)
}

/// Writes the embedding dumps (MPNT + index CSVs) and the per-query report.
pub fn write_reports(out_dir: &Path, corpus: &Corpus, eval: &EvalOutput) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, items, embeds) in [
        ("query", &eval.query_items, &eval.query_embeds),
        ("gallery", &eval.gallery_items, &eval.gallery_embeds),
    ] {
        let tensor = embed_tensor(embeds)?;
        crate::checkpoint::write_tensor(&out_dir.join(format!("{name}_embeds.mpnt")), &tensor)?;
        let mut index = String::from("path,identity,camera\n");
        for &item in items.iter() {
            let it = &corpus.items[item];
            let _ = writeln!(index, "{},{},{}", it.path, it.identity, it.camera);
        }
        let path = out_dir.join(format!("{name}_index.csv"));
        fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    }
    let mut report = String::from("query_id,ap,first_match_rank\n");
    let mut ranked = eval.ranking.ranked_queries.iter();
    let mut pos = 0usize;
    let mut skipped = eval.ranking.skipped_queries.iter().peekable();
    for qi in 0..eval.query_items.len() {
        if skipped.peek() == Some(&&qi) {
            skipped.next();
            let _ = writeln!(report, "{},,", corpus.items[eval.query_items[qi]].path);
            continue;
        }
        if ranked.next().is_some() {
            let _ = writeln!(
                report,
                "{},{:.6},{}",
                corpus.items[eval.query_items[qi]].path,
                eval.ranking.average_precisions[pos],
                eval.ranking.first_match_ranks[pos]
            );
            pos += 1;
        }
    }
    let path = out_dir.join("report.csv");
    fs::write(&path, report).map_err(|e| Error::io(&path, e))
}
