//! End-to-end training driver: sampler, augmentation, forward/backward,
//! SGD, per-epoch evaluation, metrics log, and the final checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mpn_core::augment::EraseParams;
use mpn_core::losses::{self, FsaKind, LossSettings, TotalLossInputs};
use mpn_core::model::{Mode, MpnModel, ParamId, PartLayout};
use mpn_core::optim::{lr_at, sgd_step, SgdState};
use mpn_core::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    assemble_batch, epoch_plan, holdout_split, query_gallery, Batch, BatchOptions, Corpus,
    PriorKind,
};
use crate::error::{contract_err, Error, Result};
use crate::evaluate::embed_items;
use crate::settings::{Ablation, SharedLayer, TrainSettings};

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_id: f64,
    pub l_tri: f64,
    pub l_cf: f64,
    pub total: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub final_rank1: f64,
    pub final_map: f64,
    pub checkpoint_dir: PathBuf,
    pub model: MpnModel,
}

fn soft_share_pairs(model: &MpnModel, layer: SharedLayer) -> Vec<(ParamId, ParamId)> {
    let mut pairs = Vec::new();
    for head in model.heads() {
        let (Some(mt), Some(at)) = (head.mt, head.at) else {
            continue;
        };
        match layer {
            SharedLayer::Conv1 => {
                pairs.push((mt.conv1_w, at.conv1_w));
                pairs.push((mt.conv1_b, at.conv1_b));
            }
            SharedLayer::Conv2 => {
                pairs.push((mt.conv2_w, at.conv2_w));
                pairs.push((mt.conv2_b, at.conv2_b));
            }
        }
    }
    pairs
}

/// One optimizer step over one batch; returns the loss terms and the
/// violating-triplet count.
pub fn train_step(
    model: &mut MpnModel,
    batch: &Batch,
    fsa: FsaKind,
    soft: &Option<(Vec<(ParamId, ParamId)>, f64)>,
    margin: f64,
    lambda: f64,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(f64, f64, f64, f64, usize)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let images = tape.leaf(&batch.images);
    let layout = match &batch.priors {
        Some(priors) => PartLayout::Priors(priors),
        None => PartLayout::Uniform,
    };
    let needs_layout = model.cfg.mode.has_at();
    let out = model.forward(
        &mut tape,
        &binding,
        images,
        needs_layout.then_some(&layout),
        true,
    )?;
    let soft_share = soft.as_ref().map(|(pairs, weight)| {
        let tape_pairs = pairs
            .iter()
            .map(|&(m, a)| (binding.tape_id(m), binding.tape_id(a)))
            .collect();
        (tape_pairs, *weight)
    });
    let bundle = losses::total_loss(
        &mut tape,
        &TotalLossInputs {
            mt_logits: &out.mt_logits,
            at_logits: &out.at_logits,
            h: out.h,
            g: out.g,
            labels: &batch.labels,
            s: batch.s,
            a: batch.a,
        },
        &LossSettings {
            margin,
            lambda,
            fsa,
            soft_share,
        },
    )?;
    let (l_id, l_tri, l_cf, total) = (
        tape.value_scalar(bundle.l_id),
        tape.value_scalar(bundle.l_tri),
        tape.value_scalar(bundle.l_cf),
        tape.value_scalar(bundle.total),
    );
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "training diverged: total={total} (l_id={l_id}, l_tri={l_tri}, l_cf={l_cf})"
        )));
    }
    tape.backward(bundle.total)?;
    binding.harvest_grads(&tape, &mut model.params)?;
    sgd_step(&mut model.params, state, lr, momentum, weight_decay)?;
    Ok((l_id, l_tri, l_cf, total, bundle.n_t))
}

/// Trains one configuration on the corpus and writes `metrics.csv` plus a
/// checkpoint under `out_dir`. Fully deterministic in the settings seed.
pub fn train_run(settings: &TrainSettings, corpus: &Corpus, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let identities = corpus.identities();
    let (train_ids, eval_ids) = holdout_split(&identities, settings.holdout_frac);
    if train_ids.len() < settings.s {
        return Err(contract_err!(
            "{} training identities cannot fill S={}",
            train_ids.len(),
            settings.s
        ));
    }
    let label_map: BTreeMap<usize, usize> =
        train_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let probe = corpus.load_image(0)?;
    let cfg = settings.model_config(train_ids.len(), probe.h, probe.w);
    cfg.validate()?;
    let mut model = MpnModel::new(cfg, settings.seed)?;
    let mut sgd = SgdState::new(&model.params);

    let (_, _, _, _, _, fsa, soft_layer) = settings.ablation.wiring();
    let soft = soft_layer.map(|layer| (soft_share_pairs(&model, layer), settings.soft_share_weight));
    let effective_prior = match model.cfg.mode {
        Mode::Baseline | Mode::MtOnly => PriorKind::Uniform,
        _ => settings.prior,
    };
    let opts = BatchOptions {
        prior: effective_prior,
        k: settings.k,
        feat_h: model.cfg.feat_h(),
        feat_w: model.cfg.feat_w(),
        augment: Some(EraseParams {
            prob: settings.erase_prob,
            ..EraseParams::default()
        }),
        label_map: &label_map,
    };
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9E3779B9).wrapping_add(1));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9E3779B9).wrapping_add(2));

    let (query_items, gallery_items) = query_gallery(corpus, &eval_ids);
    let mut log = Vec::new();
    let (mut final_rank1, mut final_map) = (0.0, 0.0);
    for epoch in 0..settings.epochs {
        let lr = lr_at(epoch, settings.lr, settings.lr_decay, settings.lr_step);
        let plan = epoch_plan(corpus, &train_ids, settings.s, settings.a, &mut sampler_rng)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0.0;
        for picks in &plan {
            let batch = assemble_batch(corpus, picks, &mut augment_rng, &opts)?;
            let (l_id, l_tri, l_cf, total, _) = train_step(
                &mut model,
                &batch,
                fsa,
                &soft,
                settings.margin,
                settings.lambda,
                &mut sgd,
                lr,
                settings.momentum,
                settings.weight_decay,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            sums.0 += l_id;
            sums.1 += l_tri;
            sums.2 += l_cf;
            sums.3 += total;
            steps += 1.0;
        }
        let evaluate_now =
            (epoch + 1) % settings.eval_every.max(1) == 0 || epoch + 1 == settings.epochs;
        let (rank1, map) = if evaluate_now {
            let qe = embed_items(&mut model, corpus, &query_items)?;
            let ge = embed_items(&mut model, corpus, &gallery_items)?;
            let qm: Vec<_> = query_items
                .iter()
                .map(|&i| mpn_core::metrics::EntryMeta {
                    identity: corpus.items[i].identity,
                    camera: corpus.items[i].camera,
                })
                .collect();
            let gm: Vec<_> = gallery_items
                .iter()
                .map(|&i| mpn_core::metrics::EntryMeta {
                    identity: corpus.items[i].identity,
                    camera: corpus.items[i].camera,
                })
                .collect();
            let ranking = mpn_core::metrics::rank(&qe, &ge, &qm, &gm)?;
            final_rank1 = ranking.rank1;
            final_map = ranking.map;
            (Some(ranking.rank1), Some(ranking.map))
        } else {
            (None, None)
        };
        log.push(EpochLog {
            epoch,
            l_id: sums.0 / steps,
            l_tri: sums.1 / steps,
            l_cf: sums.2 / steps,
            total: sums.3 / steps,
            rank1,
            map,
        });
    }

    let mut csv = String::from("epoch,l_id,l_tri,l_cf,total,rank1,mAP\n");
    for entry in &log {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            entry.epoch,
            entry.l_id,
            entry.l_tri,
            entry.l_cf,
            entry.total,
            entry.rank1.map(|v| format!("{v:.6}")).unwrap_or_default(),
            entry.map.map(|v| format!("{v:.6}")).unwrap_or_default(),
        );
    }
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let checkpoint_dir = out_dir.join("checkpoint");
    crate::checkpoint::save(&model, &checkpoint_dir)?;
    Ok(TrainOutcome {
        log,
        final_rank1,
        final_map,
        checkpoint_dir,
        model,
    })
}

/// True when the ablation trains with stripped-down wiring that never
/// builds main-task heads (used by tests and sanity assertions).
pub fn builds_mt_heads(ablation: Ablation) -> bool {
    !matches!(ablation.wiring().0, Mode::Baseline)
}
