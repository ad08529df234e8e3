//! Training objectives: per-part ID loss, batch-hard triplet on the
//! concatenated part features, the class-wise feature alignment term, and
//! the comparison variants (sample-wise, batch-wise, summed-feature
//! triplet, soft parameter sharing).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_err, shape_err, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::dims2;

/// Epsilon added to cosine denominators so dead features cannot divide by
/// zero.
pub const NORM_EPS: f64 = 1e-12;

/// Which feature-space alignment term couples the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsaKind {
    None,
    ClassWise,
    SampleWise,
    BatchWise,
    /// The variant that sums h and g per image and applies the triplet loss
    /// to the summed features in place of the plain triplet term.
    SummedTriplet,
}

/// The assembled objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_id: TensorId,
    pub l_tri: TensorId,
    /// Raw alignment scalar (FSA term, or the weighted soft-sharing
    /// penalty, or a constant zero when alignment is off).
    pub l_cf: TensorId,
    pub total: TensorId,
    /// Number of anchors violating the triplet constraint.
    pub n_t: usize,
}

/// 1 - cos(a, b), guarded by [`NORM_EPS`] in the denominator.
pub fn cosine_distance(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let dot_ab = tape.dot(a, b)?;
    let dot_aa = tape.dot(a, a)?;
    let dot_bb = tape.dot(b, b)?;
    let na = tape.sqrt(dot_aa);
    let nb = tape.sqrt(dot_bb);
    let prod = tape.mul(na, nb)?;
    let denom = tape.add_const(prod, NORM_EPS);
    let cos = tape.div(dot_ab, denom)?;
    Ok(tape.const_minus(1.0, cos))
}

/// Sum over parts and branches of the batch-mean cross-entropy.
pub fn id_loss(
    tape: &mut Tape,
    mt_logits: &[TensorId],
    at_logits: &[TensorId],
    labels: &[usize],
) -> Result<TensorId> {
    if mt_logits.is_empty() && at_logits.is_empty() {
        return Err(invalid_err!("id_loss needs at least one active branch"));
    }
    let mut total = None;
    for &logits in mt_logits.iter().chain(at_logits) {
        let ce = tape.softmax_cross_entropy(logits, labels)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    Ok(total.unwrap())
}

fn validate_sxa(tape: &Tape, h: TensorId, labels: &[usize], s: usize, a: usize) -> Result<usize> {
    let (n, _d) = dims2(tape.shape(h))?;
    if s < 2 || a < 2 {
        return Err(invalid_err!(
            "batch of {} identities x {} images admits no triplets",
            s,
            a
        ));
    }
    if n != s * a || labels.len() != n {
        return Err(shape_err!("batch of {} rows is not {}x{}", n, s, a));
    }
    // Identities must come in contiguous blocks of A so class slices exist.
    for i in 0..s {
        let block = &labels[i * a..(i + 1) * a];
        if block.iter().any(|&l| l != block[0]) {
            return Err(invalid_err!("identity block {} is not homogeneous", i));
        }
        for j in 0..i {
            if labels[j * a] == block[0] {
                return Err(invalid_err!("identity {} appears in two blocks", block[0]));
            }
        }
    }
    Ok(n)
}

/// BatchHard triplet loss with cosine distances: per anchor the hardest
/// positive (max intra-class distance, self included) and hardest negative
/// (min inter-class distance), hinged at `margin`, summed and divided by
/// the number of violating anchors. Zero when nothing violates.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    h: TensorId,
    labels: &[usize],
    s: usize,
    a: usize,
    margin: f64,
) -> Result<(TensorId, usize)> {
    let n = validate_sxa(tape, h, labels, s, a)?;
    let rows: Vec<TensorId> = (0..n)
        .map(|i| tape.slice(h, 0, i, i + 1))
        .collect::<Result<_>>()?;
    // Cosine distance for every unordered pair, computed once.
    let mut dist = vec![None; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(tape, rows[i], rows[j])?;
            dist[i * n + j] = Some(d);
            dist[j * n + i] = Some(d);
        }
    }
    let mut violations = Vec::new();
    let mut n_t = 0;
    for anchor in 0..n {
        // Hardest positive: p = anchor contributes distance zero, so only
        // other in-class rows can raise the max.
        let mut hardest = None;
        let mut hp_val = 0.0; // distance to self
        for p in 0..n {
            if p == anchor || labels[p] != labels[anchor] {
                continue;
            }
            let d = dist[anchor * n + p].unwrap();
            let v = tape.value_scalar(d);
            if v > hp_val {
                hp_val = v;
                hardest = Some(d);
            }
        }
        let mut hn = None;
        let mut hn_val = f64::INFINITY;
        for neg in 0..n {
            if labels[neg] == labels[anchor] {
                continue;
            }
            let d = dist[anchor * n + neg].unwrap();
            let v = tape.value_scalar(d);
            if v < hn_val {
                hn_val = v;
                hn = Some(d);
            }
        }
        let hn = hn.expect("s >= 2 guarantees negatives");
        let hinge_val = hp_val - hn_val + margin;
        if hinge_val <= 0.0 {
            continue;
        }
        n_t += 1;
        let gap = match hardest {
            Some(hp) => {
                let diff = tape.sub(hp, hn)?;
                tape.add_const(diff, margin)
            }
            // All positives tie with the self-distance of zero; the hinge
            // reduces to margin - hardest_negative.
            None => {
                let neg = tape.const_minus(0.0, hn);
                tape.add_const(neg, margin)
            }
        };
        violations.push(tape.relu(gap));
    }
    if n_t == 0 {
        return Ok((tape.constant_scalar(0.0), 0));
    }
    let mut acc = violations[0];
    for &v in &violations[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok((tape.mul_const(acc, 1.0 / n_t as f64), n_t))
}

/// Mean over identities of the cosine distance between per-identity mean
/// MT and AT representations.
pub fn class_wise_fsa(
    tape: &mut Tape,
    h: TensorId,
    g: TensorId,
    labels: &[usize],
    s: usize,
    a: usize,
) -> Result<TensorId> {
    crate::tensor::check_same_shape(tape.shape(h), tape.shape(g))?;
    validate_sxa(tape, h, labels, s, a)?;
    let mut acc = None;
    for i in 0..s {
        let hs = tape.slice(h, 0, i * a, (i + 1) * a)?;
        let gs = tape.slice(g, 0, i * a, (i + 1) * a)?;
        let hm = tape.mean_axis0(hs)?;
        let gm = tape.mean_axis0(gs)?;
        let d = cosine_distance(tape, hm, gm)?;
        acc = Some(match acc {
            None => d,
            Some(prev) => tape.add(prev, d)?,
        });
    }
    Ok(tape.mul_const(acc.unwrap(), 1.0 / s as f64))
}

/// Mean over all samples of the per-sample cosine distance between h and g.
pub fn sample_wise_fsa(tape: &mut Tape, h: TensorId, g: TensorId) -> Result<TensorId> {
    crate::tensor::check_same_shape(tape.shape(h), tape.shape(g))?;
    let (n, _) = dims2(tape.shape(h))?;
    let mut acc = None;
    for i in 0..n {
        let hr = tape.slice(h, 0, i, i + 1)?;
        let gr = tape.slice(g, 0, i, i + 1)?;
        let d = cosine_distance(tape, hr, gr)?;
        acc = Some(match acc {
            None => d,
            Some(prev) => tape.add(prev, d)?,
        });
    }
    Ok(tape.mul_const(acc.unwrap(), 1.0 / n as f64))
}

/// Cosine distance of the batch-mean representations, labels ignored.
pub fn batch_wise_fsa(tape: &mut Tape, h: TensorId, g: TensorId) -> Result<TensorId> {
    crate::tensor::check_same_shape(tape.shape(h), tape.shape(g))?;
    let hm = tape.mean_axis0(h)?;
    let gm = tape.mean_axis0(g)?;
    cosine_distance(tape, hm, gm)
}

/// Batch-hard triplet applied to h + g (the summed-feature variant, used in
/// place of the plain triplet term).
pub fn summed_feature_triplet_fsa(
    tape: &mut Tape,
    h: TensorId,
    g: TensorId,
    labels: &[usize],
    s: usize,
    a: usize,
    margin: f64,
) -> Result<(TensorId, usize)> {
    let summed = tape.add(h, g)?;
    batch_hard_triplet(tape, summed, labels, s, a, margin)
}

/// weight * sum of squared differences over the designated layer pairs.
pub fn soft_sharing_penalty(
    tape: &mut Tape,
    pairs: &[(TensorId, TensorId)],
    weight: f64,
) -> Result<TensorId> {
    if pairs.is_empty() {
        return Err(invalid_err!("soft sharing penalty over no layers"));
    }
    let mut acc = None;
    for &(mt, at) in pairs {
        let diff = tape.sub(mt, at)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq);
        acc = Some(match acc {
            None => sum,
            Some(prev) => tape.add(prev, sum)?,
        });
    }
    Ok(tape.mul_const(acc.unwrap(), weight))
}

/// Inputs shared by the loss assembly for one batch.
pub struct TotalLossInputs<'a> {
    pub mt_logits: &'a [TensorId],
    pub at_logits: &'a [TensorId],
    pub h: TensorId,
    pub g: Option<TensorId>,
    pub labels: &'a [usize],
    pub s: usize,
    pub a: usize,
}

/// How the alignment term is built.
pub struct LossSettings {
    pub margin: f64,
    pub lambda: f64,
    pub fsa: FsaKind,
    /// Soft parameter sharing: (MT, AT) layer pairs and the L2 weight.
    pub soft_share: Option<(Vec<(TensorId, TensorId)>, f64)>,
}

/// Assembles l_id + l_tri + lambda*l_cf (plus any soft-sharing penalty).
pub fn total_loss(tape: &mut Tape, inputs: &TotalLossInputs, settings: &LossSettings) -> Result<LossBundle> {
    let l_id = id_loss(tape, inputs.mt_logits, inputs.at_logits, inputs.labels)?;
    let needs_g = !matches!(settings.fsa, FsaKind::None);
    if needs_g && inputs.g.is_none() {
        return Err(invalid_err!("feature alignment requires AT features"));
    }
    let (l_tri, n_t) = match settings.fsa {
        FsaKind::SummedTriplet => summed_feature_triplet_fsa(
            tape,
            inputs.h,
            inputs.g.unwrap(),
            inputs.labels,
            inputs.s,
            inputs.a,
            settings.margin,
        )?,
        _ => batch_hard_triplet(tape, inputs.h, inputs.labels, inputs.s, inputs.a, settings.margin)?,
    };
    let l_cf = match settings.fsa {
        FsaKind::ClassWise => {
            class_wise_fsa(tape, inputs.h, inputs.g.unwrap(), inputs.labels, inputs.s, inputs.a)?
        }
        FsaKind::SampleWise => sample_wise_fsa(tape, inputs.h, inputs.g.unwrap())?,
        FsaKind::BatchWise => batch_wise_fsa(tape, inputs.h, inputs.g.unwrap())?,
        FsaKind::None | FsaKind::SummedTriplet => tape.constant_scalar(0.0),
    };
    let id_tri = tape.add(l_id, l_tri)?;
    let weighted_cf = tape.mul_const(l_cf, settings.lambda);
    let mut total = tape.add(id_tri, weighted_cf)?;
    if let Some((pairs, weight)) = &settings.soft_share {
        let penalty = soft_sharing_penalty(tape, pairs, *weight)?;
        total = tape.add(total, penalty)?;
    }
    Ok(LossBundle {
        l_id,
        l_tri,
        l_cf,
        total,
        n_t,
    })
}
