//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever replays forward passes, so it stays
//! independent of every backward rule it checks.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, FsaKind, LossSettings, TotalLossInputs};
use crate::model::{MpnModel, PartLayout};
use crate::prior::PartPrior;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// |a - b| scaled by max(1, |a|, |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Elementwise comparison of an analytic gradient against a numeric one.
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> GradReport {
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coordinate = i;
        }
    }
    report
}

type GraphBuilder = Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>>;

/// One named check: leaf shapes/values plus a graph builder producing a
/// scalar loss from those leaves.
pub struct CheckCase {
    pub name: String,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub build: GraphBuilder,
}

/// Runs one case: tape gradient vs. central differences over every input
/// coordinate.
pub fn run_case(case: &CheckCase, step: f64) -> Result<GradReport> {
    let mut tape = Tape::new();
    let leaves: Vec<TensorId> = case
        .inputs
        .iter()
        .map(|(shape, data)| tape.leaf_data(shape, data.clone(), true))
        .collect::<Result<_>>()?;
    let loss = (case.build)(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for &leaf in &leaves {
        analytic.extend_from_slice(tape.grad(leaf).expect("leaf grad populated"));
    }

    let eval = |inputs: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|(shape, data)| t.leaf_data(shape, data.clone(), false))
            .collect::<Result<_>>()?;
        let l = (case.build)(&mut t, &ids)?;
        Ok(t.value_scalar(l))
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut perturbed = case.inputs.clone();
    for li in 0..perturbed.len() {
        for ci in 0..perturbed[li].1.len() {
            let orig = perturbed[li].1[ci];
            perturbed[li].1[ci] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed[li].1[ci] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed[li].1[ci] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(compare_grads(&analytic, &numeric))
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
}

/// Random values bounded away from zero, for kinked ops like relu.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, len: usize, margin: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v = rng.gen::<f64>() * 2.0 - 1.0;
            let s = if v >= 0.0 { 1.0 } else { -1.0 };
            s * (v.abs() + margin)
        })
        .collect()
}

fn projected_loss(tape: &mut Tape, y: TensorId, seed: u64) -> Result<TensorId> {
    let shape = tape.shape(y).to_vec();
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.leaf_data(&shape, rand_vec(&mut rng, len, -1.0, 1.0), false)?;
    tape.dot(y, c)
}

/// The per-operation check suite. Every kernel on the tape appears at least
/// once; loss compositions ride along at the end.
pub fn op_checks() -> Vec<CheckCase> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    let x4 = (vec![2, 3, 5, 4], rand_vec(&mut rng, 120, -1.0, 1.0));
    let w4 = (vec![2, 3, 3, 3], rand_vec(&mut rng, 54, -0.5, 0.5));
    let b2 = (vec![2], rand_vec(&mut rng, 2, -0.2, 0.2));
    cases.push(CheckCase {
        name: "conv2d_s1_p0".into(),
        inputs: vec![x4.clone(), w4.clone(), b2.clone()],
        build: Box::new(|t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (1, 1), (0, 0))?;
            projected_loss(t, y, 1)
        }),
    });
    cases.push(CheckCase {
        name: "conv2d_s2_p1".into(),
        inputs: vec![x4.clone(), w4, b2],
        build: Box::new(|t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (2, 2), (1, 1))?;
            projected_loss(t, y, 2)
        }),
    });

    let bn_x = (vec![3, 4, 2, 2], rand_vec(&mut rng, 48, -2.0, 2.0));
    let gamma = (vec![4], rand_vec(&mut rng, 4, 0.5, 1.5));
    let beta = (vec![4], rand_vec(&mut rng, 4, -0.3, 0.3));
    for (name, train) in [("batchnorm_train", true), ("batchnorm_eval", false)] {
        cases.push(CheckCase {
            name: name.into(),
            inputs: vec![bn_x.clone(), gamma.clone(), beta.clone()],
            build: Box::new(move |t, ids| {
                let mut rm = vec![0.1, -0.2, 0.3, 0.05];
                let mut rv = vec![1.1, 0.9, 1.3, 0.8];
                let y = t.batchnorm(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, train)?;
                projected_loss(t, y, 3)
            }),
        });
    }

    cases.push(CheckCase {
        name: "relu".into(),
        inputs: vec![(vec![3, 7], rand_vec_off_zero(&mut rng, 21, 0.05))],
        build: Box::new(|t, ids| {
            let y = t.relu(ids[0]);
            projected_loss(t, y, 4)
        }),
    });
    cases.push(CheckCase {
        name: "sigmoid".into(),
        inputs: vec![(vec![2, 9], rand_vec(&mut rng, 18, -3.0, 3.0))],
        build: Box::new(|t, ids| {
            let y = t.sigmoid(ids[0]);
            projected_loss(t, y, 5)
        }),
    });

    let a = (vec![4, 5], rand_vec(&mut rng, 20, -1.0, 1.0));
    let b = (vec![4, 5], rand_vec_off_zero(&mut rng, 20, 0.5));
    cases.push(CheckCase {
        name: "add".into(),
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            projected_loss(t, y, 6)
        }),
    });
    cases.push(CheckCase {
        name: "sub".into(),
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            projected_loss(t, y, 7)
        }),
    });
    cases.push(CheckCase {
        name: "elementwise_mul".into(),
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            projected_loss(t, y, 8)
        }),
    });
    cases.push(CheckCase {
        name: "div".into(),
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, ids| {
            let y = t.div(ids[0], ids[1])?;
            projected_loss(t, y, 9)
        }),
    });
    cases.push(CheckCase {
        name: "sqrt".into(),
        inputs: vec![(vec![6], rand_vec(&mut rng, 6, 0.5, 2.5))],
        build: Box::new(|t, ids| {
            let y = t.sqrt(ids[0]);
            projected_loss(t, y, 10)
        }),
    });
    cases.push(CheckCase {
        name: "add_const_mul_const_const_minus".into(),
        inputs: vec![a.clone()],
        build: Box::new(|t, ids| {
            let y = t.add_const(ids[0], 0.7);
            let y = t.mul_const(y, -1.3);
            let y = t.const_minus(2.0, y);
            projected_loss(t, y, 11)
        }),
    });
    cases.push(CheckCase {
        name: "dot".into(),
        inputs: vec![a.clone(), b],
        build: Box::new(|t, ids| t.dot(ids[0], ids[1])),
    });
    cases.push(CheckCase {
        name: "sum".into(),
        inputs: vec![a.clone()],
        build: Box::new(|t, ids| Ok(t.sum_all(ids[0]))),
    });
    cases.push(CheckCase {
        name: "mean_axis0".into(),
        inputs: vec![a.clone()],
        build: Box::new(|t, ids| {
            let y = t.mean_axis0(ids[0])?;
            projected_loss(t, y, 12)
        }),
    });
    cases.push(CheckCase {
        name: "concat_axis1".into(),
        inputs: vec![
            (vec![3, 2], rand_vec(&mut rng, 6, -1.0, 1.0)),
            (vec![3, 4], rand_vec(&mut rng, 12, -1.0, 1.0)),
        ],
        build: Box::new(|t, ids| {
            let y = t.concat(&[ids[0], ids[1]], 1)?;
            projected_loss(t, y, 13)
        }),
    });
    cases.push(CheckCase {
        name: "slice_rows".into(),
        inputs: vec![(vec![2, 3, 6, 4], rand_vec(&mut rng, 144, -1.0, 1.0))],
        build: Box::new(|t, ids| {
            let y = t.slice(ids[0], 2, 1, 4)?;
            projected_loss(t, y, 14)
        }),
    });
    cases.push(CheckCase {
        name: "linear".into(),
        inputs: vec![
            (vec![3, 5], rand_vec(&mut rng, 15, -1.0, 1.0)),
            (vec![4, 5], rand_vec(&mut rng, 20, -0.7, 0.7)),
            (vec![4], rand_vec(&mut rng, 4, -0.2, 0.2)),
        ],
        build: Box::new(|t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            projected_loss(t, y, 15)
        }),
    });
    cases.push(CheckCase {
        name: "global_max_pool".into(),
        inputs: vec![(vec![2, 3, 4, 5], rand_vec(&mut rng, 120, -1.0, 1.0))],
        build: Box::new(|t, ids| {
            let y = t.global_max_pool(ids[0])?;
            projected_loss(t, y, 16)
        }),
    });
    cases.push(CheckCase {
        name: "bilinear_resize".into(),
        inputs: vec![(vec![2, 2, 5, 3], rand_vec(&mut rng, 60, -1.0, 1.0))],
        build: Box::new(|t, ids| {
            let up = t.bilinear_resize(ids[0], 8, 7)?;
            let down = t.bilinear_resize(up, 3, 2)?;
            projected_loss(t, down, 17)
        }),
    });
    cases.push(CheckCase {
        name: "mul_spatial_mask".into(),
        inputs: vec![(vec![2, 3, 4, 2], rand_vec(&mut rng, 48, -1.0, 1.0))],
        build: Box::new(|t, ids| {
            let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
            let y = t.mul_mask_hw(ids[0], &mask)?;
            projected_loss(t, y, 18)
        }),
    });
    cases.push(CheckCase {
        name: "softmax_cross_entropy".into(),
        inputs: vec![(vec![4, 5], rand_vec(&mut rng, 20, -2.0, 2.0))],
        build: Box::new(|t, ids| t.softmax_cross_entropy(ids[0], &[1, 0, 4, 2])),
    });

    // Loss compositions on top of the primitives.
    let h = (vec![6, 7], rand_vec(&mut rng, 42, -1.0, 1.0));
    let g = (vec![6, 7], rand_vec(&mut rng, 42, -1.0, 1.0));
    let labels = [0usize, 0, 1, 1, 2, 2];
    cases.push(CheckCase {
        name: "cosine_distance".into(),
        inputs: vec![
            (vec![7], rand_vec(&mut rng, 7, -1.0, 1.0)),
            (vec![7], rand_vec(&mut rng, 7, -1.0, 1.0)),
        ],
        build: Box::new(|t, ids| losses::cosine_distance(t, ids[0], ids[1])),
    });
    cases.push(CheckCase {
        name: "batch_hard_triplet".into(),
        inputs: vec![h.clone()],
        build: Box::new(move |t, ids| {
            let (loss, _) = losses::batch_hard_triplet(t, ids[0], &labels, 3, 2, 0.2)?;
            Ok(loss)
        }),
    });
    cases.push(CheckCase {
        name: "class_wise_fsa".into(),
        inputs: vec![h.clone(), g.clone()],
        build: Box::new(move |t, ids| losses::class_wise_fsa(t, ids[0], ids[1], &labels, 3, 2)),
    });
    cases.push(CheckCase {
        name: "sample_wise_fsa".into(),
        inputs: vec![h.clone(), g.clone()],
        build: Box::new(|t, ids| losses::sample_wise_fsa(t, ids[0], ids[1])),
    });
    cases.push(CheckCase {
        name: "batch_wise_fsa".into(),
        inputs: vec![h.clone(), g.clone()],
        build: Box::new(|t, ids| losses::batch_wise_fsa(t, ids[0], ids[1])),
    });
    cases.push(CheckCase {
        name: "summed_feature_triplet_fsa".into(),
        inputs: vec![h.clone(), g.clone()],
        build: Box::new(move |t, ids| {
            let (loss, _) = losses::summed_feature_triplet_fsa(t, ids[0], ids[1], &labels, 3, 2, 0.2)?;
            Ok(loss)
        }),
    });
    cases.push(CheckCase {
        name: "soft_sharing_penalty".into(),
        inputs: vec![
            (vec![3, 4], rand_vec(&mut rng, 12, -1.0, 1.0)),
            (vec![3, 4], rand_vec(&mut rng, 12, -1.0, 1.0)),
        ],
        build: Box::new(|t, ids| losses::soft_sharing_penalty(t, &[(ids[0], ids[1])], 0.1)),
    });
    cases
}

/// Fixture for the whole-model check: a 2-identity x 2-image micro batch
/// with synthetic priors.
pub struct MicroBatch {
    pub images: Tensor,
    pub priors: Vec<PartPrior>,
    pub labels: Vec<usize>,
    pub s: usize,
    pub a: usize,
}

pub fn micro_batch(cfg: &crate::model::MpnConfig, seed: u64) -> MicroBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, a) = (2, 2);
    let n = s * a;
    let len = n * 3 * cfg.input_h * cfg.input_w;
    let images = Tensor::new(
        &[n, 3, cfg.input_h, cfg.input_w],
        rand_vec(&mut rng, len, -1.0, 1.0),
    )
    .unwrap();
    let (fh, fw) = (cfg.feat_h(), cfg.feat_w());
    let priors = (0..n)
        .map(|i| {
            // Alternate between a full-body prior and a cropped one so both
            // the mask multiply and the ROI resize paths are exercised.
            let mut maps_h = fh * cfg.stride_product();
            let mut top = 0;
            if i % 2 == 1 {
                top = maps_h / 6;
                maps_h -= maps_h / 4;
            }
            let mut parsing = crate::image::Grid::new(cfg.input_h, cfg.input_w);
            let mut seg = crate::image::Grid::new(cfg.input_h, cfg.input_w);
            for y in top..top + maps_h.min(cfg.input_h - top) {
                for x in 0..cfg.input_w {
                    let label = if y < top + maps_h / 4 {
                        crate::prior::labels::HEAD
                    } else if y < top + maps_h / 2 {
                        crate::prior::labels::TORSO
                    } else {
                        crate::prior::labels::LEFT_LEG
                    };
                    parsing.set(y, x, label);
                    seg.set(y, x, 1);
                }
            }
            let maps = crate::prior::MapPair::new(parsing, seg).unwrap();
            crate::prior::build_prior(&maps, fh, fw, cfg.k).unwrap()
        })
        .collect();
    MicroBatch {
        images,
        priors,
        labels: vec![0, 0, 1, 1],
        s,
        a,
    }
}

/// Forward + Eq.10-style total loss value for the current parameters.
pub fn model_loss_value(model: &mut MpnModel, batch: &MicroBatch, settings: &LossSettings) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img = tape.leaf(&batch.images);
    let layout = PartLayout::Priors(&batch.priors);
    let out = model.forward(&mut tape, &binding, img, Some(&layout), true)?;
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
        settings,
    )?;
    Ok(tape.value_scalar(bundle.total))
}

/// Analytic parameter gradients of the total loss (one backward pass).
pub fn model_loss_grads(
    model: &mut MpnModel,
    batch: &MicroBatch,
    settings: &LossSettings,
) -> Result<Vec<(String, Vec<f64>)>> {
    for p in model.params.iter_mut() {
        p.tensor.zero_grad();
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img = tape.leaf(&batch.images);
    let layout = PartLayout::Priors(&batch.priors);
    let out = model.forward(&mut tape, &binding, img, Some(&layout), true)?;
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
        settings,
    )?;
    tape.backward(bundle.total)?;
    binding.harvest_grads(&tape, &mut model.params)?;
    Ok(model
        .params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.len()]),
            )
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ModelCheckOutcome {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central-difference check of every parameter gradient of the micro model.
pub fn check_model(
    model: &mut MpnModel,
    batch: &MicroBatch,
    settings: &LossSettings,
    step: f64,
) -> Result<ModelCheckOutcome> {
    let analytic = model_loss_grads(model, batch, settings)?;
    let bn_snapshot = model.bn_states.clone();
    let mut outcome = ModelCheckOutcome {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for pid in 0..model.params.len() {
        if !model.params.get(pid).tensor.requires_grad {
            continue;
        }
        for ci in 0..model.params.get(pid).tensor.len() {
            let orig = model.params.get(pid).tensor.data()[ci];
            model.params.get_mut(pid).tensor.data_mut()[ci] = orig + step;
            let plus = model_loss_value(model, batch, settings)?;
            model.params.get_mut(pid).tensor.data_mut()[ci] = orig - step;
            let minus = model_loss_value(model, batch, settings)?;
            model.params.get_mut(pid).tensor.data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[pid].1[ci], numeric);
            outcome.checked += 1;
            if err > outcome.max_rel_err {
                outcome.max_rel_err = err;
                outcome.worst_param = format!("{}[{}]", analytic[pid].0, ci);
            }
        }
    }
    model.bn_states = bn_snapshot;
    Ok(outcome)
}

/// Default settings for the full-objective check.
pub fn full_settings() -> LossSettings {
    LossSettings {
        margin: 0.2,
        lambda: 1.0,
        fsa: FsaKind::ClassWise,
        soft_share: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_default_tolerance() {
        for case in op_checks() {
            let report = run_case(&case, DEFAULT_STEP).unwrap();
            assert!(
                report.passes(DEFAULT_TOL),
                "{} failed: max rel err {:.3e} at {}",
                case.name,
                report.max_rel_err,
                report.worst_coordinate
            );
        }
    }

    #[test]
    fn wrong_analytic_gradient_is_flagged() {
        // grad of x^2 at x is 2x; claim 3x and the checker must object.
        let x = [0.8, -1.4, 2.2];
        let analytic: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let f = |v: &[f64]| -> f64 { v.iter().map(|x| x * x).sum() };
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += DEFAULT_STEP;
                let plus = f(&p);
                p[i] -= 2.0 * DEFAULT_STEP;
                let minus = f(&p);
                (plus - minus) / (2.0 * DEFAULT_STEP)
            })
            .collect();
        let report = compare_grads(&analytic, &numeric);
        assert!(!report.passes(DEFAULT_TOL));
    }
}
