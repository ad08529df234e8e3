//! Model-level oracles: the part-input pipeline against a step-by-step
//! reference, whole-model finite differences, and sharing behaviour under
//! optimizer steps.

use mpn_core::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOL};
use mpn_core::image::Grid;
use mpn_core::model::{Mode, MpnConfig, MpnModel, PartLayout};
use mpn_core::optim::{sgd_step, SgdState};
use mpn_core::prior::PartPrior;
use mpn_core::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

/// Test-local bilinear resize over rows/cols with the half-pixel-centre
/// grid, written independently of the library kernel.
fn resize_ref(x: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let tap = |in_ext: usize, out_ext: usize, o: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) * in_ext as f64 / out_ext as f64 - 0.5;
        let base = src.floor();
        let t = src - base;
        let clamp = |v: f64| v.max(0.0).min(in_ext as f64 - 1.0) as usize;
        (clamp(base), clamp(base + 1.0), t)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, ty) = tap(h, oh, oy);
        for ox in 0..ow {
            let (x0, x1, tx) = tap(w, ow, ox);
            let top = x[y0 * w + x0] * (1.0 - tx) + x[y0 * w + x1] * tx;
            let bot = x[y1 * w + x0] * (1.0 - tx) + x[y1 * w + x1] * tx;
            out[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn part_prior(mask_rows: std::ops::Range<usize>, roi: (usize, usize), fh: usize, fw: usize, k: usize) -> PartPrior {
    let mut mask = Grid::new(fh, fw);
    for y in mask_rows {
        for x in 0..fw {
            mask.set(y, x, 1);
        }
    }
    let rows = roi.1 - roi.0 + 1;
    let small = rows / k;
    let extra = rows % k;
    let mut strips = Vec::new();
    let mut at = roi.0;
    for i in 0..k {
        let size = if i < extra { small + 1 } else { small };
        strips.push((at, at + size));
        at += size;
    }
    PartPrior {
        mask,
        roi_top: roi.0,
        roi_bottom: roi.1,
        strips,
        fallback_used: false,
    }
}

fn pipeline_model(k: usize) -> MpnModel {
    let cfg = MpnConfig {
        k,
        feature_dim: 4,
        use_ca: false,
        share_conv1: true,
        share_conv2: true,
        share_ca: false,
        mode: Mode::Full,
        num_classes: 2,
        ca_reduction: 4,
        backbone_widths: vec![4, 6],
        backbone_strides: vec![2, 2],
        input_h: 96,
        input_w: 32,
    };
    MpnModel::new(cfg, 9).unwrap()
}

#[test]
fn part_inputs_on_degenerate_prior_are_plain_strips() {
    // All-ones mask and full ROI: P_k must equal strip k of F resized back
    // to full height.
    let model = pipeline_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c, h, w) = (2, 3, 24, 8);
    let f_data = rand_vec(&mut rng, n * c * h * w);
    let mut tape = Tape::new();
    let f = tape.leaf_data(&[n, c, h, w], f_data.clone(), false).unwrap();
    let priors: Vec<PartPrior> = (0..n).map(|_| part_prior(0..24, (0, 23), h, w, 6)).collect();
    let parts = model
        .make_part_inputs(&mut tape, f, &PartLayout::Priors(&priors))
        .unwrap();
    for (k, &p) in parts.iter().enumerate() {
        let got = tape.value(p);
        for plane in 0..n * c {
            let strip: Vec<f64> =
                f_data[plane * h * w + k * 4 * w..plane * h * w + (k + 1) * 4 * w].to_vec();
            let expect = resize_ref(&strip, (4, w), (h, w));
            for (a, e) in got[plane * h * w..(plane + 1) * h * w].iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mask_limited_to_one_strip_zeroes_the_rest() {
    let model = pipeline_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, h, w) = (1, 2, 24, 8);
    let f_data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen::<f64>() + 0.5).collect();
    let mut tape = Tape::new();
    let f = tape.leaf_data(&[n, c, h, w], f_data, false).unwrap();
    // Mask covers only rows 0..4 (strip 1), full ROI.
    let priors = vec![part_prior(0..4, (0, 23), h, w, 6)];
    let parts = model
        .make_part_inputs(&mut tape, f, &PartLayout::Priors(&priors))
        .unwrap();
    for (k, &p) in parts.iter().enumerate().skip(1) {
        assert!(
            tape.value(p).iter().all(|&v| v == 0.0),
            "strip {k} leaked mask content"
        );
    }
    assert!(tape.value(parts[0]).iter().any(|&v| v != 0.0));
}

#[test]
fn part_inputs_match_sequential_primitive_oracle() {
    // Random F with ROI rows 4..=19: mask multiply, crop, resize back,
    // uniform division, per-strip resize, all done by hand.
    let model = pipeline_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c, h, w) = (2, 3, 24, 8);
    let f_data = rand_vec(&mut rng, n * c * h * w);
    let mut tape = Tape::new();
    let f = tape.leaf_data(&[n, c, h, w], f_data.clone(), false).unwrap();
    let priors: Vec<PartPrior> = (0..n).map(|_| part_prior(4..20, (4, 19), h, w, 6)).collect();
    let parts = model
        .make_part_inputs(&mut tape, f, &PartLayout::Priors(&priors))
        .unwrap();

    // Reference pipeline per image and channel.
    let mask_row = |y: usize| if (4..20).contains(&y) { 1.0 } else { 0.0 };
    for plane in 0..n * c {
        let src = &f_data[plane * h * w..(plane + 1) * h * w];
        let masked: Vec<f64> = (0..h * w).map(|i| src[i] * mask_row(i / w)).collect();
        let cropped: Vec<f64> = masked[4 * w..20 * w].to_vec();
        let aligned = resize_ref(&cropped, (16, w), (h, w));
        for k in 0..6 {
            let strip: Vec<f64> = aligned[k * 4 * w..(k + 1) * 4 * w].to_vec();
            let expect = resize_ref(&strip, (4, w), (h, w));
            let got = &tape.value(parts[k])[plane * h * w..(plane + 1) * h * w];
            for (a, e) in got.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn head_feature_reproduces_selected_channel_max() {
    // conv1 wired to copy channel 1, identity-ish tail in eval mode: the
    // head feature's first coordinate must equal that channel's spatial max.
    let cfg = MpnConfig {
        k: 1,
        feature_dim: 3,
        use_ca: false,
        share_conv1: false,
        share_conv2: false,
        share_ca: false,
        mode: Mode::MtOnly,
        num_classes: 2,
        ca_reduction: 4,
        backbone_widths: vec![4, 3],
        backbone_strides: vec![2, 2],
        input_h: 24,
        input_w: 8,
    };
    let mut model = MpnModel::new(cfg, 4).unwrap();
    // conv1: out0 <- channel 1, others zero.
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let pid = model.params.find(&name).unwrap();
        let t = &mut model.params.get_mut(pid).tensor;
        if name == "head.0.mt.conv1.weight" {
            t.data_mut().fill(0.0);
            // weight shape [3, 3, 1, 1]; out 0, in 1.
            t.data_mut()[1] = 1.0;
        } else if name == "head.0.mt.conv2.weight" {
            t.data_mut().fill(0.0);
            for i in 0..3 {
                t.data_mut()[i * 3 + i] = 1.0;
            }
        } else if name.contains("conv1.bias") || name.contains("conv2.bias") {
            t.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f_data: Vec<f64> = (0..2 * 3 * 6 * 2).map(|_| rng.gen::<f64>()).collect();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let f = tape.leaf_data(&[2, 3, 6, 2], f_data.clone(), false).unwrap();
    let (feat, _) = model.forward_head(&mut tape, &binding, 0, f, true, false).unwrap();
    for ni in 0..2 {
        let ch1 = &f_data[(ni * 3 + 1) * 12..(ni * 3 + 2) * 12];
        let mx = ch1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Both BN stages run in eval mode with fresh running stats (mean 0,
        // var 1), each scaling by 1/sqrt(1 + eps).
        let expect = mx / (1.0f64 + 1e-5);
        let got = tape.value(feat)[ni * 3];
        assert!((got - expect.max(0.0)).abs() < 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn head_feature_is_translation_invariant_for_single_activation() {
    let cfg = MpnConfig::micro(2);
    let mut model = MpnModel::new(cfg, 12).unwrap();
    let (c, h, w) = (6, 6, 2);
    let mut base = vec![0.0; c * h * w];
    for ch in 0..c {
        base[ch * h * w] = 1.3 + ch as f64 * 0.2;
    }
    let mut shifted = vec![0.0; c * h * w];
    for ch in 0..c {
        shifted[ch * h * w + 7] = 1.3 + ch as f64 * 0.2;
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let a = tape.leaf_data(&[1, c, h, w], base, false).unwrap();
    let b = tape.leaf_data(&[1, c, h, w], shifted, false).unwrap();
    let (fa, _) = model.forward_head(&mut tape, &binding, 0, a, true, false).unwrap();
    let (fb, _) = model.forward_head(&mut tape, &binding, 0, b, true, false).unwrap();
    assert_eq!(tape.value(fa), tape.value(fb));
}

#[test]
fn full_model_gradients_match_central_differences() {
    let cfg = MpnConfig::micro(2);
    let mut model = MpnModel::new(cfg.clone(), 2026).unwrap();
    let batch = gradcheck::micro_batch(&cfg, 31);
    let settings = gradcheck::full_settings();
    let outcome = gradcheck::check_model(&mut model, &batch, &settings, DEFAULT_STEP).unwrap();
    assert!(
        outcome.max_rel_err < DEFAULT_TOL,
        "worst {} at {}",
        outcome.max_rel_err,
        outcome.worst_param
    );
    assert!(outcome.checked > 500);
}

#[test]
fn shared_parameters_stay_bitwise_equal_under_sgd() {
    let cfg = MpnConfig::micro(2);
    let mut model = MpnModel::new(cfg.clone(), 5).unwrap();
    let batch = gradcheck::micro_batch(&cfg, 6);
    let settings = gradcheck::full_settings();
    let mut state = SgdState::new(&model.params);
    for _ in 0..5 {
        gradcheck::model_loss_grads(&mut model, &batch, &settings).unwrap();
        sgd_step(&mut model.params, &mut state, 0.01, 0.9, 5e-4).unwrap();
    }
    for pair in model.heads() {
        let (mt, at) = (pair.mt.unwrap(), pair.at.unwrap());
        assert_eq!(mt.conv1_w, at.conv1_w);
        let w = model.params.get(mt.conv1_w).tensor.data();
        assert!(w.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn unshared_branches_diverge_after_one_step() {
    let mut cfg = MpnConfig::micro(2);
    cfg.share_conv1 = false;
    cfg.share_conv2 = false;
    cfg.share_ca = false;
    let mut model = MpnModel::new(cfg.clone(), 5).unwrap();
    let batch = gradcheck::micro_batch(&cfg, 6);
    let settings = mpn_core::losses::LossSettings {
        margin: 0.2,
        lambda: 1.0,
        fsa: mpn_core::losses::FsaKind::None,
        soft_share: None,
    };
    // Branches start at different random values already; equalize first so
    // the divergence comes from gradients alone.
    for pair in model.heads().to_vec() {
        let (mt, at) = (pair.mt.unwrap(), pair.at.unwrap());
        let w = model.params.get(mt.conv1_w).tensor.data().to_vec();
        model
            .params
            .get_mut(at.conv1_w)
            .tensor
            .data_mut()
            .copy_from_slice(&w);
    }
    let mut state = SgdState::new(&model.params);
    gradcheck::model_loss_grads(&mut model, &batch, &settings).unwrap();
    sgd_step(&mut model.params, &mut state, 0.01, 0.9, 5e-4).unwrap();
    let pair = model.heads()[0];
    let mt_w = model.params.get(pair.mt.unwrap().conv1_w).tensor.data();
    let at_w = model.params.get(pair.at.unwrap().conv1_w).tensor.data();
    assert_ne!(mt_w, at_w);
}

#[test]
fn embeddings_have_k_times_feature_dim_components() {
    // Paper-scale head dimensions: K=6 parts of 512 concatenate to 3072.
    let cfg = MpnConfig {
        k: 6,
        feature_dim: 512,
        use_ca: false,
        share_conv1: true,
        share_conv2: true,
        share_ca: false,
        mode: Mode::Full,
        num_classes: 2,
        ca_reduction: 16,
        backbone_widths: vec![4, 8],
        backbone_strides: vec![2, 2],
        input_h: 96,
        input_w: 32,
    };
    let mut model = MpnModel::new(cfg, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let img = mpn_core::tensor::Tensor::new(&[1, 3, 96, 32], rand_vec(&mut rng, 3 * 96 * 32)).unwrap();
    let e = model.extract_embedding(&img).unwrap();
    assert_eq!(e[0].len(), 3072);
}

#[test]
fn extract_embedding_never_builds_priors() {
    let cfg = MpnConfig::micro(2);
    let mut model = MpnModel::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img =
        mpn_core::tensor::Tensor::new(&[2, 3, cfg.input_h, cfg.input_w], rand_vec(&mut rng, 2 * 3 * cfg.input_h * cfg.input_w))
            .unwrap();
    let before = mpn_core::prior::construction_count();
    model.extract_embedding(&img).unwrap();
    assert_eq!(mpn_core::prior::construction_count(), before);

    // The baseline path (uniform strips) must not build priors either.
    let mut bcfg = MpnConfig::micro(2);
    bcfg.mode = Mode::Baseline;
    bcfg.share_conv1 = false;
    bcfg.share_conv2 = false;
    bcfg.share_ca = false;
    let mut baseline = MpnModel::new(bcfg, 3).unwrap();
    let before = mpn_core::prior::construction_count();
    baseline.extract_embedding(&img).unwrap();
    assert_eq!(mpn_core::prior::construction_count(), before);
}
