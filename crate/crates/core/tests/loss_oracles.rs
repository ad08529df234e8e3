//! Direct-formula and exhaustive-enumeration oracles for the losses.

use mpn_core::losses::{
    self, FsaKind, LossSettings, TotalLossInputs,
};
use mpn_core::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn cos_dist_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb + 1e-12)
}

/// Exhaustive BatchHard oracle: enumerate every (anchor, positive,
/// negative), reduce with max/min, hinge, and normalize by violators.
fn triplet_ref(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> (f64, usize) {
    let n = rows.len();
    let mut sum = 0.0;
    let mut violators = 0;
    for a in 0..n {
        let mut hardest_pos = f64::NEG_INFINITY;
        for p in 0..n {
            if labels[p] == labels[a] {
                hardest_pos = hardest_pos.max(cos_dist_ref(&rows[a], &rows[p]));
            }
        }
        let mut hardest_neg = f64::INFINITY;
        for neg in 0..n {
            if labels[neg] != labels[a] {
                hardest_neg = hardest_neg.min(cos_dist_ref(&rows[a], &rows[neg]));
            }
        }
        let hinge = (hardest_pos - hardest_neg + margin).max(0.0);
        if hinge > 0.0 {
            violators += 1;
            sum += hinge;
        }
    }
    if violators == 0 {
        (0.0, 0)
    } else {
        (sum / violators as f64, violators)
    }
}

#[test]
fn cosine_distance_trivials() {
    let mut tape = Tape::new();
    let v = tape.leaf_data(&[3], vec![0.4, -1.1, 2.0], false).unwrap();
    let d_self = losses::cosine_distance(&mut tape, v, v).unwrap();
    assert!(tape.value_scalar(d_self).abs() < 1e-9);

    let e1 = tape.leaf_data(&[2], vec![1.0, 0.0], false).unwrap();
    let e2 = tape.leaf_data(&[2], vec![0.0, 1.0], false).unwrap();
    let d_orth = losses::cosine_distance(&mut tape, e1, e2).unwrap();
    assert!((tape.value_scalar(d_orth) - 1.0).abs() < 1e-9);

    let neg = tape.leaf_data(&[3], vec![-0.4, 1.1, -2.0], false).unwrap();
    let d_anti = losses::cosine_distance(&mut tape, v, neg).unwrap();
    assert!((tape.value_scalar(d_anti) - 2.0).abs() < 1e-9);
}

#[test]
fn triplet_margin_satisfied_gives_zero() {
    // Two identities, identical embeddings within class, orthogonal across:
    // inter-class cosine distance 1, intra 0, margin 0.2 -> no violation.
    let rows = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[4, 2], flat(&rows), false).unwrap();
    let (loss, n_t) = losses::batch_hard_triplet(&mut tape, h, &labels, 2, 2, 0.2).unwrap();
    assert_eq!(n_t, 0);
    assert_eq!(tape.value_scalar(loss), 0.0);
}

#[test]
fn triplet_all_identical_embeddings_hinge_at_margin() {
    let rows = vec![vec![0.3, 0.7]; 4];
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[4, 2], flat(&rows), false).unwrap();
    let (loss, n_t) = losses::batch_hard_triplet(&mut tape, h, &labels, 2, 2, 0.2).unwrap();
    assert_eq!(n_t, 4);
    assert!((tape.value_scalar(loss) - 0.2).abs() < 1e-9);
}

#[test]
fn triplet_matches_exhaustive_oracle_on_twenty_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for trial in 0..20 {
        let (s, a, d) = (3, 2, 12);
        let rows = rand_rows(&mut rng, s * a, d);
        let labels = [0, 0, 1, 1, 2, 2];
        let (expected, expected_nt) = triplet_ref(&rows, &labels, 0.2);
        let mut tape = Tape::new();
        let h = tape.leaf_data(&[s * a, d], flat(&rows), false).unwrap();
        let (loss, n_t) = losses::batch_hard_triplet(&mut tape, h, &labels, s, a, 0.2).unwrap();
        assert_eq!(n_t, expected_nt, "trial {trial}");
        assert!(
            (tape.value_scalar(loss) - expected).abs() < 1e-10,
            "trial {trial}: {} vs {}",
            tape.value_scalar(loss),
            expected
        );
    }
}

#[test]
fn triplet_rejects_degenerate_batches() {
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[2, 3], vec![0.0; 6], false).unwrap();
    assert!(losses::batch_hard_triplet(&mut tape, h, &[0, 0], 1, 2, 0.2).is_err());
    assert!(losses::batch_hard_triplet(&mut tape, h, &[0, 1], 2, 1, 0.2).is_err());
}

#[test]
fn id_loss_uniform_logits_closed_form() {
    let (n, classes, k) = (4, 7, 3);
    let mut tape = Tape::new();
    let uniform: Vec<_> = (0..2 * k)
        .map(|_| tape.leaf_data(&[n, classes], vec![0.25; n * classes], false).unwrap())
        .collect();
    let labels = [0, 3, 6, 2];
    let both = losses::id_loss(&mut tape, &uniform[..k], &uniform[k..], &labels).unwrap();
    let expected = 2.0 * k as f64 * (classes as f64).ln();
    assert!((tape.value_scalar(both) - expected).abs() < 1e-10);

    let mt_only = losses::id_loss(&mut tape, &uniform[..k], &[], &labels).unwrap();
    assert!((tape.value_scalar(mt_only) - k as f64 * (classes as f64).ln()).abs() < 1e-10);
}

#[test]
fn id_loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (n, classes, k) = (5, 4, 2);
    let labels = [1usize, 0, 3, 2, 1];
    let mt: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n * classes).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
        .collect();
    let at: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n * classes).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
        .collect();
    let mut expected = 0.0;
    for logits in mt.iter().chain(&at) {
        for (ni, &l) in labels.iter().enumerate() {
            let row = &logits[ni * classes..(ni + 1) * classes];
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            expected -= (row[l].exp() / denom).ln() / n as f64;
        }
    }
    let mut tape = Tape::new();
    let mt_ids: Vec<_> = mt
        .iter()
        .map(|v| tape.leaf_data(&[n, classes], v.clone(), false).unwrap())
        .collect();
    let at_ids: Vec<_> = at
        .iter()
        .map(|v| tape.leaf_data(&[n, classes], v.clone(), false).unwrap())
        .collect();
    let loss = losses::id_loss(&mut tape, &mt_ids, &at_ids, &labels).unwrap();
    assert!((tape.value_scalar(loss) - expected).abs() < 1e-12);
}

#[test]
fn fsa_terms_match_direct_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (s, a, d) = (3, 4, 9);
    let n = s * a;
    let h_rows = rand_rows(&mut rng, n, d);
    let g_rows = rand_rows(&mut rng, n, d);
    let labels: Vec<usize> = (0..n).map(|i| i / a).collect();

    // Class-wise: mean per identity, then cosine distance, averaged over S.
    let mut class_expected = 0.0;
    for i in 0..s {
        let mut hm = vec![0.0; d];
        let mut gm = vec![0.0; d];
        for j in 0..a {
            for c in 0..d {
                hm[c] += h_rows[i * a + j][c] / a as f64;
                gm[c] += g_rows[i * a + j][c] / a as f64;
            }
        }
        class_expected += cos_dist_ref(&hm, &gm);
    }
    class_expected /= s as f64;

    let sample_expected: f64 = (0..n)
        .map(|i| cos_dist_ref(&h_rows[i], &g_rows[i]))
        .sum::<f64>()
        / n as f64;

    let mut hb = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for i in 0..n {
        for c in 0..d {
            hb[c] += h_rows[i][c] / n as f64;
            gb[c] += g_rows[i][c] / n as f64;
        }
    }
    let batch_expected = cos_dist_ref(&hb, &gb);

    let mut tape = Tape::new();
    let h = tape.leaf_data(&[n, d], flat(&h_rows), false).unwrap();
    let g = tape.leaf_data(&[n, d], flat(&g_rows), false).unwrap();
    let cw = losses::class_wise_fsa(&mut tape, h, g, &labels, s, a).unwrap();
    let sw = losses::sample_wise_fsa(&mut tape, h, g).unwrap();
    let bw = losses::batch_wise_fsa(&mut tape, h, g).unwrap();
    assert!((tape.value_scalar(cw) - class_expected).abs() < 1e-12);
    assert!((tape.value_scalar(sw) - sample_expected).abs() < 1e-12);
    assert!((tape.value_scalar(bw) - batch_expected).abs() < 1e-12);
}

#[test]
fn fsa_identical_features_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = rand_rows(&mut rng, 4, 6);
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[4, 6], flat(&rows), false).unwrap();
    let cw = losses::class_wise_fsa(&mut tape, h, h, &labels, 2, 2).unwrap();
    let sw = losses::sample_wise_fsa(&mut tape, h, h).unwrap();
    let bw = losses::batch_wise_fsa(&mut tape, h, h).unwrap();
    for id in [cw, sw, bw] {
        assert!(tape.value_scalar(id).abs() < 1e-9);
    }
}

#[test]
fn fsa_orthogonal_features_hit_one() {
    // Per-sample h and g orthogonal, and identity means orthogonal too.
    let h_rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0], vec![0.5, 0.0]];
    let g_rows = vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 2.0]];
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[4, 2], flat(&h_rows), false).unwrap();
    let g = tape.leaf_data(&[4, 2], flat(&g_rows), false).unwrap();
    let cw = losses::class_wise_fsa(&mut tape, h, g, &labels, 2, 2).unwrap();
    let sw = losses::sample_wise_fsa(&mut tape, h, g).unwrap();
    let bw = losses::batch_wise_fsa(&mut tape, h, g).unwrap();
    for id in [cw, sw, bw] {
        assert!((tape.value_scalar(id) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn summed_feature_variant_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let rows = rand_rows(&mut rng, 6, 8);
    let labels = [0, 0, 1, 1, 2, 2];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[6, 8], flat(&rows), false).unwrap();
    let zero = tape.leaf_data(&[6, 8], vec![0.0; 48], false).unwrap();
    let (plain, nt_plain) = losses::batch_hard_triplet(&mut tape, h, &labels, 3, 2, 0.2).unwrap();
    let (with_zero, nt_zero) =
        losses::summed_feature_triplet_fsa(&mut tape, h, zero, &labels, 3, 2, 0.2).unwrap();
    assert_eq!(nt_plain, nt_zero);
    assert!((tape.value_scalar(plain) - tape.value_scalar(with_zero)).abs() < 1e-12);

    // g = h doubles every row; cosine distances are scale invariant.
    let (doubled, nt_doubled) =
        losses::summed_feature_triplet_fsa(&mut tape, h, h, &labels, 3, 2, 0.2).unwrap();
    assert_eq!(nt_plain, nt_doubled);
    assert!((tape.value_scalar(plain) - tape.value_scalar(doubled)).abs() < 1e-9);
}

#[test]
fn summed_feature_variant_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let h_rows = rand_rows(&mut rng, 6, 8);
    let g_rows = rand_rows(&mut rng, 6, 8);
    let labels = [0, 0, 1, 1, 2, 2];
    let summed: Vec<Vec<f64>> = h_rows
        .iter()
        .zip(&g_rows)
        .map(|(h, g)| h.iter().zip(g).map(|(a, b)| a + b).collect())
        .collect();
    let (expected, expected_nt) = triplet_ref(&summed, &labels, 0.2);
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[6, 8], flat(&h_rows), false).unwrap();
    let g = tape.leaf_data(&[6, 8], flat(&g_rows), false).unwrap();
    let (loss, nt) = losses::summed_feature_triplet_fsa(&mut tape, h, g, &labels, 3, 2, 0.2).unwrap();
    assert_eq!(nt, expected_nt);
    assert!((tape.value_scalar(loss) - expected).abs() < 1e-10);
}

#[test]
fn soft_sharing_penalty_cases() {
    let mut tape = Tape::new();
    let a = tape.leaf_data(&[2, 2], vec![0.5, -0.25, 1.0, 2.0], false).unwrap();
    let same = losses::soft_sharing_penalty(&mut tape, &[(a, a)], 10.0).unwrap();
    assert_eq!(tape.value_scalar(same), 0.0);

    let three = tape.leaf_data(&[1], vec![3.0], false).unwrap();
    let one = tape.leaf_data(&[1], vec![1.0], false).unwrap();
    let pair = losses::soft_sharing_penalty(&mut tape, &[(three, one)], 1.0).unwrap();
    assert_eq!(tape.value_scalar(pair), 4.0);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let va: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
    let vb: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
    let expected: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * 0.01;
    let la = tape.leaf_data(&[3, 4], va, false).unwrap();
    let lb = tape.leaf_data(&[3, 4], vb, false).unwrap();
    let p = losses::soft_sharing_penalty(&mut tape, &[(la, lb)], 0.01).unwrap();
    assert!((tape.value_scalar(p) - expected).abs() < 1e-12);
}

#[test]
fn total_loss_recomposes_and_respects_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (s, a, d, classes, k) = (3, 2, 10, 3, 2);
    let n = s * a;
    let labels: Vec<usize> = (0..n).map(|i| i / a).collect();
    let h_rows = rand_rows(&mut rng, n, d);
    let g_rows = rand_rows(&mut rng, n, d);
    let logits: Vec<Vec<f64>> = (0..2 * k)
        .map(|_| (0..n * classes).map(|_| rng.gen::<f64>()).collect())
        .collect();

    let build = |tape: &mut Tape| {
        let h = tape.leaf_data(&[n, d], flat(&h_rows), false).unwrap();
        let g = tape.leaf_data(&[n, d], flat(&g_rows), false).unwrap();
        let ids: Vec<_> = logits
            .iter()
            .map(|v| tape.leaf_data(&[n, classes], v.clone(), false).unwrap())
            .collect();
        (h, g, ids)
    };

    let mut tape = Tape::new();
    let (h, g, ids) = build(&mut tape);
    let bundle = losses::total_loss(
        &mut tape,
        &TotalLossInputs {
            mt_logits: &ids[..k],
            at_logits: &ids[k..],
            h,
            g: Some(g),
            labels: &labels,
            s,
            a,
        },
        &LossSettings {
            margin: 0.2,
            lambda: 1.0,
            fsa: FsaKind::ClassWise,
            soft_share: None,
        },
    )
    .unwrap();
    let total = tape.value_scalar(bundle.total);
    let parts = tape.value_scalar(bundle.l_id)
        + tape.value_scalar(bundle.l_tri)
        + tape.value_scalar(bundle.l_cf);
    assert!((total - parts).abs() < 1e-12);

    // lambda = 0 makes the total numerically independent of g.
    let mut t0 = Tape::new();
    let (h0, g0, ids0) = build(&mut t0);
    let zeroed = losses::total_loss(
        &mut t0,
        &TotalLossInputs {
            mt_logits: &ids0[..k],
            at_logits: &ids0[k..],
            h: h0,
            g: Some(g0),
            labels: &labels,
            s,
            a,
        },
        &LossSettings {
            margin: 0.2,
            lambda: 0.0,
            fsa: FsaKind::ClassWise,
            soft_share: None,
        },
    )
    .unwrap();
    let mut t1 = Tape::new();
    let (h1, _g1, ids1) = build(&mut t1);
    let perturbed_g: Vec<Vec<f64>> = g_rows.iter().map(|r| r.iter().map(|v| v + 3.0).collect()).collect();
    let g1b = t1.leaf_data(&[n, d], flat(&perturbed_g), false).unwrap();
    let zeroed_other = losses::total_loss(
        &mut t1,
        &TotalLossInputs {
            mt_logits: &ids1[..k],
            at_logits: &ids1[k..],
            h: h1,
            g: Some(g1b),
            labels: &labels,
            s,
            a,
        },
        &LossSettings {
            margin: 0.2,
            lambda: 0.0,
            fsa: FsaKind::ClassWise,
            soft_share: None,
        },
    )
    .unwrap();
    assert_eq!(
        t0.value_scalar(zeroed.total),
        t1.value_scalar(zeroed_other.total)
    );

    // naive MTL wiring: no alignment term at all.
    let mut t2 = Tape::new();
    let (h2, _g2, ids2) = build(&mut t2);
    let naive = losses::total_loss(
        &mut t2,
        &TotalLossInputs {
            mt_logits: &ids2[..k],
            at_logits: &ids2[k..],
            h: h2,
            g: None,
            labels: &labels,
            s,
            a,
        },
        &LossSettings {
            margin: 0.2,
            lambda: 1.0,
            fsa: FsaKind::None,
            soft_share: None,
        },
    )
    .unwrap();
    let naive_total = t2.value_scalar(naive.total);
    let naive_parts = t2.value_scalar(naive.l_id) + t2.value_scalar(naive.l_tri);
    assert!((naive_total - naive_parts).abs() < 1e-12);
    assert_eq!(t2.value_scalar(naive.l_cf), 0.0);
}

#[test]
fn zero_violation_batches_contribute_zero_gradient() {
    // Well-separated identities: triplet term is zero and must push no
    // gradient into h.
    let rows = vec![
        vec![5.0, 0.0],
        vec![5.0, 0.1],
        vec![0.0, 5.0],
        vec![0.1, 5.0],
    ];
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let h = tape.leaf_data(&[4, 2], flat(&rows), true).unwrap();
    let (loss, n_t) = losses::batch_hard_triplet(&mut tape, h, &labels, 2, 2, 0.2).unwrap();
    assert_eq!(n_t, 0);
    tape.backward(loss).unwrap();
    assert!(tape.grad(h).unwrap().iter().all(|&g| g == 0.0));
}
