//! Property tests for the structural invariants.

use mpn_core::image::Grid;
use mpn_core::losses;
use mpn_core::metrics::{rank, EntryMeta};
use mpn_core::ops;
use mpn_core::prior::{self, MapPair};
use mpn_core::tape::Tape;
use proptest::prelude::*;

proptest! {
    #[test]
    fn concat_then_slice_recovers_inputs(
        rows_a in 1usize..5,
        rows_b in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..rows_a * cols).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..rows_b * cols).map(|_| rng.gen()).collect();
        let mut tape = Tape::new();
        let ia = tape.leaf_data(&[rows_a, cols], a.clone(), false).unwrap();
        let ib = tape.leaf_data(&[rows_b, cols], b.clone(), false).unwrap();
        let cat = tape.concat(&[ia, ib], 0).unwrap();
        let back_a = tape.slice(cat, 0, 0, rows_a).unwrap();
        let back_b = tape.slice(cat, 0, rows_a, rows_a + rows_b).unwrap();
        // Bit-exact recovery.
        prop_assert!(tape.value(back_a).iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(tape.value(back_b).iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gmp_is_invariant_under_spatial_permutation(
        seed in any::<u64>(),
        h in 1usize..5,
        w in 1usize..5,
    ) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen::<f64>()).collect();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = data.clone();
        for c in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled[c * h * w + dst] = data[c * h * w + src];
            }
        }
        let (a, _) = ops::global_max_pool(&data, (1, 2, h, w));
        let (b, _) = ops::global_max_pool(&shuffled, (1, 2, h, w));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn strips_partition_the_roi(feat_h in 6usize..40, k in 1usize..7, top_frac in 0.0f64..0.5, span_frac in 0.1f64..1.0) {
        prop_assume!(feat_h >= k);
        let img_h = feat_h * 4;
        let top = ((img_h as f64) * top_frac) as usize;
        let span = (((img_h - top) as f64) * span_frac).max(8.0) as usize;
        let bottom = (top + span).min(img_h);
        let mut parsing = Grid::new(img_h, 32);
        let mut seg = Grid::new(img_h, 32);
        for y in top..bottom {
            for x in 0..32 {
                let label = if y < top + (bottom - top) / 4 {
                    prior::labels::HEAD
                } else if y < top + (bottom - top) / 2 {
                    prior::labels::TORSO
                } else {
                    prior::labels::LEFT_LEG
                };
                parsing.set(y, x, label);
                seg.set(y, x, 1);
            }
        }
        let maps = MapPair::new(parsing, seg).unwrap();
        let p = prior::build_prior(&maps, feat_h, 8, k).unwrap();
        // Disjoint, ordered, covering exactly the ROI (or full height in
        // fallback), sizes within one row of each other.
        let (lo, hi) = if p.fallback_used { (0, feat_h) } else { (p.roi_top, p.roi_bottom + 1) };
        let mut at = lo;
        let mut sizes = Vec::new();
        for &(s, e) in &p.strips {
            prop_assert_eq!(s, at);
            prop_assert!(e >= s);
            at = e;
            sizes.push(e - s);
        }
        prop_assert_eq!(at, hi);
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn build_prior_is_deterministic_and_agrees_with_roi_resize(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (48, 16);
        let mut parsing = Grid::new(h, w);
        let mut seg = Grid::new(h, w);
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(0.5) {
                    parsing.set(y, x, rng.gen_range(0..7));
                }
                if rng.gen_bool(0.5) {
                    seg.set(y, x, 1);
                }
            }
        }
        let maps = MapPair::new(parsing, seg).unwrap();
        let a = prior::build_prior(&maps, 12, 4, 3).unwrap();
        let b = prior::build_prior(&maps, 12, 4, 3).unwrap();
        prop_assert_eq!(&a, &b);
        let rr = prior::roi_resize_prior(&maps, 12, 4, 3).unwrap();
        prop_assert_eq!(a.roi_top, rr.roi_top);
        prop_assert_eq!(a.roi_bottom, rr.roi_bottom);
        prop_assert_eq!(a.fallback_used, rr.fallback_used);
    }

    #[test]
    fn dilation_output_contains_predilated_mask(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w, fh, fw) = (48, 16, 12, 4);
        let mut parsing = Grid::new(h, w);
        let mut seg = Grid::new(h, w);
        for y in 0..h {
            for x in 0..w {
                parsing.set(y, x, if y < h / 4 { prior::labels::HEAD } else { prior::labels::LEFT_LEG });
                if rng.gen_bool(0.6) {
                    seg.set(y, x, 1);
                }
            }
        }
        let maps = MapPair::new(parsing.clone(), seg.clone()).unwrap();
        let p = prior::build_prior(&maps, fh, fw, 3).unwrap();
        prop_assume!(!p.fallback_used);
        // Independent reconstruction of the pre-dilation mask.
        let union: Vec<f64> = (0..h * w)
            .map(|i| if parsing.data[i] != 0 || seg.data[i] != 0 { 1.0 } else { 0.0 })
            .collect();
        let resized = ops::bilinear_forward(&union, (1, 1, h, w), (fh, fw));
        for y in 0..fh {
            for x in 0..fw {
                if resized[y * fw + x] >= 0.5 {
                    prop_assert_eq!(p.mask.get(y, x), 1);
                }
            }
        }
    }

    #[test]
    fn cosine_losses_are_scale_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, row in 0usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (s, a, d) = (3, 2, 8);
        let n = s * a;
        let labels = [0, 0, 1, 1, 2, 2];
        let base: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut scaled = base.clone();
        for c in 0..d {
            scaled[row * d + c] *= scale;
        }
        let eval = |data: &[f64]| {
            let mut tape = Tape::new();
            let h = tape.leaf_data(&[n, d], data.to_vec(), false).unwrap();
            let (tri, _) = losses::batch_hard_triplet(&mut tape, h, &labels, s, a, 0.2).unwrap();
            let cw = losses::class_wise_fsa(&mut tape, h, h, &labels, s, a).unwrap();
            (tape.value_scalar(tri), tape.value_scalar(cw))
        };
        let (t0, _) = eval(&base);
        let (t1, _) = eval(&scaled);
        prop_assert!((t0 - t1).abs() < 1e-8, "{} vs {}", t0, t1);
    }

    #[test]
    fn fsa_is_invariant_under_within_identity_permutation(seed in any::<u64>(), swap in 0usize..2) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (s, a, d) = (2, 3, 5);
        let n = s * a;
        let labels = [0, 0, 0, 1, 1, 1];
        let h: Vec<f64> = (0..n * d).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..n * d).map(|_| rng.gen()).collect();
        // Swap two rows of the chosen identity block in both h and g.
        let (i, j) = (swap * a, swap * a + 1);
        let permute = |v: &[f64]| {
            let mut out = v.to_vec();
            for c in 0..d {
                out.swap(i * d + c, j * d + c);
            }
            out
        };
        let eval = |hv: &[f64], gv: &[f64]| {
            let mut tape = Tape::new();
            let hh = tape.leaf_data(&[n, d], hv.to_vec(), false).unwrap();
            let gg = tape.leaf_data(&[n, d], gv.to_vec(), false).unwrap();
            let cw = losses::class_wise_fsa(&mut tape, hh, gg, &labels, s, a).unwrap();
            tape.value_scalar(cw)
        };
        let v0 = eval(&h, &g);
        let v1 = eval(&permute(&h), &permute(&g));
        prop_assert!((v0 - v1).abs() < 1e-12);
    }

    #[test]
    fn fsa_losses_stay_in_range(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (s, a, d) = (2, 2, 6);
        let n = s * a;
        let labels = [0, 0, 1, 1];
        let h: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let g: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let mut tape = Tape::new();
        let hh = tape.leaf_data(&[n, d], h, false).unwrap();
        let gg = tape.leaf_data(&[n, d], g, false).unwrap();
        let cw = losses::class_wise_fsa(&mut tape, hh, gg, &labels, s, a).unwrap();
        let sw = losses::sample_wise_fsa(&mut tape, hh, gg).unwrap();
        let bw = losses::batch_wise_fsa(&mut tape, hh, gg).unwrap();
        let (tri, _) = losses::batch_hard_triplet(&mut tape, hh, &labels, s, a, 0.2).unwrap();
        for id in [cw, sw, bw] {
            let v = tape.value_scalar(id);
            prop_assert!((0.0..=2.0 + 1e-9).contains(&v));
        }
        prop_assert!(tape.value_scalar(tri) >= 0.0);
    }

    #[test]
    fn cmc_is_monotone_and_ranking_scale_invariant(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (nq, ng, d) = (4, 12, 5);
        let qe: Vec<Vec<f64>> = (0..nq).map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let mut ge: Vec<Vec<f64>> = (0..ng).map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let qm: Vec<EntryMeta> = (0..nq).map(|i| EntryMeta { identity: i % 3, camera: 0 }).collect();
        let gm: Vec<EntryMeta> = (0..ng).map(|i| EntryMeta { identity: i % 3, camera: 1 }).collect();
        let r = rank(&qe, &ge, &qm, &gm).unwrap();
        for w in r.cmc.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-15);
        }
        prop_assert!((r.rank1 - r.cmc[0]).abs() < 1e-15);
        // Positive scaling of one gallery embedding leaves the order alone.
        let idx = (seed % ng as u64) as usize;
        for v in ge[idx].iter_mut() {
            *v *= 7.5;
        }
        let r2 = rank(&qe, &ge, &qm, &gm).unwrap();
        prop_assert_eq!(r.orders, r2.orders);
    }
}
