use proptest::prelude::*;
use sparks_core::engine::{decode_model, encode_model, CodedConv, Layer};
use sparks_core::trainer::QuantizerProblem;
use sparks_core::{
    direct_conv_reference, hungarian_max, precompute_lut, reconstruct_output, select_random, sign_binarize,
    sinkhorn_forward, storage_bits, Codebook, Codeword, ConvGeometry, FileFormat, IndexCodedModel, LayerSpec, Mode,
    PermutationLogits, SelectionMode, SelectionState, SignMap, SinkhornConfig, SubCodebook,
};

fn signs(bits: u32, len: usize) -> Vec<f64> {
    (0..len).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sign_is_nearest_codeword(w in prop::collection::vec(-3.0f64..3.0, 4)) {
        let best = (0..16u32).min_by(|&a, &b| sq_dist(&signs(a, 4), &w).total_cmp(&sq_dist(&signs(b, 4), &w))).unwrap();
        prop_assert_eq!(sign_binarize(&w).unwrap().bits(), best);
    }

    #[test]
    fn sinkhorn_is_column_stochastic(seed in 0u64..1000, n in 2usize..12, tau in 0.05f64..2.0) {
        let x = PermutationLogits::random_uniform(n, 1.0, seed);
        let cfg = SinkhornConfig { iterations: 30, tau, gumbel: true, seed };
        let t = sinkhorn_forward(&x, &cfg).unwrap();
        prop_assert!(t.p().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for col in t.p().columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_beats_every_swap(seed in 0u64..1000, n in 1usize..9) {
        let r = sparks_core::sinkhorn::gumbel_noise(seed, n);
        let p = hungarian_max(&r).unwrap();
        let base = p.objective(&r);
        // no exchange of two columns' rows improves an optimal assignment
        for a in 0..n {
            for b in a + 1..n {
                let (ra, rb) = (p.row_of(a), p.row_of(b));
                let swapped = base - r[[ra, a]] - r[[rb, b]] + r[[rb, a]] + r[[ra, b]];
                prop_assert!(swapped <= base + 1e-9);
            }
        }
    }

    #[test]
    fn quantizer_loss_at_sign_floor_iff_patterns_covered(seed in 0u64..500, pick in prop::collection::btree_set(0u32..16, 1..=8)) {
        let problem = QuantizerProblem::random(2, 6, seed).unwrap();
        let sub = SubCodebook::new(2, pick.iter().copied().collect()).ok();
        prop_assume!(sub.is_some());
        let sub = sub.unwrap();
        let covered = problem
            .kernels()
            .chunks_exact(4)
            .all(|w| sub.contains(sign_binarize(w).unwrap().bits()));
        let f = problem.objective(&sub);
        prop_assert!(f >= 0.0);
        // random kernels are never exactly ±1, so only the sign pattern decides
        let floor: f64 = problem.kernels().iter().map(|v| (v.abs() - 1.0).powi(2)).sum();
        prop_assert_eq!(covered, (f - floor).abs() < 1e-9);
    }

    #[test]
    fn selection_yields_distinct_words(seed in 0u64..200, log_n in 2u32..=8, symmetric in any::<bool>()) {
        let book = Codebook::new(3).unwrap();
        let n = 1usize << log_n;
        let mode = if symmetric { SelectionMode::Symmetric } else { SelectionMode::Plain };
        let cfg = SinkhornConfig { iterations: 3, tau: 0.1, gumbel: true, seed };
        let mut st = SelectionState::with_random_logits(&book, n, mode, cfg, seed).unwrap();
        let sub = st.forward_select(&book).unwrap().clone();
        let mut idx = sub.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), n);
        if symmetric {
            prop_assert!(sub.contains(0) && sub.contains(511));
            prop_assert!(sub.indices().iter().all(|&i| sub.contains(511 - i)));
        }
    }

    #[test]
    fn lut_equals_direct(seed in 0u64..500, c_in in 1usize..6, c_out in 1usize..6, h in 3usize..9, w in 3usize..9,
                         stride in 1usize..3, padding in 0usize..2) {
        let book = Codebook::new(3).unwrap();
        let sub = select_random(seed, 16, &book).unwrap();
        let geom = ConvGeometry::new(c_out, c_in, 3, stride, padding).unwrap();
        let data: Vec<i8> = (0..c_in * h * w).map(|i| if (i as u64 * 2654435761 + seed) % 7 < 3 { 1 } else { -1 }).collect();
        let x = SignMap::new(c_in, h, w, data).unwrap();
        let idx: Vec<u32> = (0..c_out * c_in).map(|i| ((i as u64 * 31 + seed) % 16) as u32).collect();
        let kernels: Vec<Codeword> = idx.iter().map(|&j| sub.codeword(j as usize)).collect();
        let t = precompute_lut(&x, &sub, stride, padding).unwrap();
        prop_assert_eq!(
            reconstruct_output(&t, &idx, c_out, None).unwrap(),
            direct_conv_reference(&x, &kernels, &geom).unwrap()
        );
    }

    #[test]
    fn model_bytes_round_trip(seed in 0u64..300, log_n in 1u32..=9, c_in in 1usize..10, c_out in 1usize..10) {
        let book = Codebook::new(3).unwrap();
        let n = 1usize << log_n;
        let sub = select_random(seed, n, &book).unwrap();
        let idx: Vec<u32> = (0..c_in * c_out).map(|i| ((i as u64 * 97 + seed) % n as u64) as u32).collect();
        let geom = ConvGeometry::new(c_out, c_in, 3, 1, 1).unwrap();
        let layer = CodedConv::new(geom, &idx, log_n, None).unwrap();
        let model = IndexCodedModel::new(sub, vec![Layer::Coded(layer)]).unwrap();
        for format in [FileFormat::SubBit, FileFormat::OneBit] {
            let bytes = encode_model(&model, format).unwrap();
            let back = decode_model(&bytes).unwrap();
            let words = |m: &IndexCodedModel| m.kernel_codewords();
            prop_assert_eq!(words(&back), words(&model));
            if format == FileFormat::SubBit {
                prop_assert_eq!(&back, &model);
            }
        }
    }

    #[test]
    fn storage_is_kernels_times_index_bits(c_in in 1u64..512, c_out in 1u64..512, log_n in 1u32..=9) {
        let l = LayerSpec::conv("l", (8, 8, c_in), (8, 8, c_out), 3, true);
        let n = 1u64 << log_n;
        prop_assert_eq!(storage_bits(&l, Mode::SubBit(n)).unwrap(), Some(c_in * c_out * u64::from(log_n)));
    }
}
