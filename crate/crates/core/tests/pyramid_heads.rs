mod common;

use common::{random_tensor, rng};
use flashvtg_core::heads::{rank_saliency, HdHead, MixWeight, MomentHead, ScoreRefinement};
use flashvtg_core::pyramid::{anchor_center, decode_boundaries, level_lengths, PyramidBuilder};
use flashvtg_core::tensor::{
    grad_check, GradCheckOptions, LossAndGrad, Mask, ParamStore, Tape, Tensor, TensorError,
};
use proptest::prelude::*;
use rand::Rng;

fn ceil_div_pow2(len: usize, k: usize) -> usize {
    let p = 1usize << k;
    len.div_ceil(p)
}

#[test]
fn level_lengths_obey_ceil_law_exhaustively() {
    for len in 1..=128 {
        for k in 1..=5 {
            let expect: Vec<usize> = (0..k).map(|j| ceil_div_pow2(len, j)).collect();
            assert_eq!(level_lengths(len, k), expect, "L_v={len} K={k}");
        }
    }
}

#[test]
fn built_pyramid_matches_level_lengths() {
    let d = 4;
    for (len, k) in [(64, 4), (9, 4), (1, 5), (13, 3), (30, 1)] {
        let mut store = ParamStore::new();
        let pb = PyramidBuilder::new(&mut store, k, d, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let vars = store.register(&mut tape).unwrap();
        let f = random_tensor(&mut rng(1), &[len, d]);
        let fv = tape.constant(f.clone()).unwrap();
        let p = pb
            .build(&mut tape, &vars, fv, &Mask::all_valid(len))
            .unwrap();
        assert_eq!(p.lengths(), level_lengths(len, k));
        for (lvl, &v) in p.levels.iter().enumerate() {
            assert_eq!(tape.value(v).shape(), &[level_lengths(len, k)[lvl], d]);
        }
        assert_eq!(tape.value(p.levels[0]), &f, "level 1 is F unchanged");
    }
    assert_eq!(level_lengths(64, 4), vec![64, 32, 16, 8]);
    assert_eq!(level_lengths(9, 4), vec![9, 5, 3, 2]);
}

#[test]
fn zero_levels_is_an_error() {
    let mut store = ParamStore::new();
    assert!(PyramidBuilder::new(&mut store, 0, 4, &mut rng(0)).is_err());
}

#[test]
fn level_masks_follow_preimages() {
    let mut r = rng(2);
    for _ in 0..200 {
        let len = r.random_range(1..40);
        let valid: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
        let mut mask = Mask::new(valid.clone());
        for k in 0..5 {
            let span = 1usize << k;
            for j in 0..mask.len() {
                let any = (j * span..((j + 1) * span).min(len)).any(|c| valid[c]);
                assert_eq!(mask.is_valid(j), any);
            }
            mask = mask.downsample2();
        }
    }
}

fn hd_oracle(f: &Tensor, mask: &Mask, w1: &Tensor, w2: &Tensor) -> Vec<f64> {
    let (l, d) = (f.rows(), f.cols());
    let n = mask.count_valid() as f64;
    let g: Vec<f64> = (0..d)
        .map(|c| {
            (0..l)
                .filter(|&i| mask.is_valid(i))
                .map(|i| f.at(i, c))
                .sum::<f64>()
                / n
        })
        .collect();
    let wg: Vec<f64> = (0..d)
        .map(|o| (0..d).map(|c| g[c] * w2.at(c, o)).sum())
        .collect();
    (0..l)
        .map(|i| {
            let wf: Vec<f64> = (0..d)
                .map(|o| (0..d).map(|c| f.at(i, c) * w1.at(c, o)).sum())
                .collect();
            wf.iter().zip(&wg).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect()
}

fn hd_scores(store: &ParamStore, head: &HdHead, f: &Tensor, mask: &Mask) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = store.register(&mut tape).unwrap();
    let fv = tape.constant(f.clone()).unwrap();
    let s = head.forward(&mut tape, &vars, fv, mask).unwrap();
    tape.value(s).data().to_vec()
}

fn hd_with(w1: Tensor, w2: Tensor) -> (HdHead, ParamStore) {
    let d = w1.rows();
    let mut store = ParamStore::new();
    let head = HdHead::new(&mut store, d, &mut rng(0)).unwrap();
    *store.get_mut(head.w1.weight) = w1;
    *store.get_mut(head.w2.weight) = w2;
    (head, store)
}

#[test]
fn hd_identity_all_ones_gives_two() {
    let (head, store) = hd_with(Tensor::identity(4), Tensor::identity(4));
    let s = hd_scores(
        &store,
        &head,
        &Tensor::full(&[5, 4], 1.0),
        &Mask::all_valid(5),
    );
    assert!(s.iter().all(|&x| (x - 2.0).abs() < 1e-15));
}

#[test]
fn hd_orthogonal_clip_scores_zero() {
    // W1 rotates e1 onto e2, so every mapped clip is orthogonal to g = e1.
    let mut w1 = Tensor::zeros(&[4, 4]);
    w1.data_mut()[1] = 1.0;
    let (head, store) = hd_with(w1, Tensor::identity(4));
    let mut f = Tensor::zeros(&[3, 4]);
    for i in 0..3 {
        f.data_mut()[i * 4] = 1.0;
    }
    let s = hd_scores(&store, &head, &f, &Mask::all_valid(3));
    assert!(s.iter().all(|&x| x == 0.0));
}

#[test]
fn hd_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let d = 6;
        let (head, store) = hd_with(
            random_tensor(&mut r, &[d, d]),
            random_tensor(&mut r, &[d, d]),
        );
        let l = r.random_range(1..15);
        let f = random_tensor(&mut r, &[l, d]);
        let mut valid: Vec<bool> = (0..l).map(|_| r.random_bool(0.7)).collect();
        valid[0] = true;
        let mask = Mask::new(valid);
        let got = hd_scores(&store, &head, &f, &mask);
        let want = hd_oracle(
            &f,
            &mask,
            store.get(head.w1.weight),
            store.get(head.w2.weight),
        );
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn hd_ignores_order_of_invalid_clips() {
    let mut r = rng(4);
    let d = 5;
    let (head, store) = hd_with(
        random_tensor(&mut r, &[d, d]),
        random_tensor(&mut r, &[d, d]),
    );
    let f = random_tensor(&mut r, &[8, d]);
    let mask = Mask::new(vec![true, false, true, false, false, true, true, false]);
    let invalid = [1usize, 3, 4, 7];
    let mut g = f.clone();
    for (k, &i) in invalid.iter().enumerate() {
        let j = invalid[(k + 1) % invalid.len()];
        g.data_mut()[i * d..(i + 1) * d].copy_from_slice(f.row(j));
    }
    let a = rank_saliency(&hd_scores(&store, &head, &f, &mask), &mask);
    let b = rank_saliency(&hd_scores(&store, &head, &g, &mask), &mask);
    for i in 0..8 {
        if mask.is_valid(i) {
            assert!((a[i] - b[i]).abs() < 1e-12);
        } else {
            assert_eq!(a[i], f64::NEG_INFINITY);
            assert_eq!(b[i], f64::NEG_INFINITY);
        }
    }
}

#[test]
fn hd_without_valid_clips_errors() {
    let (head, store) = hd_with(Tensor::identity(3), Tensor::identity(3));
    let mut tape = Tape::new();
    let vars = store.register(&mut tape).unwrap();
    let f = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = head.forward(&mut tape, &vars, f, &Mask::new(vec![false, false]));
    assert!(matches!(err, Err(TensorError::AllMasked { .. })));
}

fn moment_offsets(store: &ParamStore, head: &MomentHead, f: &Tensor, scale: f64) -> Tensor {
    let mut tape = Tape::new();
    let vars = store.register(&mut tape).unwrap();
    let fv = tape.constant(f.clone()).unwrap();
    let c = tape.constant(Tensor::scalar(scale)).unwrap();
    let out = head
        .forward(&mut tape, &vars, fv, &Mask::all_valid(f.rows()), c)
        .unwrap();
    tape.value(out).clone()
}

#[test]
fn moment_head_scaling_laws() {
    let mut store = ParamStore::new();
    let head = MomentHead::new(&mut store, 6, 3, 2.0, &mut rng(3)).unwrap();
    let f = random_tensor(&mut rng(4), &[11, 6]);
    let zero = moment_offsets(&store, &head, &f, 0.0);
    assert_eq!(zero.shape(), &[11, 2]);
    assert!(zero.data().iter().all(|&x| x == 0.0));
    let one = moment_offsets(&store, &head, &f, 1.7);
    let two = moment_offsets(&store, &head, &f, 3.4);
    assert!(one.data().iter().all(|&x| x >= 0.0));
    assert!(one.data().iter().any(|&x| x > 0.0));
    for (a, b) in one.data().iter().zip(two.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    let mut neg = store.clone();
    *neg.get_mut(head.conv2.bias) = Tensor::full(&[2], -1e6);
    let clamped = moment_offsets(&neg, &head, &f, 1.0);
    assert!(clamped.data().iter().all(|&x| x == 0.0));
}

#[test]
fn moment_scale_initialises_to_level_stride() {
    let mut store = ParamStore::new();
    let head = MomentHead::new(&mut store, 4, 4, 2.0, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let vars = store.register(&mut tape).unwrap();
    for (k, want) in [2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
        let c = head.scale(&mut tape, &vars, k).unwrap();
        assert!((tape.value(c).data()[0] - want).abs() < 1e-12);
    }
}

#[test]
fn decode_examples() {
    let mut offsets = vec![[0.0, 0.0]; 6];
    offsets[3] = [1.0, 3.0];
    let spans = decode_boundaries(&offsets, 0, 2.0, 100.0);
    assert_eq!(spans, vec![(3, 6.0, 10.0)]);
    let spans = decode_boundaries(&offsets, 0, 2.0, 9.0);
    assert_eq!(spans, vec![(3, 6.0, 9.0)]);
    let wide = decode_boundaries(&[[50.0, 50.0]], 2, 2.0, 12.0);
    assert_eq!(wide, vec![(0, 0.0, 12.0)]);
    assert_eq!(anchor_center(1, 2, 2.0), 10.0);
}

proptest! {
    #[test]
    fn decoded_spans_are_well_formed(
        rows in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0), 0..20),
        level in 0usize..4,
        duration in 1.0f64..80.0,
    ) {
        let offsets: Vec<[f64; 2]> = rows.iter().map(|&(a, b)| [a, b]).collect();
        let spans = decode_boundaries(&offsets, level, 2.0, duration);
        prop_assert!(spans.len() <= offsets.len());
        for (i, s, e) in spans {
            prop_assert!(i < offsets.len());
            prop_assert!(0.0 <= s && s < e && e <= duration);
        }
    }
}

struct Heads {
    store: ParamStore,
    pyramid: PyramidBuilder,
    asr: ScoreRefinement,
}

fn heads(d: usize, k: usize, enabled: bool, seed: u64) -> Heads {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let pyramid = PyramidBuilder::new(&mut store, k, d, &mut r).unwrap();
    let asr = ScoreRefinement::new(&mut store, d, 5, enabled, &mut r).unwrap();
    // Non-zero biases so that both branches differ.
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.ends_with(".bias")) {
        let id = store.id(n).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random_tensor(&mut r, &shape);
    }
    Heads {
        store,
        pyramid,
        asr,
    }
}

struct Scores {
    intra: Vec<f64>,
    inter: Option<Vec<f64>>,
    logits: Vec<f64>,
    confidence: Vec<f64>,
}

fn scores(h: &Heads, f: &Tensor, mix: MixWeight) -> Scores {
    let mut tape = Tape::new();
    let vars = h.store.register(&mut tape).unwrap();
    let fv = tape.constant(f.clone()).unwrap();
    let p = h
        .pyramid
        .build(&mut tape, &vars, fv, &Mask::all_valid(f.rows()))
        .unwrap();
    let out = h.asr.forward(&mut tape, &vars, &p, mix).unwrap();
    Scores {
        intra: tape.value(out.intra).data().to_vec(),
        inter: out.inter.map(|v| tape.value(v).data().to_vec()),
        logits: tape.value(out.logits).data().to_vec(),
        confidence: tape.value(out.confidence).data().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn score_length_is_total_positions() {
    let h = heads(4, 4, true, 0);
    let s = scores(&h, &random_tensor(&mut rng(1), &[8, 4]), MixWeight::Learned);
    assert_eq!(s.confidence.len(), 15);
    assert_eq!(s.intra.len(), 15);
    assert_eq!(s.inter.unwrap().len(), 15);
}

#[test]
fn asr_endpoints_reproduce_each_branch() {
    let h = heads(6, 3, true, 5);
    let f = random_tensor(&mut rng(6), &[13, 6]);
    let one = scores(&h, &f, MixWeight::Fixed(1.0));
    assert_eq!(one.logits, one.intra);
    let zero = scores(&h, &f, MixWeight::Fixed(0.0));
    assert_eq!(&zero.logits, zero.inter.as_ref().unwrap());
    for (c, l) in zero.confidence.iter().zip(&zero.inter.unwrap()) {
        assert!((c - sigmoid(*l)).abs() < 1e-15);
    }
}

#[test]
fn disabled_refinement_uses_intra_alone() {
    let h = heads(6, 3, false, 5);
    let s = scores(
        &h,
        &random_tensor(&mut rng(6), &[13, 6]),
        MixWeight::Learned,
    );
    assert!(s.inter.is_none());
    assert_eq!(s.logits, s.intra);
    assert!(h.store.id("asr.inter.conv1.kernel").is_none());
    assert_eq!(h.store.get(h.asr.intra.conv1.kernel).shape()[0], 1);
}

#[test]
fn intra_path_has_no_cross_level_bleed() {
    // Perturbing the last level-1 clip changes level-1 intra scores only
    // near that clip and changes higher levels through the pyramid only.
    let h = heads(4, 1, true, 7);
    let f = random_tensor(&mut rng(8), &[12, 4]);
    let mut g = f.clone();
    g.data_mut()[11 * 4] += 1.0;
    let a = scores(&h, &f, MixWeight::Learned);
    let b = scores(&h, &g, MixWeight::Learned);
    // Two stacked width-5 convs reach 4 clips back.
    for i in 0..7 {
        assert_eq!(a.intra[i], b.intra[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn final_logits_lie_between_branches(seed in 0u64..10_000, xi in -8.0f64..8.0, len in 1usize..20) {
        let mut h = heads(4, 3, true, seed);
        let id = h.store.id("asr.mix_logit").unwrap();
        *h.store.get_mut(id) = Tensor::scalar(xi);
        let s = scores(&h, &random_tensor(&mut rng(seed + 1), &[len, 4]), MixWeight::Learned);
        let inter = s.inter.unwrap();
        for ((l, a), b) in s.logits.iter().zip(&s.intra).zip(&inter) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(*lo - 1e-12 <= *l && *l <= *hi + 1e-12);
        }
        for c in &s.confidence {
            prop_assert!((0.0..=1.0).contains(c));
        }
    }
}

#[test]
fn head_stack_gradients_match_finite_differences() {
    let d = 4;
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let pyramid = PyramidBuilder::new(&mut store, 3, d, &mut r).unwrap();
    let moment = MomentHead::new(&mut store, d, 3, 2.0, &mut r).unwrap();
    let asr = ScoreRefinement::new(&mut store, d, 5, true, &mut r).unwrap();
    let hd = HdHead::new(&mut store, d, &mut r).unwrap();
    // Zero biases put masked rows exactly on a relu kink.
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.ends_with(".bias")) {
        let id = store.id(n).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random_tensor(&mut r, &shape);
    }
    let f = random_tensor(&mut r, &[9, d]);
    let mask = Mask::new(vec![true, true, true, true, true, true, true, false, false]);
    let total = 9 + 5 + 3;
    let w_off: Vec<Tensor> = level_lengths(9, 3)
        .iter()
        .map(|&l| random_tensor(&mut r, &[l, 2]))
        .collect();
    let w_conf = random_tensor(&mut r, &[total, 1]);
    let w_sal = random_tensor(&mut r, &[9, 1]);
    let report = grad_check(&store, GradCheckOptions::default(), |p, want| {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape)?;
        let fv = tape.constant(f.clone())?;
        let pyr = pyramid.build(&mut tape, &vars, fv, &mask)?;
        let mut terms = Vec::new();
        for (k, (&lv, m)) in pyr.levels.iter().zip(&pyr.masks).enumerate() {
            let c = moment.scale(&mut tape, &vars, k)?;
            let off = moment.forward(&mut tape, &vars, lv, m, c)?;
            let w = tape.constant(w_off[k].clone())?;
            let prod = tape.mul(off, w)?;
            terms.push((tape.sum(prod)?, 0.1));
        }
        let sc = asr.forward(&mut tape, &vars, &pyr, MixWeight::Learned)?;
        let w = tape.constant(w_conf.clone())?;
        let prod = tape.mul(sc.confidence, w)?;
        terms.push((tape.sum(prod)?, 1.0));
        let s = hd.forward(&mut tape, &vars, fv, &mask)?;
        let w = tape.constant(w_sal.clone())?;
        let prod = tape.mul(s, w)?;
        terms.push((tape.sum(prod)?, 1.0));
        let loss = tape.weighted_sum(&terms)?;
        let value = tape.value(loss).data()[0];
        let grads = if want {
            let g = tape.backward(loss)?;
            Some(
                vars.iter()
                    .zip(p.values())
                    .map(|(&v, t)| g.get_or_zeros(v, t))
                    .collect(),
            )
        } else {
            None
        };
        Ok::<_, TensorError>(LossAndGrad { loss: value, grads })
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert!(report.coords_checked > 400);
}
