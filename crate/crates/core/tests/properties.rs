use boxadapt_core::data::derive_box;
use boxadapt_core::eval::dice;
use boxadapt_core::losses::{
    estimate_prior, estimate_priors, mix_pseudo, pu_box_loss, seg_ce_loss, self_box_loss,
    self_da_loss, stage1_loss, BoxMask, ClipMode, LossWeights, Normalization, PULossConfig, Rect,
    WeakTarget,
};
use boxadapt_core::segnet::{Head, NetConfig, SegModel};
use boxadapt_core::{Graph, Grid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(shape: &[usize], values: &[f64]) -> Grid<f64> {
    Grid::from_f64(shape, values).unwrap()
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn rect_in(h: usize, w: usize) -> impl Strategy<Value = Rect> {
    (0..h, 0..w)
        .prop_flat_map(move |(r0, c0)| (Just(r0), Just(c0), r0 + 1..=h, c0 + 1..=w))
        .prop_map(|(r0, c0, r1, c1)| Rect { r0, c0, r1, c1 })
}

fn conv_value(x: &Grid<f64>, k: &Grid<f64>, b: &Grid<f64>) -> Grid<f64> {
    let mut g = Graph::new();
    let (x, k, b) = (
        g.constant(x.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(b.clone()).unwrap(),
    );
    let y = g.conv2d(x, k, b, 1, 1).unwrap();
    g.value(y).clone()
}

fn zip_with(a: &Grid<f64>, b: &Grid<f64>, f: impl Fn(f64, f64) -> f64) -> Grid<f64> {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    grid(a.shape(), &data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(
        x1 in values(2 * 6 * 6, -1.0, 1.0),
        x2 in values(2 * 6 * 6, -1.0, 1.0),
        k in values(3 * 2 * 9, -1.0, 1.0),
        a in -2.0f64..2.0,
    ) {
        let x1 = grid(&[1, 2, 6, 6], &x1);
        let x2 = grid(&[1, 2, 6, 6], &x2);
        let k = grid(&[3, 2, 3, 3], &k);
        let zero = Grid::zeros(&[3]);
        let combined = zip_with(&x1, &x2, |p, q| a * p + q);
        let lhs = conv_value(&combined, &k, &zero);
        let rhs = zip_with(&conv_value(&x1, &k, &zero), &conv_value(&x2, &k, &zero), |p, q| a * p + q);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampling_scales_the_sum(x in values(2 * 3 * 4, -5.0, 5.0), factor in 1usize..4) {
        let x = grid(&[1, 2, 3, 4], &x);
        let mut g = Graph::new();
        let id = g.constant(x.clone()).unwrap();
        let up = g.upsample_nearest(id, factor).unwrap();
        let expected = x.sum() * (factor * factor) as f64;
        prop_assert!((g.value(up).sum() - expected).abs() < 1e-10);
        prop_assert_eq!(g.value(up).shape(), &[1, 2, 3 * factor, 4 * factor][..]);
    }

    #[test]
    fn prior_is_bounded_and_monotone(p in values(16, 0.0, 1.0), bump in 0.0f64..0.5, at in 0usize..16) {
        let base = estimate_prior(&grid(&[1, 1, 4, 4], &p)).unwrap().value();
        prop_assert!((0.01..=0.99).contains(&base));
        let mut more = p.clone();
        more[at] = (more[at] + bump).min(1.0);
        let raised = estimate_prior(&grid(&[1, 1, 4, 4], &more)).unwrap().value();
        prop_assert!(raised <= base);
    }

    #[test]
    fn self_box_ignores_rejected_pixels_inside_the_box(
        p in values(36, 0.01, 0.99),
        s in values(36, 0.0, 1.0),
        noise in values(36, 0.01, 0.99),
        rect in rect_in(6, 6),
        tau in 0.2f64..0.8,
    ) {
        let boxes = [BoxMask::new(6, 6, vec![rect]).unwrap()];
        let loss = |p: &[f64]| {
            let mut g = Graph::new();
            let id = g.leaf(grid(&[1, 1, 6, 6], p), true).unwrap();
            let l = self_box_loss(&mut g, id, &grid(&[1, 1, 6, 6], &s), &boxes, tau).unwrap();
            g.value(l).item()
        };
        let mut perturbed = p.clone();
        for i in 0..36 {
            if boxes[0].inside()[i] && s[i] < tau {
                perturbed[i] = noise[i];
            }
        }
        prop_assert_eq!(loss(&p).to_bits(), loss(&perturbed).to_bits());
    }

    #[test]
    fn pseudo_label_is_a_constant_target(
        p in values(16, 0.05, 0.95),
        s in values(16, 0.0, 1.0),
        alpha in 0.0f64..=1.0,
    ) {
        let mut g = Graph::new();
        let id = g.leaf(grid(&[1, 1, 4, 4], &p), true).unwrap();
        let q = mix_pseudo(&grid(&[1, 1, 4, 4], &s), g.value(id), alpha).unwrap();
        let l = self_da_loss(&mut g, id, &q).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(id).unwrap();
        for ((&pi, &qi), &gi) in p.iter().zip(q.data()).zip(grad.data()) {
            // gradient of the cross-entropy with q held fixed
            let expected = (pi - qi) / (pi * (1.0 - pi)) / 16.0;
            prop_assert!((gi - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pu_loss_is_invariant_to_side_by_side_tiling(
        p in values(20, 0.01, 0.99),
        src in values(20, 0.0, 1.0),
        rect in rect_in(4, 5),
        per_image in any::<bool>(),
    ) {
        let cfg = PULossConfig {
            normalization: if per_image { Normalization::PerImage } else { Normalization::PerSetMean },
            clip: ClipMode::PlainMax,
        };
        let tile = |v: &[f64]| -> Vec<f64> {
            (0..4).flat_map(|r| v[r * 5..r * 5 + 5].iter().chain(&v[r * 5..r * 5 + 5]).copied().collect::<Vec<_>>()).collect()
        };
        let loss = |p: Vec<f64>, src: Vec<f64>, w: usize, rects: Vec<Rect>| {
            let boxes = [BoxMask::new(4, w, rects).unwrap()];
            let priors = estimate_priors(&grid(&[1, 1, 4, w], &src)).unwrap();
            let mut g = Graph::new();
            let id = g.leaf(grid(&[1, 1, 4, w], &p), true).unwrap();
            let l = pu_box_loss(&mut g, id, &boxes, &priors, cfg).unwrap();
            g.value(l).item()
        };
        let shifted = Rect { c0: rect.c0 + 5, c1: rect.c1 + 5, ..rect };
        let single = loss(p.clone(), src.clone(), 5, vec![rect]);
        let tiled = loss(tile(&p), tile(&src), 10, vec![rect, shifted]);
        prop_assert!((single - tiled).abs() < 1e-6, "{} vs {}", single, tiled);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in values(25, 0.0, 1.0), b in values(25, 0.0, 1.0)) {
        let (a, b) = (grid(&[5, 5], &a), grid(&[5, 5], &b));
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn derived_box_covers_its_mask(
        bits in prop::collection::vec(any::<bool>(), 64),
        margin in 0usize..3,
        jitter in 0usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let mask = grid(&[8, 8], &bits.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = derive_box(&mask, margin, jitter, &mut rng).unwrap();
        prop_assert!(boxes.covers(&mask));
    }
}

#[test]
fn both_empty_masks_score_one() {
    let empty = Grid::<f64>::zeros(&[4, 4]);
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
}

/// The shared encoder receives the sum of the source-branch and target-branch
/// gradients of the first-stage objective.
#[test]
fn shared_gradient_is_the_sum_of_both_branches() {
    let config = NetConfig {
        base_channels: 3,
        shared_blocks: 2,
        ..NetConfig::default()
    };
    let model = SegModel::<f64>::build(config, 3).unwrap();
    let pixels = |offset: f64| -> Vec<f64> {
        (0..2 * 64)
            .map(|i| ((i as f64 * 0.37 + offset).sin() + 1.0) / 2.0)
            .collect()
    };
    let xs = grid(&[2, 1, 8, 8], &pixels(0.0));
    let ys = xs.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let xt = grid(&[2, 1, 8, 8], &pixels(1.3));
    let boxes = vec![
        BoxMask::new(
            8,
            8,
            vec![Rect {
                r0: 1,
                c0: 2,
                r1: 6,
                c1: 7,
            }],
        )
        .unwrap(),
        BoxMask::new(
            8,
            8,
            vec![Rect {
                r0: 0,
                c0: 0,
                r1: 4,
                c1: 5,
            }],
        )
        .unwrap(),
    ];
    let source_on_target = model.predict(Head::Source, &xt).unwrap();
    let cfg = PULossConfig::default();

    let gradients = |with_source: bool, with_target: bool| {
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let root = if with_source && with_target {
            let xs_id = g.constant(xs.clone()).unwrap();
            let ps = model.forward(&mut g, &bound, Head::Source, xs_id).unwrap();
            let xt_id = g.constant(xt.clone()).unwrap();
            let pt = model.forward(&mut g, &bound, Head::Target, xt_id).unwrap();
            let target = WeakTarget {
                pred: pt,
                source_pred: &source_on_target,
                boxes: &boxes,
            };
            stage1_loss(&mut g, ps, &ys, Some(target), cfg, LossWeights::default())
                .unwrap()
                .total
        } else if with_source {
            let xs_id = g.constant(xs.clone()).unwrap();
            let ps = model.forward(&mut g, &bound, Head::Source, xs_id).unwrap();
            seg_ce_loss(&mut g, ps, &ys).unwrap()
        } else {
            let xt_id = g.constant(xt.clone()).unwrap();
            let pt = model.forward(&mut g, &bound, Head::Target, xt_id).unwrap();
            let priors = estimate_priors(&source_on_target).unwrap();
            pu_box_loss(&mut g, pt, &boxes, &priors, cfg).unwrap()
        };
        g.backward(root).unwrap();
        model.gradients(&g, &bound)
    };
    let joint = gradients(true, true);
    let source = gradients(true, false);
    let target = gradients(false, true);
    let mut checked = 0;
    for &i in &model.shared_params() {
        let (j, s, t) = (
            joint[i].as_ref().unwrap(),
            source[i].as_ref().unwrap(),
            target[i].as_ref().unwrap(),
        );
        for ((a, b), c) in j.data().iter().zip(s.data()).zip(t.data()) {
            assert!(
                (a - (b + c)).abs() < 1e-6,
                "{}: {a} vs {}",
                model.params()[i].name,
                b + c
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}
