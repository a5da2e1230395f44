//! Independent double-loop references for every loss, plus the pixel-count
//! oracle for generated masks. Each `*_deviation` returns the largest
//! absolute difference between the library and its reference over random
//! 8×8 instances.

#![allow(dead_code, clippy::needless_range_loop)]

use boxadapt_core::losses::{
    estimate_prior, pu_box_loss, seg_ce_loss, self_box_loss, self_da_loss, BoxMask, ClipMode,
    Normalization, PULossConfig, PriorEstimate, Rect,
};
use boxadapt_core::{Graph, Grid, NodeId, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 8;

type Image = [[f64; N]; N];

fn random_image(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Image {
    let mut img = [[0.0; N]; N];
    for row in img.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    img
}

fn random_box(rng: &mut ChaCha8Rng) -> (Rect, [[bool; N]; N]) {
    let r0 = rng.gen_range(0..N);
    let c0 = rng.gen_range(0..N);
    let r1 = rng.gen_range(r0..=N);
    let c1 = rng.gen_range(c0..=N);
    let rect = Rect { r0, c0, r1, c1 };
    let mut w = [[false; N]; N];
    for (r, row) in w.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = r >= r0 && r < r1 && c >= c0 && c < c1;
        }
    }
    (rect, w)
}

fn grid(img: &Image) -> Grid<f64> {
    let flat: Vec<f64> = img.iter().flatten().copied().collect();
    Grid::from_f64(&[1, 1, N, N], &flat).unwrap()
}

fn value(inputs: &Image, build: impl FnOnce(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> f64 {
    let mut g = Graph::new();
    let p = g.leaf(grid(inputs), true).unwrap();
    let out = build(&mut g, p).unwrap();
    g.value(out).item()
}

fn rng(test: u64, instance: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(0xbad5eed ^ test);
    r.set_stream(instance);
    r
}

fn worst(
    instances: u64,
    test: u64,
    mut case: impl FnMut(&mut ChaCha8Rng, u64) -> (f64, f64),
) -> f64 {
    (0..instances)
        .map(|i| {
            let (got, want) = case(&mut rng(test, i), i);
            (got - want).abs()
        })
        .fold(0.0, f64::max)
}

pub fn seg_ce_deviation(instances: u64) -> f64 {
    worst(instances, 1, |r, _| {
        let p = random_image(r, 1e-6, 1.0 - 1e-6);
        let y = random_image(r, 0.0, 1.0).map(|row| row.map(|v| if v < 0.3 { 1.0 } else { 0.0 }));
        let mut total = 0.0;
        for a in 0..N {
            for b in 0..N {
                total -= y[a][b] * p[a][b].ln() + (1.0 - y[a][b]) * (1.0 - p[a][b]).ln();
            }
        }
        let got = value(&p, |g, id| seg_ce_loss(g, id, &grid(&y)));
        (got, total / (N * N) as f64)
    })
}

pub fn estimate_prior_deviation(instances: u64) -> f64 {
    worst(instances, 2, |r, i| {
        // some instances saturate the clamp on either side
        let (lo, hi) = match i % 3 {
            0 => (0.0, 1.0),
            1 => (0.0, 0.01),
            _ => (0.995, 1.0),
        };
        let p = random_image(r, lo, hi);
        let mut sum = 0.0;
        for a in 0..N {
            for b in 0..N {
                sum += p[a][b];
            }
        }
        let reference = (1.0 - sum / (N * N) as f64).clamp(0.01, 0.99);
        (estimate_prior(&grid(&p)).unwrap().value(), reference)
    })
}

fn pu_reference(p: &Image, w: &[[bool; N]; N], prior: f64, norm: Normalization) -> f64 {
    let (mut pos, mut neg_u, mut neg_p) = (0.0, 0.0, 0.0);
    let (mut n_p, mut n_u) = (0usize, 0usize);
    for a in 0..N {
        for b in 0..N {
            if w[a][b] {
                neg_u += -p[a][b].ln();
                n_u += 1;
            } else {
                pos += -(1.0 - p[a][b]).ln();
                neg_p += -p[a][b].ln();
                n_p += 1;
            }
        }
    }
    let norm_by = |sum: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            match norm {
                Normalization::PerSetMean => sum / count as f64,
                Normalization::PerImage => sum / (N * N) as f64,
            }
        }
    };
    let correction = norm_by(neg_u, n_u) - prior * norm_by(neg_p, n_p);
    prior * norm_by(pos, n_p) + correction.max(0.0)
}

pub fn pu_box_deviation(instances: u64, normalization: Normalization, clip: ClipMode) -> f64 {
    worst(instances, 3, |r, _| {
        let p = random_image(r, 1e-6, 1.0 - 1e-6);
        let (rect, w) = random_box(r);
        let prior = r.gen_range(0.01..0.99);
        let boxes = [BoxMask::new(N, N, vec![rect]).unwrap()];
        let priors = [PriorEstimate::fixed(prior).unwrap()];
        let cfg = PULossConfig {
            normalization,
            clip,
        };
        let got = value(&p, |g, id| pu_box_loss(g, id, &boxes, &priors, cfg));
        (got, pu_reference(&p, &w, prior, normalization))
    })
}

pub fn self_da_deviation(instances: u64) -> f64 {
    worst(instances, 4, |r, _| {
        let p = random_image(r, 1e-6, 1.0 - 1e-6);
        let q = random_image(r, 0.0, 1.0);
        let mut total = 0.0;
        for a in 0..N {
            for b in 0..N {
                total -= q[a][b] * p[a][b].ln() + (1.0 - q[a][b]) * (1.0 - p[a][b]).ln();
            }
        }
        let got = value(&p, |g, id| self_da_loss(g, id, &grid(&q)));
        (got, total / (N * N) as f64)
    })
}

pub fn self_box_deviation(instances: u64) -> f64 {
    worst(instances, 5, |r, _| {
        let p = random_image(r, 1e-6, 1.0 - 1e-6);
        let s = random_image(r, 0.0, 1.0);
        let (rect, w) = random_box(r);
        let tau = r.gen_range(0.2..0.8);
        let mut total = 0.0;
        for a in 0..N {
            for b in 0..N {
                if !w[a][b] {
                    total -= (1.0 - p[a][b]).ln();
                } else if s[a][b] >= tau {
                    total -= p[a][b].ln();
                }
            }
        }
        let boxes = [BoxMask::new(N, N, vec![rect]).unwrap()];
        let got = value(&p, |g, id| self_box_loss(g, id, &grid(&s), &boxes, tau));
        (got, total / (N * N) as f64)
    })
}

/// Every loss with its worst deviation over `instances` random instances.
pub fn all_deviations(instances: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("seg_ce_loss", seg_ce_deviation(instances)),
        ("estimate_prior", estimate_prior_deviation(instances)),
        (
            "pu_box_loss per-set-mean",
            pu_box_deviation(instances, Normalization::PerSetMean, ClipMode::PlainMax),
        ),
        (
            "pu_box_loss per-image",
            pu_box_deviation(instances, Normalization::PerImage, ClipMode::PlainMax),
        ),
        ("self_da_loss", self_da_deviation(instances)),
        ("self_box_loss", self_box_deviation(instances)),
    ]
}

/// Number of pixel centres inside a disc of radius `r`, minimised and
/// maximised over sub-pixel placements of its centre.
pub fn disc_pixel_range(r: f64) -> (usize, usize) {
    let steps = 50;
    let (mut lo, mut hi) = (usize::MAX, 0);
    for i in 0..steps {
        for j in 0..steps {
            let (oy, ox) = (i as f64 / steps as f64, j as f64 / steps as f64);
            let reach = r.ceil() as i64 + 1;
            let mut count = 0;
            for y in -reach..=reach {
                for x in -reach..=reach {
                    let (dy, dx) = (y as f64 + 0.5 - oy, x as f64 + 0.5 - ox);
                    if dy * dy + dx * dx <= r * r {
                        count += 1;
                    }
                }
            }
            lo = lo.min(count);
            hi = hi.max(count);
        }
    }
    (lo, hi)
}

/// Foreground-fraction bounds for a domain: every ellipse contains a disc of
/// the smallest radius and lies inside a disc of the largest one.
pub fn foreground_fraction_bounds(spec: &boxadapt_core::data::DomainSpec) -> (f64, f64) {
    let (lo, _) = disc_pixel_range(spec.radius_min);
    let (_, hi) = disc_pixel_range(spec.radius_max);
    let slack = 2;
    let pixels = (spec.height * spec.width) as f64;
    (
        (lo - slack) as f64 / pixels,
        (spec.max_objects * hi + slack) as f64 / pixels,
    )
}
