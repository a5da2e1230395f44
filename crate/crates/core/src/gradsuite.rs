//! Finite-difference checks of every differentiable op and loss on random instances.
//!
//! Instances are drawn away from kinks (relu at 0, clamp bounds, the
//! non-negative clip of the PU loss) where the derivative is one-sided.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_diff_check, gradcheck::DEFAULT_STEP, GradCheckReport, Graph, NodeId, Over, Reduction,
};
use crate::error::Result;
use crate::grid::Grid;
use crate::losses::{
    pu_box_loss, seg_ce_loss, self_box_loss, self_da_loss, stage1_loss, BoxMask, ClipMode,
    LossWeights, Normalization, PULossConfig, PriorEstimate, Rect, WeakTarget,
};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub instance: usize,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Rng64 = ChaCha8Rng;

fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Grid<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Grid::new(shape, data).expect("sized")
}

/// Uniform magnitude in `[lo, hi)` with a random sign.
fn signed(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Grid<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Grid::new(shape, data).expect("sized")
}

fn random_boxes(rng: &mut Rng64, b: usize, h: usize, w: usize) -> Vec<BoxMask> {
    (0..b)
        .map(|_| {
            let r0 = rng.gen_range(0..h - 2);
            let c0 = rng.gen_range(0..w - 2);
            let r1 = rng.gen_range(r0 + 1..h);
            let c1 = rng.gen_range(c0 + 1..w);
            BoxMask::new(h, w, vec![Rect { r0, c0, r1, c1 }]).expect("in bounds")
        })
        .collect()
}

/// Contracts an output with fixed random weights so every coordinate has an O(1) gradient.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, weights: &Grid<f64>) -> Result<NodeId> {
    let w = g.constant(weights.clone().reshape(g.value(y).shape())?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(builder: F, inputs: &[Grid<f64>]) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check(builder, inputs, DEFAULT_STEP, TOLERANCE)
}

fn unary(
    rng: &mut Rng64,
    x: Grid<f64>,
    op: fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> GradCheckReport {
    let shape = x.shape().to_vec();
    unary_to(rng, x, &shape, op)
}

fn unary_to(
    rng: &mut Rng64,
    x: Grid<f64>,
    out_shape: &[usize],
    op: fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> GradCheckReport {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    check(
        move |g, ids| {
            let y = op(g, ids[0])?;
            weighted_sum(g, y, &w)
        },
        &[x],
    )
}

fn binary(
    rng: &mut Rng64,
    a: Grid<f64>,
    b: Grid<f64>,
    op: fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>,
) -> GradCheckReport {
    let shape = if a.len() >= b.len() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    };
    let w = uniform(rng, &shape, -1.0, 1.0);
    check(
        move |g, ids| {
            let y = op(g, ids[0], ids[1])?;
            weighted_sum(g, y, &w)
        },
        &[a, b],
    )
}

fn conv_case(rng: &mut Rng64, stride: usize, kernel: usize, padding: usize) -> GradCheckReport {
    let x = uniform(rng, &[2, 3, 6, 6], -1.0, 1.0);
    let k = uniform(rng, &[4, 3, kernel, kernel], -0.5, 0.5);
    let b = uniform(rng, &[4], -0.5, 0.5);
    let out = (6 + 2 * padding - kernel) / stride + 1;
    let w = uniform(rng, &[2, 4, out, out], -1.0, 1.0);
    check(
        move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], stride, padding)?;
            weighted_sum(g, y, &w)
        },
        &[x, k, b],
    )
}

fn reduce_case(rng: &mut Rng64, reduction: Reduction, over: Over) -> GradCheckReport {
    let x = uniform(rng, &[3, 2, 4, 4], -1.0, 1.0);
    let w = uniform(rng, &[3], -1.0, 1.0);
    check(
        move |g, ids| {
            let y = g.reduce(ids[0], reduction, over)?;
            match over {
                Over::All => Ok(y),
                Over::PerImage => weighted_sum(g, y, &w),
            }
        },
        &[x],
    )
}

/// The defitting variant is a surrogate below zero, so it is only checked where it is the identity.
fn clip_case(rng: &mut Rng64, defit: bool) -> GradCheckReport {
    let x = if defit {
        uniform(rng, &[5], 0.05, 1.0)
    } else {
        signed(rng, &[5], 0.05, 1.0)
    };
    let w = uniform(rng, &[5], -1.0, 1.0);
    check(
        move |g, ids| {
            let y = g.clip_non_negative(ids[0], defit)?;
            weighted_sum(g, y, &w)
        },
        &[x],
    )
}

fn probabilities(rng: &mut Rng64, b: usize) -> Grid<f64> {
    uniform(rng, &[b, 1, 8, 8], 0.05, 0.95)
}

fn hard_mask(rng: &mut Rng64, b: usize) -> Grid<f64> {
    uniform(rng, &[b, 1, 8, 8], 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 })
}

/// The per-image PU correction term, computed directly.
fn pu_corrections(
    p: &Grid<f64>,
    boxes: &[BoxMask],
    priors: &[PriorEstimate],
    norm: Normalization,
) -> Vec<f64> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let hl = m.inside().len();
            let (mut su, mut nu, mut sp, mut np) = (0.0, 0usize, 0.0, 0usize);
            for (k, &inside) in m.inside().iter().enumerate() {
                let l = -p.data()[i * hl + k].ln();
                if inside {
                    su += l;
                    nu += 1;
                } else {
                    sp += l;
                    np += 1;
                }
            }
            let mean = |s: f64, n: usize| match norm {
                _ if n == 0 => 0.0,
                Normalization::PerSetMean => s / n as f64,
                Normalization::PerImage => s / hl as f64,
            };
            mean(su, nu) - priors[i].value() * mean(sp, np)
        })
        .collect()
}

fn pu_case(rng: &mut Rng64, norm: Normalization, clip: ClipMode) -> GradCheckReport {
    // resample until every image's correction is clearly away from the clip;
    // the defitting surrogate is only a true gradient where the correction is positive
    let (p, boxes, priors) = loop {
        let p = probabilities(rng, 2);
        let boxes = random_boxes(rng, 2, 8, 8);
        let priors: Vec<PriorEstimate> = (0..2)
            .map(|_| PriorEstimate::fixed(rng.gen_range(0.05..0.95)).expect("in range"))
            .collect();
        let margin = |c: &f64| match clip {
            ClipMode::PlainMax => c.abs() > 1e-3,
            ClipMode::Defit => *c > 1e-3,
        };
        if pu_corrections(&p, &boxes, &priors, norm).iter().all(margin) {
            break (p, boxes, priors);
        }
    };
    let cfg = PULossConfig {
        normalization: norm,
        clip,
    };
    check(
        move |g, ids| pu_box_loss(g, ids[0], &boxes, &priors, cfg),
        &[p],
    )
}

fn self_box_case(rng: &mut Rng64) -> GradCheckReport {
    let p = probabilities(rng, 2);
    let s = probabilities(rng, 2);
    let boxes = random_boxes(rng, 2, 8, 8);
    check(
        move |g, ids| self_box_loss(g, ids[0], &s, &boxes, 0.5),
        &[p],
    )
}

fn stage1_case(rng: &mut Rng64) -> GradCheckReport {
    let (src, tgt) = (probabilities(rng, 2), probabilities(rng, 2));
    let mask = hard_mask(rng, 2);
    let source_view = probabilities(rng, 2);
    let boxes = random_boxes(rng, 2, 8, 8);
    let priors: Vec<PriorEstimate> = (0..2)
        .map(|i| crate::losses::estimate_prior(&source_view.image(i)).expect("non-empty"))
        .collect();
    if pu_corrections(&tgt, &boxes, &priors, Normalization::PerSetMean)
        .iter()
        .any(|c| c.abs() <= 1e-3)
    {
        return stage1_case(rng);
    }
    check(
        move |g, ids| {
            let target = WeakTarget {
                pred: ids[1],
                source_pred: &source_view,
                boxes: &boxes,
            };
            let loss = stage1_loss(
                g,
                ids[0],
                &mask,
                Some(target),
                PULossConfig::default(),
                LossWeights { seg: 1.0, pu: 0.7 },
            )?;
            Ok(loss.total)
        },
        &[src, tgt],
    )
}

type CaseFn = fn(&mut Rng64) -> GradCheckReport;

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("relu", |r| {
            let x = signed(r, &[2, 3, 4], 0.05, 2.0);
            unary(r, x, |g, x| g.relu(x))
        }),
        ("sigmoid", |r| {
            let x = uniform(r, &[2, 3, 4], -4.0, 4.0);
            unary(r, x, |g, x| g.sigmoid(x))
        }),
        ("log", |r| {
            let x = uniform(r, &[2, 3, 4], 0.1, 3.0);
            unary(r, x, |g, x| g.log(x))
        }),
        ("clamp", |r| {
            let x = uniform(r, &[24], -1.0, 1.0).map(|v| {
                if (v.abs() - 0.5).abs() < 0.01 {
                    v * 0.9
                } else {
                    v
                }
            });
            unary(r, x, |g, x| g.clamp(x, -0.5, 0.5))
        }),
        ("neg", |r| {
            let x = uniform(r, &[2, 5], -2.0, 2.0);
            unary(r, x, |g, x| g.neg(x))
        }),
        ("add_const", |r| {
            let x = uniform(r, &[2, 5], -2.0, 2.0);
            unary(r, x, |g, x| g.add_const(x, 0.75))
        }),
        ("mul_const", |r| {
            let x = uniform(r, &[2, 5], -2.0, 2.0);
            unary(r, x, |g, x| g.mul_const(x, -1.5))
        }),
        ("one_minus", |r| {
            let x = uniform(r, &[2, 5], 0.0, 1.0);
            unary(r, x, |g, x| g.one_minus(x))
        }),
        ("add", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 3], -2.0, 2.0),
                uniform(r, &[2, 2, 3], -2.0, 2.0),
            );
            binary(r, a, b, |g, a, b| g.add(a, b))
        }),
        ("sub", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 3], -2.0, 2.0),
                uniform(r, &[2, 2, 3], -2.0, 2.0),
            );
            binary(r, a, b, |g, a, b| g.sub(a, b))
        }),
        ("mul", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 3], -2.0, 2.0),
                uniform(r, &[2, 2, 3], -2.0, 2.0),
            );
            binary(r, a, b, |g, a, b| g.mul(a, b))
        }),
        ("mul_scalar_broadcast", |r| {
            let (a, b) = (
                uniform(r, &[1], -2.0, 2.0),
                uniform(r, &[2, 2, 3], -2.0, 2.0),
            );
            binary(r, a, b, |g, a, b| g.mul(a, b))
        }),
        ("conv2d_3x3_stride1", |r| conv_case(r, 1, 3, 1)),
        ("conv2d_3x3_stride2", |r| conv_case(r, 2, 3, 1)),
        ("conv2d_1x1", |r| conv_case(r, 1, 1, 0)),
        ("conv2d_3x3_valid", |r| conv_case(r, 1, 3, 0)),
        ("sum", |r| reduce_case(r, Reduction::Sum, Over::All)),
        ("mean", |r| reduce_case(r, Reduction::Mean, Over::All)),
        ("sum_per_image", |r| {
            reduce_case(r, Reduction::Sum, Over::PerImage)
        }),
        ("mean_per_image", |r| {
            reduce_case(r, Reduction::Mean, Over::PerImage)
        }),
        ("upsample_nearest", |r| {
            let x = uniform(r, &[2, 2, 3, 3], -1.0, 1.0);
            unary_to(r, x, &[2, 2, 6, 6], |g, x| g.upsample_nearest(x, 2))
        }),
        ("clip_non_negative", |r| clip_case(r, false)),
        ("clip_non_negative_defit", |r| clip_case(r, true)),
        ("seg_ce_loss", |r| {
            let (p, y) = (probabilities(r, 2), hard_mask(r, 2));
            check(move |g, ids| seg_ce_loss(g, ids[0], &y), &[p])
        }),
        ("pu_box_loss_per_set_mean", |r| {
            pu_case(r, Normalization::PerSetMean, ClipMode::PlainMax)
        }),
        ("pu_box_loss_per_image", |r| {
            pu_case(r, Normalization::PerImage, ClipMode::PlainMax)
        }),
        ("pu_box_loss_defit", |r| {
            pu_case(r, Normalization::PerSetMean, ClipMode::Defit)
        }),
        ("self_da_loss", |r| {
            let (p, q) = (probabilities(r, 2), probabilities(r, 2));
            check(move |g, ids| self_da_loss(g, ids[0], &q), &[p])
        }),
        ("self_box_loss", self_box_case),
        ("stage1_loss", stage1_case),
    ]
}

/// Runs `instances` random instances of every case; instance streams are
/// independent, so results do not depend on which cases run first.
pub fn gradient_suite(seed: u64, instances: usize) -> Vec<SuiteCase> {
    let mut out = Vec::new();
    for (c, (name, case)) in cases().into_iter().enumerate() {
        for instance in 0..instances {
            let mut rng = Rng64::seed_from_u64(seed);
            rng.set_stream(((c as u64) << 32) | instance as u64);
            out.push(SuiteCase {
                name,
                instance,
                report: case(&mut rng),
            });
        }
    }
    out
}

/// Case names in suite order.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}
