//! Training objectives.
//!
//! All losses take foreground probabilities `p` of shape `(B, 1, H, W)` that
//! are already clamped away from 0 and 1. Targets derived from a network's own
//! predictions (prior, mixed soft labels, thresholded source masks) enter the
//! graph as constants.

mod boxmask;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Over, Reduction};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::segnet::{Head, SegModel};

pub use boxmask::{BoxMask, Rect};

/// Clamp applied to the estimated background prior.
pub const PRIOR_EPS: f64 = 0.01;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    EstimatedFromSource,
    Fixed,
}

/// Fraction of background pixels in one image.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    value: f64,
    provenance: PriorSource,
}

impl PriorEstimate {
    pub fn fixed(value: f64) -> Result<Self> {
        if !(PRIOR_EPS..=1.0 - PRIOR_EPS).contains(&value) {
            return Err(Error::Config(format!(
                "prior {value} outside [{PRIOR_EPS}, {}]",
                1.0 - PRIOR_EPS
            )));
        }
        Ok(Self {
            value,
            provenance: PriorSource::Fixed,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn provenance(&self) -> PriorSource {
        self.provenance
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Each sum divided by the size of its own pixel set.
    #[default]
    PerSetMean,
    /// Each sum divided by the pixel count of the image.
    PerImage,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    #[default]
    PlainMax,
    Defit,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PULossConfig {
    pub normalization: Normalization,
    pub clip: ClipMode,
}

fn same_shape<T: Real>(op: &'static str, a: &Grid<T>, b: &Grid<T>) -> Result<()> {
    if a.len() != b.len() || a.dims4() != b.dims4() {
        return Err(Error::shape(
            op,
            format!("{:?} does not match {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_boxes<T: Real>(op: &'static str, pred: &Grid<T>, boxes: &[BoxMask]) -> Result<()> {
    let [b, c, h, w] = pred.dims4();
    if c != 1 || boxes.len() != b {
        return Err(Error::shape(
            op,
            format!("{} boxes for prediction {:?}", boxes.len(), pred.shape()),
        ));
    }
    if let Some(bad) = boxes.iter().find(|m| m.height() != h || m.width() != w) {
        return Err(Error::shape(
            op,
            format!(
                "box {}×{} does not match prediction {h}×{w}",
                bad.height(),
                bad.width()
            ),
        ));
    }
    Ok(())
}

/// Per-pixel `-log p` and `-log(1 - p)`.
fn neg_logs<T: Real>(g: &mut Graph<T>, pred: NodeId) -> Result<(NodeId, NodeId)> {
    let log_p = g.log(pred)?;
    let fg = g.neg(log_p)?;
    let one_minus = g.one_minus(pred)?;
    let log_q = g.log(one_minus)?;
    let bg = g.neg(log_q)?;
    Ok((fg, bg))
}

/// Mean over pixels of `-[y log p + (1 - y) log(1 - p)]`, with soft or hard `y`.
fn binary_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    op: &'static str,
    pred: NodeId,
    target: &Grid<T>,
) -> Result<NodeId> {
    same_shape(op, g.value(pred), target)?;
    let target = target.clone().reshape(g.value(pred).shape())?;
    let (fg, bg) = neg_logs(g, pred)?;
    let y = g.constant(target.clone())?;
    let not_y = g.constant(target.map(|v| T::one() - v))?;
    let a = g.mul(y, fg)?;
    let b = g.mul(not_y, bg)?;
    let per_pixel = g.add(a, b)?;
    g.mean(per_pixel)
}

/// Pixel-wise binary cross-entropy against a ground-truth mask.
pub fn seg_ce_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, mask: &Grid<T>) -> Result<NodeId> {
    binary_cross_entropy(g, "seg_ce_loss", pred, mask)
}

/// Background prior of one image from the source network's foreground map:
/// `clamp(1 - mean(p), 0.01, 0.99)`.
pub fn estimate_prior<T: Real>(source_pred: &Grid<T>) -> Result<PriorEstimate> {
    if source_pred.is_empty() {
        return Err(Error::Contract("estimate_prior on an empty grid".into()));
    }
    let mean =
        source_pred.data().iter().map(|v| v.as_f64()).sum::<f64>() / source_pred.len() as f64;
    Ok(PriorEstimate {
        value: (1.0 - mean).clamp(PRIOR_EPS, 1.0 - PRIOR_EPS),
        provenance: PriorSource::EstimatedFromSource,
    })
}

/// One prior per image of a `(B, 1, H, W)` batch.
pub fn estimate_priors<T: Real>(source_pred: &Grid<T>) -> Result<Vec<PriorEstimate>> {
    let b = source_pred.dims4()[0];
    (0..b)
        .map(|i| estimate_prior(&source_pred.image(i)))
        .collect()
}

/// Per-image pixel weights: `select` marks set membership, each member gets
/// `1 / |set|` (per-set mean) or `1 / HL` (per image).
fn set_weights<T: Real>(
    shape: &[usize],
    boxes: &[BoxMask],
    normalization: Normalization,
    select: impl Fn(bool) -> bool,
) -> Result<Grid<T>> {
    let mut data = Vec::new();
    for m in boxes {
        let hl = m.inside().len();
        let members = m.inside().iter().filter(|&&b| select(b)).count();
        let denom = match normalization {
            Normalization::PerSetMean => members,
            Normalization::PerImage => hl,
        };
        let weight = if members == 0 {
            T::zero()
        } else {
            T::one() / T::of(denom as f64)
        };
        data.extend(
            m.inside()
                .iter()
                .map(|&b| if select(b) { weight } else { T::zero() }),
        );
    }
    Grid::new(shape, data)
}

/// Non-negative positive-unlabeled loss with background as the positive class.
///
/// Positive set P: pixels outside every box. Unlabeled set U: pixels inside a
/// box. With `ℓ+ = -log(1 - p)` and `ℓ- = -log p`, each image contributes
///
/// `π·E_P[ℓ+] + max(0, E_U[ℓ-] - π·E_P[ℓ-])`
///
/// and the batch loss is the mean over images. Empty sets contribute 0.
pub fn pu_box_loss<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    boxes: &[BoxMask],
    priors: &[PriorEstimate],
    cfg: PULossConfig,
) -> Result<NodeId> {
    let shape = g.value(pred).shape().to_vec();
    check_boxes("pu_box_loss", g.value(pred), boxes)?;
    if priors.len() != boxes.len() {
        return Err(Error::shape(
            "pu_box_loss",
            format!("{} priors for {} images", priors.len(), boxes.len()),
        ));
    }
    let (fg, bg) = neg_logs(g, pred)?;
    let w_pos = g.constant(set_weights(&shape, boxes, cfg.normalization, |inside| {
        !inside
    })?)?;
    let w_unl = g.constant(set_weights(&shape, boxes, cfg.normalization, |inside| {
        inside
    })?)?;
    let prior = g.constant(Grid::new(
        &[priors.len()],
        priors.iter().map(|p| T::of(p.value())).collect(),
    )?)?;

    let per_image = |g: &mut Graph<T>, a: NodeId, w: NodeId| -> Result<NodeId> {
        let weighted = g.mul(a, w)?;
        g.reduce(weighted, Reduction::Sum, Over::PerImage)
    };
    let risk_pos = per_image(g, bg, w_pos)?;
    let neg_unl = per_image(g, fg, w_unl)?;
    let neg_pos = per_image(g, fg, w_pos)?;

    let pos_term = g.mul(prior, risk_pos)?;
    let scaled = g.mul(prior, neg_pos)?;
    let correction = g.sub(neg_unl, scaled)?;
    let clipped = g.clip_non_negative(correction, cfg.clip == ClipMode::Defit)?;
    let per = g.add(pos_term, clipped)?;
    g.mean(per)
}

/// Soft pseudo-label `(1 - α)·s + α·t`, detached from both inputs.
pub fn mix_pseudo<T: Real>(source: &Grid<T>, target: &Grid<T>, alpha: f64) -> Result<Grid<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    same_shape("mix_pseudo", source, target)?;
    let (a, b) = (T::of(1.0 - alpha), T::of(alpha));
    let data = source
        .data()
        .iter()
        .zip(target.data())
        .map(|(&s, &t)| a * s + b * t)
        .collect();
    Grid::new(source.shape(), data)
}

/// Soft-target binary cross-entropy against a mixed pseudo-label.
pub fn self_da_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, q: &Grid<T>) -> Result<NodeId> {
    binary_cross_entropy(g, "self_da_loss", pred, q)
}

/// Box-refined pseudo-label loss.
///
/// Inside the box, pixels the source network marks as foreground
/// (`source_pred ≥ τ`) get `-log p`; outside the box every pixel gets
/// `-log(1 - p)`; inside-box pixels the source network rejects are ignored.
/// Each image's sum is divided by its pixel count, then averaged over the batch.
pub fn self_box_loss<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    source_pred: &Grid<T>,
    boxes: &[BoxMask],
    tau: f64,
) -> Result<NodeId> {
    let shape = g.value(pred).shape().to_vec();
    same_shape("self_box_loss", g.value(pred), source_pred)?;
    check_boxes("self_box_loss", g.value(pred), boxes)?;
    let tau = T::of(tau);
    let mut fg_w = Vec::with_capacity(source_pred.len());
    let mut bg_w = Vec::with_capacity(source_pred.len());
    for (i, m) in boxes.iter().enumerate() {
        let hl = m.inside().len();
        let inv = T::one() / T::of(hl as f64);
        let s = &source_pred.data()[i * hl..(i + 1) * hl];
        for (&inside, &sv) in m.inside().iter().zip(s) {
            fg_w.push(if inside && sv >= tau { inv } else { T::zero() });
            bg_w.push(if inside { T::zero() } else { inv });
        }
    }
    let (fg, bg) = neg_logs(g, pred)?;
    let fg_w = g.constant(Grid::new(&shape, fg_w)?)?;
    let bg_w = g.constant(Grid::new(&shape, bg_w)?)?;
    let a = g.mul(fg_w, fg)?;
    let b = g.mul(bg_w, bg)?;
    let per_pixel = g.add(a, b)?;
    let per = g.reduce(per_pixel, Reduction::Sum, Over::PerImage)?;
    g.mean(per)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub pu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 1.0, pu: 1.0 }
    }
}

/// Node ids of a combined objective and its parts.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Stage1Loss {
    pub total: NodeId,
    pub seg: NodeId,
    pub pu: Option<NodeId>,
}

/// Inputs of the target-domain half of the first-stage objective.
pub struct WeakTarget<'a, T> {
    /// Target head prediction on the weakly labelled batch.
    pub pred: NodeId,
    /// Source head prediction on the same batch; only used to estimate the prior.
    pub source_pred: &'a Grid<T>,
    pub boxes: &'a [BoxMask],
}

/// `λ_seg·seg_ce_loss + λ_pu·pu_box_loss`, with per-image priors estimated
/// from the source network's prediction on the target batch.
///
/// Without a target batch (or with `λ_pu = 0`) this is the source-only objective.
pub fn stage1_loss<T: Real>(
    g: &mut Graph<T>,
    source_pred: NodeId,
    source_mask: &Grid<T>,
    target: Option<WeakTarget<'_, T>>,
    cfg: PULossConfig,
    weights: LossWeights,
) -> Result<Stage1Loss> {
    let seg = seg_ce_loss(g, source_pred, source_mask)?;
    let weighted_seg = g.mul_const(seg, weights.seg)?;
    let Some(target) = target.filter(|_| weights.pu != 0.0) else {
        return Ok(Stage1Loss {
            total: weighted_seg,
            seg,
            pu: None,
        });
    };
    let priors = estimate_priors(target.source_pred)?;
    let pu = pu_box_loss(g, target.pred, target.boxes, &priors, cfg)?;
    let weighted_pu = g.mul_const(pu, weights.pu)?;
    let total = g.add(weighted_seg, weighted_pu)?;
    Ok(Stage1Loss {
        total,
        seg,
        pu: Some(pu),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Stage2Loss {
    pub total: NodeId,
    pub self_da: Option<NodeId>,
    pub self_box: Option<NodeId>,
}

/// Second-stage objective on target batches.
///
/// The target head runs with gradients; the frozen source head and the
/// current target prediction supply constant pseudo-labels that are rebuilt on
/// every call. Either batch may be absent, but not both.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<T: Real>(
    g: &mut Graph<T>,
    model: &SegModel<T>,
    bound: &crate::segnet::Bound,
    unlabeled: Option<&Grid<T>>,
    weak: Option<(&Grid<T>, &[BoxMask])>,
    alpha: f64,
    tau: f64,
) -> Result<Stage2Loss> {
    if unlabeled.is_none() && weak.is_none() {
        return Err(Error::Contract(
            "second-stage loss needs unlabeled or weakly labelled samples".into(),
        ));
    }
    let self_da = unlabeled
        .map(|x| -> Result<NodeId> {
            let source = model.predict(Head::Source, x)?;
            let input = g.constant(x.clone())?;
            let pred = model.forward(g, bound, Head::Target, input)?;
            let q = mix_pseudo(&source, g.value(pred), alpha)?;
            self_da_loss(g, pred, &q)
        })
        .transpose()?;
    let self_box = weak
        .map(|(x, boxes)| -> Result<NodeId> {
            let source = model.predict(Head::Source, x)?;
            let input = g.constant(x.clone())?;
            let pred = model.forward(g, bound, Head::Target, input)?;
            self_box_loss(g, pred, &source, boxes, tau)
        })
        .transpose()?;
    let total = match (self_da, self_box) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("checked above"),
    };
    Ok(Stage2Loss {
        total,
        self_da,
        self_box,
    })
}
