//! Adam, the learning-rate schedule and the two training stages.

mod config;
mod log;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{stack_images, stack_masks, Sample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::losses::{stage1_loss, stage2_loss, BoxMask, LossWeights, WeakTarget};
use crate::segnet::{Head, SegModel, Sharing};

pub use config::TrainConfig;
pub use log::{LogRow, RunLog};

/// First and second moment estimates for every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Grid<T>>,
    pub v: Vec<Grid<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &SegModel<T>) -> Self {
        let zeros: Vec<Grid<T>> = model
            .params()
            .iter()
            .map(|p| Grid::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update of every trainable parameter that received a gradient.
///
/// All gradients are checked before any parameter moves, so a non-finite
/// gradient leaves the model untouched.
pub fn adam_step<T: Real>(
    model: &mut SegModel<T>,
    grads: &[Option<Grid<T>>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let n = model.params().len();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{n} parameters, {} gradients, {} moment slots",
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in model.params().iter().zip(grads) {
        let Some(g) = g.as_ref().filter(|_| p.trainable) else {
            continue;
        };
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {:?} for {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        if g.first_non_finite().is_some() {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
                iteration: model.iteration(),
            });
        }
    }

    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1t, b2t, epst) = (T::of(b1), T::of(b2), T::of(cfg.adam_eps));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (lr_c1, c2t) = (T::of(lr / c1), T::of(c2));
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let Some(g) = grads[i].as_ref().filter(|_| p.trainable) else {
            continue;
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1t * *m + one_b1 * g;
            *v = b2t * *v + one_b2 * g * g;
            *theta = *theta - lr_c1 * *m / ((*v / c2t).sqrt() + epst);
        }
    }
    Ok(())
}

/// Step-decayed learning rate for a stage of `stage_iterations` steps.
pub fn lr_at(iteration: u64, cfg: &TrainConfig, stage_iterations: u64) -> f64 {
    let interval = cfg.decay_interval_for(stage_iterations);
    let decays = (iteration / interval).min(i32::MAX as u64) as i32;
    cfg.lr * cfg.lr_decay.powi(decays)
}

/// Draws batches with replacement from one split, from its own seeded stream.
struct Sampler<'a> {
    samples: &'a [Sample],
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    fn new(samples: &'a [Sample], seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { samples, rng }
    }

    fn draw(&mut self, batch: usize) -> Vec<&'a Sample> {
        (0..batch)
            .map(|_| &self.samples[self.rng.gen_range(0..self.samples.len())])
            .collect()
    }
}

fn boxes_of(samples: &[&Sample]) -> Result<Vec<BoxMask>> {
    samples
        .iter()
        .map(|s| {
            s.boxes
                .clone()
                .ok_or_else(|| Error::Contract(format!("sample {} has no box", s.id)))
        })
        .collect()
}

fn scalar<T: Real>(g: &Graph<T>, id: crate::NodeId, iteration: u64) -> Result<f64> {
    let v = g.value(id).item().as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(iteration))
    }
}

const SOURCE_STREAM: u64 = 1;
const WEAK_STREAM: u64 = 2;
const UNLABELED_STREAM: u64 = 3;

/// Joint training of the shared encoder and both heads on source masks and
/// target boxes.
///
/// Passing an empty weak split (or `lambda_pu = 0`) trains on source labels
/// alone and never touches target images.
pub fn train_stage1<T: Real>(
    model: &mut SegModel<T>,
    source: &[Sample],
    weak: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    if model.sharing() != Sharing::Shared {
        return Err(Error::State(
            "first-stage training needs a model with a shared encoder".into(),
        ));
    }
    if source.is_empty() {
        return Err(Error::Config("source split is empty".into()));
    }
    let use_target = cfg.lambda_pu != 0.0;
    if use_target && weak.is_empty() {
        return Err(Error::Config(
            "weakly labelled target split is empty; set lambda_pu to 0 for source-only training"
                .into(),
        ));
    }
    let weights = LossWeights {
        seg: cfg.lambda_seg,
        pu: cfg.lambda_pu,
    };
    let mut source_sampler = Sampler::new(source, cfg.seed, SOURCE_STREAM);
    let mut weak_sampler = Sampler::new(weak, cfg.seed, WEAK_STREAM);
    let mut adam = AdamState::new(model);
    let mut log = RunLog::default();
    let start = Instant::now();
    let iterations = cfg.iters_stage1;

    for it in 0..iterations {
        let lr = lr_at(it, cfg, iterations);
        let src = source_sampler.draw(cfg.batch);
        let src_x: Grid<T> = stack_images(&src)?;
        let src_y: Grid<T> = stack_masks(&src)?;

        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let x = g.constant(src_x)?;
        let src_pred = model.forward(&mut g, &bound, Head::Source, x)?;

        let target = if use_target {
            let tgt = weak_sampler.draw(cfg.batch);
            let tgt_x: Grid<T> = stack_images(&tgt)?;
            let source_view = model.predict(Head::Source, &tgt_x)?;
            let x = g.constant(tgt_x)?;
            let pred = model.forward(&mut g, &bound, Head::Target, x)?;
            Some((pred, source_view, boxes_of(&tgt)?))
        } else {
            None
        };
        let weak_target = target
            .as_ref()
            .map(|(pred, source_pred, boxes)| WeakTarget {
                pred: *pred,
                source_pred,
                boxes,
            });
        let loss = stage1_loss(
            &mut g,
            src_pred,
            &src_y,
            weak_target,
            cfg.pu_config(),
            weights,
        )?;
        let total = scalar(&g, loss.total, it)?;
        g.backward(loss.total)?;
        let grads = model.gradients(&g, &bound);
        adam_step(model, &grads, &mut adam, cfg, lr)?;
        model.set_iteration(it + 1);

        log.push(LogRow {
            iteration: it,
            stage: 1,
            loss_total: total,
            loss_seg: Some(g.value(loss.seg).item().as_f64()),
            loss_pu: loss.pu.map(|id| g.value(id).item().as_f64()),
            loss_self_da: None,
            loss_self_box: None,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Unshares the encoder, freezes the source side and refines the target
/// network with mixed pseudo-labels and box-gated source masks.
///
/// With an empty weak split the objective is the box-free self-training loss alone.
pub fn train_stage2<T: Real>(
    model: &mut SegModel<T>,
    unlabeled: &[Sample],
    weak: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    if model.sharing() != Sharing::Shared {
        return Err(Error::State(
            "second-stage training starts from a first-stage model with a shared encoder".into(),
        ));
    }
    if unlabeled.is_empty() && weak.is_empty() {
        return Err(Error::Config(
            "both target training splits are empty".into(),
        ));
    }
    model.unshare_and_freeze_source()?;
    let mut unlabeled_sampler = Sampler::new(unlabeled, cfg.seed, UNLABELED_STREAM);
    let mut weak_sampler = Sampler::new(weak, cfg.seed, WEAK_STREAM);
    let mut adam = AdamState::new(model);
    let mut log = RunLog::default();
    let start = Instant::now();
    let iterations = cfg.iters_stage2;

    for it in 0..iterations {
        let lr = lr_at(it, cfg, iterations);
        let unlabeled_x: Option<Grid<T>> = if unlabeled.is_empty() {
            None
        } else {
            Some(stack_images(&unlabeled_sampler.draw(cfg.batch))?)
        };
        let weak_batch = if weak.is_empty() {
            None
        } else {
            let batch = weak_sampler.draw(cfg.batch);
            Some((stack_images::<T>(&batch)?, boxes_of(&batch)?))
        };

        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let loss = stage2_loss(
            &mut g,
            model,
            &bound,
            unlabeled_x.as_ref(),
            weak_batch.as_ref().map(|(x, b)| (x, b.as_slice())),
            cfg.alpha,
            cfg.tau,
        )?;
        let total = scalar(&g, loss.total, it)?;
        g.backward(loss.total)?;
        let grads = model.gradients(&g, &bound);
        adam_step(model, &grads, &mut adam, cfg, lr)?;
        model.set_iteration(it + 1);

        log.push(LogRow {
            iteration: it,
            stage: 2,
            loss_total: total,
            loss_seg: None,
            loss_pu: None,
            loss_self_da: loss.self_da.map(|id| g.value(id).item().as_f64()),
            loss_self_box: loss.self_box.map(|id| g.value(id).item().as_f64()),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Splits a training run consumes.
#[derive(Copy, Clone, Debug)]
pub struct Splits<'a> {
    pub source: &'a [Sample],
    pub target_unlabeled: &'a [Sample],
    pub target_weak: &'a [Sample],
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SourceOnly,
    SelfTrainNoBox,
}

/// First stage on source labels only. The target head is then overwritten
/// with the trained source head so either head gives the source-only prediction.
pub fn train_source_only<T: Real>(
    model: &mut SegModel<T>,
    source: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    let cfg = TrainConfig {
        lambda_pu: 0.0,
        ..cfg.clone()
    };
    let log = train_stage1(model, source, &[], &cfg)?;
    model.copy_source_head_to_target()?;
    Ok(log)
}

/// Runs a baseline from a freshly built model and returns it with its log.
pub fn run_baseline(
    kind: BaselineKind,
    splits: Splits<'_>,
    cfg: &TrainConfig,
) -> Result<(SegModel<f32>, RunLog)> {
    let mut model = SegModel::build(cfg.net.clone(), cfg.seed)?;
    let mut log = train_source_only(&mut model, splits.source, cfg)?;
    if kind == BaselineKind::SelfTrainNoBox {
        let pooled: Vec<Sample> = splits
            .target_unlabeled
            .iter()
            .chain(splits.target_weak)
            .cloned()
            .collect();
        log.extend(train_stage2(&mut model, &pooled, &[], cfg)?);
    }
    Ok((model, log))
}
