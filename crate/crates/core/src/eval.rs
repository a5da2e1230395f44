//! Dice scoring, evaluation reports and the annotation-budget ablation.

use serde::{Deserialize, Serialize};

use crate::data::{select_annotated, stack_images, Dataset, Manifest, Sample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::segnet::{Head, SegModel};
use crate::train::{run_baseline, train_stage1, train_stage2, BaselineKind, Splits, TrainConfig};

/// Probabilities at or above this value count as foreground.
pub const THRESHOLD: f64 = 0.5;

/// `2|A∩B| / (|A| + |B|)` over binary masks (values > 0.5 are set).
/// Two empty masks score 1.
pub fn dice<T: Real>(pred: &Grid<T>, truth: &Grid<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?} does not match {:?}", pred.shape(), truth.shape()),
        ));
    }
    let half = T::of(0.5);
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p > half, t > half);
        a += usize::from(p);
        b += usize::from(t);
        both += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

pub fn threshold<T: Real>(prob: &Grid<T>) -> Grid<T> {
    let t = T::of(THRESHOLD);
    prob.map(|p| if p >= t { T::one() } else { T::zero() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub stage: String,
    pub head: Head,
    pub seed: u64,
    pub config: TrainConfig,
    pub split: String,
    pub mean_dice: f64,
    pub pixel_accuracy: f64,
    pub per_sample: Vec<SampleScore>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Identifies what produced a report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    pub run_id: String,
    pub stage: String,
    pub config: TrainConfig,
}

const EVAL_BATCH: usize = 8;

/// Thresholded prediction of every sample, in order.
pub fn predict_masks<T: Real>(
    model: &SegModel<T>,
    samples: &[Sample],
    head: Head,
) -> Result<Vec<Grid<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x: Grid<T> = stack_images(&refs)?;
        let p = model.predict(head, &x)?;
        for i in 0..chunk.len() {
            let [_, _, h, w] = p.dims4();
            out.push(threshold(&p.image(i).reshape(&[h, w])?));
        }
    }
    Ok(out)
}

/// Scores thresholded predictions against the ground-truth masks of `samples`.
pub fn score<T: Real>(
    preds: &[Grid<T>],
    samples: &[Sample],
) -> Result<(f64, f64, Vec<SampleScore>)> {
    if preds.is_empty() || preds.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        let truth: Grid<T> = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config(format!("eval sample {} has no mask", s.id)))?
            .cast();
        scores.push(SampleScore {
            id: s.id.clone(),
            dice: dice(p, &truth)?,
        });
        let half = T::of(0.5);
        correct += p
            .data()
            .iter()
            .zip(truth.data())
            .filter(|(&a, &b)| (a > half) == (b > half))
            .count();
        total += p.len();
    }
    let mean = scores.iter().map(|s| s.dice).sum::<f64>() / scores.len() as f64;
    Ok((mean, correct as f64 / total as f64, scores))
}

/// Deterministic evaluation of one head on the eval split.
pub fn evaluate<T: Real>(
    model: &SegModel<T>,
    eval: &[Sample],
    head: Head,
    info: &RunInfo,
) -> Result<MetricsReport> {
    if eval.is_empty() {
        return Err(Error::Config("eval split is empty".into()));
    }
    if let Some(s) = eval.iter().find(|s| s.mask.is_none()) {
        return Err(Error::Config(format!("eval sample {} has no mask", s.id)));
    }
    let preds = predict_masks(model, eval, head)?;
    let (mean_dice, pixel_accuracy, per_sample) = score(&preds, eval)?;
    Ok(MetricsReport {
        run_id: info.run_id.clone(),
        stage: info.stage.clone(),
        head,
        seed: info.config.seed,
        config: info.config.clone(),
        split: "eval".into(),
        mean_dice,
        pixel_accuracy,
        per_sample,
    })
}

/// Mean Dice of the target head on `eval`.
pub fn mean_dice<T: Real>(model: &SegModel<T>, eval: &[Sample]) -> Result<f64> {
    let preds = predict_masks(model, eval, Head::Target)?;
    Ok(score(&preds, eval)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub budgets: Vec<usize>,
    pub repetitions: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            budgets: vec![0, 1, 3, 10],
            repetitions: 1,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self, slices_per_patient: usize) -> Result<()> {
        if self.budgets.is_empty() || self.repetitions == 0 {
            return Err(Error::Config(
                "ablation needs at least one budget and one repetition".into(),
            ));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "budgets {:?} must be strictly ascending",
                self.budgets
            )));
        }
        if let Some(&b) = self.budgets.iter().find(|&&b| b > slices_per_patient) {
            return Err(Error::Config(format!(
                "budget {b} exceeds {slices_per_patient} slices per patient"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub budget: usize,
    pub stage: u8,
    pub seed: u64,
    pub dice: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Both stages of one run, evaluated on the target head.
pub struct StageScores {
    pub stage1: f64,
    pub stage2: f64,
}

/// Trains both stages for one annotation budget and scores them.
///
/// Budget 0 means the first stage is source-only and the second stage is
/// box-free self-training.
pub fn run_budget(
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SegModel<f32>, SegModel<f32>, StageScores)> {
    if dataset.target_weak.is_empty() {
        let (stage1, _) = run_baseline(
            BaselineKind::SourceOnly,
            Splits {
                source: &dataset.source,
                target_unlabeled: &dataset.target_unlabeled,
                target_weak: &[],
            },
            cfg,
        )?;
        let mut model = stage1.clone();
        train_stage2(&mut model, &dataset.target_unlabeled, &[], cfg)?;
        let scores = StageScores {
            stage1: mean_dice(&stage1, &dataset.eval)?,
            stage2: mean_dice(&model, &dataset.eval)?,
        };
        return Ok((stage1, model, scores));
    }
    let mut model = SegModel::build(cfg.net.clone(), cfg.seed)?;
    train_stage1(&mut model, &dataset.source, &dataset.target_weak, cfg)?;
    let stage1 = model.clone();
    train_stage2(
        &mut model,
        &dataset.target_unlabeled,
        &dataset.target_weak,
        cfg,
    )?;
    let scores = StageScores {
        stage1: mean_dice(&stage1, &dataset.eval)?,
        stage2: mean_dice(&model, &dataset.eval)?,
    };
    Ok((stage1, model, scores))
}

/// One row per (budget, stage, repetition); repetition `r` uses seed `cfg.seed + r`.
pub fn ablate(
    spec: &AblationSpec,
    cfg: &TrainConfig,
    manifest: &Manifest,
) -> Result<Vec<AblationRow>> {
    let slices = slices_per_target_patient(manifest);
    spec.validate(slices)?;
    let mut rows = Vec::new();
    for &budget in &spec.budgets {
        let dataset = Dataset::load(&select_annotated(manifest, budget)?)?;
        for r in 0..spec.repetitions {
            let seed = cfg.seed + r as u64;
            let run_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let (_, _, scores) = run_budget(&dataset, &run_cfg)?;
            for (stage, dice) in [(1, scores.stage1), (2, scores.stage2)] {
                rows.push(AblationRow {
                    budget,
                    stage,
                    seed,
                    dice,
                });
            }
        }
    }
    Ok(rows)
}

/// Smallest number of target training slices held by any target patient.
fn slices_per_target_patient(manifest: &Manifest) -> usize {
    use crate::data::Role;
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for r in &manifest.records {
        if matches!(r.role, Role::TargetUnlabeled | Role::TargetWeak) {
            *counts.entry(&r.patient).or_default() += 1;
        }
    }
    counts.values().copied().min().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Grid<f64> {
        Grid::from_f64(
            &[1, bits.len()],
            &bits.iter().map(|&b| f64::from(b)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0]);
        let b = mask(&[0, 1, 1, 1, 1, 1, 1]);
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&mask(&[0, 0]), &mask(&[0, 0, 0])).is_err());
    }

    #[test]
    fn ablation_spec_validation() {
        assert!(AblationSpec::default().validate(10).is_ok());
        assert!(AblationSpec::default().validate(7).is_err());
        let unsorted = AblationSpec {
            budgets: vec![3, 1],
            repetitions: 1,
        };
        assert!(unsorted.validate(7).is_err());
    }

    #[test]
    fn ablation_csv_header() {
        let rows = vec![AblationRow {
            budget: 3,
            stage: 2,
            seed: 9,
            dice: 0.5,
        }];
        assert_eq!(
            ablation_csv(&rows).unwrap(),
            "budget,stage,seed,dice\n3,2,9,0.5\n"
        );
    }
}
