//! Synthetic two-domain segmentation data.
//!
//! Each image holds one or two bright ellipses on a darker background. A
//! patient is a short stack of slices sharing one geometry, with objects
//! shrinking away from the centre slice. Source and target domains differ in
//! intensities, noise and object size.

mod manifest;
mod raster;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::losses::{BoxMask, Rect};

pub use manifest::{read_manifest, write_manifest, Manifest, Record};
pub use raster::{raster_read, raster_write, Raster, RasterData, RASTER_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub bg_mean: f64,
    pub bg_std: f64,
    pub noise_std: f64,
    /// Bounds on every ellipse semi-axis, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Mixed into every patient stream of this domain.
    pub seed: u64,
}

impl DomainSpec {
    pub fn source_default() -> Self {
        Self {
            name: "source".into(),
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 2,
            fg_mean: 0.55,
            fg_std: 0.03,
            bg_mean: 0.2,
            bg_std: 0.03,
            noise_std: 0.06,
            radius_min: 5.0,
            radius_max: 10.0,
            seed: 0x5eed_0001,
        }
    }

    /// Intensities shifted up by 0.25 and radii scaled by 1.3 relative to the source.
    pub fn target_default() -> Self {
        let s = Self::source_default();
        Self {
            name: "target".into(),
            fg_mean: s.fg_mean + 0.25,
            bg_mean: s.bg_mean + 0.25,
            radius_min: s.radius_min * 1.3,
            radius_max: s.radius_max * 1.3,
            seed: 0x5eed_0002,
            ..s
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {}: {m}", self.name)));
        if self.height == 0 || self.width == 0 {
            return bad("image extent must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max".into());
        }
        if [self.fg_std, self.bg_std, self.noise_std]
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("standard deviations must be non-negative".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "radius range [{}, {}] is degenerate",
                self.radius_min, self.radius_max
            ));
        }
        if 2.0 * self.radius_max + 2.0 > self.height.min(self.width) as f64 {
            return bad(format!(
                "radius {} does not fit a {}×{} image",
                self.radius_max, self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    SourceLabeled,
    TargetUnlabeled,
    TargetWeak,
    Eval,
}

/// One 2D slice in memory. Only the labels its role allows are populated.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient: String,
    pub slice: usize,
    pub domain: String,
    pub role: Role,
    /// `(H, W)` intensities in `[0, 1]`.
    pub image: Grid<f32>,
    pub mask: Option<Grid<f32>>,
    pub boxes: Option<BoxMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetLayout {
    pub source_patients: usize,
    /// Target patients in total; the last `eval_patients` of them form the eval split.
    pub target_patients: usize,
    pub eval_patients: usize,
    pub slices_per_patient: usize,
    pub box_margin: usize,
    pub box_jitter: usize,
    /// Weakly annotated slices per target training patient.
    pub annotated_per_patient: usize,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            source_patients: 20,
            target_patients: 20,
            eval_patients: 4,
            slices_per_patient: 7,
            box_margin: 1,
            box_jitter: 2,
            annotated_per_patient: 3,
        }
    }
}

impl DatasetLayout {
    fn validate(&self) -> Result<()> {
        if self.source_patients == 0 || self.slices_per_patient == 0 {
            return Err(Error::Config(
                "patient and slice counts must be at least 1".into(),
            ));
        }
        if self.eval_patients == 0 || self.eval_patients >= self.target_patients {
            return Err(Error::Config(format!(
                "need 1 <= eval_patients < target_patients, got {} of {}",
                self.eval_patients, self.target_patients
            )));
        }
        if self.annotated_per_patient > self.slices_per_patient {
            return Err(Error::Config(format!(
                "cannot annotate {} of {} slices",
                self.annotated_per_patient, self.slices_per_patient
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dy, dx) = (r as f64 + 0.5 - self.cy, c as f64 + 0.5 - self.cx);
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Independent stream per (domain, patient) so generation order does not matter.
fn patient_rng(seed: u64, domain: &DomainSpec, patient: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ domain.seed.rotate_left(17) ^ (patient as u64))
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated std")
}

struct GeneratedSlice {
    image: Grid<f32>,
    mask: Grid<f32>,
}

fn generate_patient(spec: &DomainSpec, slices: usize, rng: &mut ChaCha8Rng) -> Vec<GeneratedSlice> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let objects = rng.gen_range(spec.min_objects..=spec.max_objects);
    let base: Vec<Ellipse> = (0..objects)
        .map(|_| {
            let ry = rng.gen_range(spec.radius_min..=spec.radius_max);
            let rx = rng.gen_range(spec.radius_min..=spec.radius_max);
            let reach = spec.radius_max + 1.0;
            Ellipse {
                cy: rng.gen_range(reach..=h - reach),
                cx: rng.gen_range(reach..=w - reach),
                ry,
                rx,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let fg = normal(spec.fg_mean, spec.fg_std).sample(rng);
    let bg = normal(spec.bg_mean, spec.bg_std).sample(rng);
    let noise = normal(0.0, spec.noise_std);
    let center = slices / 2;
    let half_span = (slices / 2).max(1) as f64;

    (0..slices)
        .map(|z| {
            // objects shrink by up to 20% towards the outermost slices
            let offset = (z as f64 - center as f64).abs() / half_span;
            let scale = 1.0 - 0.2 * offset;
            let ellipses: Vec<Ellipse> = base
                .iter()
                .map(|e| {
                    let jitter = |rng: &mut ChaCha8Rng, r: f64| {
                        (r * scale * rng.gen_range(0.95..=1.05))
                            .clamp(spec.radius_min, spec.radius_max)
                    };
                    Ellipse {
                        cy: e.cy + rng.gen_range(-1.0..=1.0),
                        cx: e.cx + rng.gen_range(-1.0..=1.0),
                        ry: jitter(rng, e.ry),
                        rx: jitter(rng, e.rx),
                        angle: e.angle,
                    }
                })
                .collect();
            let mut mask = Vec::with_capacity(spec.height * spec.width);
            let mut image = Vec::with_capacity(spec.height * spec.width);
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let inside = ellipses.iter().any(|e| e.contains(r, c));
                    let level = if inside { fg } else { bg };
                    let v = (level + noise.sample(rng)).clamp(0.0, 1.0);
                    mask.push(if inside { 1.0 } else { 0.0 });
                    image.push(v as f32);
                }
            }
            GeneratedSlice {
                image: Grid::new(&[spec.height, spec.width], image).expect("sized"),
                mask: Grid::new(&[spec.height, spec.width], mask).expect("sized"),
            }
        })
        .collect()
}

/// Tightest rectangle around the foreground, grown by `margin` and then by a
/// random `0..=jitter` on each edge, clipped to the image.
pub fn derive_box<T: Real>(
    mask: &Grid<T>,
    margin: usize,
    jitter: usize,
    rng: &mut impl Rng,
) -> Result<BoxMask> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "derive_box",
                format!("expected an (H, W) mask, got {:?}", mask.shape()),
            ))
        }
    };
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.data()[r * w + c] > T::zero() {
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    let (r0, c0, r1, c1) = bounds.ok_or_else(|| {
        Error::Contract("cannot derive a box from a mask without foreground".into())
    })?;
    let mut grow = || {
        margin
            + if jitter > 0 {
                rng.gen_range(0..=jitter)
            } else {
                0
            }
    };
    let rect = Rect {
        r0: r0.saturating_sub(grow()),
        c0: c0.saturating_sub(grow()),
        r1: (r1 + 1 + grow()).min(h),
        c1: (c1 + 1 + grow()).min(w),
    };
    BoxMask::new(h, w, vec![rect])
}

/// Indices of the `k` slices nearest to the centre slice `n / 2`, ties to the lower index.
pub fn center_slices(n: usize, k: usize) -> Vec<usize> {
    let center = n / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&s| (s.abs_diff(center), s));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Reassigns target training roles so that the `k` centre slices of each
/// patient are weakly labelled and the rest unlabeled.
pub fn select_annotated(manifest: &Manifest, k: usize) -> Result<Manifest> {
    let mut out = manifest.clone();
    let mut patients: Vec<&str> = Vec::new();
    for r in &manifest.records {
        if matches!(r.role, Role::TargetUnlabeled | Role::TargetWeak)
            && !patients.contains(&r.patient.as_str())
        {
            patients.push(&r.patient);
        }
    }
    for patient in patients {
        let mut idx: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| {
                let r = &manifest.records[i];
                r.patient == patient && matches!(r.role, Role::TargetUnlabeled | Role::TargetWeak)
            })
            .collect();
        if k > idx.len() {
            return Err(Error::Config(format!(
                "patient {patient} has {} training slices, cannot annotate {k}",
                idx.len()
            )));
        }
        idx.sort_by_key(|&i| manifest.records[i].slice);
        let chosen = center_slices(idx.len(), k);
        for (pos, &i) in idx.iter().enumerate() {
            let record = &mut out.records[i];
            if chosen.contains(&pos) {
                if record.bbox.is_none() {
                    return Err(Error::Config(format!("record {} has no box", record.id)));
                }
                record.role = Role::TargetWeak;
            } else {
                record.role = Role::TargetUnlabeled;
            }
        }
    }
    Ok(out)
}

/// Writes images, masks and `manifest.jsonl` under `out_dir`.
///
/// Source patients are labelled; the first `target_patients - eval_patients`
/// target patients are training patients (boxes recorded for every slice);
/// the remaining target patients form the eval split.
pub fn generate_dataset(
    source: &DomainSpec,
    target: &DomainSpec,
    layout: &DatasetLayout,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    source.validate()?;
    target.validate()?;
    layout.validate()?;
    for dir in ["images", "masks"] {
        let d = out_dir.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::new();
    let train_targets = layout.target_patients - layout.eval_patients;
    let domains = [
        (source, layout.source_patients),
        (target, layout.target_patients),
    ];
    for (spec, patients) in domains {
        for p in 0..patients {
            let mut rng = patient_rng(seed, spec, p);
            let slices = generate_patient(spec, layout.slices_per_patient, &mut rng);
            let patient = format!("{}-p{p:03}", spec.name);
            let role = if std::ptr::eq(spec, source) {
                Role::SourceLabeled
            } else if p < train_targets {
                Role::TargetUnlabeled
            } else {
                Role::Eval
            };
            for (z, s) in slices.into_iter().enumerate() {
                let id = format!("{patient}-s{z:02}");
                let image_path = format!("images/{id}.bar");
                let mask_path = format!("masks/{id}.bar");
                raster_write(&Raster::from_grid(&s.image)?, &out_dir.join(&image_path))?;
                raster_write(&Raster::mask_from_grid(&s.mask)?, &out_dir.join(&mask_path))?;
                let bbox = if role == Role::TargetUnlabeled {
                    let b = derive_box(&s.mask, layout.box_margin, layout.box_jitter, &mut rng)?;
                    Some(b.rects()[0])
                } else {
                    None
                };
                records.push(Record {
                    id,
                    patient: patient.clone(),
                    slice: z,
                    domain: spec.name.clone(),
                    role,
                    image_path,
                    mask_path: Some(mask_path),
                    bbox,
                    extra: Default::default(),
                });
            }
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    let manifest = select_annotated(&manifest, layout.annotated_per_patient)?;
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// In-memory splits of a manifest.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub source: Vec<Sample>,
    pub target_unlabeled: Vec<Sample>,
    pub target_weak: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    /// Loads every record, exposing masks only for source-labeled and eval
    /// samples and boxes only for target-weak samples.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        Self::load_inner(manifest, false)
    }

    /// Like [`Dataset::load`] but keeps every available mask, for analysis.
    pub fn load_with_truth(manifest: &Manifest) -> Result<Self> {
        Self::load_inner(manifest, true)
    }

    fn load_inner(manifest: &Manifest, truth: bool) -> Result<Self> {
        let mut ds = Dataset::default();
        for r in &manifest.records {
            let image: Grid<f32> = raster_read(&manifest.resolve(&r.image_path))?.to_grid();
            let (h, w) = (image.shape()[0], image.shape()[1]);
            let wants_mask = truth || matches!(r.role, Role::SourceLabeled | Role::Eval);
            let mask = match (&r.mask_path, wants_mask) {
                (Some(p), true) => Some(raster_read(&manifest.resolve(p))?.to_grid()),
                (None, true) if matches!(r.role, Role::SourceLabeled | Role::Eval) => {
                    return Err(Error::Config(format!("record {} needs a mask", r.id)))
                }
                _ => None,
            };
            let boxes = match (r.role, r.bbox) {
                (Role::TargetWeak, Some(rect)) => Some(BoxMask::new(h, w, vec![rect])?),
                (Role::TargetWeak, None) => {
                    return Err(Error::Config(format!("record {} needs a box", r.id)))
                }
                _ => None,
            };
            let sample = Sample {
                id: r.id.clone(),
                patient: r.patient.clone(),
                slice: r.slice,
                domain: r.domain.clone(),
                role: r.role,
                image,
                mask,
                boxes,
            };
            match r.role {
                Role::SourceLabeled => ds.source.push(sample),
                Role::TargetUnlabeled => ds.target_unlabeled.push(sample),
                Role::TargetWeak => ds.target_weak.push(sample),
                Role::Eval => ds.eval.push(sample),
            }
        }
        Ok(ds)
    }
}

/// Stacks `(H, W)` images of the selected samples into a `(B, 1, H, W)` batch.
pub fn stack_images<T: Real>(samples: &[&Sample]) -> Result<Grid<T>> {
    stack(samples.iter().map(|s| &s.image))
}

/// Stacks the masks of the selected samples; every sample must carry one.
pub fn stack_masks<T: Real>(samples: &[&Sample]) -> Result<Grid<T>> {
    let masks = samples
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("sample {} has no mask", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    stack(masks.into_iter())
}

fn stack<'a, T: Real>(grids: impl Iterator<Item = &'a Grid<f32>>) -> Result<Grid<T>> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut b = 0;
    for g in grids {
        let (h, w) = (g.shape()[0], g.shape()[1]);
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::shape("stack", "images of different extents"));
        }
        data.extend(g.data().iter().map(|&v| T::of(f64::from(v))));
        b += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::shape("stack", "empty batch"))?;
    Grid::new(&[b, 1, h, w], data)
}
