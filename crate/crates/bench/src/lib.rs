//! Deterministic inputs for the benchmarks.

use boxadapt_core::data::{Role, Sample};
use boxadapt_core::losses::{BoxMask, Rect};
use boxadapt_core::{Grid, Real};

/// Smooth pseudo-random values in `[0, 1]` of the given shape.
pub fn pattern<T: Real>(shape: &[usize], phase: f64) -> Grid<T> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|i| ((i as f64 * 0.731 + phase).sin() + 1.0) / 2.0)
        .collect();
    Grid::from_f64(shape, &values).expect("shape matches length")
}

/// `count` square images with a centred disc; every sample carries a mask
/// and a box so it can stand in for any split.
pub fn samples(count: usize, size: usize, role: Role) -> Vec<Sample> {
    let c = size as f64 / 2.0;
    let r = size as f64 / 5.0;
    (0..count)
        .map(|i| {
            let mut image = Vec::with_capacity(size * size);
            let mut mask = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let inside =
                        (y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2) <= r * r;
                    let noise = ((y * size + x + i * 7) as f64 * 0.37).sin() * 0.05;
                    image.push((if inside { 0.7 } else { 0.3 } + noise) as f32);
                    mask.push(if inside { 1.0f32 } else { 0.0 });
                }
            }
            let lo = (c - r - 2.0) as usize;
            let hi = (c + r + 2.0) as usize;
            Sample {
                id: format!("bench-{i}"),
                patient: format!("bench-p{i}"),
                slice: 0,
                domain: "bench".into(),
                role,
                image: Grid::new(&[size, size], image).expect("sized"),
                mask: Some(Grid::new(&[size, size], mask).expect("sized")),
                boxes: Some(
                    BoxMask::new(
                        size,
                        size,
                        vec![Rect {
                            r0: lo,
                            c0: lo,
                            r1: hi,
                            c1: hi,
                        }],
                    )
                    .expect("box fits"),
                ),
            }
        })
        .collect()
}
