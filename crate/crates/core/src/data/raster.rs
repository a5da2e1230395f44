//! BAR1 single-plane raster files.
//!
//! `"BAR1"`, `u32` LE height, `u32` LE width, `u8` dtype (0 = `f32` LE,
//! 1 = `u8`), then the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

pub const RASTER_MAGIC: &[u8; 4] = b"BAR1";
const HEADER_LEN: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl RasterData {
    fn tag(&self) -> u8 {
        match self {
            RasterData::F32(_) => 0,
            RasterData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: RasterData,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: RasterData) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "raster",
                format!(
                    "{height}×{width} raster needs {} values, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Intensity raster from a rank-2 grid.
    pub fn from_grid<T: Real>(grid: &Grid<T>) -> Result<Self> {
        let (h, w) = rank2(grid)?;
        Self::new(
            h,
            w,
            RasterData::F32(grid.data().iter().map(|v| v.as_f64() as f32).collect()),
        )
    }

    /// Binary mask raster (values above 0.5 become 1) from a rank-2 grid.
    pub fn mask_from_grid<T: Real>(grid: &Grid<T>) -> Result<Self> {
        let (h, w) = rank2(grid)?;
        let half = T::of(0.5);
        Self::new(
            h,
            w,
            RasterData::U8(grid.data().iter().map(|&v| u8::from(v > half)).collect()),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &RasterData {
        &self.data
    }

    pub fn to_grid<T: Real>(&self) -> Grid<T> {
        let values = match &self.data {
            RasterData::F32(v) => v.iter().map(|&x| T::of(f64::from(x))).collect(),
            RasterData::U8(v) => v.iter().map(|&x| T::of(f64::from(x))).collect(),
        };
        Grid::new(&[self.height, self.width], values).expect("sized")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(self.data.tag());
        match &self.data {
            RasterData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses raster bytes; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        };
        if bytes.len() < RASTER_MAGIC.len() || &bytes[..4] != RASTER_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "bad raster magic".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let tag = bytes[12];
        let n = height * width;
        let elem = match tag {
            0 => 4,
            1 => 1,
            _ => {
                return Err(Error::UnknownDtype {
                    path: path.to_path_buf(),
                    tag,
                })
            }
        };
        let expected = HEADER_LEN + n * elem;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        let payload = &bytes[HEADER_LEN..];
        let data = if tag == 0 {
            RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            RasterData::U8(payload.to_vec())
        };
        Self::new(height, width, data)
    }
}

fn rank2<T: Real>(grid: &Grid<T>) -> Result<(usize, usize)> {
    match *grid.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(
            "raster",
            format!("expected a rank-2 grid, got {:?}", grid.shape()),
        )),
    }
}

pub fn raster_write(raster: &Raster, path: &Path) -> Result<()> {
    std::fs::write(path, raster.encode()).map_err(|e| Error::io(path, e))
}

pub fn raster_read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Raster::decode(&bytes, path)
}
