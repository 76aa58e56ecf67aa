//! Procedural HQ images, their degraded LQ partners, and the binary container
//! that stores both.
//!
//! Container layout (little-endian, no text-formatted floats, so the hash is
//! platform independent):
//!
//! ```text
//! magic "LRDATA\0\0", version u32, count u64, height u32, width u32,
//! channels u32, seed u64, generator id (u32 length + UTF-8)
//! per record: hq f32 × (H·W·C), lq f32 × (H·W·C),
//!             sigma f64, r f64, delta f64, q u32, kernel_size u32, dct_base f64
//! ```

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{degrade, resize_bilinear, sample_params, DegradationParams, ParamRanges};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::checkpoint::Reader;
use crate::rng;

pub const MAGIC: &[u8; 8] = b"LRDATA\0\0";
pub const VERSION: u32 = 1;
pub const MIN_SIZE: usize = 8;
pub const MAX_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// A dim background plus one to four anisotropic Gaussian bumps.
    #[default]
    GaussianBlobs,
    /// Two to five overlapping axis-aligned rectangles with hard edges.
    RandomRectangles,
    /// Bilinearly interpolated value noise on 4×4 and 8×8 grids.
    SmoothNoise,
}

impl Generator {
    pub fn id(self) -> &'static str {
        match self {
            Generator::GaussianBlobs => "gaussian-blobs",
            Generator::RandomRectangles => "random-rectangles",
            Generator::SmoothNoise => "smooth-noise",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Generator::GaussianBlobs),
            "random-rectangles" => Ok(Generator::RandomRectangles),
            "smooth-noise" => Ok(Generator::SmoothNoise),
            other => Err(Error::config("generator", format!("unknown generator `{other}`"))),
        }
    }

    /// One image in `[0, 1]`, a pure function of `(size, channels, seed)`.
    pub fn render(self, size: usize, channels: usize, seed: u64) -> Result<Image> {
        let mut r = rng::stream(seed, self.id());
        let k = size as f64 / 16.0;
        let img = match self {
            Generator::GaussianBlobs => {
                let bg = r.random_range(0.05..0.35);
                let blobs: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..r.random_range(1..=4))
                    .map(|_| {
                        let cx = r.random_range(0.0..size as f64);
                        let cy = r.random_range(0.0..size as f64);
                        let sx = k * r.random_range(1.5..4.0);
                        let sy = k * r.random_range(1.5..4.0);
                        let a = r.random_range(0.25..0.7);
                        (cx, cy, sx, sy, (0..channels).map(|_| a * tint(&mut r, channels)).collect())
                    })
                    .collect();
                Image::from_fn(size, size, channels, |y, x, c| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let v: f64 = blobs.iter().map(|(cx, cy, sx, sy, a)| a[c] * (-((px - cx).powi(2) / (2.0 * sx * sx) + (py - cy).powi(2) / (2.0 * sy * sy))).exp()).sum();
                    (bg + v) as f32
                })
            }
            Generator::RandomRectangles => {
                let bg: Vec<f64> = (0..channels).map(|_| r.random_range(0.0..1.0)).collect();
                let min = ((2.0 * k).round() as usize).max(1);
                let rects: Vec<(usize, usize, usize, usize, Vec<f64>)> = (0..r.random_range(2..=5))
                    .map(|_| {
                        let w = r.random_range(min..=size / 2 + min);
                        let h = r.random_range(min..=size / 2 + min);
                        let x0 = r.random_range(0..size);
                        let y0 = r.random_range(0..size);
                        (x0, y0, (x0 + w).min(size), (y0 + h).min(size), (0..channels).map(|_| r.random_range(0.0..1.0)).collect())
                    })
                    .collect();
                Image::from_fn(size, size, channels, |y, x, c| {
                    let top = rects.iter().rev().find(|(x0, y0, x1, y1, _)| (*x0..*x1).contains(&x) && (*y0..*y1).contains(&y));
                    top.map_or(bg[c], |rc| rc.4[c]) as f32
                })
            }
            Generator::SmoothNoise => {
                let mut octave = |grid: usize| -> Result<Image> {
                    let data = (0..grid * grid * channels).map(|_| r.random_range(0.0f32..1.0)).collect();
                    resize_bilinear(&Image::new(grid, grid, channels, data)?, size, size)
                };
                let coarse = octave(4)?;
                let fine = octave(8)?;
                let data = coarse.data().iter().zip(fine.data()).map(|(&a, &b)| 0.65 * a + 0.35 * b).collect();
                Image::new(size, size, channels, data)?
            }
        };
        Ok(img.clip_unit())
    }
}

fn tint(r: &mut rng::Rng, channels: usize) -> f64 {
    if channels == 1 {
        1.0
    } else {
        r.random_range(0.6..1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub size: usize,
    pub channels: usize,
    pub count: usize,
    pub generator: Generator,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_SIZE..=MAX_SIZE).contains(&self.size) {
            return Err(Error::config("size", format!("must lie in [{MIN_SIZE}, {MAX_SIZE}], got {}", self.size)));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub hq: Image,
    pub lq: Image,
    pub params: DegradationParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub generator: Generator,
    pub records: Vec<Record>,
}

impl DatasetContainer {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn hq(&self) -> Vec<Image> {
        self.records.iter().map(|r| r.hq.clone()).collect()
    }

    pub fn lq(&self) -> Vec<Image> {
        self.records.iter().map(|r| r.lq.clone()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        let id = self.generator.id();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for rec in &self.records {
            for img in [&rec.hq, &rec.lq] {
                for v in img.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            let p = &rec.params;
            for v in [p.sigma, p.r, p.delta] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&p.q.to_le_bytes());
            out.extend_from_slice(&(p.kernel_size as u32).to_le_bytes());
            out.extend_from_slice(&p.dct_base.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Format("not a dataset container".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = rd.u64()? as usize;
        let (height, width, channels) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
        let seed = rd.u64()?;
        let generator = Generator::from_id(&rd.string()?).map_err(|e| Error::Format(e.to_string()))?;
        let per = height * width * channels;
        // Each record needs at least its two rasters; reject absurd counts before allocating.
        if per == 0 || count > bytes.len() / (8 * per) {
            return Err(Error::Format(format!("header claims {count} records of {height}x{width}x{channels}, which the file cannot hold")));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let mut img = || -> Result<Image> {
                let raw = rd.take(4 * per)?;
                Image::new(height, width, channels, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            };
            let hq = img()?;
            let lq = img()?;
            let (sigma, r, delta) = (rd.f64()?, rd.f64()?, rd.f64()?);
            let (q, kernel_size, dct_base) = (rd.u32()?, rd.u32()? as usize, rd.f64()?);
            records.push(Record { hq, lq, params: DegradationParams { sigma, r, delta, q, kernel_size, dct_base } });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after {count} records", bytes.len() - rd.pos)));
        }
        Ok(Self { height, width, channels, seed, generator, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized container, lowercase hex.
    pub fn hash_hex(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders `spec.count` HQ images and degrades each with its own sampled parameters.
pub fn synth_dataset(spec: &DatasetSpec, ranges: &ParamRanges, seed: u64) -> Result<DatasetContainer> {
    spec.validate()?;
    ranges.validate()?;
    let records = (0..spec.count)
        .map(|i| {
            let hq = spec.generator.render(spec.size, spec.channels, rng::derive(seed, &format!("synth/hq/{i}")))?;
            record(hq, ranges, seed, i)
        })
        .collect::<Result<_>>()?;
    Ok(DatasetContainer { height: spec.size, width: spec.size, channels: spec.channels, seed, generator: spec.generator, records })
}

fn record(hq: Image, ranges: &ParamRanges, seed: u64, i: usize) -> Result<Record> {
    let params = sample_params(ranges, rng::derive(seed, &format!("synth/params/{i}")))?;
    let lq = degrade(&hq, &params, rng::derive(seed, &format!("synth/degrade/{i}")))?;
    Ok(Record { hq, lq, params })
}

/// Re-degrades every HQ image of `data` with fresh parameters from `ranges`.
pub fn redegrade(data: &DatasetContainer, ranges: &ParamRanges, seed: u64) -> Result<DatasetContainer> {
    ranges.validate()?;
    let records = data.records.iter().enumerate().map(|(i, rec)| record(rec.hq.clone(), ranges, seed, i)).collect::<Result<_>>()?;
    Ok(DatasetContainer { seed, records, ..data.clone() })
}
