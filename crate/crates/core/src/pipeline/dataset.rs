//! Extracted samples grouped by region, and the `MIN1` container that
//! stores them so training runs can skip re-extraction.
//!
//! `MIN1` layout, all little-endian:
//!
//! ```text
//! magic       4 bytes "MIN1"
//! kind        u8      0 original, 1 fine, 2 flip
//! shape       u32 channels, u32 rows, u32 width, u32 scalars
//! norm        5 x f64
//! count       u64
//! per sample:
//!   id          u64
//!   region      u32 length + UTF-8 bytes
//!   rx          f64 x, f64 y
//!   target      u8 flag, f64 path loss dB (present only when flag = 1)
//!   category    u8 flag, u32 length + UTF-8 bytes (present only when flag = 1)
//!   channels    channels x rows x width f32
//!   scalars     scalars f32
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodata::DsmRaster;
use crate::profile::{
    prepare_input, ChannelConfig, ConfigKind, ExtractionParams, LinkMeasurement, ModelInput,
    NormalizationSpec, PROFILE_ROWS,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MIN1";

/// One link ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable link identifier, usually the row index in the measurement file.
    pub id: u64,
    pub region: String,
    pub rx_x: f64,
    pub rx_y: f64,
    pub input: ModelInput,
    /// Measured path loss in dB, kept at full precision for evaluation.
    pub target_db: Option<f64>,
    pub category: Option<String>,
}

/// All samples of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDataset {
    region: String,
    samples: Vec<Sample>,
}

impl RegionDataset {
    pub fn new(region: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let region = region.into();
        if samples.is_empty() {
            return Err(Error::Empty("region dataset"));
        }
        if let Some(s) = samples.iter().find(|s| s.region != region) {
            return Err(Error::Config(format!(
                "sample {} belongs to {} not {region}",
                s.id, s.region
            )));
        }
        Ok(Self { region, samples })
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Extract and assemble inputs for `(id, link)` pairs against one raster.
pub fn extract_samples(
    raster: &DsmRaster,
    links: &[(u64, &LinkMeasurement)],
    params: &ExtractionParams,
    config: &ChannelConfig,
    norm: &NormalizationSpec,
) -> Result<Vec<Sample>> {
    links
        .par_iter()
        .map(|&(id, link)| {
            let input = prepare_input(raster, link, params, config, norm).map_err(|e| {
                Error::InvalidLink(format!("link {id}: {e}"))
            })?;
            Ok(Sample {
                id,
                region: link.region.clone(),
                rx_x: link.rx_x,
                rx_y: link.rx_y,
                input,
                target_db: link.path_loss,
                category: link.category.clone(),
            })
        })
        .collect()
}

/// Group samples by region label, regions in lexical order and samples in
/// their original order.
pub fn group_by_region(samples: Vec<Sample>) -> Result<Vec<RegionDataset>> {
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.region.clone()).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(r, s)| RegionDataset::new(r, s))
        .collect()
}

/// Samples of one configuration together with the normalization used.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    pub kind: ConfigKind,
    pub norm: NormalizationSpec,
    pub samples: Vec<Sample>,
}

impl InputSet {
    fn shape(&self) -> (usize, usize, usize, usize) {
        let cfg = ChannelConfig::of(self.kind);
        let width = self
            .samples
            .first()
            .map(|s| s.input.channels.shape()[2])
            .unwrap_or(0);
        (cfg.n_channels, PROFILE_ROWS, width, cfg.n_scalars)
    }

    pub fn write_min1<W: Write>(&self, mut w: W) -> Result<()> {
        let (c, rows, width, ns) = self.shape();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(self.kind.code());
        for v in [c, rows, width, ns] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.norm.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            if s.input.channels.shape() != [c, rows, width] || s.input.scalars.len() != ns {
                return Err(Error::Shape(format!("sample {} does not match the set shape", s.id)));
            }
            buf.extend_from_slice(&s.id.to_le_bytes());
            put_str(&mut buf, &s.region);
            buf.extend_from_slice(&s.rx_x.to_le_bytes());
            buf.extend_from_slice(&s.rx_y.to_le_bytes());
            match s.target_db {
                Some(t) => {
                    buf.push(1);
                    buf.extend_from_slice(&t.to_le_bytes());
                }
                None => buf.push(0),
            }
            match &s.category {
                Some(cat) => {
                    buf.push(1);
                    put_str(&mut buf, cat);
                }
                None => buf.push(0),
            }
            for v in s.input.channels.data().iter().chain(&s.input.scalars) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io("<MIN1 writer>", e))?;
            buf.clear();
        }
        w.write_all(&buf).map_err(|e| Error::io("<MIN1 writer>", e))?;
        Ok(())
    }

    pub fn read_min1<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<MIN1 reader>", e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::format("MIN1", "bad magic"));
        }
        let kind = ConfigKind::from_code(cur.take(1)?[0])?;
        let c = cur.u32()? as usize;
        let rows = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let ns = cur.u32()? as usize;
        let cfg = ChannelConfig::of(kind);
        if (c, ns) != (cfg.n_channels, cfg.n_scalars) || rows != PROFILE_ROWS || width == 0 {
            return Err(Error::format("MIN1", "shape does not match the configuration"));
        }
        let mut norm = [0.0; 5];
        for v in &mut norm {
            *v = cur.f64()?;
        }
        let norm = NormalizationSpec::from_array(norm)?;
        let count = cur.u64()? as usize;
        let plane = c * rows * width;
        let min_record = 8 + 4 + 16 + 2 + 4 * (plane + ns);
        if count > bytes.len() / min_record {
            return Err(Error::format("MIN1", "sample count exceeds file size"));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let id = cur.u64()?;
            let region = cur.string()?;
            let rx_x = cur.f64()?;
            let rx_y = cur.f64()?;
            let target_db = match cur.flag()? {
                true => Some(cur.f64()?),
                false => None,
            };
            let category = match cur.flag()? {
                true => Some(cur.string()?),
                false => None,
            };
            let data = cur.f32s(plane)?;
            let scalars = cur.f32s(ns)?;
            let target = target_db.map(|t| norm.target(t) as f32);
            samples.push(Sample {
                id,
                region,
                rx_x,
                rx_y,
                input: ModelInput {
                    channels: Tensor::new(vec![c, rows, width], data)?,
                    scalars,
                    target,
                },
                target_db,
                category,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format("MIN1", "trailing bytes"));
        }
        Ok(Self {
            kind,
            norm,
            samples,
        })
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("MIN1", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format("MIN1", format!("bad flag byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("MIN1", "invalid UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("MIN1", "overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}
