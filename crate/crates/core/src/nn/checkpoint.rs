//! `CKP1` checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      4 bytes  "CKP1"
//! kind       u8       0 original, 1 fine, 2 flip
//! arch       u32 input_rows, u32 input_width,
//!            u32 n_conv, n_conv x (u32 out_channels, u32 kernel, u32 pool),
//!            u32 n_hidden, n_hidden x u32 width
//! norm       5 x f64  height scale, frequency log divisor, distance scale,
//!                     target scale, target offset
//! params     u64 count, count x f64 (conv layers then dense, weights then bias)
//! val_loss   f64
//! seed       u64
//! epoch      u64
//! ```

use std::fs;
use std::path::Path;

use super::model::{ArchSpec, CnnModel, ConvBlockSpec};
use super::Real;
use crate::error::{Error, Result};
use crate::profile::{ChannelConfig, ConfigKind, NormalizationSpec};

const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ConfigKind,
    pub arch: ArchSpec,
    pub norm: NormalizationSpec,
    pub params: Vec<f64>,
    /// Normalized validation MSE when the parameters were captured.
    pub val_loss: f64,
    pub seed: u64,
    /// 1-based epoch the parameters come from.
    pub epoch: u64,
}

impl Checkpoint {
    pub fn capture<F: Real>(
        model: &CnnModel<F>,
        norm: NormalizationSpec,
        val_loss: f64,
        seed: u64,
        epoch: u64,
    ) -> Self {
        Self {
            kind: model.config().kind,
            arch: model.arch().clone(),
            norm,
            params: model.params().to_f64_vec(),
            val_loss,
            seed,
            epoch,
        }
    }

    pub fn config(&self) -> ChannelConfig {
        ChannelConfig::of(self.kind)
    }

    pub fn to_model<F: Real>(&self) -> Result<CnnModel<F>> {
        let mut model = CnnModel::zeroed(self.config(), self.arch.clone())?;
        model.params_mut().load_f64(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind.code());
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, self.arch.input_rows);
        u32le(&mut out, self.arch.input_width);
        u32le(&mut out, self.arch.conv.len());
        for b in &self.arch.conv {
            u32le(&mut out, b.out_channels);
            u32le(&mut out, b.kernel);
            u32le(&mut out, b.pool);
        }
        u32le(&mut out, self.arch.hidden.len());
        for &w in &self.arch.hidden {
            u32le(&mut out, w);
        }
        for v in self.norm.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("CKP1", "bad magic"));
        }
        let kind = ConfigKind::from_code(r.take(1)?[0])?;
        let input_rows = r.u32()? as usize;
        let input_width = r.u32()? as usize;
        let n_conv = r.u32()? as usize;
        let mut conv = Vec::new();
        for _ in 0..n_conv {
            conv.push(ConvBlockSpec::new(
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            ));
        }
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut norm = [0.0; 5];
        for v in &mut norm {
            *v = r.f64()?;
        }
        let n = r.u64()? as usize;
        if n > bytes.len() / 8 {
            return Err(Error::format("CKP1", "parameter count exceeds file size"));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let val_loss = r.f64()?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::format("CKP1", "trailing bytes"));
        }
        let ckpt = Self {
            kind,
            arch: ArchSpec {
                input_rows,
                input_width,
                conv,
                hidden,
            },
            norm: NormalizationSpec::from_array(norm)?,
            params,
            val_loss,
            seed,
            epoch,
        };
        // Validates that the parameter count fits the architecture.
        ckpt.to_model::<f64>()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("CKP1", "truncated"))?;
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
}
