//! Checkpoint files.
//!
//! ```text
//! magic      4 bytes  "SNPC"
//! version    u16      1
//! config     u32 length + UTF-8 TOML of the run config
//! iteration  u64      completed training iterations
//! alpha_on   u8
//! history    u32 count + f64 values (smoothed-loss window of the alpha trigger)
//! adam_step  u64
//! tensors    u32 count
//! manifest   per tensor: u32 length + UTF-8 name, u8 rank, rank * u32 dims
//! payload    per tensor: parameters, Adam first moment, Adam second moment, f32 each
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use snp_core::nn::{Adam, ParamStore};
use snp_core::tensor::Tensor;

use crate::bin::{open, Writer};
use crate::config::RunConfig;
use crate::error::{HarnessError, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"SNPC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub alpha_on: bool,
    pub alpha_history: Vec<f64>,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u16(VERSION);
        w.str(&self.config.to_toml());
        w.u64(self.iteration);
        w.u8(u8::from(self.alpha_on));
        w.u32(self.alpha_history.len() as u32);
        w.f64s(&self.alpha_history);
        w.u64(self.adam.step);
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.str(name);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
        }
        for (id, _, t) in self.params.iter() {
            w.f32s(t.data());
            w.f32s(self.adam.m[id.0].data());
            w.f32s(self.adam.v[id.0].data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = open(bytes, &MAGIC, VERSION)?;
        let config = RunConfig::parse(&r.str()?)?;
        let iteration = r.u64()?;
        let alpha_on = r.u8()? == 1;
        let n_hist = r.u32()? as usize;
        let alpha_history = r.f64s(n_hist)?;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (name, dims) in &manifest {
            let len = dims.iter().product();
            params.insert(name, Tensor::from_vec(dims, r.f32s(len)?));
            m.push(Tensor::from_vec(dims, r.f32s(len)?));
            v.push(Tensor::from_vec(dims, r.f32s(len)?));
        }
        if !r.finished() {
            return Err(HarnessError::Format("trailing bytes after the tensor payload".into()));
        }
        let mut adam = Adam::new(&params, config.lr());
        adam.step = adam_step;
        adam.m = m;
        adam.v = v;
        Ok(Self {
            config,
            iteration,
            alpha_on,
            alpha_history,
            params,
            adam,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

/// Checks that `loaded` has exactly the tensors of a freshly built model.
pub fn check_compatible<A, B>(fresh: &ParamStore<A>, loaded: &ParamStore<B>) -> Result<()>
where
    A: snp_core::Scalar,
    B: snp_core::Scalar,
{
    let a: Vec<(&str, &[usize])> = fresh.iter().map(|(_, n, t)| (n, t.shape())).collect();
    let b: Vec<(&str, &[usize])> = loaded.iter().map(|(_, n, t)| (n, t.shape())).collect();
    if a != b {
        let first = a.iter().zip(&b).find(|(x, y)| x != y);
        return Err(HarnessError::Format(format!(
            "checkpoint tensors do not match the model ({} vs {} tensors; first difference {first:?})",
            b.len(),
            a.len()
        )));
    }
    Ok(())
}
