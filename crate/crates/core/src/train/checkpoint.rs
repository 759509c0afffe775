//! Bit-exact binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      "BCS1"
//! version    u32 (= 1)
//! config     B u32, M u32, c u32, K u32, rate f64
//! tensors    count u32, then per tensor:
//!              name_len u16, name (UTF-8), ndim u8, dims u32 x ndim, f32 x prod(dims)
//! blobs      count u32, then per blob:
//!              name_len u16, name (UTF-8), len u32, bytes
//! ```
//!
//! Tensors hold the model parameters followed by the Adam moments
//! (`adam.m.<param>` and `adam.v.<param>`). Blobs hold the pipeline kind
//! (`method`), the optimizer scalars (`optimizer`: step u64, beta1 f64,
//! beta2 f64, eps f64), the step/epoch counters (`counters`: u64, u64) and,
//! for training checkpoints, the batch iterator (`iterator`: seed u64,
//! epoch u64, cursor u64, crop stream word position u128).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::IteratorState;
use crate::error::{Error, Result};
use crate::kernels::AdamState;
use crate::model::{measurement_count, AnyModel, BaselineModel, CsModel, FullModel, Method, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BCS1";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a model and continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: AdamState<f32>,
    pub iterator: Option<IteratorState>,
    pub step: u64,
    pub epoch: u64,
}

impl Checkpoint {
    /// Model-only checkpoint with a fresh optimizer.
    pub fn from_model(model: &AnyModel<f32>) -> Self {
        let params: Vec<(String, Tensor<f32>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let optimizer = AdamState::new(params.iter().map(|(_, t)| t));
        Checkpoint {
            method: model.method(),
            config: *model.config(),
            params,
            optimizer,
            iterator: None,
            step: 0,
            epoch: 0,
        }
    }

    pub fn to_model(&self) -> Result<AnyModel<f32>> {
        let lookup: BTreeMap<&str, &Tensor<f32>> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut model = AnyModel::zeros(self.method, self.config)?;
        match &mut model {
            AnyModel::Full(m) => FullModel::load_params(m, |n| lookup.get(n).copied())?,
            AnyModel::Baseline(m) => BaselineModel::load_params(m, |n| lookup.get(n).copied())?,
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config.block_size as u32);
        put_u32(&mut out, self.config.measurements() as u32);
        put_u32(&mut out, self.config.lift_channels as u32);
        put_u32(&mut out, self.config.residual_blocks as u32);
        out.extend_from_slice(&self.config.rate.to_le_bytes());

        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        for ((name, _), m) in self.params.iter().zip(&self.optimizer.first_moment) {
            tensors.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in self.params.iter().zip(&self.optimizer.second_moment) {
            tensors.push((format!("adam.v.{name}"), v));
        }
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_name(&mut out, &name);
            out.push(4);
            for d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut blobs: Vec<(&str, Vec<u8>)> = vec![("method", self.method.as_str().as_bytes().to_vec())];
        let mut opt = Vec::new();
        opt.extend_from_slice(&self.optimizer.step.to_le_bytes());
        opt.extend_from_slice(&self.optimizer.beta1.to_le_bytes());
        opt.extend_from_slice(&self.optimizer.beta2.to_le_bytes());
        opt.extend_from_slice(&self.optimizer.eps.to_le_bytes());
        blobs.push(("optimizer", opt));
        let mut counters = Vec::new();
        counters.extend_from_slice(&self.step.to_le_bytes());
        counters.extend_from_slice(&self.epoch.to_le_bytes());
        blobs.push(("counters", counters));
        if let Some(it) = &self.iterator {
            let mut b = Vec::new();
            b.extend_from_slice(&it.seed.to_le_bytes());
            b.extend_from_slice(&it.epoch.to_le_bytes());
            b.extend_from_slice(&it.cursor.to_le_bytes());
            b.extend_from_slice(&it.crop_word_pos.to_le_bytes());
            blobs.push(("iterator", b));
        }
        put_u32(&mut out, blobs.len() as u32);
        for (name, bytes) in blobs {
            put_name(&mut out, name);
            put_u32(&mut out, bytes.len() as u32);
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not a BCS1 checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint("version", format!("unsupported version {version}")));
        }
        let block_size = r.u32("config.B")? as usize;
        let stored_m = r.u32("config.M")? as usize;
        let lift_channels = r.u32("config.c")? as usize;
        let residual_blocks = r.u32("config.K")? as usize;
        let rate = f64::from_le_bytes(r.array("config.rate")?);
        let config = ModelConfig {
            block_size,
            rate,
            lift_channels,
            residual_blocks,
        };
        config
            .validate()
            .map_err(|e| Error::checkpoint("config", e.to_string()))?;
        if stored_m != measurement_count(rate, block_size) {
            return Err(Error::checkpoint(
                "config.M",
                format!("{stored_m} disagrees with rate {rate} and block size {block_size}"),
            ));
        }

        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.name("tensor name")?;
            let ndim = r.take(1, &name)?[0] as usize;
            if !(1..=4).contains(&ndim) {
                return Err(Error::checkpoint(&name, format!("rank {ndim} not supported")));
            }
            let mut shape = [1usize; 4];
            for d in 0..ndim {
                shape[4 - ndim + d] = r.u32(&name)? as usize;
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::checkpoint(&name, "too large"))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::checkpoint(&name, "duplicate tensor"));
            }
        }

        let count = r.u32("blob count")?;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name = r.name("blob name")?;
            let len = r.u32(&name)? as usize;
            blobs.insert(name.clone(), r.take(len, &name)?.to_vec());
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("trailer", "unexpected bytes after blob table"));
        }

        let method_bytes = blobs
            .remove("method")
            .ok_or_else(|| Error::checkpoint("method", "missing"))?;
        let method: Method = std::str::from_utf8(&method_bytes)
            .map_err(|_| Error::checkpoint("method", "not UTF-8"))?
            .parse()
            .map_err(|e: Error| Error::checkpoint("method", e.to_string()))?;

        let template = AnyModel::<f32>::zeros(method, config)?;
        let mut params = Vec::new();
        let mut first_moment = Vec::new();
        let mut second_moment = Vec::new();
        for (name, expected) in template.named_params() {
            let mut fetch = |key: String| -> Result<Tensor<f32>> {
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::checkpoint(&key, "missing"))?;
                if t.shape() != expected.shape() {
                    return Err(Error::checkpoint(
                        &key,
                        format!("shape {:?}, configuration requires {:?}", t.shape(), expected.shape()),
                    ));
                }
                Ok(t)
            };
            params.push((name.clone(), fetch(name.clone())?));
            first_moment.push(fetch(format!("adam.m.{name}"))?);
            second_moment.push(fetch(format!("adam.v.{name}"))?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::checkpoint(extra, "unexpected tensor"));
        }

        let opt = blobs
            .remove("optimizer")
            .ok_or_else(|| Error::checkpoint("optimizer", "missing"))?;
        let mut o = Reader { bytes: &opt, pos: 0 };
        let optimizer = AdamState {
            first_moment,
            second_moment,
            step: u64::from_le_bytes(o.array("optimizer.step")?),
            beta1: f64::from_le_bytes(o.array("optimizer.beta1")?),
            beta2: f64::from_le_bytes(o.array("optimizer.beta2")?),
            eps: f64::from_le_bytes(o.array("optimizer.eps")?),
        };
        let counters = blobs
            .remove("counters")
            .ok_or_else(|| Error::checkpoint("counters", "missing"))?;
        let mut c = Reader { bytes: &counters, pos: 0 };
        let step = u64::from_le_bytes(c.array("counters.step")?);
        let epoch = u64::from_le_bytes(c.array("counters.epoch")?);
        let iterator = match blobs.remove("iterator") {
            None => None,
            Some(b) => {
                let mut i = Reader { bytes: &b, pos: 0 };
                Some(IteratorState {
                    seed: u64::from_le_bytes(i.array("iterator.seed")?),
                    epoch: u64::from_le_bytes(i.array("iterator.epoch")?),
                    cursor: u64::from_le_bytes(i.array("iterator.cursor")?),
                    crop_word_pos: u128::from_le_bytes(i.array("iterator.crop_word_pos")?),
                })
            }
        };
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::checkpoint(extra, "unexpected blob"));
        }

        Ok(Checkpoint {
            method,
            config,
            params,
            optimizer,
            iterator,
            step,
            epoch,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn name(&mut self, field: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.array(field)?) as usize;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::checkpoint(field, "name is not UTF-8"))
    }
}
