//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NRND" | version u32
//! config      : u64 length + JSON (training config incl. hyperparameters)
//! tensors     : u32 count, then per tensor
//!               u32 name length + UTF-8 name | u32 rank | u64 dims.. | f32 values
//! adam        : u64 step | f64 lr, beta1, beta2, eps | u32 slots | per slot u64 n + f32 m.. + f32 v..
//! rng         : u64 length + JSON (generator streams)
//! timestep u64 | iteration u64
//! runtime     : u64 length + JSON (live environments and episode augmentations)
//! sha256 of every preceding byte (32 bytes)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Scalar, Tensor};
use crate::policy::ActorCritic;
use crate::trainer::{stream, Agent, EpisodeAug, Streams, TrainConfig, Trainer, VecEnv};

pub const MAGIC: &[u8; 4] = b"NRND";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamRecord {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Environment state needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeState {
    pub envs: VecEnv,
    pub augs: Vec<EpisodeAug>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: Vec<NamedTensor>,
    pub adam: AdamRecord,
    pub rng: Streams,
    pub timestep: u64,
    pub iteration: u64,
    pub runtime: RuntimeState,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(f64::from(x))).collect()
}

impl Checkpoint {
    pub fn from_trainer<T: Scalar>(t: &Trainer<T>) -> Self {
        let net = &t.agent.net;
        let tensors = net
            .param_names()
            .into_iter()
            .zip(net.params())
            .map(|(name, p)| NamedTensor {
                name,
                shape: p.shape().to_vec(),
                data: to_f32(p.data()),
            })
            .collect();
        let a = &t.adam;
        Self {
            config: t.config.clone(),
            tensors,
            adam: AdamRecord {
                step: a.step,
                lr: a.lr.to_f64_lossy(),
                beta1: a.beta1.to_f64_lossy(),
                beta2: a.beta2.to_f64_lossy(),
                eps: a.eps.to_f64_lossy(),
                m: a.m.iter().map(|s| to_f32(s)).collect(),
                v: a.v.iter().map(|s| to_f32(s)).collect(),
            },
            rng: t.rngs.clone(),
            timestep: t.timestep,
            iteration: t.iteration,
            runtime: RuntimeState {
                envs: t.envs.clone(),
                augs: t.augs.clone(),
            },
        }
    }

    /// Rebuilds the agent described by this checkpoint.
    pub fn agent<T: Scalar>(&self) -> Result<Agent<T>> {
        let mut agent = Agent::new(&self.config, &mut stream(self.config.seed, Streams::INIT))?;
        let names = agent.net.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, p), rec) in names.iter().zip(agent.net.params_mut()).zip(&self.tensors) {
            if *name != rec.name || p.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match network slot {name} {:?}",
                    rec.name,
                    rec.shape,
                    p.shape()
                )));
            }
            *p = Tensor::new(&rec.shape, from_f32(&rec.data))?;
        }
        Ok(agent)
    }

    /// Rebuilds a trainer that continues the run bit-for-bit.
    pub fn trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        let mut t = Trainer::<T>::new(self.config.clone())?;
        t.agent = self.agent()?;
        let a = &self.adam;
        if a.m.len() != self.tensors.len() || a.v.len() != self.tensors.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match tensor count".into(),
            ));
        }
        for ((m, v), rec) in a.m.iter().zip(&a.v).zip(&self.tensors) {
            if m.len() != rec.data.len() || v.len() != rec.data.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for {} have the wrong length",
                    rec.name
                )));
            }
        }
        t.adam = AdamState {
            lr: T::lit(a.lr),
            beta1: T::lit(a.beta1),
            beta2: T::lit(a.beta2),
            eps: T::lit(a.eps),
            step: a.step,
            m: a.m.iter().map(|s| from_f32(s)).collect(),
            v: a.v.iter().map(|s| from_f32(s)).collect(),
        };
        if self.runtime.envs.len() != self.config.n_envs
            || self.runtime.augs.len() != self.config.n_envs
        {
            return Err(Error::Checkpoint(
                "runtime state does not match n_envs".into(),
            ));
        }
        t.envs = self.runtime.envs.clone();
        t.augs = self.runtime.augs.clone();
        t.rngs = self.rng.clone();
        t.timestep = self.timestep;
        t.iteration = self.iteration;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_blob(&mut w, &serde_json::to_vec(&self.config)?);
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            w.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            w.extend_from_slice(t.name.as_bytes());
            w.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut w, &t.data);
        }
        let a = &self.adam;
        w.extend_from_slice(&a.step.to_le_bytes());
        for x in [a.lr, a.beta1, a.beta2, a.eps] {
            w.extend_from_slice(&x.to_le_bytes());
        }
        w.extend_from_slice(&(a.m.len() as u32).to_le_bytes());
        for (m, v) in a.m.iter().zip(&a.v) {
            w.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f32s(&mut w, m);
            put_f32s(&mut w, v);
        }
        put_blob(&mut w, &serde_json::to_vec(&self.rng)?);
        w.extend_from_slice(&self.timestep.to_le_bytes());
        w.extend_from_slice(&self.iteration.to_le_bytes());
        put_blob(&mut w, &serde_json::to_vec(&self.runtime)?);
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Checkpoint("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(
                "checksum mismatch: file is truncated or corrupted".into(),
            ));
        }
        let mut r = Reader { buf: body, at: 8 };
        let config: TrainConfig = serde_json::from_slice(r.blob()?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count =
                count.ok_or_else(|| Error::Checkpoint(format!("tensor {name} shape overflows")))?;
            let data = r.f32s(count)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        let step = r.u64()?;
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let slots = r.u32()? as usize;
        let mut m = Vec::with_capacity(slots.min(1024));
        let mut v = Vec::with_capacity(slots.min(1024));
        for _ in 0..slots {
            let len = r.u64()? as usize;
            m.push(r.f32s(len)?);
            v.push(r.f32s(len)?);
        }
        let rng: Streams = serde_json::from_slice(r.blob()?)?;
        let timestep = r.u64()?;
        let iteration = r.u64()?;
        let runtime: RuntimeState = serde_json::from_slice(r.blob()?)?;
        if r.at != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after runtime section",
                body.len() - r.at
            )));
        }
        Ok(Self {
            config,
            tensors,
            adam: AdamRecord {
                step,
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
            },
            rng,
            timestep,
            iteration,
            runtime,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_blob(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
    w.extend_from_slice(b);
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is truncated at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
