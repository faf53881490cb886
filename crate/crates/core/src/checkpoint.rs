//! Binary checkpoint format.
//!
//! ```text
//! "MDCK" | version u32 | header_len u32 | header (UTF-8 key=value lines)
//! record*: name_len u32 | name | dtype u8 | rank u8 | dims u64 * rank | values
//! ```
//!
//! All integers and values are little-endian; dtype 0 is f32, 1 is f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::denoiser::{DenoiserConfig, DenoiserParams, UNet};
use crate::error::{Error, Result};
use crate::optimizer::Adam;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

/// A tensor as stored on disk, before conversion to a working precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t.clone(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_len(buf: &mut Vec<u8>, len: usize, what: &str) -> Result<()> {
    let v = u32::try_from(len).map_err(|_| Error::Checkpoint(format!("{what} too long")))?;
    put_u32(buf, v);
    Ok(())
}

pub fn write_record<T: Real>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_len(buf, name.len(), "tensor name")?;
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::dtype_code());
    let rank =
        u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("rank of {name}")))?;
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match T::dtype_code() {
            0 => buf.extend_from_slice(&(Real::to_f64(v) as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&Real::to_f64(v).to_le_bytes()),
        }
    }
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_record(c: &mut Cursor<'_>) -> Result<(String, StoredTensor)> {
    let name_len = c.u32()? as usize;
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
        .to_string();
    let dtype = c.u8()?;
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(
            usize::try_from(c.u64()?)
                .map_err(|_| Error::Checkpoint(format!("dimension of {name}")))?,
        );
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint(format!("{name} is too large")))?;
    let tensor = match dtype {
        0 => {
            let raw = c.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("{name} is too large")))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            StoredTensor::F32(Tensor::from_vec(&shape, data)?)
        }
        1 => {
            let raw = c.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("{name} is too large")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            StoredTensor::F64(Tensor::from_vec(&shape, data)?)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown dtype code {other} for {name}"
            )))
        }
    };
    Ok((name, tensor))
}

/// Header lines plus named tensors, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCheckpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "header entry {k:?} is not a single key=value line"
                )));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        put_len(&mut buf, header.len(), "header")?;
        buf.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            match t {
                StoredTensor::F32(t) => write_record(&mut buf, name, t)?,
                StoredTensor::F64(t) => write_record(&mut buf, name, t)?,
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("missing MDCK magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = c.u32()? as usize;
        let text = std::str::from_utf8(c.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("header line {line:?} lacks '='")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let mut tensors = Vec::new();
        while !c.done() {
            tensors.push(read_record(&mut c)?);
        }
        Ok(RawCheckpoint { header, tensors })
    }

    fn field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .header
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("header {key}={raw} is malformed")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let raw: String = self.field(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("header {key}={raw} is malformed")))
            })
            .collect()
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub timesteps: usize,
    pub offset: f64,
    pub image_size: usize,
    /// Completed training steps.
    pub step: u64,
    pub params: DenoiserParams<f32>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps, self.offset)
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        let c = &self.config;
        let mut header = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            header.insert(k.to_string(), v);
        };
        put("denoiser.in_channels", c.in_channels.to_string());
        put("denoiser.base_channels", c.base_channels.to_string());
        put("denoiser.channel_mults", join(&c.channel_mults));
        put("denoiser.attention_levels", join(&c.attention_levels));
        put("denoiser.groups", c.groups.to_string());
        put("denoiser.time_embed_dim", c.time_embed_dim.to_string());
        put("denoiser.out_channels", c.out_channels.to_string());
        put("schedule.timesteps", self.timesteps.to_string());
        // `{}` on f64 prints the shortest string that parses back exactly
        put("schedule.offset", self.offset.to_string());
        put("image_size", self.image_size.to_string());
        put("step", self.step.to_string());
        let mut tensors: Vec<(String, StoredTensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), StoredTensor::F32(t.clone())))
            .collect();
        if let Some(opt) = &self.optimizer {
            put("adam.lr", opt.lr.to_string());
            put("adam.beta1", opt.beta1.to_string());
            put("adam.beta2", opt.beta2.to_string());
            put("adam.eps", opt.eps.to_string());
            put("adam.step", opt.step.to_string());
            for (prefix, set) in [(ADAM_M_PREFIX, &opt.m), (ADAM_V_PREFIX, &opt.v)] {
                tensors.extend(
                    set.iter()
                        .map(|(n, t)| (format!("{prefix}{n}"), StoredTensor::F32(t.clone()))),
                );
            }
        }
        RawCheckpoint { header, tensors }
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        let config = DenoiserConfig {
            in_channels: raw.field("denoiser.in_channels")?,
            base_channels: raw.field("denoiser.base_channels")?,
            channel_mults: raw.list("denoiser.channel_mults")?,
            attention_levels: raw.list("denoiser.attention_levels")?,
            groups: raw.field("denoiser.groups")?,
            time_embed_dim: raw.field("denoiser.time_embed_dim")?,
            out_channels: raw.field("denoiser.out_channels")?,
        };
        let net = UNet::new(&config)?;
        let collect = |prefix: &str| -> Result<DenoiserParams<f32>> {
            let entries = raw
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.to_f32())))
                .collect();
            let params = DenoiserParams::from_named(entries)?;
            net.check_params(&params)?;
            Ok(params)
        };
        let params = collect(PARAM_PREFIX)?;
        let optimizer = if raw.header.contains_key("adam.step") {
            Some(Adam {
                lr: raw.field("adam.lr")?,
                beta1: raw.field("adam.beta1")?,
                beta2: raw.field("adam.beta2")?,
                eps: raw.field("adam.eps")?,
                step: raw.field("adam.step")?,
                m: collect(ADAM_M_PREFIX)?,
                v: collect(ADAM_V_PREFIX)?,
            })
        } else {
            None
        };
        let ckpt = Checkpoint {
            config,
            timesteps: raw.field("schedule.timesteps")?,
            offset: raw.field("schedule.offset")?,
            image_size: raw.field("image_size")?,
            step: raw.field("step")?,
            params,
            optimizer,
        };
        ckpt.schedule()?;
        ckpt.config
            .check_input(ckpt.config.in_channels, ckpt.image_size, ckpt.image_size)?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_raw().to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_raw(&RawCheckpoint::from_bytes(&bytes)?)
    }
}
