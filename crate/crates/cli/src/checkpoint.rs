//! `VFCKPT 1` container: header line, length-prefixed JSON metadata, a
//! tensor table and a raw little-endian float32 payload.
//!
//! ```text
//! "VFCKPT 1\n"
//! u64 metadata length, metadata JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u8 dtype (0 = f32), u32 rank, rank × u64 dims, u64 payload offset
//! payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use vflow_core::dit::Dit;
use vflow_core::params::ParamSet;
use vflow_core::trb::{Codec, SoftNorm};
use vflow_core::Tensor;

use crate::config::RunConfig;

pub const HEADER: &[u8] = b"VFCKPT 1\n";
const DTYPE_F32: u8 = 0;
pub const SILENCE: &str = "silence";
const SOFTNORM_A: &str = "codec.softnorm.a";
const SOFTNORM_B: &str = "codec.softnorm.b";
const SOFTNORM_STD: &str = "codec.softnorm.running_std";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Flow,
    Distilled,
    PostTrained,
    Codec,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Flow => "flow",
            Stage::Distilled => "distilled",
            Stage::PostTrained => "post-trained",
            Stage::Codec => "codec",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub stage: Stage,
    /// Weights are the exponential moving average.
    pub ema: bool,
    pub step: u64,
    /// Full configuration; holds the model config and schedule.
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(HEADER)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u64::<LE>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u32::<LE>(self.tensors.len() as u32)?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.write_u32::<LE>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(DTYPE_F32)?;
            w.write_u32::<LE>(2)?;
            w.write_u64::<LE>(t.rows() as u64)?;
            w.write_u64::<LE>(t.cols() as u64)?;
            w.write_u64::<LE>(offset)?;
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                w.write_f32::<LE>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 9];
        r.read_exact(&mut header).context("truncated header")?;
        ensure!(header == HEADER, "not a VFCKPT 1 checkpoint");
        let meta_len = r.read_u64::<LE>()?;
        ensure!(meta_len < 1 << 30, "metadata length {meta_len} is implausible");
        let mut meta = vec![0u8; meta_len as usize];
        r.read_exact(&mut meta).context("truncated metadata")?;
        let meta: Metadata = serde_json::from_slice(&meta).context("malformed checkpoint metadata")?;
        let n = r.read_u32::<LE>()?;
        let mut table = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let nl = r.read_u32::<LE>()? as usize;
            ensure!(nl < 4096, "tensor name length {nl} is implausible");
            let mut name = vec![0u8; nl];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).context("tensor name is not UTF-8")?;
            let dtype = r.read_u8()?;
            ensure!(dtype == DTYPE_F32, "{name}: unsupported dtype {dtype}");
            let rank = r.read_u32::<LE>()? as usize;
            ensure!((1..=2).contains(&rank), "{name}: unsupported rank {rank}");
            let mut dims = vec![0u64; rank];
            r.read_u64_into::<LE>(&mut dims)?;
            let offset = r.read_u64::<LE>()?;
            let (rows, cols) = if rank == 1 { (1, dims[0] as usize) } else { (dims[0] as usize, dims[1] as usize) };
            table.push((name, rows, cols, offset));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, rows, cols, offset) in table {
            let start = usize::try_from(offset)?;
            let bytes = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).context("tensor size overflows")?;
            let Some(chunk) = payload.get(start..start + bytes) else { bail!("{name}: payload is truncated") };
            let mut data = vec![0f32; rows * cols];
            (&chunk[..]).read_f32_into::<LE>(&mut data)?;
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
        Self::read(&mut r).with_context(|| format!("reading {}", path.display()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn param_set(&self, prefix: &str) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                set.insert(rest, t.clone());
            }
        }
        set
    }

    pub fn from_model(meta: Metadata, model: &Dit<f32>, silence: &[f32]) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push((SILENCE.into(), Tensor::from_vec(1, silence.len(), silence.to_vec())));
        Self { meta, tensors }
    }

    /// The model described by the metadata; tensor names and shapes must match it.
    pub fn model(&self) -> Result<Dit<f32>> {
        ensure!(self.meta.stage != Stage::Codec, "checkpoint holds a codec, not a generator");
        Dit::from_params(self.meta.config.model.clone(), &self.param_set("")).context("checkpoint does not match its model config")
    }

    pub fn silence(&self) -> Result<Vec<f32>> {
        let c = self.meta.config.model.latent_channels;
        match self.get(SILENCE) {
            Some(t) if t.len() == c => Ok(t.data().to_vec()),
            Some(t) => bail!("silence latent has {} values, model has {c} channels", t.len()),
            None => Ok(vec![0.0; c]),
        }
    }

    pub fn from_codec(meta: Metadata, codec: &Codec) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = codec.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let row = |v: &[f64]| Tensor::from_vec(1, v.len(), v.iter().map(|&x| x as f32).collect());
        tensors.push((SOFTNORM_A.into(), row(&codec.norm.a)));
        tensors.push((SOFTNORM_B.into(), row(&codec.norm.b)));
        tensors.push((SOFTNORM_STD.into(), row(&codec.norm.running_std)));
        Self { meta, tensors }
    }

    pub fn codec(&self) -> Result<Codec> {
        ensure!(self.meta.stage == Stage::Codec, "checkpoint is tagged {}, not codec", self.meta.stage);
        let cfg = self.meta.config.codec;
        let vec_of = |name: &str| -> Result<Vec<f64>> {
            let t = self.get(name).with_context(|| format!("missing {name}"))?;
            Ok(t.data().iter().map(|&x| x as f64).collect())
        };
        let mut norm = SoftNorm::new(cfg.latent_dim, cfg.softnorm_momentum);
        norm.a = vec_of(SOFTNORM_A)?;
        norm.b = vec_of(SOFTNORM_B)?;
        norm.running_std = vec_of(SOFTNORM_STD)?;
        Ok(Codec::from_parts(cfg, &self.param_set(""), norm)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| n != SILENCE).map(|(_, t)| t.len()).sum()
    }
}
