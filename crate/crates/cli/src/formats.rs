//! Binary file formats: VFL1 datasets and latent files, raw float32 audio.
//!
//! VFL1 (little-endian): magic `VFL1`, `u32` record count, then per record
//! `u32` token count, the `u32` token ids, `u32 L`, `u32 C` and `C·L`
//! float32 values in channel-major order. A latent file is a VFL1 file
//! holding exactly one record.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use vflow_core::latent::{Example, LatentSequence};
use vflow_core::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"VFL1";

/// Largest dimension accepted while reading, to fail fast on corrupt headers.
const MAX_DIM: u32 = 1 << 24;

pub fn write_dataset(w: &mut impl Write, records: &[Example]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(u32::try_from(records.len()).context("too many records")?)?;
    for ex in records {
        w.write_u32::<LE>(ex.tokens.len() as u32)?;
        for &t in &ex.tokens {
            w.write_u32::<LE>(t)?;
        }
        w.write_u32::<LE>(ex.latent.len() as u32)?;
        w.write_u32::<LE>(ex.latent.channels() as u32)?;
        for v in ex.latent.to_channel_major() {
            w.write_f32::<LE>(v)?;
        }
    }
    Ok(())
}

fn read_dim(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = r.read_u32::<LE>().with_context(|| format!("truncated file reading {what}"))?;
    ensure!(v <= MAX_DIM, "{what} = {v} is implausibly large");
    Ok(v as usize)
}

pub fn read_dataset(r: &mut impl Read) -> Result<Vec<Example>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("truncated file reading magic")?;
    if &magic != DATASET_MAGIC {
        bail!("bad magic {:?}, expected VFL1", String::from_utf8_lossy(&magic));
    }
    let n = r.read_u32::<LE>().context("truncated file reading record count")?;
    let mut out = Vec::with_capacity(n.min(1 << 16) as usize);
    for i in 0..n {
        let nt = read_dim(r, "token count")?;
        let mut tokens = vec![0u32; nt];
        r.read_u32_into::<LE>(&mut tokens).with_context(|| format!("record {i}: truncated tokens"))?;
        let l = read_dim(r, "frame count")?;
        let c = read_dim(r, "channel count")?;
        let mut data = vec![0f32; l * c];
        r.read_f32_into::<LE>(&mut data).with_context(|| format!("record {i}: truncated frames"))?;
        let latent = LatentSequence::from_channel_major(c, l, &data).with_context(|| format!("record {i}"))?;
        out.push(Example { tokens, latent });
    }
    let mut rest = [0u8; 1];
    ensure!(r.read(&mut rest)? == 0, "trailing bytes after {n} records");
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_dataset(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_dataset(&mut r).with_context(|| format!("reading {}", path.display()))
}

pub fn save_latent(path: &Path, tokens: &[u32], latent: &LatentSequence) -> Result<()> {
    save_dataset(path, &[Example { tokens: tokens.to_vec(), latent: latent.clone() }])
}

/// Reads a one-record VFL1 file.
pub fn load_latent(path: &Path) -> Result<Example> {
    let mut v = load_dataset(path)?;
    ensure!(v.len() == 1, "{} holds {} records, a latent file holds exactly one", path.display(), v.len());
    Ok(v.remove(0))
}

/// Interleaved little-endian float32 samples → `channels × samples`.
pub fn read_raw_f32(bytes: &[u8], channels: usize) -> Result<Tensor<f32>> {
    ensure!(channels > 0, "channel count must be positive");
    ensure!(bytes.len() % (4 * channels) == 0, "raw input of {} bytes is not a whole number of {channels}-channel float32 frames", bytes.len());
    let n = bytes.len() / (4 * channels);
    ensure!(n > 0, "raw input is empty");
    let mut vals = vec![0f32; n * channels];
    (&bytes[..]).read_f32_into::<LE>(&mut vals)?;
    Ok(Tensor::from_fn(channels, n, |c, s| vals[s * channels + c]))
}

pub fn write_raw_f32(w: &mut impl Write, signal: &Tensor<f32>) -> Result<()> {
    let (c, n) = signal.shape();
    for s in 0..n {
        for ch in 0..c {
            w.write_f32::<LE>(signal.get(ch, s))?;
        }
    }
    Ok(())
}
