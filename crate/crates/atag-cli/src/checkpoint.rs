//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header,
//! then the raw tensor payload. The header carries the run config (text and
//! hash), epoch, RNG state and a tensor manifest; the payload stores every
//! tensor little-endian in the checkpoint's dtype, parameters first, then
//! Adam first/second moments. Round-tripping is bit-exact.

use anyhow::{bail, Context, Result};
use atag_core::model::ParamSet;
use atag_core::optim::OptimState;
use atag_core::scalar::{Dtype, Scalar};
use atag_core::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::config::{Mode, RunConfig};

const MAGIC: &[u8; 8] = b"ATAGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    word_pos: String,
    stream: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    epoch: usize,
    config_hash: String,
    config: String,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Training state that survives a restart.
#[derive(Debug)]
pub struct Checkpoint<S: Scalar> {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamSet<S>,
    pub opt: OptimState<S>,
    pub rng: ChaCha8Rng,
}

fn push_scalar<S: Scalar>(out: &mut Vec<u8>, x: S) {
    match S::DTYPE {
        Dtype::F32 => out.extend_from_slice(&(Scalar::to_f64(x) as f32).to_le_bytes()),
        Dtype::F64 => out.extend_from_slice(&Scalar::to_f64(x).to_le_bytes()),
    }
}

fn read_scalars<S: Scalar>(bytes: &[u8]) -> Vec<S> {
    match S::DTYPE {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                S::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]))
            })
            .collect(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        bail!("odd-length hex string");
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).context("bad hex digit"))
        .collect()
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut emit = |tensors: &mut Vec<TensorEntry>, name: String, shape: Vec<usize>, data: &[S]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
            });
            for &x in data {
                push_scalar(&mut payload, x);
            }
        };
        for (name, tensor) in self.params.items() {
            emit(
                &mut tensors,
                name.clone(),
                tensor.shape().to_vec(),
                tensor.data(),
            );
        }
        for (i, (name, _)) in self.params.items().iter().enumerate() {
            emit(
                &mut tensors,
                format!("m:{name}"),
                vec![self.opt.m[i].len()],
                &self.opt.m[i],
            );
        }
        for (i, (name, _)) in self.params.items().iter().enumerate() {
            emit(
                &mut tensors,
                format!("v:{name}"),
                vec![self.opt.v[i].len()],
                &self.opt.v[i],
            );
        }
        let header = Header {
            dtype: S::DTYPE.name().to_string(),
            epoch: self.epoch,
            config_hash: format!("{:016x}", self.config.hash()),
            config: self.config.to_text(),
            adam_step: self.opt.step,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                word_pos: self.rng.get_word_pos().to_string(),
                stream: self.rng.get_stream(),
            },
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        let (header, payload) = parse_container(&bytes, path)?;
        if header.dtype != S::DTYPE.name() {
            bail!(
                "{}: checkpoint dtype is {} but the run uses {}",
                path.display(),
                header.dtype,
                S::DTYPE.name()
            );
        }
        let config = RunConfig::from_text(&header.config, Mode::Synthetic)
            .with_context(|| format!("{}: embedded config", path.display()))?;
        if format!("{:016x}", config.hash()) != header.config_hash {
            bail!("{}: config hash mismatch", path.display());
        }
        let width = S::DTYPE.size_bytes();
        let slice = |e: &TensorEntry| -> Result<Vec<S>> {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * width;
            if end > payload.len() {
                bail!("{}: tensor '{}' overruns the payload", path.display(), e.name);
            }
            Ok(read_scalars(&payload[e.offset..end]))
        };
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            if e.name.starts_with("m:") {
                m.push(slice(e)?);
            } else if e.name.starts_with("v:") {
                v.push(slice(e)?);
            } else {
                params.add(e.name.clone(), Tensor::new(e.shape.clone(), slice(e)?)?);
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            bail!("{}: optimizer state does not match parameters", path.display());
        }
        let mut opt = OptimState::new(config.adam_config(), &[]);
        opt.m = m;
        opt.v = v;
        opt.step = header.adam_step;
        let seed_bytes = unhex(&header.rng.seed)?;
        if seed_bytes.len() != 32 {
            bail!("{}: rng seed must be 32 bytes", path.display());
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&seed_bytes);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(
            header
                .rng
                .word_pos
                .parse::<u128>()
                .context("bad rng word position")?,
        );
        Ok(Checkpoint {
            config,
            epoch: header.epoch,
            params,
            opt,
            rng,
        })
    }
}

fn parse_container<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        bail!("{}: not a checkpoint file", path.display());
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != VERSION {
        bail!(
            "{}: unsupported checkpoint version {} (expected {})",
            path.display(),
            version,
            VERSION
        );
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        bail!("{}: truncated header", path.display());
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])
        .with_context(|| format!("{}: malformed header", path.display()))?;
    Ok((header, &bytes[20 + hlen..]))
}

/// Read only the dtype so the caller can pick the right monomorphization.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let (header, _) = parse_container(&bytes, path)?;
    match header.dtype.as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => bail!("{}: unknown dtype '{other}'", path.display()),
    }
}
