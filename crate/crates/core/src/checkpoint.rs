//! Binary checkpoint format. Round trips are bitwise exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            7 bytes  "WNGAN1\0"
//! manifest_len     u32
//! manifest         JSON: {"disc": spec, "gen": spec, "config": train config}
//! param_count      u32
//! param records    name_len u32, name bytes, dtype u8 (0 = f64),
//!                  ndim u32, dims u32 * ndim, data f64 * numel
//! opt_count        u32
//! opt records      same record format, names prefixed disc/ and gen/
//! rng_seed         u64
//! rng_counter      u64
//! iteration        u64
//! best_loss        f64 (infinity when no evaluation has run)
//! best_iter        u64
//! ```
//!
//! Parameter records follow network traversal order: all discriminator
//! parameters (prefix `disc/`), discriminator batch-norm running
//! statistics, then the same for the generator.

use crate::error::{Error, Result};
use crate::netbuild::{Network, NetworkSpec};
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::training::{RmsProp, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 7] = b"WNGAN1\0";
const DTYPE_F64: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Manifest {
    disc: NetworkSpec,
    gen: NetworkSpec,
    config: TrainConfig,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    push_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Trainable parameters plus batch-norm running statistics, in traversal
/// order, with the given name prefix.
fn collect_tensors(net: &Network, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    net.visit_params(&mut |path, _, t| {
        out.push((format!("{prefix}{path}"), t.clone()));
    });
    for (i, bn) in net.bn_layers().iter().enumerate() {
        out.push((format!("{prefix}bn{i}.running_mean"), bn.running_mean.clone()));
        out.push((format!("{prefix}bn{i}.running_var"), bn.running_var.clone()));
    }
    out
}

fn restore_tensors(
    net: &mut Network,
    prefix: &str,
    records: &mut std::collections::VecDeque<(String, Tensor)>,
) -> Result<()> {
    let mut status = Ok(());
    net.visit_params_mut(&mut |path, _, t| {
        if status.is_err() {
            return;
        }
        match records.pop_front() {
            Some((name, value)) if name == format!("{prefix}{path}") => {
                if value.shape() != t.shape() {
                    status = Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} does not match spec {:?}",
                        value.shape(),
                        t.shape()
                    )));
                    return;
                }
                *t = value;
            }
            Some((name, _)) => {
                status = Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected {prefix}{path}, found {name}"
                )));
            }
            None => status = Err(Error::Checkpoint("missing parameter records".into())),
        }
    });
    status?;
    for (i, bn) in net.bn_layers_mut().into_iter().enumerate() {
        for (suffix, slot) in [
            ("running_mean", &mut bn.running_mean),
            ("running_var", &mut bn.running_var),
        ] {
            match records.pop_front() {
                Some((name, value)) if name == format!("{prefix}bn{i}.{suffix}") => {
                    *slot = value;
                }
                Some((name, _)) => {
                    return Err(Error::Checkpoint(format!(
                        "running-stat order mismatch: expected {prefix}bn{i}.{suffix}, found {name}"
                    )))
                }
                None => return Err(Error::Checkpoint("missing running-stat records".into())),
            }
        }
    }
    Ok(())
}

/// Serializes the full training state.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let manifest = serde_json::to_vec(&Manifest {
        disc: state.disc.spec.clone(),
        gen: state.gen.spec.clone(),
        config: state.config.clone(),
    })
    .expect("manifest serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, manifest.len() as u32);
    out.extend_from_slice(&manifest);

    let mut params = collect_tensors(&state.disc, "disc/");
    params.extend(collect_tensors(&state.gen, "gen/"));
    push_u32(&mut out, params.len() as u32);
    for (name, t) in &params {
        push_record(&mut out, name, t);
    }

    let opt_records: Vec<(String, &Tensor)> = state
        .opt_d
        .state
        .iter()
        .map(|(k, v)| (format!("disc/{k}"), v))
        .chain(state.opt_g.state.iter().map(|(k, v)| (format!("gen/{k}"), v)))
        .collect();
    push_u32(&mut out, opt_records.len() as u32);
    for (name, t) in &opt_records {
        push_record(&mut out, name, t);
    }

    let (seed, counter) = state.rng.state();
    push_u64(&mut out, seed);
    push_u64(&mut out, counter);
    push_u64(&mut out, state.iter);
    out.extend_from_slice(&state.best_running_loss.to_le_bytes());
    push_u64(&mut out, state.best_iter);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not utf8".into()))?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "record {name}: unsupported dtype tag {dtype}"
            )));
        }
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

/// Deserializes a checkpoint back into a full training state.
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let manifest_len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(manifest_len)?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;

    let mut throwaway = DetRng::new(0);
    let mut disc = Network::init(&manifest.disc, &mut throwaway);
    let mut gen = Network::init(&manifest.gen, &mut throwaway);

    let param_count = r.u32()? as usize;
    let mut records = std::collections::VecDeque::with_capacity(param_count);
    for _ in 0..param_count {
        records.push_back(r.record()?);
    }
    restore_tensors(&mut disc, "disc/", &mut records)?;
    restore_tensors(&mut gen, "gen/", &mut records)?;
    if !records.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing parameter records",
            records.len()
        )));
    }

    let mut opt_d = RmsProp::new(manifest.config.rmsprop_alpha, manifest.config.rmsprop_eps);
    let mut opt_g = RmsProp::new(manifest.config.rmsprop_alpha, manifest.config.rmsprop_eps);
    let opt_count = r.u32()? as usize;
    for _ in 0..opt_count {
        let (name, t) = r.record()?;
        if let Some(rest) = name.strip_prefix("disc/") {
            opt_d.state.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("gen/") {
            opt_g.state.insert(rest.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!(
                "optimizer record {name} lacks disc/ or gen/ prefix"
            )));
        }
    }

    let seed = r.u64()?;
    let counter = r.u64()?;
    let iter = r.u64()?;
    let best_running_loss = r.f64()?;
    let best_iter = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }

    Ok(TrainState {
        disc,
        gen,
        opt_d,
        opt_g,
        rng: DetRng::from_state(seed, counter),
        iter,
        best_running_loss,
        best_iter,
        config: manifest.config,
    })
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}
