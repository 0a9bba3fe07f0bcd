//! Checkpoint files.
//!
//! A checkpoint is a text header followed by raw little-endian tensor data:
//!
//! ```text
//! camenn-checkpoint 1
//! meta <key> <value>            (zero or more)
//! tensors <count>
//! <name> <f64|f32> <d0>x<d1>...  (one line per tensor)
//! data
//! <tensor bytes, in header order>
//! ```
//!
//! Names and values contain no whitespace. Writers always emit `f64`; readers
//! also accept `f32` tensors, e.g. provider tables exported elsewhere.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use camenn_core::embedding::{IMAGE_PROVIDER_PROJECTION, TEXT_PROVIDER_TABLE};
use camenn_core::optim::{AdamState, Moments};
use camenn_core::params::ParamStore;
use camenn_core::train::{EarlyStopper, Trainer};
use camenn_core::Tensor;

use crate::error::{CliError, CliResult};

const MAGIC: &str = "camenn-checkpoint 1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_T: &str = "adam.t/";
const BEST: &str = "best/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

/// Named tensors plus string metadata, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Format(format!("{}: {}", path.display(), msg.into()))
}

fn check_token(s: &str) -> CliResult<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(CliError::Format(format!("checkpoint token `{s}` is empty or contains whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta_u64(&self, key: &str) -> CliResult<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| CliError::Format(format!("checkpoint lacks meta `{key}`")))?
            .parse()
            .map_err(|_| CliError::Format(format!("meta `{key}` is not an integer")))
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            check_token(k)?;
            check_token(v)?;
            head.push_str(&format!("meta {k} {v}\n"));
        }
        head.push_str(&format!("tensors {}\n", self.tensors.len()));
        for (name, t) in &self.tensors {
            check_token(name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{name} f64 {}\n", dims.join("x")));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted run never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<fs::File>| -> CliResult<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
            if n == 0 {
                return Err(bad(path, "unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic line)"));
        }
        let mut meta = BTreeMap::new();
        let count = loop {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split(' ').collect();
            match parts.as_slice() {
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensors", n] => break n.parse::<usize>().map_err(|_| bad(path, "bad tensor count"))?,
                _ => return Err(bad(path, format!("unexpected header line `{l}`"))),
            }
        };
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split(' ').collect();
            let [name, dtype, dims] = parts.as_slice() else {
                return Err(bad(path, format!("bad tensor line `{l}`")));
            };
            let dtype = match *dtype {
                "f64" => Dtype::F64,
                "f32" => Dtype::F32,
                other => return Err(bad(path, format!("unsupported dtype `{other}`"))),
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(path, format!("bad dims `{dims}`")))?;
            specs.push((name.to_string(), dtype, shape));
        }
        if next_line(&mut r)? != "data" {
            return Err(bad(path, "missing data marker"));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dtype, shape) in specs {
            let numel: usize = shape.iter().product();
            let width = if dtype == Dtype::F64 { 8 } else { 4 };
            let mut buf = vec![0u8; numel * width];
            r.read_exact(&mut buf).map_err(|_| bad(path, format!("data truncated in `{name}`")))?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| bad(path, format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| CliError::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad(path, format!("{} trailing bytes after data", rest.len())));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

/// Every parameter of `params` under its own name, prefixed.
fn push_params(ck: &mut Checkpoint, params: &ParamStore, prefix: &str) {
    for (_, e) in params.iter() {
        ck.tensors.push((format!("{prefix}{}", e.name), e.value.clone()));
    }
}

/// Overwrites every parameter of `params` with the tensor stored under
/// `prefix + name`.
pub fn load_params(ck: &Checkpoint, params: &mut ParamStore, prefix: &str) -> CliResult<()> {
    let names: Vec<String> = params.iter().map(|(_, e)| e.name.clone()).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let t = ck.get(&key).ok_or_else(|| CliError::Format(format!("checkpoint lacks tensor `{key}`")))?;
        params.set(&name, t.clone()).map_err(|e| CliError::Format(format!("`{key}`: {e}")))?;
    }
    Ok(())
}

/// Replaces the frozen provider tensors with externally supplied ones.
pub fn import_providers(ck: &Checkpoint, params: &mut ParamStore) -> CliResult<()> {
    for name in [TEXT_PROVIDER_TABLE, IMAGE_PROVIDER_PROJECTION] {
        if let Some(t) = ck.get(name) {
            params.set(name, t.clone()).map_err(|e| CliError::Format(format!("`{name}`: {e}")))?;
        }
    }
    Ok(())
}

/// Everything a run needs to continue bit-exactly.
pub fn trainer_checkpoint(trainer: &Trainer, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let m = &mut ck.meta;
    m.insert("config_hash".into(), config_hash.into());
    m.insert("epoch".into(), trainer.epoch.to_string());
    m.insert("adam_step".into(), trainer.adam.step.to_string());
    m.insert("stopped".into(), (trainer.stopped as u8).to_string());
    m.insert("bad_epochs".into(), trainer.stopper.bad_epochs.to_string());
    if let (Some(best), Some(e)) = (trainer.stopper.best, trainer.stopper.best_epoch) {
        m.insert("best_metric_bits".into(), format!("{:016x}", best.to_bits()));
        m.insert("best_epoch".into(), e.to_string());
    }
    push_params(&mut ck, &trainer.model.params, "");
    for (id, e) in trainer.model.params.iter() {
        if let Some(mom) = trainer.adam.moments_of(id) {
            ck.tensors.push((format!("{ADAM_M}{}", e.name), mom.m.clone()));
            ck.tensors.push((format!("{ADAM_V}{}", e.name), mom.v.clone()));
            ck.tensors.push((format!("{ADAM_T}{}", e.name), Tensor::scalar(mom.steps as f64)));
        }
    }
    if let Some(best) = &trainer.best_params {
        push_params(&mut ck, best, BEST);
    }
    ck
}

/// Restores the trainer state written by [`trainer_checkpoint`]. The trainer
/// must have been built from the same configuration.
pub fn restore_trainer(ck: &Checkpoint, trainer: &mut Trainer) -> CliResult<()> {
    load_params(ck, &mut trainer.model.params, "")?;
    let mut moments = Vec::with_capacity(trainer.model.params.len());
    for (_, e) in trainer.model.params.iter() {
        if !e.trainable {
            moments.push(None);
            continue;
        }
        let get = |p: &str| {
            ck.get(&format!("{p}{}", e.name))
                .cloned()
                .ok_or_else(|| CliError::Format(format!("checkpoint lacks optimizer state for `{}`", e.name)))
        };
        let steps = get(ADAM_T)?.item() as u64;
        moments.push(Some(Moments { m: get(ADAM_M)?, v: get(ADAM_V)?, steps }));
    }
    trainer.adam = AdamState { config: trainer.adam.config, moments, step: ck.meta_u64("adam_step")? };
    trainer.epoch = ck.meta_u64("epoch")? as usize;
    trainer.stopped = ck.meta_u64("stopped")? == 1;
    let mut stopper = EarlyStopper::new(trainer.config.patience);
    stopper.bad_epochs = ck.meta_u64("bad_epochs")? as usize;
    if let Some(bits) = ck.meta.get("best_metric_bits") {
        let bits = u64::from_str_radix(bits, 16).map_err(|_| CliError::Format("bad best_metric_bits".into()))?;
        stopper.best = Some(f64::from_bits(bits));
        stopper.best_epoch = Some(ck.meta_u64("best_epoch")? as usize);
    }
    trainer.stopper = stopper;
    trainer.best_params = if ck.tensors.iter().any(|(n, _)| n.starts_with(BEST)) {
        let mut best = trainer.model.params.clone();
        load_params(ck, &mut best, BEST)?;
        Some(best)
    } else {
        None
    };
    Ok(())
}

/// Parameters to evaluate: the best-epoch ones when present.
pub fn best_params(ck: &Checkpoint, params: &mut ParamStore) -> CliResult<()> {
    let has_best = ck.tensors.iter().any(|(n, _)| n.starts_with(BEST));
    load_params(ck, params, if has_best { BEST } else { "" })
}
