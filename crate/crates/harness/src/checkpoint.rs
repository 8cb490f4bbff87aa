//! Binary checkpoints: `STRA1`, the config text, counters, the generator
//! state, then named tensors (`param/…`, `buffer/…`, `opt/…`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use stra_core::network::{build_network, Model};
use stra_core::{DType, Rng, Tensor};

use crate::config::RunConfig;
use crate::error::{io_at, HarnessError, Result};
use crate::optim::Optimizer;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STRA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub optimizer_steps: u64,
    pub tensors: Vec<(String, Tensor)>,
}

/// Everything needed to continue a run.
pub struct Restored {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub rng: Rng,
    pub epoch: usize,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> HarnessError {
    HarnessError::Invalid(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Model, optimizer: &Optimizer, rng: &Rng, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        for (name, t) in model.params() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for (name, t) in model.buffers() {
            tensors.push((format!("buffer/{name}"), t.clone()));
        }
        for (name, t) in optimizer.state_names().into_iter().zip(&optimizer.state) {
            tensors.push((format!("opt/{name}"), t.clone()));
        }
        Self {
            config_text: config.to_text(),
            epoch,
            rng: rng.clone(),
            optimizer_steps: optimizer.steps,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut head = Vec::new();
        head.extend_from_slice(CHECKPOINT_MAGIC);
        head.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        head.extend_from_slice(self.config_text.as_bytes());
        for v in [self.epoch as u64, self.rng.seed(), self.rng.position(), self.optimizer_steps, self.tensors.len() as u64] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&head).map_err(stra_core::StraError::from)?;
        for (name, t) in &self.tensors {
            let mut entry = (name.len() as u64).to_le_bytes().to_vec();
            entry.extend_from_slice(name.as_bytes());
            w.write_all(&entry).map_err(stra_core::StraError::from)?;
            t.write_to(w, DType::F64)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_at(path))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_at(path))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(io_at(path))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt(path, "not a checkpoint"));
        }
        let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io_at(path))?;
            Ok(u64::from_le_bytes(b))
        };
        let read_string = |r: &mut BufReader<File>| -> Result<String> {
            let len = read_u64(r)? as usize;
            if len > 1 << 24 {
                return Err(corrupt(path, format!("implausible string length {len}")));
            }
            let mut b = vec![0u8; len];
            r.read_exact(&mut b).map_err(io_at(path))?;
            String::from_utf8(b).map_err(|_| corrupt(path, "string is not UTF-8"))
        };
        let config_text = read_string(&mut r)?;
        let epoch = read_u64(&mut r)? as usize;
        let rng = Rng::from_state(read_u64(&mut r)?, read_u64(&mut r)?);
        let optimizer_steps = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let t = Tensor::read_from(&mut r).map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config_text,
            epoch,
            rng,
            optimizer_steps,
            tensors,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Model alone, e.g. for evaluation.
    pub fn model(&self) -> Result<Model> {
        let config = self.config()?;
        self.install_model(&config)
    }

    fn section(&self, prefix: &str) -> Vec<(&str, &Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
            .collect()
    }

    fn install_model(&self, config: &RunConfig) -> Result<Model> {
        let mut model = build_network(&config.arch, &mut Rng::new(0))?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        install("param/", &names, self.section("param/"), model.params_mut())?;
        let names: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();
        install("buffer/", &names, self.section("buffer/"), model.buffers_mut())?;
        Ok(model)
    }

    pub fn restore(&self) -> Result<Restored> {
        let config = self.config()?;
        let model = self.install_model(&config)?;
        let shapes: Vec<&[usize]> = model.params().into_iter().map(|(_, t)| t.shape()).collect();
        let mut optimizer = Optimizer::new(config.optimizer, &shapes);
        let names = optimizer.state_names();
        install("opt/", &names, self.section("opt/"), optimizer.state.iter_mut().collect())?;
        optimizer.steps = self.optimizer_steps;
        Ok(Restored {
            config,
            model,
            optimizer,
            rng: self.rng.clone(),
            epoch: self.epoch,
        })
    }
}

fn install(prefix: &str, names: &[String], stored: Vec<(&str, &Tensor)>, targets: Vec<&mut Tensor>) -> Result<()> {
    if stored.len() != names.len() {
        return Err(HarnessError::Invalid(format!(
            "checkpoint has {} {prefix} tensors, model expects {}",
            stored.len(),
            names.len()
        )));
    }
    for ((want, (got, t)), target) in names.iter().zip(stored).zip(targets) {
        if want != got {
            return Err(HarnessError::Invalid(format!("checkpoint tensor {prefix}{got} where {prefix}{want} was expected")));
        }
        if t.shape() != target.shape() {
            return Err(HarnessError::Invalid(format!(
                "checkpoint tensor {prefix}{got} has shape {:?}, model expects {:?}",
                t.shape(),
                target.shape()
            )));
        }
        *target = t.clone();
    }
    Ok(())
}
