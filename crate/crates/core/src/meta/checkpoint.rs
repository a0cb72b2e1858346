//! MSCK checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MSCK" 0x01
//! u32 tensor_count
//! tensor_count × { u16 name_len, name (UTF-8), u8 ndim, ndim × u32 dim, f64 payload }
//! u64 config_hash
//! ```
//!
//! Model tensors keep their [`Model::names`]; Adam moments are stored as
//! `adam.m.<name>` and `adam.v.<name>`, the best-on-validation parameters as
//! `best.<name>`, and loop counters under `meta.*`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamState, Model, TrainState};
use crate::embed::{EmbeddingConfig, EmbeddingParams};
use crate::episodes::write_atomic;
use crate::error::{Error, Result};
use crate::solvers::SolverHyperparams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Episode stream seed of the run.
    pub rng_seed: u64,
    pub config_hash: u64,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn u64_halves(v: u64) -> Tensor {
    Tensor::new(vec![2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]).unwrap()
}

impl Checkpoint {
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let s = &self.state;
        let names = s.model.names();
        let mut out: Vec<(String, Tensor)> = names.iter().cloned().zip(s.model.tensors()).collect();
        for (n, m) in names.iter().zip(&s.adam.m) {
            out.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&s.adam.v) {
            out.push((format!("adam.v.{n}"), v.clone()));
        }
        for (n, t) in names.iter().zip(s.best_model.tensors()) {
            out.push((format!("best.{n}"), t));
        }
        let cfg = &s.model.embed.config;
        let hp = &s.model.hp;
        let dropout: Vec<f64> = (0..cfg.widths.len()).map(|i| cfg.dropout_rate(i)).collect();
        out.extend([
            ("meta.episode".into(), Tensor::scalar(s.episode as f64)),
            ("meta.adam_t".into(), Tensor::scalar(s.adam.t as f64)),
            ("meta.best_metric".into(), Tensor::scalar(s.best_metric)),
            ("meta.best_episode".into(), Tensor::scalar(s.best_episode as f64)),
            ("meta.rng".into(), u64_halves(self.rng_seed)),
            ("meta.concat_last_two".into(), Tensor::scalar(flag(cfg.concat_last_two))),
            ("meta.dropout".into(), Tensor::new(vec![dropout.len()], dropout).unwrap()),
            (
                "meta.learn".into(),
                Tensor::new(
                    vec![3],
                    vec![flag(hp.learn_lambda), flag(hp.learn_alpha), flag(hp.learn_beta)],
                )
                .unwrap(),
            ),
        ]);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::validation(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (tensors, config_hash) = parse(bytes)?;
        from_tensors(tensors, config_hash, bytes.len().saturating_sub(8) as u64)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, u64)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSCK\""));
    }
    let version = c.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(c.take(4, "tensor count")?.try_into().unwrap());
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(c.take(4, "dimension")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(at, "payload size overflows"))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(at, format!("duplicate tensor {name}")));
        }
    }
    let hash = u64::from_le_bytes(c.take(8, "config hash")?.try_into().unwrap());
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after config hash"));
    }
    Ok((tensors, hash))
}

fn take(t: &mut BTreeMap<String, Tensor>, end: u64, name: &str) -> Result<Tensor> {
    t.remove(name)
        .ok_or_else(|| Error::format(end, format!("missing tensor {name}")))
}

/// Structural errors found after parsing are reported at `end`, the offset
/// of the config hash.
fn from_tensors(mut t: BTreeMap<String, Tensor>, config_hash: u64, end: u64) -> Result<Checkpoint> {
    let concat = take(&mut t, end, "meta.concat_last_two")?.item() != 0.0;
    let dropout = take(&mut t, end, "meta.dropout")?.into_data();
    let learn = take(&mut t, end, "meta.learn")?.into_data();
    let episode = take(&mut t, end, "meta.episode")?.item() as u64;
    let adam_t = take(&mut t, end, "meta.adam_t")?.item() as u64;
    let best_metric = take(&mut t, end, "meta.best_metric")?.item();
    let best_episode = take(&mut t, end, "meta.best_episode")?.item() as u64;
    let rng = take(&mut t, end, "meta.rng")?.into_data();
    if rng.len() != 2 || learn.len() != 3 {
        return Err(Error::format(end, "malformed meta tensors"));
    }
    let rng_seed = ((rng[0] as u64) << 32) | rng[1] as u64;

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    while let Some(w) = t.get(&format!("embed.w{}", weights.len())) {
        let i = weights.len();
        weights.push(w.clone());
        let b = t
            .get(&format!("embed.b{i}"))
            .ok_or_else(|| Error::format(end, format!("missing tensor embed.b{i}")))?;
        biases.push(b.clone());
    }
    if weights.is_empty() || dropout.len() != weights.len() {
        return Err(Error::format(end, "checkpoint has no consistent embedding layers"));
    }
    let config = EmbeddingConfig {
        input_dim: weights[0].rows(),
        widths: weights.iter().map(|w| w.cols()).collect(),
        dropout: if dropout.iter().all(|&p| p == 0.0) { Vec::new() } else { dropout },
        concat_last_two: concat,
    };
    config.validate()?;
    let mut model = Model {
        embed: EmbeddingParams {
            config,
            weights,
            biases,
        },
        hp: SolverHyperparams {
            lambda_raw: Tensor::scalar(0.0),
            alpha: 0.0,
            beta: 0.0,
            learn_lambda: learn[0] != 0.0,
            learn_alpha: learn[1] != 0.0,
            learn_beta: learn[2] != 0.0,
        },
    };
    let names = model.names();
    let current = names.iter().map(|n| take(&mut t, end, n)).collect::<Result<Vec<_>>>()?;
    let m = names
        .iter()
        .map(|n| take(&mut t, end, &format!("adam.m.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let v = names
        .iter()
        .map(|n| take(&mut t, end, &format!("adam.v.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let best = names
        .iter()
        .map(|n| take(&mut t, end, &format!("best.{n}")))
        .collect::<Result<Vec<_>>>()?;
    model.set_tensors(&current)?;
    let mut best_model = model.clone();
    best_model.set_tensors(&best)?;
    if let Some(extra) = t.keys().next() {
        return Err(Error::format(end, format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        state: TrainState {
            model,
            adam: AdamState { m, v, t: adam_t },
            episode,
            best_metric,
            best_episode,
            best_model,
        },
        rng_seed,
        config_hash,
    })
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
