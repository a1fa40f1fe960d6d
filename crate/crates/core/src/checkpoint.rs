//! Binary checkpoint container.
//!
//! Layout: one JSON header line, then for each tensor a JSON line
//! `{"name","shape","dtype"}` followed by its row-major little-endian
//! `f64` payload. Parameters are stored as `param/<name>` and optimizer
//! moments as `adam.m/<name>` / `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::training::{AdamW, TrainConfig, Trainer};

pub const CKPT_FORMAT: &str = "maskrdt-ckpt";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigs {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: RunConfigs,
    step: u64,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let meta = TensorMeta {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
    };
    serde_json::to_writer(&mut *w, &meta).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, trainer: &Trainer) -> Result<()> {
    let params = &trainer.model.params;
    let header = Header {
        format: CKPT_FORMAT.into(),
        version: CKPT_VERSION,
        config: RunConfigs {
            model: trainer.model.config.clone(),
            train: trainer.train.clone(),
        },
        step: trainer.opt.step,
        tensors: 3 * params.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for (name, t) in params.iter() {
        write_tensor(&mut w, &format!("param/{name}"), t)?;
    }
    for (name, t) in &trainer.opt.m {
        write_tensor(&mut w, &format!("adam.m/{name}"), t)?;
    }
    for (name, t) in &trainer.opt.v {
        write_tensor(&mut w, &format!("adam.v/{name}"), t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(bad(format!("truncated before {what}")));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| bad(format!("{what} is not UTF-8")))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Trainer> {
    let mut r = BufReader::new(r);
    let line = read_line(&mut r, "header")?;
    let header: Header = serde_json::from_str(&line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != CKPT_FORMAT {
        return Err(bad(format!("unexpected format {:?}", header.format)));
    }
    if header.version != CKPT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: header.version,
            expected: CKPT_VERSION,
        });
    }
    let mut groups: [BTreeMap<String, Tensor>; 3] = Default::default();
    for _ in 0..header.tensors {
        let line = read_line(&mut r, "tensor record")?;
        let meta: TensorMeta =
            serde_json::from_str(&line).map_err(|e| bad(format!("tensor record: {e}")))?;
        if meta.dtype != "f64" {
            return Err(bad(format!(
                "{}: unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let n: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("{}: truncated payload", meta.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(meta.shape, data)?;
        let (group, name) = meta
            .name
            .split_once('/')
            .ok_or_else(|| bad(format!("unqualified tensor name {}", meta.name)))?;
        let slot = match group {
            "param" => 0,
            "adam.m" => 1,
            "adam.v" => 2,
            other => return Err(bad(format!("unknown tensor group {other}"))),
        };
        if groups[slot].insert(name.to_string(), t).is_some() {
            return Err(bad(format!("duplicate tensor {}", meta.name)));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let [params, m, v] = groups;
    let cfg = header.config;
    let params = ModelParams::from_map(&cfg.model, params).map_err(|e| bad(e.to_string()))?;
    let opt = AdamW {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        step: header.step,
        m,
        v,
    };
    for (name, t) in params.iter() {
        for (which, g) in [("m", &opt.m), ("v", &opt.v)] {
            match g.get(name) {
                Some(x) if x.shape() == t.shape() => {}
                _ => {
                    return Err(bad(format!(
                        "optimizer moment {which} for {name} missing or misshapen"
                    )))
                }
            }
        }
    }
    if opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(bad("optimizer state names do not match parameters"));
    }
    Ok(Trainer {
        model: Model::new(cfg.model, params)?,
        train: cfg.train,
        opt,
    })
}

pub fn save(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), trainer)
}

pub fn load(path: impl AsRef<Path>) -> Result<Trainer> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::RetentionMode;

    fn trainer() -> Trainer {
        let cfg = ModelConfig {
            d_h: 4,
            heads: 2,
            layers: 1,
            context: 2,
            seg_len: 2,
            d_s: 3,
            catalog: 4,
            mode: RetentionMode::Parallel,
            ..Default::default()
        };
        let mut t = Trainer::new(cfg, TrainConfig::default()).unwrap();
        // give the moments distinctive values
        for (i, m) in t.opt.m.values_mut().enumerate() {
            *m = Tensor::full(m.shape(), i as f64 * 0.1 + f64::EPSILON);
        }
        t.opt.step = 17;
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = trainer();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &t).unwrap();
        let back = read_checkpoint(&a[..]).unwrap();
        assert_eq!(back, t);
        for ((_, x), (_, y)) in back.model.params.iter().zip(t.model.params.iter()) {
            let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        let mut b = Vec::new();
        write_checkpoint(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected() {
        let mut a = Vec::new();
        write_checkpoint(&mut a, &trainer()).unwrap();
        for cut in [10, a.len() / 2, a.len() - 1] {
            assert!(read_checkpoint(&a[..cut]).is_err(), "cut at {cut}");
        }
        a.push(0);
        assert!(read_checkpoint(&a[..]).is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let t = trainer();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &t).unwrap();
        let text = String::from_utf8_lossy(&a).into_owned();
        let header_end = text.find('\n').unwrap();
        let header = &text[..header_end];
        let patched = header.replace("\"catalog\":4", "\"catalog\":5");
        let mut b = patched.into_bytes();
        b.extend_from_slice(&a[header_end..]);
        assert!(matches!(read_checkpoint(&b[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut a = Vec::new();
        write_checkpoint(&mut a, &trainer()).unwrap();
        let text = String::from_utf8_lossy(&a).into_owned();
        let header_end = text.find('\n').unwrap();
        let mut b = text[..header_end]
            .replace("\"version\":1", "\"version\":2")
            .into_bytes();
        b.extend_from_slice(&a[header_end..]);
        assert!(matches!(
            read_checkpoint(&b[..]),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
