//! Binary checkpoint: magic, config key/value pairs, tensor table, then
//! little-endian f64 data. All integers are little-endian.

use std::fs;
use std::path::Path;

use exitpipe_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{EarlyExitModel, ExitSpec, HeadKind, ModelConfig, ParamMap};

const MAGIC: &[u8; 8] = b"EXPCKPT1";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn config_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    let exits = cfg
        .exits
        .iter()
        .map(|e| format!("{}:{}:{}", e.layer, e.head.as_str(), e.weight))
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("num_layers".into(), cfg.num_layers.to_string()),
        ("hidden_dim".into(), cfg.hidden_dim.to_string()),
        ("num_heads".into(), cfg.num_heads.to_string()),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("max_seq_len".into(), cfg.max_seq_len.to_string()),
        ("tie_embeddings".into(), cfg.tie_embeddings.to_string()),
        ("exits".into(), exits),
    ]
}

fn parse_config(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ckpt_err(format!("missing config key {k}")))
    };
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| ckpt_err(format!("bad value for {k}"))) };
    let mut exits = Vec::new();
    let raw = get("exits")?;
    if !raw.is_empty() {
        for item in raw.split(',') {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(ckpt_err(format!("bad exit entry {item}")));
            }
            let layer = parts[0].parse().map_err(|_| ckpt_err("bad exit layer"))?;
            let head = HeadKind::parse(parts[1]).ok_or_else(|| ckpt_err("bad exit head"))?;
            let weight = parts[2].parse().map_err(|_| ckpt_err("bad exit weight"))?;
            exits.push(ExitSpec::new(layer, head, weight));
        }
    }
    Ok(ModelConfig {
        num_layers: num("num_layers")?,
        hidden_dim: num("hidden_dim")?,
        num_heads: num("num_heads")?,
        vocab_size: num("vocab_size")?,
        max_seq_len: num("max_seq_len")?,
        tie_embeddings: get("tie_embeddings")?.parse().map_err(|_| ckpt_err("bad tie_embeddings"))?,
        exits,
    })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &EarlyExitModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let pairs = config_pairs(model.config());
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params() {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64;
    }
    for t in model.params().values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ckpt_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("non-utf8 string"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<EarlyExitModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let npairs = r.u32()?;
    let mut pairs = Vec::new();
    for _ in 0..npairs {
        let k = r.string()?;
        let v = r.string()?;
        pairs.push((k, v));
    }
    let config = parse_config(&pairs)?;
    let ntensors = r.u32()?;
    let mut table = Vec::new();
    for _ in 0..ntensors {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let data_start = r.pos;
    let total = (bytes.len() - data_start) / 8;
    if !(bytes.len() - data_start).is_multiple_of(8) {
        return Err(ckpt_err("data section is not a whole number of floats"));
    }
    let mut params = ParamMap::new();
    for (name, shape, offset) in table {
        let n: usize = shape.iter().product();
        if offset + n > total {
            return Err(ckpt_err(format!("tensor {name} overruns data section")));
        }
        let start = data_start + offset * 8;
        let data = bytes[start..start + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    EarlyExitModel::from_parts(config, params)
}

pub fn save(model: &EarlyExitModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EarlyExitModel> {
    decode(&fs::read(path)?)
}
