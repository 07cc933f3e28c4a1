//! Per-layer key/value cache with an explicit fill mask.

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};

/// Keys and values of one attention layer, `max_seq_len × hidden` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub name: String,
    hidden: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    filled: Vec<bool>,
}

impl LayerKv {
    fn new(name: String, hidden: usize, positions: usize) -> Self {
        LayerKv {
            name,
            hidden,
            keys: vec![0.0; positions * hidden],
            values: vec![0.0; positions * hidden],
            filled: vec![false; positions],
        }
    }

    pub fn is_filled(&self, pos: usize) -> bool {
        self.filled.get(pos).copied().unwrap_or(false)
    }

    pub fn filled(&self) -> &[bool] {
        &self.filled
    }

    /// Stores the entry of `pos`. A second write must carry the same bits.
    pub fn write(&mut self, pos: usize, key: &[f64], value: &[f64]) -> Result<()> {
        if pos >= self.filled.len() {
            return Err(Error::ContextOverflow { needed: pos + 1, max: self.filled.len() });
        }
        let h = self.hidden;
        let range = pos * h..(pos + 1) * h;
        if self.filled[pos] {
            let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same(&self.keys[range.clone()], key) || !same(&self.values[range], value) {
                return Err(Error::Protocol(format!("{}: KV of position {pos} overwritten with different values", self.name)));
            }
            return Ok(());
        }
        self.keys[range.clone()].copy_from_slice(key);
        self.values[range].copy_from_slice(value);
        self.filled[pos] = true;
        Ok(())
    }

    /// Fails unless positions `0..=pos` are all present.
    pub fn require_prefix(&self, pos: usize) -> Result<()> {
        match self.filled[..=pos].iter().position(|&f| !f) {
            None => Ok(()),
            Some(missing) => Err(Error::Protocol(format!(
                "{}: position {pos} would read absent KV of position {missing}",
                self.name
            ))),
        }
    }

    pub fn key(&self, pos: usize) -> &[f64] {
        &self.keys[pos * self.hidden..(pos + 1) * self.hidden]
    }

    pub fn value(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.hidden..(pos + 1) * self.hidden]
    }
}

/// Every attention layer of the model: backbone layers in order, then the
/// layers inside full-layer exit heads.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
}

/// Cache slot of an exit head's attention layer, if it has one.
pub fn head_slot(cfg: &ModelConfig, exit: usize) -> Option<usize> {
    let exits = cfg.exits_by_depth();
    if exits[exit].head != HeadKind::LayerEmbed {
        return None;
    }
    let before = exits[..exit].iter().filter(|e| e.head == HeadKind::LayerEmbed).count();
    Some(cfg.num_layers + before)
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, s) = (cfg.hidden_dim, cfg.max_seq_len);
        let mut layers: Vec<LayerKv> = (0..cfg.num_layers).map(|l| LayerKv::new(format!("layers.{l}"), h, s)).collect();
        for (e, spec) in cfg.exits_by_depth().iter().enumerate() {
            if spec.head == HeadKind::LayerEmbed {
                layers.push(LayerKv::new(format!("exits.{e}.layer"), h, s));
            }
        }
        KvCache { layers }
    }

    /// True when every layer holds positions `0..positions`.
    pub fn is_complete(&self, positions: usize) -> bool {
        self.layers.iter().all(|l| l.filled[..positions].iter().all(|&f| f))
    }

    /// Positions below `positions` missing at some layer, with that layer.
    pub fn missing(&self, positions: usize) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend((0..positions).filter(|&p| !l.filled[p]).map(|p| (l.name.clone(), p)));
        }
        out
    }

    /// Combines caches whose layers were filled by different workers. A
    /// layer filled by more than one worker must agree bitwise.
    pub fn merge(parts: Vec<KvCache>) -> Result<KvCache> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or_else(|| Error::Protocol("no caches to merge".into()))?;
        for part in iter {
            for (dst, src) in out.layers.iter_mut().zip(part.layers) {
                for pos in (0..src.filled.len()).filter(|&p| src.filled[p]) {
                    dst.write(pos, src.key(pos), src.value(pos))?;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExitSpec;

    #[test]
    fn writes_are_monotone() {
        let mut l = LayerKv::new("t".into(), 2, 3);
        l.write(1, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(l.is_filled(1) && !l.is_filled(0));
        l.write(1, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(l.write(1, &[1.0, 2.5], &[3.0, 4.0]).is_err());
        assert!(l.require_prefix(1).is_err());
        l.write(0, &[0.0; 2], &[0.0; 2]).unwrap();
        l.require_prefix(1).unwrap();
        assert!(l.write(3, &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn head_layers_get_slots_after_backbone() {
        let cfg = ModelConfig {
            num_layers: 4,
            exits: vec![
                ExitSpec::new(3, HeadKind::LayerEmbed, 0.1),
                ExitSpec::new(1, HeadKind::NormEmbed, 0.1),
                ExitSpec::new(2, HeadKind::LayerEmbed, 0.1),
            ],
            ..ModelConfig::default()
        };
        let kv = KvCache::new(&cfg);
        assert_eq!(kv.layers.len(), 6);
        assert_eq!(head_slot(&cfg, 0), None);
        assert_eq!(head_slot(&cfg, 1), Some(4));
        assert_eq!(head_slot(&cfg, 2), Some(5));
        assert_eq!(kv.layers[5].name, "exits.2.layer");
    }
}
