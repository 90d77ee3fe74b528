//! TRM1 checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TRM1" | u32 version | u32 manifest_len | manifest | f32 payload | u32 config_len | config
//! ```
//!
//! The manifest is UTF-8 text, one `name\tdims\toffset` line per tensor, with
//! `dims` comma-separated and `offset` the byte offset into the payload. The
//! config block is `key=value` lines; adapter rank/targets live there, and
//! free-form metadata uses `meta.<key>=<json string>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{count_params, EncoderWeights, HeadKind, ModelConfig, Pooling};
use crate::peft::{AdapterSpec, AdapterTargets};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TRM1";
pub const FORMAT_VERSION: u32 = 1;
pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub adapter: Option<AdapterSpec>,
    pub weights: EncoderWeights,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, weights: EncoderWeights) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Checkpoint {
            config,
            adapter: None,
            weights,
            meta: BTreeMap::new(),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = EncoderWeights::init(&config, seed, 0.02)?;
        Checkpoint::new(config, weights)
    }

    /// Scalars actually stored, adapters included.
    pub fn n_stored(&self) -> u64 {
        self.weights.n_scalars()
    }

    /// Base parameter count from the config alone.
    pub fn n_params(&self) -> u64 {
        count_params(&self.config)
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter.is_some() || self.weights.names().any(|n| n.starts_with(ADAPTER_PREFIX))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut payload = Vec::with_capacity(self.n_stored() as usize * 4);
        for (name, t) in self.weights.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join(","), payload.len()));
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let config = self.config_block();

        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len() + config.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out
    }

    fn config_block(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        kv("layers", c.n_layers.to_string());
        kv("hidden", c.hidden.to_string());
        kv("heads", c.n_heads.to_string());
        kv("ffn_mult", c.ffn_mult.to_string());
        kv("vocab_size", c.vocab_size.to_string());
        kv("max_seq", c.max_seq.to_string());
        kv("head_kind", c.head_kind.to_string());
        kv("pooling", c.pooling.to_string());
        match &self.adapter {
            Some(a) => {
                kv("adapter_rank", a.rank.to_string());
                kv("adapter_targets", a.targets.to_string());
            }
            None => kv("adapter_rank", "0".into()),
        }
        for (k, v) in &self.meta {
            kv(&format!("meta.{k}"), serde_json::Value::String(v.clone()).to_string());
        }
        s
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a TRM1 checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported TRM1 version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest = std::str::from_utf8(r.take(mlen)?)
            .map_err(|_| Error::Format("manifest is not UTF-8".into()))?
            .to_string();

        let mut entries = Vec::new();
        let mut expected_offset = 0usize;
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(Error::Format(format!("bad manifest line `{line}`")));
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad dims in `{line}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
            if offset != expected_offset {
                return Err(Error::Format(format!("non-contiguous payload at `{name}`")));
            }
            expected_offset += shape.iter().product::<usize>() * 4;
            entries.push((name.to_string(), shape, offset));
        }
        let payload = r.take(expected_offset)?;
        let mut weights = EncoderWeights::new();
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            weights.insert(name, Tensor::new(shape, data)?);
        }

        let clen = r.u32()? as usize;
        let block = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after config block".into()));
        }
        let (config, adapter, meta) = parse_config_block(block)?;
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Checkpoint {
            config,
            adapter,
            weights,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn parse_config_block(block: &str) -> Result<(ModelConfig, Option<AdapterSpec>, BTreeMap<String, String>)> {
    let mut kv = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for line in block.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
        if let Some(key) = k.strip_prefix("meta.") {
            let value: String =
                serde_json::from_str(v).map_err(|e| Error::Format(format!("meta.{key}: {e}")))?;
            meta.insert(key.to_string(), value);
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("config block missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("config `{k}` is not an integer")))
    };
    let config = ModelConfig {
        n_layers: num("layers")?,
        hidden: num("hidden")?,
        n_heads: num("heads")?,
        ffn_mult: num("ffn_mult")?,
        vocab_size: num("vocab_size")?,
        max_seq: num("max_seq")?,
        head_kind: get("head_kind")?.parse::<HeadKind>()?,
        pooling: get("pooling")?.parse::<Pooling>()?,
    };
    let rank = num("adapter_rank")?;
    let adapter = if rank == 0 {
        None
    } else {
        Some(AdapterSpec {
            rank,
            targets: get("adapter_targets")?.parse::<AdapterTargets>()?,
        })
    };
    Ok((config, adapter, meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
