//! Checkpoint container: `KBCKPT01` header, a key=value config block, then
//! named tensors. Per tensor: u16 name length + UTF-8 name, u8 rank,
//! u32 dims, then little-endian f64 data. Loading validates every shape
//! against the stored config and requires the exact parameter set.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{KbError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KBCKPT01";

fn config_block(cfg: &ModelConfig) -> String {
    format!(
        "layers={}\nhidden={}\nheads={}\nd_img={}\nvocab_size={}\nmax_text_len={}\ndropout={}\n",
        cfg.layers, cfg.hidden, cfg.heads, cfg.d_img, cfg.vocab_size, cfg.max_text_len, cfg.dropout
    )
}

fn parse_config_block(text: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| KbError::format(format!("bad config line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_usize = |k: &str| -> Result<usize> {
        map.get(k)
            .ok_or_else(|| KbError::format(format!("checkpoint config missing '{k}'")))?
            .parse()
            .map_err(|_| KbError::format(format!("bad value for '{k}'")))
    };
    let dropout: f64 = map
        .get("dropout")
        .ok_or_else(|| KbError::format("checkpoint config missing 'dropout'"))?
        .parse()
        .map_err(|_| KbError::format("bad value for 'dropout'"))?;
    Ok(ModelConfig {
        layers: get_usize("layers")?,
        hidden: get_usize("hidden")?,
        heads: get_usize("heads")?,
        d_img: get_usize("d_img")?,
        vocab_size: get_usize("vocab_size")?,
        max_text_len: get_usize("max_text_len")?,
        dropout,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let config = config_block(&params.config);
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let named = params.named_tensors();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in named {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(KbError::format(format!("bad checkpoint magic in {}", path.display())));
    }
    let mut pos = 8usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(KbError::format("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|_| KbError::format("checkpoint config is not UTF-8"))?
        .to_string();
    let config = parse_config_block(&cfg_text)?;
    config.validate()?;

    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| KbError::format("tensor name is not UTF-8"))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 64 << 20 {
            return Err(KbError::format(format!("implausible tensor '{name}'")));
        }
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| KbError::format(format!("tensor '{name}': {e}")))?;
        if loaded.insert(name.clone(), tensor).is_some() {
            return Err(KbError::format(format!("duplicate tensor '{name}'")));
        }
    }
    if pos != bytes.len() {
        return Err(KbError::format("checkpoint has trailing bytes"));
    }

    // Fill a freshly initialized parameter set, demanding an exact match.
    let mut params = ModelParams::init(config, 0)?;
    let mut filled = 0usize;
    for (name, tensor) in params.named_tensors_mut() {
        let Some(loaded_tensor) = loaded.remove(&name) else {
            return Err(KbError::format(format!("checkpoint missing tensor '{name}'")));
        };
        if loaded_tensor.shape() != tensor.shape() {
            return Err(KbError::format(format!(
                "tensor '{name}' has shape {:?}, config wants {:?}",
                loaded_tensor.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded_tensor;
        filled += 1;
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(KbError::format(format!("checkpoint has unknown tensors: {extra:?}")));
    }
    debug_assert_eq!(filled, count);
    Ok(params)
}
