//! Two-file checkpoint: `manifest.txt` (`key=value` lines) and `params.bin`
//! (little-endian values in manifest order).
//!
//! Manifest keys: `version`, `dtype` (`f32` or `f64`), `config.*`,
//! `stores` (comma-separated store ids in category order), `scaler.*`, and
//! one `param.<i>=<name> <d0>x<d1>... <byte offset>` line per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Result, TftConfig, TftError, TftModel};
use crate::ingest::ScalerSet;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

/// Everything needed to forecast from a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: TftModel<T>,
    pub scalers: ScalerSet,
    /// Store ids in the categorical order used by the embedding.
    pub stores: Vec<u32>,
}

fn bad(msg: impl Into<String>) -> TftError {
    TftError::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &ckpt.model.config;
    let mut lines = vec![
        format!("version={CHECKPOINT_VERSION}"),
        format!("dtype={}", T::DTYPE),
        format!("config.hidden_size={}", c.hidden_size),
        format!("config.attention_heads={}", c.attention_heads),
        format!("config.dropout={:?}", c.dropout),
        format!("config.encoder_len={}", c.encoder_len),
        format!("config.horizon={}", c.horizon),
        format!(
            "config.quantiles={}",
            c.quantiles.iter().map(|q| format!("{q:?}")).collect::<Vec<_>>().join(",")
        ),
        format!("config.n_static_categories={}", c.n_static_categories),
        format!("config.n_encoder_vars={}", c.n_encoder_vars),
        format!("config.n_decoder_vars={}", c.n_decoder_vars),
        format!("config.lstm_layers={}", c.lstm_layers),
        format!(
            "stores={}",
            ckpt.stores.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
        ),
    ];
    lines.extend(ckpt.scalers.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")));
    let mut bytes = Vec::with_capacity(ckpt.model.params.num_scalars() * T::BYTES);
    for (i, (_, name, value)) in ckpt.model.params.iter().enumerate() {
        let shape = value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        lines.push(format!("param.{i}={name} {shape} {}", bytes.len()));
        for &v in value.data() {
            v.write_le(&mut bytes);
        }
    }
    let mut manifest = lines.join("\n");
    manifest.push('\n');
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("manifest line {} has no '='", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(bad(format!("duplicate manifest key {}", k.trim())));
        }
    }
    Ok(map)
}

fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| bad(format!("manifest is missing {key}")))
}

fn num<F: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<F> {
    get(map, key)?
        .parse()
        .map_err(|_| bad(format!("manifest value for {key} does not parse")))
}

fn read_values(bytes: &[u8], dtype: &str, offset: usize, count: usize) -> Result<Vec<f64>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unsupported dtype {other}"))),
    };
    let end = offset + count * width;
    let chunk = bytes
        .get(offset..end)
        .ok_or_else(|| bad(format!("params.bin too short for bytes {offset}..{end}")))?;
    Ok(chunk
        .chunks_exact(width)
        .map(|b| if width == 4 { f32::read_le(b) as f64 } else { f64::read_le(b) })
        .collect())
}

/// Element type recorded in a checkpoint's manifest.
pub fn checkpoint_dtype(dir: &Path) -> Result<String> {
    let map = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    Ok(get(&map, "dtype")?.to_string())
}

/// Loads a checkpoint into element type `T`.
///
/// Values stored in the same dtype as `T` are restored bit for bit; other
/// dtypes are converted.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let map = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let version: u32 = num(&map, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let dtype = get(&map, "dtype")?.to_string();
    let quantiles = get(&map, "config.quantiles")?
        .split(',')
        .map(|q| q.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("config.quantiles does not parse"))?;
    let config = TftConfig {
        hidden_size: num(&map, "config.hidden_size")?,
        attention_heads: num(&map, "config.attention_heads")?,
        dropout: num(&map, "config.dropout")?,
        encoder_len: num(&map, "config.encoder_len")?,
        horizon: num(&map, "config.horizon")?,
        quantiles,
        n_static_categories: num(&map, "config.n_static_categories")?,
        n_encoder_vars: num(&map, "config.n_encoder_vars")?,
        n_decoder_vars: num(&map, "config.n_decoder_vars")?,
        lstm_layers: num(&map, "config.lstm_layers")?,
    };
    let stores = get(&map, "stores")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("stores does not parse"))?;
    let scalers = ScalerSet::from_pairs(|k| map.get(k).and_then(|v| v.parse().ok()))
        .ok_or_else(|| bad("scaler entries missing or malformed"))?;

    let mut model = TftModel::<T>::new(config, 0)?;
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let expected = model.params.len();
    let listed = map.keys().filter(|k| k.starts_with("param.")).count();
    if listed != expected {
        return Err(bad(format!("manifest lists {listed} parameters, model has {expected}")));
    }
    for i in 0..expected {
        let entry = get(&map, &format!("param.{i}"))?;
        let mut parts = entry.split_whitespace();
        let (Some(name), Some(shape), Some(offset), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("param.{i} is malformed")));
        };
        let shape = shape
            .split('x')
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("param.{i} shape does not parse")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("param.{i} offset does not parse")))?;
        let id = model
            .params
            .id(name)
            .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(bad(format!(
                "parameter {name} has shape {shape:?}, model expects {:?}",
                model.params.get(id).shape()
            )));
        }
        let count = shape.iter().product();
        let data: Vec<T> = if dtype == T::DTYPE {
            let chunk = bytes
                .get(offset..offset + count * T::BYTES)
                .ok_or_else(|| bad(format!("params.bin too short for {name}")))?;
            chunk.chunks_exact(T::BYTES).map(T::read_le).collect()
        } else {
            read_values(&bytes, &dtype, offset, count)?
                .into_iter()
                .map(T::from_f64_lossy)
                .collect()
        };
        model.params.set(id, Tensor::new(shape, data)?)?;
    }
    Ok(Checkpoint {
        model,
        scalers,
        stores,
    })
}
