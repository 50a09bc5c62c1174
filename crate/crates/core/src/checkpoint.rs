//! Self-describing checkpoint container: a format version, the training
//! stage, the model configuration, and every parameter as name, shape and a
//! little-endian 32-bit float payload. Loading then saving round-trips
//! bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::net::{AggregatorKind, ModelConfig, MvsModel, NetworkConfig, RefinementKind};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"MVSC";
const FORMAT_VERSION: u32 = 1;

fn config_text(cfg: &ModelConfig) -> String {
    let pools: Vec<String> = cfg.net.spp_pool_sizes.iter().map(|p| p.to_string()).collect();
    format!(
        "feature_channels={}\nlow_level_channels={}\nplane_count={}\ncrm_stacks={}\nspp_pool_sizes={}\nbase_width={}\nrefinement={}\naggregator={}\naggregate_after_crm={}\ndetach_geometric_guidance={}\n",
        cfg.net.feature_channels,
        cfg.net.low_level_channels,
        cfg.net.plane_count,
        cfg.net.crm_stacks,
        pools.join(","),
        cfg.net.base_width,
        cfg.refinement.as_str(),
        cfg.aggregator.as_str(),
        cfg.aggregate_after_crm,
        cfg.detach_geometric_guidance,
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("config key {k} missing")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config key {k} is not an integer")))
    };
    let pools: Vec<usize> = get("spp_pool_sizes")?
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Checkpoint("bad spp_pool_sizes".into()))
        })
        .collect::<Result<_>>()?;
    let parse_bool = |k: &str| -> Result<bool> {
        match get(k)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Checkpoint(format!("config key {k} has bad bool {other}"))),
        }
    };
    Ok(ModelConfig {
        net: NetworkConfig {
            feature_channels: parse_usize("feature_channels")?,
            low_level_channels: parse_usize("low_level_channels")?,
            plane_count: parse_usize("plane_count")?,
            crm_stacks: parse_usize("crm_stacks")?,
            spp_pool_sizes: pools,
            base_width: parse_usize("base_width")?,
        },
        refinement: RefinementKind::parse(get("refinement")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        aggregator: AggregatorKind::parse(get("aggregator")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        aggregate_after_crm: parse_bool("aggregate_after_crm")?,
        detach_geometric_guidance: parse_bool("detach_geometric_guidance")?,
    })
}

/// Serializes the model parameters with the given training-stage tag.
pub fn save_checkpoint<T: Scalar>(model: &MvsModel<T>, stage: u8, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(stage);
    let cfg = config_text(&model.cfg);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, value) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Rebuilds a model from a checkpoint; returns the model and its stage tag.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MvsModel<T>, u8)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut data = Vec::new();
    f.read_to_end(&mut data)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = take_u32(&mut pos)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let stage = take(&mut pos, 1)?[0];
    let cfg_len = take_u32(&mut pos)? as usize;
    let cfg_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let cfg = parse_config(&cfg_text)?;
    let mut model: MvsModel<T> = MvsModel::new(cfg, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = take_u32(&mut pos)? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, 4 * n)?;
        let values: Vec<T> = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|_| Error::Checkpoint(format!("bad shape for parameter {name}")))?;
        model.params.set_by_name(&name, arr)?;
    }
    if pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((model, stage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::desk();
        let model: MvsModel<f32> = MvsModel::new(cfg, 42).unwrap();
        save_checkpoint(&model, 1, &path).unwrap();
        let (loaded, stage) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(stage, 1);
        assert_eq!(loaded.cfg, model.cfg);
        for ((n1, v1), (n2, v2)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, 1, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn stage_tag_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.ckpt");
        let model: MvsModel<f32> = MvsModel::new(ModelConfig::desk(), 7).unwrap();
        save_checkpoint(&model, 2, &path).unwrap();
        let (_, stage) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(stage, 2);
    }
}
