//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian u32 unless noted:
//!   magic             8 bytes, b"MRGCKPT1" (last byte is the version)
//!   float width       1 byte (4 or 8)
//!   header count      u32, then per entry: key len, key bytes,
//!                     value len, value bytes (UTF-8 text)
//!   tensor count      u32, then per tensor: name len, name bytes,
//!                     rank u32, dims (u32 each), row-major
//!                     little-endian float data
//!
//! The header holds the model configuration plus the initialization seed.
//! Round-trips are byte-exact; loading under a different float width is a
//! precision error, not a silent conversion.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

use super::params::ModelParams;
use super::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRGCKPT1";

fn header_entries(cfg: &ModelConfig, init_seed: u64) -> Vec<(String, String)> {
    let widths = |v: &[usize]| {
        v.iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    vec![
        ("num_probes".into(), cfg.num_probes.to_string()),
        ("latent_dim".into(), cfg.latent_dim.to_string()),
        ("encoder_layers".into(), cfg.encoder_layers.to_string()),
        ("decoder_layers".into(), cfg.decoder_layers.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("embedder_widths".into(), widths(&cfg.embedder_widths)),
        ("ff_hidden".into(), cfg.ff_hidden.to_string()),
        ("final_mlp_widths".into(), widths(&cfg.final_mlp_widths)),
        ("density_radius".into(), format!("{:.17e}", cfg.density_radius)),
        ("layer_norm".into(), cfg.layer_norm.to_string()),
        ("residual_output".into(), cfg.residual_output.to_string()),
        ("surface_attention".into(), cfg.surface_attention.to_string()),
        ("init_seed".into(), init_seed.to_string()),
    ]
}

fn parse_header(entries: &HashMap<String, String>) -> Result<(ModelConfig, u64)> {
    fn get<'a>(e: &'a HashMap<String, String>, k: &str) -> Result<&'a str> {
        e.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint header missing key {k:?}")))
    }
    fn num<T: std::str::FromStr>(e: &HashMap<String, String>, k: &str) -> Result<T> {
        get(e, k)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint header key {k:?} is not a number")))
    }
    fn width_list(e: &HashMap<String, String>, k: &str) -> Result<Vec<usize>> {
        get(e, k)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad width list in header key {k:?}")))
            })
            .collect()
    }
    let cfg = ModelConfig {
        num_probes: num(entries, "num_probes")?,
        latent_dim: num(entries, "latent_dim")?,
        encoder_layers: num(entries, "encoder_layers")?,
        decoder_layers: num(entries, "decoder_layers")?,
        heads: num(entries, "heads")?,
        embedder_widths: width_list(entries, "embedder_widths")?,
        ff_hidden: num(entries, "ff_hidden")?,
        final_mlp_widths: width_list(entries, "final_mlp_widths")?,
        density_radius: num(entries, "density_radius")?,
        layer_norm: num(entries, "layer_norm")?,
        residual_output: num(entries, "residual_output")?,
        surface_attention: num(entries, "surface_attention")?,
    };
    let seed: u64 = num(entries, "init_seed")?;
    Ok((cfg, seed))
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(T::BYTES);

    let header = header_entries(cfg, params.init_seed);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    for (k, v) in &header {
        buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }

    let mut tensor_count = 0u32;
    params.for_each(&mut |_, _| tensor_count += 1);
    buf.extend_from_slice(&tensor_count.to_le_bytes());
    params.for_each(&mut |name, t| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le_bytes(&mut buf);
        }
    });

    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("checkpoint {what} is not UTF-8")))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, ModelConfig)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        if &magic[..7] == &CHECKPOINT_MAGIC[..7] {
            return Err(Error::VersionMismatch {
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let width = r.take(1, "float width")?[0];
    if width != T::BYTES {
        return Err(Error::PrecisionMismatch {
            stored: width,
            expected: T::BYTES,
        });
    }

    let header_count = r.u32("header count")? as usize;
    let mut entries = HashMap::new();
    for _ in 0..header_count {
        let k = r.string("header key")?;
        let v = r.string("header value")?;
        entries.insert(k, v);
    }
    let (cfg, seed) = parse_header(&entries)?;
    cfg.validate()?;

    let tensor_count = r.u32("tensor count")? as usize;
    let mut stored: HashMap<String, Tensor<T>> = HashMap::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::BYTES as usize, "tensor data")?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTES as usize)
            .map(T::from_le_slice)
            .collect();
        stored.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut params = ModelParams::<T>::init(&cfg, seed)?;
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    params.for_each_mut(&mut |name, t| match stored.remove(&name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() {
                *t = loaded;
            } else {
                mismatch.push(format!(
                    "{name}: stored {:?}, config implies {:?}",
                    loaded.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(name),
    });
    if !mismatch.is_empty() {
        return Err(Error::Dimension(format!(
            "checkpoint tensors do not match the embedded config: {}",
            mismatch.join("; ")
        )));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !stored.is_empty() {
        let extra: Vec<_> = stored.keys().cloned().collect();
        return Err(Error::Format(format!(
            "checkpoint has unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_config;
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("morphreg-ckpt-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 99).unwrap();
        let p1 = tmp("rt1.ckpt");
        let p2 = tmp("rt2.ckpt");
        save_checkpoint(&params, &cfg, &p1).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(loaded_cfg, cfg);
        save_checkpoint(&loaded, &loaded_cfg, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_file(p1).ok();
        fs::remove_file(p2).ok();
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let p = tmp("magic.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p),
            Err(Error::Format(_))
        ));
        fs::remove_file(p).ok();
    }

    #[test]
    fn future_version_is_version_mismatch() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let p = tmp("version.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[7] = b'2';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p),
            Err(Error::VersionMismatch { .. })
        ));
        fs::remove_file(p).ok();
    }

    #[test]
    fn truncation_is_format_error() {
        let cfg = tiny_config();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let p = tmp("trunc.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Format(_))));
        fs::remove_file(p).ok();
    }

    #[test]
    fn wrong_float_width_is_precision_mismatch() {
        let cfg = tiny_config();
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let p = tmp("width.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        match load_checkpoint::<f32>(&p) {
            Err(Error::PrecisionMismatch { stored, expected }) => {
                assert_eq!((stored, expected), (8, 4));
            }
            other => panic!("expected precision mismatch, got {other:?}"),
        }
        fs::remove_file(p).ok();
    }

    #[test]
    fn loaded_params_reproduce_forward_pass() {
        use super::super::forward::register;
        use super::super::test_support::ring_cloud;
        let cfg = tiny_config();
        let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let p = tmp("fwd.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let (loaded, lcfg) = load_checkpoint::<f64>(&p).unwrap();
        let s = ring_cloud(10, 0.0);
        let t = ring_cloud(10, 0.2);
        let a = register(&params, &cfg, &s, &t).unwrap();
        let b = register(&loaded, &lcfg, &s, &t).unwrap();
        assert_eq!(a.points(), b.points());
        fs::remove_file(p).ok();
    }
}
