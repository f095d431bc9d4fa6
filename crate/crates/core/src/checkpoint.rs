//! Checkpoint file format: magic `PDCK`, format version, config block, named
//! parameter table of serialized tensors, training-step counter, and the
//! seed the run was started from. Little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or in-progress) model plus its training provenance.
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub train_steps: u64,
    pub seed: u64,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Denoiser<f32>,
    train_steps: u64,
    seed: u64,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;

    let cfg = model.config();
    write_u32(&mut w, cfg.image_size as u32)?;
    write_u32(&mut w, cfg.base_channels as u32)?;
    write_u32(&mut w, cfg.channel_mult.len() as u32)?;
    for &m in &cfg.channel_mult {
        write_u32(&mut w, m as u32)?;
    }
    write_u32(&mut w, cfg.blocks_per_level as u32)?;
    write_u32(&mut w, cfg.time_embed_dim as u32)?;
    write_u32(&mut w, cfg.max_timestep as u32)?;

    let params = model.named_params();
    write_u32(&mut w, params.len() as u32)?;
    for (name, tensor) in &params {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, tensor)?;
    }
    write_u64(&mut w, train_steps)?;
    write_u64(&mut w, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }

    let image_size = read_u32(&mut r)? as usize;
    let base_channels = read_u32(&mut r)? as usize;
    let n_levels = read_u32(&mut r)? as usize;
    if n_levels > 16 {
        return Err(Error::format(path, "implausible level count"));
    }
    let mut channel_mult = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        channel_mult.push(read_u32(&mut r)? as usize);
    }
    let config = DenoiserConfig {
        image_size,
        base_channels,
        channel_mult,
        blocks_per_level: read_u32(&mut r)? as usize,
        time_embed_dim: read_u32(&mut r)? as usize,
        max_timestep: read_u32(&mut r)? as usize,
    };

    // Build the skeleton, then overwrite every parameter from the table.
    let model = Denoiser::init(config, &mut Rng::new(0))
        .map_err(|e| Error::format(path, format!("invalid stored config: {e}")))?;
    let expected = model.named_params();

    let n_params = read_u32(&mut r)? as usize;
    if n_params != expected.len() {
        return Err(Error::format(
            path,
            format!(
                "parameter table has {n_params} entries, config implies {}",
                expected.len()
            ),
        ));
    }
    for (want_name, param) in &expected {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::format(path, "implausible parameter name length"));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        if &name != want_name {
            return Err(Error::format(
                path,
                format!("parameter order mismatch: expected {want_name}, found {name}"),
            ));
        }
        let tensor = read_tensor(&mut r, path)?;
        if tensor.shape() != param.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name}: stored shape {:?} vs expected {:?}",
                    tensor.shape(),
                    param.shape()
                ),
            ));
        }
        param.set_data(&tensor.data())?;
    }

    let train_steps = read_u64(&mut r)?;
    let seed = read_u64(&mut r)?;
    Ok(Checkpoint {
        model,
        train_steps,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_preserves_config_params_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pdck");
        let cfg = DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            channel_mult: vec![1, 2],
            blocks_per_level: 1,
            time_embed_dim: 16,
            max_timestep: 128,
        };
        let net = Denoiser::<f32>::init(cfg.clone(), &mut Rng::new(33)).unwrap();
        net.randomize_parameters(&mut Rng::new(34));
        save_checkpoint(&path, &net, 777, 42).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.config(), &cfg);
        assert_eq!(loaded.train_steps, 777);
        assert_eq!(loaded.seed, 42);
        for ((an, ap), (bn, bp)) in net
            .named_params()
            .iter()
            .zip(loaded.model.named_params().iter())
        {
            assert_eq!(an, bn);
            assert!(ap.bits_eq(bp), "parameter {an} changed across round trip");
        }

        // Forward passes agree bit-exactly.
        let mut rng = Rng::new(35);
        let p = Tensor::randn(&[1, 1, 16, 16], &mut rng);
        let g = Tensor::randn(&[1, 1, 16, 16], &mut rng);
        let a = net.forward(&p, &g, 9).unwrap();
        let b = loaded.model.forward(&p, &g, 9).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pdck");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }
}
