//! Classifier bundle serialization: one self-describing binary artifact
//! holding the config, class names, normalization stats, split metadata, and
//! every parameter tensor with a shape header. Round-trips are bit-exact.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::ChannelStats;
use crate::error::BundleError;
use crate::model::{Activation, ClassifierBundle, ModelConfig, ParamSet, TrainMeta};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTCB";
const VERSION: u32 = 1;

pub fn save_bundle(path: &Path, bundle: &ClassifierBundle) -> Result<(), BundleError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_bundle(&mut w, bundle).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ClassifierBundle, BundleError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    read_bundle(&mut r, path)
}

fn io_err(path: &Path, source: std::io::Error) -> BundleError {
    BundleError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_bundle(w: &mut impl Write, bundle: &ClassifierBundle) -> std::io::Result<()> {
    let cfg = &bundle.config;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    for dim in [
        cfg.input_dim,
        cfg.seq_len,
        cfg.latent_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.num_classes,
    ] {
        put_u32(w, dim as u32)?;
    }
    put_f64(w, cfg.dropout_p)?;
    put_u64(w, cfg.seed)?;
    w.write_all(&[
        match cfg.activation {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        },
        cfg.positional_encoding as u8,
    ])?;

    put_u32(w, bundle.class_names.len() as u32)?;
    for name in &bundle.class_names {
        put_str(w, name)?;
    }

    match &bundle.norm_stats {
        Some(stats) => {
            w.write_all(&[1])?;
            put_u32(w, stats.len() as u32)?;
            for s in stats {
                put_f64(w, s.mean)?;
                put_f64(w, s.std)?;
            }
        }
        None => w.write_all(&[0])?,
    }

    match &bundle.train_meta {
        Some(meta) => {
            w.write_all(&[1])?;
            put_u64(w, meta.split_seed)?;
            put_f64(w, meta.train_frac)?;
        }
        None => w.write_all(&[0])?,
    }

    put_u32(w, bundle.params.len() as u32)?;
    for (name, tensor) in bundle.params.iter() {
        put_str(w, name)?;
        put_u32(w, tensor.shape().len() as u32)?;
        for dim in tensor.shape() {
            put_u64(w, *dim as u64)?;
        }
        for v in tensor.data() {
            put_f64(w, *v)?;
        }
    }
    Ok(())
}

fn read_bundle(r: &mut impl Read, path: &Path) -> Result<ClassifierBundle, BundleError> {
    let io = |e: std::io::Error| io_err(path, e);
    let corrupt = |msg: &str| BundleError::Corrupt(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = get_u32(r).map_err(io)?;
    if version != VERSION {
        return Err(BundleError::Version(version));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = get_u32(r).map_err(io)? as usize;
    }
    let dropout_p = get_f64(r).map_err(io)?;
    let seed = get_u64(r).map_err(io)?;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags).map_err(io)?;
    let activation = match flags[0] {
        0 => Activation::Gelu,
        1 => Activation::Relu,
        _ => return Err(corrupt("bad activation tag")),
    };
    let config = ModelConfig {
        input_dim: dims[0],
        seq_len: dims[1],
        latent_dim: dims[2],
        num_layers: dims[3],
        num_heads: dims[4],
        ffn_dim: dims[5],
        num_classes: dims[6],
        dropout_p,
        seed,
        activation,
        positional_encoding: flags[1] == 1,
    };
    config.validate()?;

    let n_classes = get_u32(r).map_err(io)? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_names.push(get_str(r).map_err(io)?);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(io)?;
    let norm_stats = if flag[0] == 1 {
        let n = get_u32(r).map_err(io)? as usize;
        let mut stats = Vec::with_capacity(n);
        for _ in 0..n {
            stats.push(ChannelStats {
                mean: get_f64(r).map_err(io)?,
                std: get_f64(r).map_err(io)?,
            });
        }
        Some(stats)
    } else {
        None
    };

    r.read_exact(&mut flag).map_err(io)?;
    let train_meta = if flag[0] == 1 {
        Some(TrainMeta {
            split_seed: get_u64(r).map_err(io)?,
            train_frac: get_f64(r).map_err(io)?,
        })
    } else {
        None
    };

    let n_params = get_u32(r).map_err(io)? as usize;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = get_str(r).map_err(io)?;
        let ndim = get_u32(r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u64(r).map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(get_f64(r).map_err(io)?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
        entries.push((name, tensor));
    }

    let bundle = ClassifierBundle {
        config,
        class_names,
        params: ParamSet::from_entries(entries),
        norm_stats,
        train_meta,
    };
    if bundle.params.total_scalars() != bundle.config.param_count() {
        return Err(corrupt("parameter count does not match config"));
    }
    Ok(bundle)
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn get_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
