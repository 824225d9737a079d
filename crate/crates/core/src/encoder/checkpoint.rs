//! Encoder checkpoints: config header plus named f64 tensors, the frozen
//! CLS vector included. Read∘write is exact.

use std::path::Path;

use crate::corpus::files::{self, ENCODER_MAGIC};
use crate::error::{Error, Result};

use super::{EncoderConfig, EncoderParams};

pub fn write_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    files::write_magic(&mut w, ENCODER_MAGIC)?;
    let cfg = &params.cfg;
    files::write_u32(&mut w, cfg.input_dim as u32)?;
    files::write_u32(&mut w, cfg.model_dim as u32)?;
    files::write_u32(&mut w, cfg.layers as u32)?;
    files::write_u32(&mut w, cfg.heads as u32)?;
    files::write_u32(&mut w, cfg.ff_dim as u32)?;
    files::write_u32(&mut w, cfg.vocab_size as u32)?;
    files::write_u32(&mut w, cfg.num_topics as u32)?;
    files::write_f64(&mut w, cfg.mask_start_prob)?;
    files::write_u32(&mut w, cfg.mask_span as u32)?;
    files::write_f64(&mut w, cfg.rho)?;
    files::write_u32(&mut w, u32::from(cfg.positional))?;
    files::write_u32(&mut w, cfg.topic_bottleneck.unwrap_or(0) as u32)?;
    files::write_u64(&mut w, cfg.seed)?;

    let names = params.tensor_names();
    files::write_u32(&mut w, names.len() as u32)?;
    for name in &names {
        let tensor = params.tensor(name).expect("enumerated tensor");
        files::write_string(&mut w, name)?;
        files::write_u32(&mut w, tensor.rows() as u32)?;
        files::write_u32(&mut w, tensor.cols() as u32)?;
        files::write_f64_slice(&mut w, tensor.data())?;
    }
    use std::io::Write as _;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Dependency(format!("checkpoint {}: {e}", path.display())))?,
    );
    files::read_magic(&mut r, ENCODER_MAGIC)?;
    let cfg = EncoderConfig {
        input_dim: files::read_u32(&mut r)? as usize,
        model_dim: files::read_u32(&mut r)? as usize,
        layers: files::read_u32(&mut r)? as usize,
        heads: files::read_u32(&mut r)? as usize,
        ff_dim: files::read_u32(&mut r)? as usize,
        vocab_size: files::read_u32(&mut r)? as usize,
        num_topics: files::read_u32(&mut r)? as usize,
        mask_start_prob: files::read_f64(&mut r)?,
        mask_span: files::read_u32(&mut r)? as usize,
        rho: files::read_f64(&mut r)?,
        positional: files::read_u32(&mut r)? != 0,
        topic_bottleneck: match files::read_u32(&mut r)? as usize {
            0 => None,
            b => Some(b),
        },
        seed: files::read_u64(&mut r)?,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut params = EncoderParams::init(&cfg)?;
    let expected = params.tensor_names();
    let count = files::read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    for expected_name in &expected {
        let name = files::read_string(&mut r)?;
        if &name != expected_name {
            return Err(Error::Format(format!(
                "tensor {name} out of order, expected {expected_name}"
            )));
        }
        let rows = files::read_u32(&mut r)? as usize;
        let cols = files::read_u32(&mut r)? as usize;
        let tensor = params.tensor_mut(&name).expect("enumerated tensor");
        if tensor.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "tensor {name} has shape {rows}x{cols}, config implies {:?}",
                tensor.shape()
            )));
        }
        let data = files::read_f64_vec(&mut r, rows * cols)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        tensor.data_mut().copy_from_slice(&data);
    }
    Ok(params)
}
