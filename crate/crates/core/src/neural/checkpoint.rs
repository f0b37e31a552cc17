//! Model checkpoint: `"FTSM" | version u16 | arch hash u64 | count u64 | count × f64`, little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FTSM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(params: &ModelParams, w: &mut impl Write) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&params.arch_hash.to_le_bytes())?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut head = [0u8; 22];
    r.read_exact(&mut head).map_err(eof)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let arch_hash = u64::from_le_bytes(head[6..14].try_into().unwrap());
    let count = u64::from_le_bytes(head[14..22].try_into().unwrap());
    let mut values = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b).map_err(eof)?;
        values.push(f64::from_le_bytes(b));
    }
    Ok(ModelParams { arch_hash, values })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint and checks it against `net`.
pub fn load_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<ModelParams> {
    let params = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
    if params.arch_hash != net.arch_hash() {
        return Err(Error::ArchMismatch { expected: net.arch_hash(), found: params.arch_hash });
    }
    if params.values.len() != net.param_count() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} parameters, network needs {}",
            params.values.len(),
            net.param_count()
        )));
    }
    Ok(params)
}

fn eof(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated("checkpoint ended early".into())
    } else {
        Error::Io(e)
    }
}
