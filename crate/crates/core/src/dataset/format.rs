//! Little-endian binary dataset file.
//!
//! ```text
//! magic "FTSA" | version u16 | client_id u16 | sample_count u64 | T u16 | N u16 | P u16
//! per sample:  scenario_id u32 | window_start u32 | label u8 | T·N·P × f32
//! footer:      P × mean f64 | P × std f64
//! optional:    "SPLT" | count u32 | count × (scenario_id u32, split u8)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClientDataset, NormStats, SampleShape, Split, WindowSample};
use crate::error::{Error, Result};
use crate::label::StabilityLabel;

pub const DATASET_MAGIC: [u8; 4] = *b"FTSA";
pub const DATASET_VERSION: u16 = 1;
const SPLIT_MAGIC: [u8; 4] = *b"SPLT";

pub fn save(ds: &ClientDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ClientDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

fn dim(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in u16")))
}

pub fn write_to(ds: &ClientDataset, w: &mut impl Write) -> Result<()> {
    let shape = ds.shape;
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&ds.client_id.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    w.write_all(&dim(shape.time, "T")?.to_le_bytes())?;
    w.write_all(&dim(shape.generators, "N")?.to_le_bytes())?;
    w.write_all(&dim(shape.params, "P")?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(9 + 4 * shape.len());
    for s in &ds.samples {
        if s.features.len() != shape.len() {
            return Err(Error::Shape(format!("sample has {} features, expected {}", s.features.len(), shape.len())));
        }
        buf.clear();
        buf.extend_from_slice(&s.scenario_id.to_le_bytes());
        buf.extend_from_slice(&s.window_start.to_le_bytes());
        buf.push(s.label.class_id());
        for f in &s.features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    for v in ds.stats.mean.iter().chain(&ds.stats.std) {
        w.write_all(&v.to_le_bytes())?;
    }
    if !ds.splits.is_empty() {
        w.write_all(&SPLIT_MAGIC)?;
        w.write_all(&(ds.splits.len() as u32).to_le_bytes())?;
        for (&id, &split) in &ds.splits {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&[split as u8])?;
        }
    }
    Ok(())
}

fn truncated(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated(format!("ended inside {what}"))
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| truncated(e, what))?;
    Ok(b)
}

pub fn read_from(r: &mut impl Read) -> Result<ClientDataset> {
    let magic = read_array::<4>(r, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: DATASET_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes(read_array(r, "header")?);
    if version != DATASET_VERSION {
        return Err(Error::Version { expected: DATASET_VERSION, found: version });
    }
    let client_id = u16::from_le_bytes(read_array(r, "header")?);
    let count = u64::from_le_bytes(read_array(r, "header")?);
    let time = u16::from_le_bytes(read_array(r, "header")?) as usize;
    let generators = u16::from_le_bytes(read_array(r, "header")?) as usize;
    let params = u16::from_le_bytes(read_array(r, "header")?) as usize;
    let shape = SampleShape { time, generators, params };

    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut raw = vec![0u8; 4 * shape.len()];
    for _ in 0..count {
        let scenario_id = u32::from_le_bytes(read_array(r, "sample")?);
        let window_start = u32::from_le_bytes(read_array(r, "sample")?);
        let [label] = read_array::<1>(r, "sample")?;
        let label = StabilityLabel::from_class_id(label).map_err(|_| Error::parse(format!("bad label byte {label}")))?;
        r.read_exact(&mut raw).map_err(|e| truncated(e, "sample features"))?;
        let features = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(WindowSample { scenario_id, window_start, label, features });
    }
    let mut read_f64s = || -> Result<Vec<f64>> {
        (0..params)
            .map(|_| Ok(f64::from_le_bytes(read_array(r, "footer")?)))
            .collect()
    };
    let mean = read_f64s()?;
    let std = read_f64s()?;

    let mut ds = ClientDataset::new(client_id, shape, samples)?;
    ds.stats = NormStats { mean, std };

    // Optional split section.
    let mut tag = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut tag[got..])? {
            0 => break,
            n => got += n,
        }
    }
    match got {
        0 => {}
        4 if tag == SPLIT_MAGIC => {
            let n = u32::from_le_bytes(read_array(r, "split section")?);
            for _ in 0..n {
                let id = u32::from_le_bytes(read_array(r, "split section")?);
                let [split] = read_array::<1>(r, "split section")?;
                ds.splits.insert(id, Split::from_u8(split)?);
            }
        }
        4 => return Err(Error::parse("unexpected trailing data after footer")),
        _ => return Err(Error::Truncated("ended inside split section".into())),
    }
    Ok(ds)
}
