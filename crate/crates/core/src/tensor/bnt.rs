//! `BNT1` tensor records: the magic `BNT1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dimensions, then the payload as little-endian
//! `f32` in row-major order. Records may be concatenated in one stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const BNT1_MAGIC: &[u8; 4] = b"BNT1";

pub fn write_bnt1<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(BNT1_MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} overflows u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads one record. Values are widened from `f32`.
pub fn read_bnt1<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BNT1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected BNT1")));
    }
    let rank = read_u32(input)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_bnt1_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_bnt1(&mut out, tensor)?;
    out.flush()?;
    Ok(())
}

pub fn read_bnt1_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read_bnt1(&mut BufReader::new(File::open(path)?))
}
