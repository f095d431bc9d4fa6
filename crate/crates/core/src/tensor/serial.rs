//! Tensor blob format: magic `PDT1`, u32 rank, u32 extents, raw f32 payload,
//! all little-endian. Used by checkpoints and dataset files.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const PDT_MAGIC: &[u8; 4] = b"PDT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(PDT_MAGIC)?;
    let shape = t.shape();
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, path: &Path) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PDT_MAGIC {
        return Err(Error::format(path, "bad tensor magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::format(path, format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > (1 << 30) {
        return Err(Error::format(path, "tensor payload too large"));
    }
    let mut data = vec![0f32; numel];
    for v in &mut data {
        r.read_exact(&mut u32buf)?;
        *v = f32::from_le_bytes(u32buf);
    }
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::path::PathBuf;

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::<f32>::randn(&[2, 1, 3, 5], &mut Rng::new(4));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], PDT_MAGIC);
        let back = read_tensor(&mut buf.as_slice(), &PathBuf::from("mem")).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = b"XXXX".to_vec();
        buf.extend_from_slice(&0u32.to_le_bytes());
        assert!(read_tensor(&mut buf.as_slice(), &PathBuf::from("mem")).is_err());
    }
}
