//! Binary tensor files.
//!
//! Layout: `b"STBT"`, version `u8`, rank `u8`, `rank` extents as `u32` LE,
//! then `product(extents)` `f64` LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"STBT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor_to<W: Write>(mut w: W, tensor: &Tensor) -> std::io::Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, rank])?;
    for &extent in tensor.shape() {
        let extent = u32::try_from(extent).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        w.write_all(&extent.to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Parses a tensor; `origin` only labels errors.
pub fn read_tensor_from<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let io = |e: std::io::Error| Error::io(origin, e);

    let mut header = [0u8; 6];
    r.read_exact(&mut header).map_err(io)?;
    if header[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if header[4] != TENSOR_VERSION {
        return Err(bad(&format!("unsupported version {}", header[4])));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(io)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 8];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(BufWriter::new(file), tensor).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new([2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut expected = b"STBT".to_vec();
        expected.extend([1u8, 2u8]);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corrupt_input() {
        let origin = Path::new("mem");
        assert!(read_tensor_from(&b"XXXX\x01\x00"[..], origin).is_err());
        assert!(read_tensor_from(&b"STBT\x09\x00"[..], origin).is_err());
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(read_tensor_from(&buf[..buf.len() - 1], origin).is_err());
        buf.push(0);
        assert!(read_tensor_from(&buf[..], origin).is_err());
    }

    #[test]
    fn scalar_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stbt");
        write_tensor(&path, &Tensor::scalar(7.25)).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), Tensor::scalar(7.25));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same_bits = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
