//! Flat binary parameter files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CPM2C\0" | version | count
//! count × ( name_len | name (UTF-8) | rank | dims[rank] | f32 payload )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CPM2C\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let bad = |what: &str| Error::Checkpoint(what.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(io)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), entries).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::vector(vec![1.5]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &t)]).unwrap();
        assert_eq!(&buf[..6], b"CPM2C\0");
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1u32.to_le_bytes());
        assert_eq!(buf[18], b'w');
        assert_eq!(&buf[19..23], &1u32.to_le_bytes());
        assert_eq!(&buf[23..27], &1u32.to_le_bytes());
        assert_eq!(&buf[27..31], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 31);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\0\0\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &t)]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_for_f32_values(
            values in prop::collection::vec(-1e6f32..1e6, 1..40),
            name in "[a-z][a-z0-9_.]{0,20}",
        ) {
            let t = Tensor::vector(values.iter().map(|&v| v as f64).collect());
            let s = Tensor::scalar(values[0] as f64);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[(&name, &t), ("s", &s)]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
            prop_assert_eq!(&back[1].1, &s);
        }
    }
}
