//! `VEC1` binary vector files: magic `VEC1`, u32 version (1), u64 count,
//! u32 dim, u32 id width (8), then per row a u64 id and `dim` f32 values.
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::VectorSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VEC1";
const VERSION: u32 = 1;
const ID_WIDTH: u32 = 8;

pub fn write_vec1(path: impl AsRef<Path>, vectors: &VectorSet) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(vectors.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&(vectors.dim() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&ID_WIDTH.to_le_bytes()).map_err(io)?;
    for (id, row) in vectors.rows() {
        out.write_all(&id.to_le_bytes()).map_err(io)?;
        for x in row {
            out.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_vec1(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut input = BufReader::new(File::open(path).map_err(io)?);
    let mut header = [0u8; 24];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..4] != MAGIC {
        return Err(bad("missing VEC1 magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let id_width = u32::from_le_bytes(header[20..24].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if id_width != ID_WIDTH {
        return Err(bad(&format!("unsupported id width {id_width}")));
    }
    let row_bytes = 8 + 4 * dim;
    let mut body = Vec::new();
    input.read_to_end(&mut body).map_err(io)?;
    if body.len() != count * row_bytes {
        return Err(bad(&format!("expected {} body bytes, found {}", count * row_bytes, body.len())));
    }
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for row in body.chunks_exact(row_bytes) {
        ids.push(u64::from_le_bytes(row[..8].try_into().unwrap()));
        data.extend(row[8..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    if dim == 0 {
        return Err(bad("dimension 0"));
    }
    VectorSet::new(dim, ids, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vec");
        let set = VectorSet::new(2, vec![7], vec![1.0, -2.5]).unwrap();
        write_vec1(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"VEC1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(8u32.to_le_bytes());
        expected.extend(7u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vec");
        std::fs::write(&path, b"VEC2aaaaaaaaaaaaaaaaaaaa").unwrap();
        assert!(read_vec1(&path).is_err());
        let set = VectorSet::new(2, vec![7, 8], vec![1.0, -2.5, 0.0, 1.0]).unwrap();
        write_vec1(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_vec1(&path).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dim in 1usize..6, rows in proptest::collection::vec(proptest::collection::vec(-1e6f32..1e6, 6), 0..20)) {
            let ids: Vec<u64> = (0..rows.len() as u64).map(|i| i * 31 + 5).collect();
            let data: Vec<f32> = rows.iter().flat_map(|r| r[..dim].to_vec()).collect();
            let set = VectorSet::new(dim, ids, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.vec");
            write_vec1(&path, &set).unwrap();
            prop_assert_eq!(read_vec1(&path).unwrap(), set);
        }
    }
}
