//! Binary embedding store.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "BICT" | version u32 | dim u32 | count u64 | generation u32
//! count × ( id u64 | label u32 | dim × f64 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BICT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub generation: u32,
    pub ids: Vec<u64>,
    pub labels: Vec<u32>,
    pub embeddings: Tensor,
}

impl EmbeddingStore {
    pub fn new(
        generation: u32,
        ids: Vec<u64>,
        labels: Vec<u32>,
        embeddings: Tensor,
    ) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != embeddings.rows() {
            return Err(Error::shape(
                "embedding store",
                &[ids.len(), labels.len()],
                &embeddings.shape(),
            ));
        }
        if u32::try_from(embeddings.cols()).is_err() {
            return Err(Error::Format("embedding dimension exceeds u32".into()));
        }
        Ok(Self {
            generation,
            ids,
            labels,
            embeddings,
        })
    }

    pub fn from_usize_labels(
        generation: u32,
        ids: Vec<u64>,
        labels: &[usize],
        embeddings: Tensor,
    ) -> Result<Self> {
        let labels = labels
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(generation, ids, labels, embeddings)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.generation.to_le_bytes())?;
        for (i, row) in self.embeddings.iter_rows().enumerate() {
            w.write_all(&self.ids[i].to_le_bytes())?;
            w.write_all(&self.labels[i].to_le_bytes())?;
            for x in row {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported store version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = usize::try_from(read_u64(&mut r)?)
            .map_err(|_| Error::Format("item count exceeds address space".into()))?;
        let generation = read_u32(&mut r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut labels = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 24));
        let mut buf = [0u8; 8];
        for _ in 0..count {
            ids.push(read_u64(&mut r)?);
            labels.push(read_u32(&mut r)?);
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last item".into()));
        }
        Self::new(generation, ids, labels, Tensor::new(count, dim, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let emb = Tensor::from_rows(&[[1.0, -0.5]]).unwrap();
        let store = EmbeddingStore::new(3, vec![42], vec![7], emb).unwrap();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"BICT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..32], &42u64.to_le_bytes());
        assert_eq!(&bytes[32..36], &7u32.to_le_bytes());
        assert_eq!(&bytes[36..44], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[44..52], &(-0.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 52);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let store = EmbeddingStore::new(0, vec![1], vec![0], Tensor::row(&[1.0])).unwrap();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingStore::read_from(&bad[..]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(EmbeddingStore::read_from(&bad[..]).is_err());
        assert!(EmbeddingStore::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingStore::read_from(&long[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_every_bit(
            generation in any::<u32>(),
            dim in 0usize..5,
            rows in proptest::collection::vec((any::<u64>(), any::<u32>(), proptest::collection::vec(any::<f64>(), 4)), 0..6),
        ) {
            let ids: Vec<u64> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
            let data: Vec<f64> = rows.iter().flat_map(|r| r.2[..dim].to_vec()).collect();
            let store = EmbeddingStore::new(generation, ids, labels, Tensor::new(rows.len(), dim, data).unwrap()).unwrap();
            let mut bytes = Vec::new();
            store.write_to(&mut bytes).unwrap();
            let back = EmbeddingStore::read_from(&bytes[..]).unwrap();
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(bytes, again);
            prop_assert_eq!(back.ids, store.ids);
        }
    }
}
