use crate::autodiff::{dot, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

use super::metrics::{mean_average_precision, MapResult};
use super::store::EmbeddingStore;

const UNIT_TOL: f64 = 1e-8;

/// Searchable embedding set with per-item generation tags.
///
/// When momentum mode is on, every backfill retains the item's previous
/// embedding so the next upgrade can mix the last two generations.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    ids: Vec<u64>,
    labels: Vec<usize>,
    embeddings: Tensor,
    generations: Vec<u32>,
    previous: Option<Tensor>,
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for (r, row) in t.iter_rows().enumerate() {
        let n = dot(row, row).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "gallery embedding row {r} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

impl Gallery {
    pub fn new(
        ids: Vec<u64>,
        labels: Vec<usize>,
        embeddings: Tensor,
        generation: u32,
    ) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != embeddings.rows() {
            return Err(Error::shape(
                "gallery",
                &[ids.len(), labels.len()],
                &embeddings.shape(),
            ));
        }
        check_unit_rows(&embeddings)?;
        let n = ids.len();
        Ok(Self {
            ids,
            labels,
            embeddings,
            generations: vec![generation; n],
            previous: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn generations(&self) -> &[u32] {
        &self.generations
    }

    pub fn previous(&self) -> Option<&Tensor> {
        self.previous.as_ref()
    }

    pub fn momentum_active(&self) -> bool {
        self.previous.is_some()
    }

    /// Switches on retention of previous-generation embeddings.
    pub fn enable_momentum(&mut self) {
        if self.previous.is_none() {
            self.previous = Some(self.embeddings.clone());
        }
    }

    /// Replaces the embeddings of the items at `indices` (positions, not
    /// ids) with the rows of `upgraded` and tags them `generation`.
    pub fn backfill(
        &mut self,
        indices: &[usize],
        upgraded: &Tensor,
        generation: u32,
    ) -> Result<()> {
        if upgraded.rows() != indices.len() {
            return Err(Error::shape(
                "backfill",
                &[indices.len()],
                &upgraded.shape(),
            ));
        }
        if upgraded.rows() > 0 && upgraded.cols() != self.dim() {
            if self.previous.is_some() {
                return Err(Error::Contract(
                    "momentum galleries cannot change embedding dimension".into(),
                ));
            }
            if indices.len() != self.len() {
                return Err(Error::shape("backfill", &[self.dim()], &upgraded.shape()));
            }
        }
        check_unit_rows(upgraded)?;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Retrieval(format!(
                    "backfill position {i} out of range"
                )));
            }
            if generation < self.generations[i] {
                return Err(Error::Contract(format!(
                    "item {} would move from generation {} back to {generation}",
                    self.ids[i], self.generations[i]
                )));
            }
        }
        if upgraded.cols() != self.dim() {
            // whole-gallery backfill into a new dimension
            self.embeddings = Tensor::zeros(self.len(), upgraded.cols());
        }
        for (k, &i) in indices.iter().enumerate() {
            if let Some(prev) = &mut self.previous {
                prev.row_slice_mut(i)
                    .copy_from_slice(self.embeddings.row_slice(i));
            }
            self.embeddings
                .row_slice_mut(i)
                .copy_from_slice(upgraded.row_slice(k));
            self.generations[i] = generation;
        }
        Ok(())
    }

    /// Backfills every item.
    pub fn backfill_all(&mut self, upgraded: &Tensor, generation: u32) -> Result<()> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.backfill(&all, upgraded, generation)
    }

    pub fn map_at_k(
        &self,
        queries: &Tensor,
        query_labels: &[usize],
        k: usize,
        exec: Exec,
    ) -> Result<MapResult> {
        mean_average_precision(
            queries,
            query_labels,
            &self.ids,
            &self.labels,
            &self.embeddings,
            k,
            exec,
        )
    }

    /// Store snapshot; all items must share one generation.
    pub fn to_store(&self) -> Result<EmbeddingStore> {
        let generation = self.generations.first().copied().unwrap_or(0);
        if self.generations.iter().any(|&g| g != generation) {
            return Err(Error::Format(
                "a mixed-generation gallery cannot be written as one store".into(),
            ));
        }
        EmbeddingStore::from_usize_labels(
            generation,
            self.ids.clone(),
            &self.labels,
            self.embeddings.clone(),
        )
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let labels = store.labels.iter().map(|&l| l as usize).collect();
        Self::new(
            store.ids.clone(),
            labels,
            store.embeddings.clone(),
            store.generation,
        )
    }

    /// Order-sensitive FNV-1a digest of ids, labels, tags and embedding bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for i in 0..self.len() {
            eat(&self.ids[i].to_le_bytes());
            eat(&(self.labels[i] as u64).to_le_bytes());
            eat(&self.generations[i].to_le_bytes());
            for x in self.embeddings.row_slice(i) {
                eat(&x.to_le_bytes());
            }
        }
        h
    }
}
