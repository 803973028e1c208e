use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::{closest_centroids, kmeans, nearest};
use super::{check_k, dot, normalized_query, read_vec1, write_vec1, BackendKind, BuildStats, Neighbor, SearchIndex, TopK, VectorSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IvfParams {
    pub nlist: usize,
    pub nprobe: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        Self {
            nlist: 64,
            nprobe: 8,
            iterations: 20,
            seed: 0,
        }
    }
}

impl IvfParams {
    /// Caps `nlist` (and `nprobe`) at `m` vectors, keeping both ≥ 1.
    pub fn clamped_to(&self, m: usize) -> Self {
        let nlist = self.nlist.min(m).max(1);
        Self {
            nlist,
            nprobe: self.nprobe.clamp(1, nlist),
            ..self.clone()
        }
    }
}

/// Inverted-file index: a k-means coarse quantizer plus one list of rows per centroid.
pub struct IvfIndex {
    vectors: VectorSet,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    params: IvfParams,
    stats: BuildStats,
}

/// Trains the quantizer on the normalized vectors and fills the inverted lists.
/// An empty vector set yields an index with no lists.
pub fn ivf_build(mut vectors: VectorSet, params: &IvfParams) -> Result<IvfIndex> {
    let start = Instant::now();
    let m = vectors.len();
    if m == 0 {
        return Ok(IvfIndex {
            centroids: Vec::new(),
            lists: Vec::new(),
            params: params.clone(),
            stats: BuildStats::default(),
            vectors,
        });
    }
    if params.nlist < 1 || params.nlist > m {
        return Err(Error::InvalidInput(format!("nlist={} must be in [1, {m}]", params.nlist)));
    }
    if params.nprobe < 1 || params.nprobe > params.nlist {
        return Err(Error::InvalidInput(format!(
            "nprobe={} must be in [1, nlist={}]",
            params.nprobe, params.nlist
        )));
    }
    vectors.normalize_rows()?;
    let dim = vectors.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centroids = kmeans(vectors.data(), dim, params.nlist, params.iterations, &mut rng);
    let mut lists = vec![Vec::new(); params.nlist];
    for i in 0..m {
        lists[nearest(vectors.row(i), &centroids, dim)].push(i as u32);
    }
    let memory_bytes = vectors.memory_bytes() + centroids.len() * 4 + m * 4;
    Ok(IvfIndex {
        vectors,
        centroids,
        lists,
        params: params.clone(),
        stats: BuildStats {
            wall_seconds: start.elapsed().as_secs_f64(),
            memory_bytes,
        },
    })
}

impl IvfIndex {
    pub fn params(&self) -> &IvfParams {
        &self.params
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    /// External ids in each inverted list.
    pub fn lists(&self) -> Vec<Vec<u64>> {
        self.lists
            .iter()
            .map(|l| l.iter().map(|&r| self.vectors.id(r as usize)).collect())
            .collect()
    }

    /// Scans the `nprobe` lists whose centroids are closest to the query and
    /// ranks their members exactly.
    pub fn ivf_search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<Neighbor>> {
        check_k(k)?;
        let q = normalized_query(query, self.vectors.dim())?;
        Ok(self.scan(&q, k, nprobe))
    }

    fn scan(&self, q: &[f32], k: usize, nprobe: usize) -> Vec<Neighbor> {
        let mut top = TopK::new(k);
        for list in closest_centroids(q, &self.centroids, self.vectors.dim(), nprobe) {
            for &row in &self.lists[list] {
                let row = row as usize;
                top.push(Neighbor {
                    id: self.vectors.id(row),
                    score: dot(q, self.vectors.row(row)),
                });
            }
        }
        top.into_sorted()
    }

    /// Writes the centroids as VEC1 (ids = list numbers) and the list membership
    /// as little-endian u64 (list id, external id) pairs.
    pub fn save(&self, centroids_path: impl AsRef<Path>, lists_path: impl AsRef<Path>) -> Result<()> {
        let dim = self.vectors.dim();
        let cents = VectorSet::new(dim, (0..self.lists.len() as u64).collect(), self.centroids.clone())?;
        write_vec1(centroids_path, &cents)?;
        let path = lists_path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for (l, rows) in self.lists.iter().enumerate() {
            for &row in rows {
                out.write_all(&(l as u64).to_le_bytes()).map_err(io)?;
                out.write_all(&self.vectors.id(row as usize).to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    /// Reassembles an index from its vectors and the files written by [`IvfIndex::save`].
    pub fn load(
        mut vectors: VectorSet,
        centroids_path: impl AsRef<Path>,
        lists_path: impl AsRef<Path>,
        params: IvfParams,
    ) -> Result<Self> {
        vectors.normalize_rows()?;
        let cents = read_vec1(centroids_path)?;
        if cents.dim() != vectors.dim() && !cents.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: vectors.dim(),
                actual: cents.dim(),
            });
        }
        let row_of: std::collections::HashMap<u64, u32> =
            vectors.ids().iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        let path = lists_path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() % 16 != 0 {
            return Err(Error::Format(format!("{}: truncated list file", path.display())));
        }
        let mut lists = vec![Vec::new(); cents.len()];
        for pair in bytes.chunks_exact(16) {
            let l = u64::from_le_bytes(pair[..8].try_into().unwrap()) as usize;
            let id = u64::from_le_bytes(pair[8..].try_into().unwrap());
            let row = *row_of
                .get(&id)
                .ok_or_else(|| Error::Format(format!("list entry for unknown id {id}")))?;
            lists
                .get_mut(l)
                .ok_or_else(|| Error::Format(format!("list id {l} out of range")))?
                .push(row);
        }
        let memory_bytes = vectors.memory_bytes() + cents.data().len() * 4 + vectors.len() * 4;
        Ok(Self {
            centroids: cents.data().to_vec(),
            lists,
            params,
            stats: BuildStats {
                wall_seconds: 0.0,
                memory_bytes,
            },
            vectors,
        })
    }
}

impl SearchIndex for IvfIndex {
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.ivf_search(query, k, self.params.nprobe)
    }

    fn search_normalized(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        check_k(k)?;
        if query.len() != self.vectors.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.vectors.dim(),
                actual: query.len(),
            });
        }
        Ok(self.scan(query, k, self.params.nprobe))
    }

    fn vectors(&self) -> &VectorSet {
        &self.vectors
    }

    fn stats(&self) -> &BuildStats {
        &self.stats
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Ivf(self.params.clone())
    }

    fn save_structures(&self, dir: &Path, stem: &str) -> Result<()> {
        self.save(dir.join(format!("{stem}.ivfc")), dir.join(format!("{stem}.ivfl")))
    }
}
