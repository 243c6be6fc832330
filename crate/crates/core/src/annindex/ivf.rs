//! Inverted-file index with uncompressed ("flat") vector storage.
//!
//! On disk an index is a directory holding `header.json`, `centroids.f32`
//! (`nlist * dim` little-endian floats) and `lists.bin`: per cell a `u64`
//! entry count followed by `(u64 id, dim * f32)` records, all little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_dim, kmeans, l2_squared, top_k, AnnError, Result, SearchHit};

pub const DEFAULT_NPROBE: usize = 8;
pub const DEFAULT_MAX_ITERS: usize = 25;
const METRIC: &str = "l2_squared";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub nlist: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl IvfParams {
    /// `nlist = max(1, round(sqrt(n)))` for `n` training vectors.
    pub fn for_count(n: usize, seed: u64) -> Self {
        Self { nlist: ((n as f64).sqrt().round() as usize).max(1), max_iters: DEFAULT_MAX_ITERS, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfHeader {
    pub dim: usize,
    pub nlist: usize,
    pub count: usize,
    pub metric: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfFlatIndex {
    dim: usize,
    nlist: usize,
    seed: u64,
    /// `nlist * dim`, empty until trained.
    centroids: Vec<f32>,
    list_ids: Vec<Vec<u64>>,
    list_vectors: Vec<Vec<f32>>,
    ids: HashSet<u64>,
}

impl IvfFlatIndex {
    pub fn untrained(dim: usize, nlist: usize) -> Self {
        Self {
            dim,
            nlist,
            seed: 0,
            centroids: Vec::new(),
            list_ids: vec![Vec::new(); nlist],
            list_vectors: vec![Vec::new(); nlist],
            ids: HashSet::new(),
        }
    }

    /// Trains the coarse quantizer on `data` (`n * dim`, row-major). The
    /// returned index is empty.
    pub fn train(data: &[f32], dim: usize, params: IvfParams) -> Result<Self> {
        let result = kmeans(data, dim, params.nlist, params.max_iters, params.seed)?;
        let mut index = Self::untrained(dim, params.nlist);
        index.seed = params.seed;
        index.centroids = result.centroids.iter().map(|c| *c as f32).collect();
        Ok(index)
    }

    pub fn is_trained(&self) -> bool {
        !self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    pub fn list_lengths(&self) -> Vec<usize> {
        self.list_ids.iter().map(Vec::len).collect()
    }

    pub fn centroid(&self, cell: usize) -> &[f32] {
        &self.centroids[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn header(&self) -> IvfHeader {
        IvfHeader { dim: self.dim, nlist: self.nlist, count: self.len(), metric: METRIC.into(), seed: self.seed }
    }

    /// Stored vector for `id`, if present.
    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.list_ids.iter().zip(&self.list_vectors).find_map(|(ids, vecs)| {
            ids.iter().position(|x| *x == id).map(|p| &vecs[p * self.dim..(p + 1) * self.dim])
        })
    }

    /// Cells ordered by centroid distance, ties to the lower cell index.
    fn ranked_cells(&self, query: &[f32]) -> Vec<usize> {
        let mut cells: Vec<(f64, usize)> = (0..self.nlist).map(|c| (l2_squared(query, self.centroid(c)), c)).collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cells.into_iter().map(|(_, c)| c).collect()
    }

    pub fn add(&mut self, id: u64, vector: &[f32]) -> Result<()> {
        if !self.is_trained() {
            return Err(AnnError::NotTrained);
        }
        check_dim(self.dim, vector.len())?;
        if self.ids.contains(&id) {
            return Err(AnnError::DuplicateId(id));
        }
        let cell = self.ranked_cells(vector)[0];
        self.ids.insert(id);
        self.list_ids[cell].push(id);
        self.list_vectors[cell].extend_from_slice(vector);
        Ok(())
    }

    /// Top-`k` hits among the `nprobe` cells nearest to `query`.
    /// `nprobe == nlist` is an exact search.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<SearchHit>> {
        if !self.is_trained() {
            return Err(AnnError::NotTrained);
        }
        check_dim(self.dim, query.len())?;
        if k == 0 {
            return Err(AnnError::BadParams("k must be at least 1".into()));
        }
        if nprobe == 0 || nprobe > self.nlist {
            return Err(AnnError::BadParams(format!("nprobe {nprobe} outside 1..={}", self.nlist)));
        }
        let mut candidates = Vec::new();
        for cell in self.ranked_cells(query).into_iter().take(nprobe) {
            let vectors = self.list_vectors[cell].chunks_exact(self.dim);
            candidates.extend(self.list_ids[cell].iter().zip(vectors).map(|(id, v)| (l2_squared(query, v), *id)));
        }
        Ok(top_k(candidates, k))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.is_trained() {
            return Err(AnnError::NotTrained);
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join("header.json"), serde_json::to_string_pretty(&self.header())?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("centroids.f32"))?);
        for c in &self.centroids {
            out.write_all(&c.to_le_bytes())?;
        }
        out.flush()?;
        let mut out = BufWriter::new(fs::File::create(dir.join("lists.bin"))?);
        for (ids, vectors) in self.list_ids.iter().zip(&self.list_vectors) {
            out.write_all(&(ids.len() as u64).to_le_bytes())?;
            for (id, v) in ids.iter().zip(vectors.chunks_exact(self.dim)) {
                out.write_all(&id.to_le_bytes())?;
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: IvfHeader = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
        if header.metric != METRIC {
            return Err(AnnError::Corrupt(format!("unsupported metric {}", header.metric)));
        }
        if header.nlist == 0 || header.dim == 0 {
            return Err(AnnError::Corrupt("dim and nlist must be positive".into()));
        }
        let raw = fs::read(dir.join("centroids.f32"))?;
        if raw.len() != header.nlist * header.dim * 4 {
            return Err(AnnError::Corrupt(format!("centroids.f32 has {} bytes", raw.len())));
        }
        let mut index = Self::untrained(header.dim, header.nlist);
        index.seed = header.seed;
        index.centroids = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();

        let mut input = BufReader::new(fs::File::open(dir.join("lists.bin"))?);
        let mut u64_buf = [0u8; 8];
        let mut vec_buf = vec![0u8; header.dim * 4];
        for cell in 0..header.nlist {
            input.read_exact(&mut u64_buf)?;
            let count = u64::from_le_bytes(u64_buf) as usize;
            for _ in 0..count {
                input.read_exact(&mut u64_buf)?;
                let id = u64::from_le_bytes(u64_buf);
                input.read_exact(&mut vec_buf)?;
                if !index.ids.insert(id) {
                    return Err(AnnError::DuplicateId(id));
                }
                index.list_ids[cell].push(id);
                index.list_vectors[cell].extend(vec_buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
            }
        }
        if input.read(&mut u64_buf)? != 0 {
            return Err(AnnError::Corrupt("trailing bytes in lists.bin".into()));
        }
        if index.len() != header.count {
            return Err(AnnError::Corrupt(format!("header count {} but {} entries", header.count, index.len())));
        }
        Ok(index)
    }
}
