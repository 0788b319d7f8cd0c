//! Agglomerative clustering of value vectors on cosine distance.

mod extreme;
mod linkage;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::Model;

pub use extreme::{find_extreme_clusters, ExtremeClusterReport};
pub use linkage::{cut, merges, Linkage, Merge};

pub const MANIFEST_FILE: &str = "clusters.json";
pub const ASSIGNMENTS_FILE: &str = "assignments.bin";
pub const CENTROIDS_FILE: &str = "centroids.bin";

/// Default cap on the pairwise table used by complete linkage (1 GiB).
pub const DEFAULT_COMPLETE_LIMIT: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub k: usize,
    pub linkage: Linkage,
    /// Cluster a uniform subsample of this size and attach the rest to the
    /// nearest centroid.
    pub subsample: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_limit")]
    pub complete_limit: usize,
}

fn default_limit() -> usize {
    DEFAULT_COMPLETE_LIMIT
}

impl ClusterParams {
    pub fn new(k: usize, linkage: Linkage) -> Self {
        Self { k, linkage, subsample: None, seed: 0, complete_limit: DEFAULT_COMPLETE_LIMIT }
    }
}

/// A `(layer, index)` key of a value vector.
pub type VectorKey = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub params: ClusterParams,
    pub hidden_dim: usize,
    keys: Vec<VectorKey>,
    assignment: Vec<u32>,
    counts: Vec<usize>,
    /// Normalised mean direction per cluster (zero for the zero-vector cluster).
    centroids: Vec<f32>,
    zero_cluster: Option<u32>,
    lookup: HashMap<VectorKey, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: ClusterParams,
    hidden_dim: usize,
    num_vectors: usize,
    num_clusters: usize,
    counts: Vec<usize>,
    zero_cluster: Option<u32>,
    assignments: String,
    centroids: String,
}

fn unit(v: &[f32]) -> Option<Vec<f32>> {
    let n = math::norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Clusters the rows of `vectors` (each `d` long, keyed by `keys`) into
/// `params.k` clusters. Zero vectors share one reserved cluster.
pub fn build_clusters(keys: &[VectorKey], vectors: &[f32], d: usize, params: &ClusterParams) -> Result<ClusterModel> {
    let n = keys.len();
    if vectors.len() != n * d {
        return Err(Error::Validation(format!("{} floats for {n} vectors of dim {d}", vectors.len())));
    }
    if params.k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if params.k > n {
        return Err(Error::Validation(format!("k = {} exceeds the {n} vectors", params.k)));
    }
    let mut units = Vec::with_capacity(vectors.len());
    let mut nonzero = Vec::with_capacity(n);
    let mut zeros = Vec::new();
    for i in 0..n {
        match unit(&vectors[i * d..(i + 1) * d]) {
            Some(u) => {
                units.extend_from_slice(&u);
                nonzero.push(i);
            }
            None => zeros.push(i),
        }
    }
    let k_nonzero = params.k - usize::from(!zeros.is_empty());
    if k_nonzero == 0 && !nonzero.is_empty() {
        return Err(Error::Validation("k = 1 leaves no cluster for the non-zero vectors".into()));
    }
    if k_nonzero > nonzero.len() {
        return Err(Error::Validation(format!("k = {} exceeds the {} non-zero vectors plus the zero cluster", params.k, nonzero.len())));
    }

    // labels over `nonzero`, before renumbering
    let mut labels = vec![0u32; nonzero.len()];
    if !nonzero.is_empty() {
        let sampled: Vec<usize> = match params.subsample {
            Some(s) if s < nonzero.len() => {
                if s < k_nonzero {
                    return Err(Error::Validation(format!("subsample of {s} is smaller than k")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                let mut picked = sample(&mut rng, nonzero.len(), s).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..nonzero.len()).collect(),
        };
        let sub_units: Vec<f32> = sampled.iter().flat_map(|&j| units[j * d..(j + 1) * d].iter().copied()).collect();
        let steps = merges(&sub_units, d, params.linkage, params.complete_limit)?;
        let sub_labels = cut(&steps, sampled.len(), k_nonzero);
        let sub_centroids = centroids_of(&sub_units, d, &sub_labels, k_nonzero);
        let mut in_sample = vec![None; nonzero.len()];
        for (pos, &j) in sampled.iter().enumerate() {
            in_sample[j] = Some(sub_labels[pos]);
        }
        for j in 0..nonzero.len() {
            labels[j] = match in_sample[j] {
                Some(l) => l,
                None => nearest_centroid(&sub_centroids, d, &units[j * d..(j + 1) * d]),
            };
        }
    }

    // renumber so that ids follow the smallest member (over all inputs)
    let mut raw = vec![u32::MAX; n];
    for (j, &i) in nonzero.iter().enumerate() {
        raw[i] = labels[j];
    }
    let zero_raw = k_nonzero as u32;
    for &i in &zeros {
        raw[i] = zero_raw;
    }
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut assignment = Vec::with_capacity(n);
    for &r in &raw {
        let next = remap.len() as u32;
        assignment.push(*remap.entry(r).or_insert(next));
    }
    let k = remap.len();
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a as usize] += 1;
    }
    let mut sums = vec![0.0f32; k * d];
    for (j, &i) in nonzero.iter().enumerate() {
        let c = assignment[i] as usize;
        for t in 0..d {
            sums[c * d + t] += units[j * d + t];
        }
    }
    let mut centroids = vec![0.0f32; k * d];
    for c in 0..k {
        if let Some(u) = unit(&sums[c * d..(c + 1) * d]) {
            centroids[c * d..(c + 1) * d].copy_from_slice(&u);
        }
    }
    let zero_cluster = (!zeros.is_empty()).then(|| remap[&zero_raw]);
    let lookup = keys.iter().enumerate().map(|(i, &key)| (key, i)).collect();
    Ok(ClusterModel { params: params.clone(), hidden_dim: d, keys: keys.to_vec(), assignment, counts, centroids, zero_cluster, lookup })
}

fn centroids_of(units: &[f32], d: usize, labels: &[u32], k: usize) -> Vec<f32> {
    let mut sums = vec![0.0f32; k * d];
    for (i, &l) in labels.iter().enumerate() {
        for t in 0..d {
            sums[l as usize * d + t] += units[i * d + t];
        }
    }
    for c in 0..k {
        if let Some(u) = unit(&sums[c * d..(c + 1) * d]) {
            sums[c * d..(c + 1) * d].copy_from_slice(&u);
        }
    }
    sums
}

fn nearest_centroid(centroids: &[f32], d: usize, u: &[f32]) -> u32 {
    let sims: Vec<f32> = centroids.chunks_exact(d).map(|c| math::dot(c, u)).collect();
    math::argmax(&sims) as u32
}

/// Every value vector of `model` as `(keys, flat rows)`.
pub fn all_value_vectors(model: &Model) -> (Vec<VectorKey>, Vec<f32>) {
    let mut keys = Vec::with_capacity(model.config().num_value_vectors());
    let mut rows = Vec::with_capacity(model.config().num_value_vectors() * model.config().hidden_dim);
    for (l, lw) in model.weights().layers.iter().enumerate() {
        for (i, row) in lw.ffn_values.iter_rows().enumerate() {
            keys.push((l as u32, i as u32));
            rows.extend_from_slice(row);
        }
    }
    (keys, rows)
}

/// The value vectors named by `keys`, as flat rows.
pub fn gather_value_vectors(model: &Model, keys: &[VectorKey]) -> Result<Vec<f32>> {
    let mut rows = Vec::with_capacity(keys.len() * model.config().hidden_dim);
    for &(l, i) in keys {
        rows.extend_from_slice(model.weights().value_vector(l as usize, i as usize)?);
    }
    Ok(rows)
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn num_vectors(&self) -> usize {
        self.keys.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn zero_cluster(&self) -> Option<u32> {
        self.zero_cluster
    }

    pub fn keys(&self) -> &[VectorKey] {
        &self.keys
    }

    pub fn assignments(&self) -> impl Iterator<Item = (VectorKey, u32)> + '_ {
        self.keys.iter().copied().zip(self.assignment.iter().copied())
    }

    pub fn contains(&self, layer: usize, index: usize) -> bool {
        self.lookup.contains_key(&(layer as u32, index as u32))
    }

    pub fn assign(&self, layer: usize, index: usize) -> Result<u32> {
        self.lookup
            .get(&(layer as u32, index as u32))
            .map(|&i| self.assignment[i])
            .ok_or_else(|| Error::UnknownKey(format!("value vector ({layer}, {index}) was not clustered")))
    }

    pub fn members(&self, cluster: u32) -> Vec<VectorKey> {
        self.assignments().filter(|&(_, c)| c == cluster).map(|(k, _)| k).collect()
    }

    /// Cluster whose mean direction is closest in cosine to `v`.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        match unit(v) {
            Some(u) => {
                let sims: Vec<f32> = (0..self.num_clusters())
                    .map(|c| {
                        if Some(c as u32) == self.zero_cluster {
                            f32::NEG_INFINITY
                        } else {
                            math::dot(&self.centroids[c * self.hidden_dim..(c + 1) * self.hidden_dim], &u)
                        }
                    })
                    .collect();
                math::argmax(&sims) as u32
            }
            None => self.zero_cluster.unwrap_or(0),
        }
    }

    /// The stored assignment, or the nearest cluster for vectors outside the
    /// clustered set.
    pub fn assign_or_nearest(&self, layer: usize, index: usize, v: &[f32]) -> u32 {
        self.assign(layer, index).unwrap_or_else(|_| self.nearest(v))
    }

    pub fn centroid(&self, cluster: u32) -> Option<&[f32]> {
        let c = cluster as usize;
        (c < self.num_clusters()).then(|| &self.centroids[c * self.hidden_dim..(c + 1) * self.hidden_dim])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(self.keys.len() * 12);
        for ((l, i), c) in self.assignments() {
            for x in [l, i, c] {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(dir.join(ASSIGNMENTS_FILE), bin)?;
        let cent: Vec<u8> = self.centroids.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(dir.join(CENTROIDS_FILE), cent)?;
        let manifest = Manifest {
            params: self.params.clone(),
            hidden_dim: self.hidden_dim,
            num_vectors: self.keys.len(),
            num_clusters: self.num_clusters(),
            counts: self.counts.clone(),
            zero_cluster: self.zero_cluster,
            assignments: ASSIGNMENTS_FILE.into(),
            centroids: CENTROIDS_FILE.into(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::AssetMissing(path));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
        let bin = fs::read(dir.join(&manifest.assignments))?;
        if bin.len() != manifest.num_vectors * 12 {
            return Err(Error::Validation(format!("{} holds {} bytes, expected {}", manifest.assignments, bin.len(), manifest.num_vectors * 12)));
        }
        let words: Vec<u32> = bin.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let keys: Vec<VectorKey> = words.chunks_exact(3).map(|t| (t[0], t[1])).collect();
        let assignment: Vec<u32> = words.chunks_exact(3).map(|t| t[2]).collect();
        if assignment.iter().any(|&c| c as usize >= manifest.num_clusters) {
            return Err(Error::Validation("assignment refers to a cluster outside the manifest".into()));
        }
        let cent = fs::read(dir.join(&manifest.centroids))?;
        let centroids: Vec<f32> = cent.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if centroids.len() != manifest.num_clusters * manifest.hidden_dim {
            return Err(Error::Validation("centroid file does not match the manifest".into()));
        }
        let lookup = keys.iter().enumerate().map(|(i, &key)| (key, i)).collect();
        Ok(Self {
            params: manifest.params,
            hidden_dim: manifest.hidden_dim,
            keys,
            assignment,
            counts: manifest.counts,
            centroids,
            zero_cluster: manifest.zero_cluster,
            lookup,
        })
    }
}
