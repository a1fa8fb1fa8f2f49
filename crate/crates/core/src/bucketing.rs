//! Private semantic clustering of query embeddings.
//!
//! Two modes: nearest center under Euclidean distance (ties go to the lowest
//! center index) and random-hyperplane LSH, where bit `k` of the bucket id is
//! set when `<hyperplane_k, q> >= 0`. Hyperplanes are drawn from the model
//! seed, so a model file plus its seed reproduces the hash exactly.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LadsError, Result};
use crate::noise::{gaussian_noise, splitmix64, Seed};

pub const MAX_LSH_BITS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketMode {
    NearestCenter,
    Lsh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketModel {
    mode: BucketMode,
    dim: usize,
    centers: Vec<Vec<f64>>,
    radius: f64,
    lsh_bits: u32,
    hyperplanes: Vec<Vec<f64>>,
    seed: u64,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LadsError::InvalidBucketModel(format!("{what} has non-finite entries")))
    }
}

fn validate_centers(centers: &[Vec<f64>], dim: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for c in centers {
        if c.len() != dim {
            return Err(LadsError::DimensionMismatch {
                expected: dim,
                got: c.len(),
            });
        }
        check_finite(c, "center")?;
        let key: Vec<u64> = c.iter().map(|x| x.to_bits()).collect();
        if !seen.insert(key) {
            return Err(LadsError::InvalidBucketModel("duplicate center".into()));
        }
    }
    Ok(())
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit hyperplane normals drawn deterministically from `seed`.
pub fn draw_hyperplanes(dim: usize, bits: u32, seed: u64) -> Vec<Vec<f64>> {
    (0..bits as u64)
        .map(|k| {
            let g = gaussian_noise(Seed(splitmix64(seed ^ splitmix64(k))), dim).into_values();
            let norm = dot(&g, &g).sqrt();
            g.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

impl BucketModel {
    pub fn nearest_center(centers: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        let dim = centers.first().ok_or(LadsError::EmptyCenters)?.len();
        if dim == 0 {
            return Err(LadsError::InvalidBucketModel("zero-dimensional centers".into()));
        }
        validate_centers(&centers, dim)?;
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(LadsError::InvalidBucketModel(format!("radius {radius}")));
        }
        Ok(Self {
            mode: BucketMode::NearestCenter,
            dim,
            centers,
            radius,
            lsh_bits: 0,
            hyperplanes: Vec::new(),
            seed: 0,
        })
    }

    /// LSH model. `centers` may be empty; they are only needed by
    /// [`audit_transcript`].
    pub fn lsh(dim: usize, bits: u32, seed: u64, centers: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        if dim == 0 {
            return Err(LadsError::InvalidBucketModel("zero dimension".into()));
        }
        if !(1..=MAX_LSH_BITS).contains(&bits) {
            return Err(LadsError::InvalidBucketModel(format!(
                "lsh_bits must be in 1..={MAX_LSH_BITS}, got {bits}"
            )));
        }
        validate_centers(&centers, dim)?;
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(LadsError::InvalidBucketModel(format!("radius {radius}")));
        }
        Ok(Self {
            mode: BucketMode::Lsh,
            dim,
            centers,
            radius,
            lsh_bits: bits,
            hyperplanes: draw_hyperplanes(dim, bits, seed),
            seed,
        })
    }

    pub fn mode(&self) -> BucketMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lsh_bits(&self) -> u32 {
        self.lsh_bits
    }

    pub fn hyperplanes(&self) -> &[Vec<f64>] {
        &self.hyperplanes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of distinct bucket ids this model can emit.
    pub fn bucket_count(&self) -> u64 {
        match self.mode {
            BucketMode::NearestCenter => self.centers.len() as u64,
            BucketMode::Lsh => 1 << self.lsh_bits,
        }
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(LadsError::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Index of the closest center; the lowest index wins ties.
    pub fn nearest_center_index(&self, q: &[f64]) -> Result<usize> {
        self.check_query(q)?;
        let mut best = None::<(usize, f64)>;
        for (j, c) in self.centers.iter().enumerate() {
            let d = squared_distance(q, c);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j).ok_or(LadsError::EmptyCenters)
    }

    pub fn assign_nearest_center(&self, q: &[f64]) -> Result<BucketId> {
        if self.mode != BucketMode::NearestCenter {
            return Err(LadsError::WrongMode {
                expected: "nearest-center",
            });
        }
        Ok(BucketId(self.nearest_center_index(q)? as u64))
    }

    pub fn lsh_hash(&self, q: &[f64]) -> Result<BucketId> {
        if self.mode != BucketMode::Lsh {
            return Err(LadsError::WrongMode { expected: "lsh" });
        }
        self.check_query(q)?;
        let code = self
            .hyperplanes
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, h)| if dot(h, q) >= 0.0 { acc | (1 << k) } else { acc });
        Ok(BucketId(code))
    }

    /// The private hash `h(q)` in whichever mode the model was built.
    pub fn bucket(&self, q: &[f64]) -> Result<BucketId> {
        match self.mode {
            BucketMode::NearestCenter => self.assign_nearest_center(q),
            BucketMode::Lsh => self.lsh_hash(q),
        }
    }

    /// Covering assignment `J(q)`: the nearest center, provided it lies
    /// within the radius.
    pub fn center_assignment(&self, q: &[f64]) -> Result<Option<usize>> {
        if self.centers.is_empty() {
            return Err(LadsError::EmptyCenters);
        }
        let j = self.nearest_center_index(q)?;
        let within = squared_distance(q, &self.centers[j]).sqrt() <= self.radius;
        Ok(within.then_some(j))
    }

    /// `Some(j)` when `q` is covered by center `j` and hashes to the same
    /// bucket as that center; `None` for a bad query.
    pub fn good_assignment(&self, q: &[f64]) -> Result<Option<usize>> {
        match self.center_assignment(q)? {
            Some(j) if self.bucket(q)? == self.bucket(&self.centers[j])? => Ok(Some(j)),
            _ => Ok(None),
        }
    }
}

/// Empirical collision frequencies over near and far pairs.
pub fn estimate_collision_probs(
    model: &BucketModel,
    near_pairs: &[(Vec<f64>, Vec<f64>)],
    far_pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<(f64, f64)> {
    if near_pairs.is_empty() {
        return Err(LadsError::EmptyInput("near pairs"));
    }
    if far_pairs.is_empty() {
        return Err(LadsError::EmptyInput("far pairs"));
    }
    let rate = |pairs: &[(Vec<f64>, Vec<f64>)]| -> Result<f64> {
        let mut hits = 0usize;
        for (a, b) in pairs {
            if model.bucket(a)? == model.bucket(b)? {
                hits += 1;
            }
        }
        Ok(hits as f64 / pairs.len() as f64)
    };
    Ok((rate(near_pairs)?, rate(far_pairs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_queries: usize,
    /// `|B_task|`: distinct buckets hit by the transcript.
    pub occupied_buckets: usize,
    /// Distinct centers assigned to good queries.
    pub centers_used: usize,
    pub bad_queries: usize,
    pub bad_fraction: f64,
    /// Per-query covering assignment, `None` for bad queries.
    pub assignments: Vec<Option<usize>>,
}

impl CompressionReport {
    /// `|B_task| <= N + M_bad`.
    pub fn compression_holds(&self) -> bool {
        self.occupied_buckets <= self.centers_used + self.bad_queries
    }
}

/// Occupied buckets versus centers plus bad queries for one transcript.
pub fn audit_transcript(model: &BucketModel, queries: &[Vec<f64>]) -> Result<CompressionReport> {
    if queries.is_empty() {
        return Err(LadsError::EmptyInput("transcript"));
    }
    let mut buckets = HashSet::new();
    let mut centers = HashSet::new();
    let mut assignments = Vec::with_capacity(queries.len());
    for q in queries {
        buckets.insert(model.bucket(q)?);
        let a = model.good_assignment(q)?;
        if let Some(j) = a {
            centers.insert(j);
        }
        assignments.push(a);
    }
    let bad = assignments.iter().filter(|a| a.is_none()).count();
    Ok(CompressionReport {
        total_queries: queries.len(),
        occupied_buckets: buckets.len(),
        centers_used: centers.len(),
        bad_queries: bad,
        bad_fraction: bad as f64 / queries.len() as f64,
        assignments,
    })
}

/// On-disk form of a bucket model (TOML). Hyperplanes are not stored; they
/// are redrawn from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketModelFile {
    pub mode: BucketMode,
    pub dim: usize,
    #[serde(default)]
    pub radius: f64,
    #[serde(default)]
    pub lsh_bits: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<Vec<f64>>,
    /// Embedding file with the centers, resolved relative to the model file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers_file: Option<PathBuf>,
}

impl BucketModelFile {
    pub fn from_model(model: &BucketModel) -> Self {
        Self {
            mode: model.mode,
            dim: model.dim,
            radius: model.radius,
            lsh_bits: model.lsh_bits,
            seed: model.seed,
            centers: model.centers.clone(),
            centers_file: None,
        }
    }

    pub fn into_model(self, base_dir: Option<&Path>) -> Result<BucketModel> {
        let mut centers = self.centers;
        if let Some(file) = self.centers_file {
            let path = match base_dir {
                Some(dir) if file.is_relative() => dir.join(file),
                _ => file,
            };
            centers.extend(read_embeddings(&path)?.into_iter().map(|(_, v)| v));
        }
        let model = match self.mode {
            BucketMode::NearestCenter => BucketModel::nearest_center(centers, self.radius)?,
            BucketMode::Lsh => BucketModel::lsh(self.dim, self.lsh_bits, self.seed, centers, self.radius)?,
        };
        if model.dim != self.dim {
            return Err(LadsError::DimensionMismatch {
                expected: self.dim,
                got: model.dim,
            });
        }
        Ok(model)
    }
}

impl BucketModel {
    pub fn to_toml(&self) -> String {
        toml::to_string(&BucketModelFile::from_model(self)).expect("bucket model serializes")
    }

    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: BucketModelFile = toml::from_str(text).map_err(|e| LadsError::Parse(e.to_string()))?;
        file.into_model(base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent())
    }
}

/// Parses an embedding file: one `id v1 v2 ...` record per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_embeddings<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LadsError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(LadsError::Parse(format!("line {}: bad embedding", lineno + 1)));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(LadsError::DimensionMismatch {
                    expected: d,
                    got: values.len(),
                })
            }
            _ => {}
        }
        out.push((id, values));
    }
    Ok(out)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    parse_embeddings(BufReader::new(fs::File::open(path)?))
}

pub fn format_embeddings(records: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (id, v) in records {
        s.push_str(id);
        for x in v {
            s.push(' ');
            s.push_str(&format!("{x:?}"));
        }
        s.push('\n');
    }
    s
}
