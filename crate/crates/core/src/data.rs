//! Synthetic datasets with known multi-level label hierarchies.
//!
//! The generator builds a tree top-down. Top-level centers are drawn uniformly on a
//! sphere of radius `radius`; every child center is its parent plus an isotropic Gaussian
//! offset whose scale is specific to the child's depth; samples are leaf centers plus
//! Gaussian noise. Labels are stored finest first: `labels[0]` is the leaf index and
//! `labels[depth - 1]` the index of the top-level ancestor.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HcscError, Result};
use crate::rng::{substream, tag};

pub const DATASET_MAGIC: &[u8; 4] = b"HCSD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    /// Number of label levels.
    pub depth: usize,
    /// Children per node, top level first. `branching[0]` is the number of top-level nodes.
    pub branching: Vec<usize>,
    pub samples_per_leaf: usize,
    pub dim: usize,
    /// Norm of the top-level centers.
    pub radius: f64,
    /// Per-coordinate std of child offsets for depths `1..depth`, top first (`depth - 1` entries).
    pub offset_scales: Vec<f64>,
    /// Per-coordinate std of samples around their leaf center.
    pub leaf_noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: vec![2, 3, 4],
            samples_per_leaf: 50,
            dim: 32,
            radius: 40.0,
            offset_scales: vec![4.0, 1.5],
            leaf_noise: 0.3,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(HcscError::config("depth must be at least 1"));
        }
        if self.branching.len() != self.depth {
            return Err(HcscError::config(format!(
                "expected {} branching factors, got {}",
                self.depth,
                self.branching.len()
            )));
        }
        if let Some(b) = self.branching.iter().find(|&&b| b < 2) {
            return Err(HcscError::config(format!("branching factor {b} is below 2")));
        }
        if self.samples_per_leaf == 0 {
            return Err(HcscError::config("samples_per_leaf must be at least 1"));
        }
        if self.dim == 0 {
            return Err(HcscError::config("dim must be at least 1"));
        }
        if self.offset_scales.len() != self.depth - 1 {
            return Err(HcscError::config(format!(
                "expected {} offset scales, got {}",
                self.depth - 1,
                self.offset_scales.len()
            )));
        }
        let scales = self
            .offset_scales
            .iter()
            .chain([&self.radius, &self.leaf_noise]);
        if scales.clone().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(HcscError::config("radius and noise scales must be finite and non-negative"));
        }
        let n = self.num_samples();
        if n > u32::MAX as usize {
            return Err(HcscError::config("dataset too large"));
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn num_samples(&self) -> usize {
        self.num_leaves() * self.samples_per_leaf
    }

    /// Number of distinct label values at `level` (1 = finest).
    pub fn labels_at_level(&self, level: usize) -> usize {
        self.branching[..=self.depth - level].iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f32>,
    /// One label per hierarchy level, finest first.
    pub labels: Vec<u32>,
}

impl Sample {
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub spec: GeneratorSpec,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    /// Labels of every sample at `level` (1 = finest).
    pub fn labels_at(&self, level: usize) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.labels[level - 1] as usize)
            .collect()
    }

    pub fn features_f64(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(Sample::features_f64).collect()
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i as u64 {
                return Err(HcscError::contract(format!("sample {i} has id {}", s.id)));
            }
            if s.features.len() != self.spec.dim || s.labels.len() != self.spec.depth {
                return Err(HcscError::contract(format!("sample {i} has inconsistent shape")));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(HcscError::contract(format!("sample {i} has non-finite features")));
            }
            for (l, &lab) in s.labels.iter().enumerate() {
                if lab as usize >= self.spec.labels_at_level(l + 1) {
                    return Err(HcscError::contract(format!(
                        "sample {i} label {lab} at level {} out of range",
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            scale * g
        })
        .collect()
}

pub fn generate_hierarchical_mixture(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(seed, &[tag::GENERATE]);

    // Centers at the current depth, in global order.
    let mut centers: Vec<Vec<f64>> = (0..spec.branching[0])
        .map(|_| {
            let mut v = gaussian_vec(&mut rng, spec.dim, 1.0);
            let n = crate::vector::norm(&v);
            v.iter_mut().for_each(|x| *x *= spec.radius / n);
            v
        })
        .collect();
    for (d, &b) in spec.branching.iter().enumerate().skip(1) {
        let scale = spec.offset_scales[d - 1];
        centers = centers
            .iter()
            .flat_map(|parent| {
                (0..b)
                    .map(|_| {
                        let mut child = gaussian_vec(&mut rng, spec.dim, scale);
                        crate::vector::axpy(1.0, parent, &mut child);
                        child
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }

    let mut samples = Vec::with_capacity(spec.num_samples());
    for (leaf, center) in centers.iter().enumerate() {
        let labels: Vec<u32> = (1..=spec.depth)
            .map(|level| {
                let below: usize = spec.branching[spec.depth - level + 1..].iter().product();
                (leaf / below) as u32
            })
            .collect();
        for _ in 0..spec.samples_per_leaf {
            let noise = gaussian_vec(&mut rng, spec.dim, spec.leaf_noise);
            let features = center
                .iter()
                .zip(&noise)
                .map(|(c, e)| (c + e) as f32)
                .collect();
            samples.push(Sample {
                id: samples.len() as u64,
                features,
                labels: labels.clone(),
            });
        }
    }
    Ok(Dataset {
        samples,
        spec: spec.clone(),
        seed,
    })
}

/// Vector-space stand-in for image augmentations: `mask ⊙ (s·x + η)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    noise_sigma: f64,
    drop_prob: f64,
    scale_range: (f64, f64),
}

impl AugmentationPolicy {
    pub fn new(noise_sigma: f64, drop_prob: f64, scale_range: (f64, f64)) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(HcscError::config(format!("noise_sigma {noise_sigma} must be >= 0")));
        }
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(HcscError::config(format!("drop_prob {drop_prob} must lie in [0, 1)")));
        }
        let (a, b) = scale_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(HcscError::config(format!("scale range [{a}, {b}] needs 0 < a <= b")));
        }
        Ok(Self {
            noise_sigma,
            drop_prob,
            scale_range,
        })
    }

    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            drop_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }

    pub fn scale_range(&self) -> (f64, f64) {
        self.scale_range
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            drop_prob: 0.1,
            scale_range: (0.8, 1.2),
        }
    }
}

/// Draws one augmented view. Consumes one uniform for the scale, then one normal and one
/// uniform per coordinate, in coordinate order.
pub fn augment<R: Rng>(x: &[f64], policy: &AugmentationPolicy, rng: &mut R) -> Vec<f64> {
    let (a, b) = policy.scale_range;
    let u: f64 = rng.random();
    let s = a + (b - a) * u;
    x.iter()
        .map(|&xi| {
            let g: f64 = StandardNormal.sample(rng);
            let keep = rng.random::<f64>() >= policy.drop_prob;
            if keep {
                s * xi + policy.noise_sigma * g
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binary format
// ---------------------------------------------------------------------------

fn meta_block(ds: &Dataset) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let spec = &ds.spec;
    format!(
        "samples_per_leaf={}\nradius={:?}\noffset_scales={}\nleaf_noise={:?}\nseed={}\n",
        spec.samples_per_leaf,
        spec.radius,
        join(&spec.offset_scales),
        spec.leaf_noise,
        ds.seed
    )
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let spec = &ds.spec;
    let mut out = Vec::with_capacity(20 + ds.len() * (8 + 4 * (spec.depth + spec.dim)));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.len() as u32, spec.dim as u32, spec.depth as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &b in &spec.branching {
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        for &l in &s.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &f in &s.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let meta = meta_block(ds);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HcscError::format(
                self.offset(),
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(HcscError::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Parses `key=value` lines. Keys must be unique.
pub(crate) fn parse_kv_block(
    text: &str,
    offset: u64,
) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HcscError::format(offset, format!("meta line without '=': {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(HcscError::format(offset, format!("duplicate meta key {k:?}")));
        }
    }
    Ok(map)
}

pub(crate) fn kv_get<T: std::str::FromStr>(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
    offset: u64,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| HcscError::format(offset, format!("missing meta key {key:?}")))?
        .parse()
        .map_err(|_| HcscError::format(offset, format!("unparsable meta value for {key:?}")))
}

fn parse_f64_list(s: &str, offset: u64) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| HcscError::format(offset, format!("bad float {x:?}")))
        })
        .collect()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != DATASET_MAGIC {
        return Err(HcscError::format(0, "bad magic, expected \"HCSD\""));
    }
    let version_at = r.offset();
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(HcscError::format(
            version_at,
            format!("unsupported version {version} (expected {DATASET_VERSION})"),
        ));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let branching = (0..depth)
        .map(|_| r.u32().map(|b| b as usize))
        .collect::<Result<Vec<_>>>()?;
    let row_bytes = 8 + 4 * (depth + dim);
    if (bytes.len() as u64) < r.offset() + (n as u64) * row_bytes as u64 {
        return Err(HcscError::format(
            r.offset(),
            format!("truncated: {n} rows of {row_bytes} bytes declared"),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64()?;
        let labels = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let features = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            features,
            labels,
        });
    }
    let meta_at = r.offset();
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.bytes(meta_len)?)
        .map_err(|_| HcscError::format(meta_at, "meta block is not UTF-8"))?;
    r.finish()?;
    let meta = parse_kv_block(meta_text, meta_at)?;
    let spec = GeneratorSpec {
        depth,
        branching,
        samples_per_leaf: kv_get(&meta, "samples_per_leaf", meta_at)?,
        dim,
        radius: kv_get(&meta, "radius", meta_at)?,
        offset_scales: parse_f64_list(&kv_get::<String>(&meta, "offset_scales", meta_at)?, meta_at)?,
        leaf_noise: kv_get(&meta, "leaf_noise", meta_at)?,
    };
    let ds = Dataset {
        samples,
        spec,
        seed: kv_get(&meta, "seed", meta_at)?,
    };
    if ds.len() != ds.spec.num_samples() {
        return Err(HcscError::format(meta_at, "row count disagrees with generator spec"));
    }
    ds.validate()
        .map_err(|e| HcscError::format(meta_at, e.to_string()))?;
    Ok(ds)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| HcscError::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        HcscError::io(path, e)
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| HcscError::io(path, e))?;
    decode_dataset(&bytes)
}
