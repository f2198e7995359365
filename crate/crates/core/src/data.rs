//! Datasets, label bookkeeping and the synthetic factorial generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::elbo::DatumLabels;
use crate::error::{check_len, FmxError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FMXB";
/// Payload of `N·H·W` bytes in {0, 1}.
pub const DATASET_VERSION_BINARY: u16 = 1;
/// Payload of `N·H·W` little-endian f64 values.
pub const DATASET_VERSION_REAL: u16 = 2;
pub const TRUTH_MAGIC: &[u8; 4] = b"FMXT";
pub const TRUTH_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    binary: bool,
}

impl Dataset {
    /// Builds a dataset from rows of length `height · width`.
    pub fn new(rows: Vec<Vec<f64>>, height: usize, width: usize) -> Result<Self> {
        let p = height
            .checked_mul(width)
            .ok_or_else(|| FmxError::Config("image dimensions overflow".into()))?;
        if p == 0 {
            return Err(FmxError::Config("datum dimension must be >= 1".into()));
        }
        for row in &rows {
            check_len("datum length", p, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(FmxError::Numeric(
                    "dataset contains a non-finite value".into(),
                ));
            }
        }
        let binary = rows.iter().flatten().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self {
            rows,
            height,
            width,
            binary,
        })
    }

    /// Real-valued vectors of length `p` (stored as a `1 × p` image).
    pub fn from_vectors(rows: Vec<Vec<f64>>, p: usize) -> Result<Self> {
        Self::new(rows, 1, p)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u16(if self.binary {
            DATASET_VERSION_BINARY
        } else {
            DATASET_VERSION_REAL
        });
        w.u64(self.len() as u64);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        for row in &self.rows {
            if self.binary {
                for &v in row {
                    w.u8(v as u8);
                }
            } else {
                w.f64s(row);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8], source: &str) -> Result<Self> {
        let mut r = ByteReader::new(buf, source);
        if r.take(4, "magic")? != DATASET_MAGIC {
            return Err(r.error("bad magic, expected FMXB"));
        }
        let version = r.u16("version")?;
        let n = r.u64("N")?;
        let h = r.u32("H")? as u64;
        let w = r.u32("W")? as u64;
        let width = match version {
            DATASET_VERSION_BINARY => 1u64,
            DATASET_VERSION_REAL => 8,
            v => return Err(r.error(format!("unsupported version {v}"))),
        };
        let p = h
            .checked_mul(w)
            .filter(|&p| p > 0)
            .ok_or_else(|| r.error(format!("invalid image dimensions {h} x {w}")))?;
        let payload = n
            .checked_mul(p)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| r.error("payload size overflows"))?;
        if r.remaining() < payload {
            return Err(r.error(format!(
                "truncated payload: expected {payload} bytes, found {}",
                r.remaining()
            )));
        }
        let p = p as usize;
        let mut rows = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let row = if version == DATASET_VERSION_BINARY {
                r.take(p, "pixels")?
                    .iter()
                    .map(|&b| if b > 0 { 1.0 } else { 0.0 })
                    .collect()
            } else {
                r.f64s(p, "values")?
            };
            rows.push(row);
        }
        r.expect_end()?;
        Self::new(rows, h as usize, w as usize).map_err(|e| r.error(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FmxError::io(path, e))
    }
}

/// Reads a dataset container; byte payloads are thresholded to {0, 1}.
pub fn load_binary_images(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| FmxError::io(path, e))?;
    Dataset::from_bytes(&buf, &path.display().to_string())
}

pub fn write_binary_images(path: &Path, data: &Dataset) -> Result<()> {
    data.save(path)
}

/// Observed labels: datum index → block index → one-hot vector. All indices are 0-based.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelSet {
    entries: BTreeMap<usize, DatumLabels>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, n: usize) -> Option<&DatumLabels> {
        self.entries.get(&n)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &DatumLabels)> {
        self.entries.iter()
    }

    /// Adds label `k` for block `i` of datum `n`.
    pub fn insert(&mut self, n: usize, i: usize, k: usize, ks: &[usize]) -> Result<()> {
        if i >= ks.len() {
            return Err(FmxError::Index {
                what: "label block",
                index: i,
                limit: ks.len(),
            });
        }
        if k >= ks[i] {
            return Err(FmxError::Index {
                what: "label component",
                index: k,
                limit: ks[i],
            });
        }
        let per = self.entries.entry(n).or_default();
        if per.contains_key(&i) {
            return Err(FmxError::Config(format!(
                "duplicate label for datum {n}, block {i}"
            )));
        }
        let mut y = vec![0.0; ks[i]];
        y[k] = 1.0;
        per.insert(i, y);
        Ok(())
    }

    pub fn validate(&self, n_total: usize, ks: &[usize]) -> Result<()> {
        for (&n, per) in &self.entries {
            if n >= n_total {
                return Err(FmxError::Index {
                    what: "labeled datum",
                    index: n,
                    limit: n_total,
                });
            }
            for (&i, y) in per {
                if i >= ks.len() {
                    return Err(FmxError::Index {
                        what: "label block",
                        index: i,
                        limit: ks.len(),
                    });
                }
                check_len("label length", ks[i], y.len())?;
                let ones = y.iter().filter(|&&v| v == 1.0).count();
                let zeros = y.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != y.len() {
                    return Err(FmxError::Domain(format!("label ({n}, {i}) is not one-hot")));
                }
            }
        }
        Ok(())
    }

    /// `out[i]` is true when any datum carries a label for block `i`.
    pub fn labeled_blocks(&self, blocks: usize) -> Vec<bool> {
        let mut out = vec![false; blocks];
        for per in self.entries.values() {
            for &i in per.keys() {
                if i < blocks {
                    out[i] = true;
                }
            }
        }
        out
    }

    /// Text form: one `n i k` row per label, `n` 0-based, `i` and `k` 1-based.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (&n, per) in &self.entries {
            for (&i, y) in per {
                let k = y.iter().position(|&v| v == 1.0).unwrap_or(0);
                s.push_str(&format!("{n} {} {}\n", i + 1, k + 1));
            }
        }
        s
    }

    /// Parses the text form; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, ks: &[usize], n_total: Option<usize>, source: &str) -> Result<Self> {
        let mut out = Self::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| FmxError::parse(source, format!("line {}: {msg}", line_no + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad(format!(
                    "expected 3 fields `n i k`, got {}",
                    fields.len()
                )));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            let (n, i, k) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
            if let Some(total) = n_total {
                if n >= total {
                    return Err(bad(format!("datum index {n} out of range 0..{total}")));
                }
            }
            if i == 0 || i > ks.len() {
                return Err(bad(format!("block {i} out of range 1..={}", ks.len())));
            }
            if k == 0 || k > ks[i - 1] {
                return Err(bad(format!("component {k} out of range 1..={}", ks[i - 1])));
            }
            out.insert(n, i - 1, k - 1, ks)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| FmxError::io(path, e))
    }
}

/// Reads a label file of `n i k` rows (datum 0-based, block and component 1-based).
pub fn load_labels(path: &Path, ks: &[usize]) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| FmxError::io(path, e))?;
    LabelSet::parse(&text, ks, None, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecoderChoice {
    Identity,
    /// `x = A z + c` with a random `out_dim × (I·D)` matrix.
    Affine {
        out_dim: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub blocks: usize,
    pub dim: usize,
    pub n: usize,
    pub separation: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Observation noise added after the decoder.
    #[serde(default)]
    pub obs_std: f64,
    pub decoder: DecoderChoice,
    #[serde(default)]
    pub label_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_std() -> f64 {
    1.0
}

/// Generative record of a synthetic dataset; replaying it rebuilds the data exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub ks: Vec<usize>,
    pub dim: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub obs_std: f64,
    /// `means[i][k]` has length `D`.
    pub means: Vec<Vec<Vec<f64>>>,
    /// Per-dimension precision `1/σ²` shared by all components.
    pub precision: f64,
    pub weights: Vec<Vec<f64>>,
    /// Row-major `out_dim × (I·D)`; empty for the identity decoder.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub out_dim: usize,
    pub codes: Vec<Vec<usize>>,
    pub z: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl SyntheticTruth {
    pub fn blocks(&self) -> usize {
        self.ks.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.ks.len() * self.dim
    }

    pub fn is_identity(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return z.to_vec();
        }
        let l = self.latent_dim();
        (0..self.out_dim)
            .map(|p| {
                self.offset[p]
                    + self.matrix[p * l..(p + 1) * l]
                        .iter()
                        .zip(z)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Rebuilds the dataset from the stored latents and noise.
    pub fn replay(&self) -> Result<Dataset> {
        let rows = self
            .z
            .iter()
            .zip(&self.noise)
            .map(|(z, e)| {
                self.decode(z)
                    .into_iter()
                    .zip(e)
                    .map(|(x, n)| x + n)
                    .collect()
            })
            .collect();
        Dataset::from_vectors(rows, self.out_dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(TRUTH_MAGIC);
        w.u16(TRUTH_VERSION);
        w.u32(self.ks.len() as u32);
        w.u32(self.dim as u32);
        for &k in &self.ks {
            w.u32(k as u32);
        }
        w.u64(self.codes.len() as u64);
        w.u32(self.out_dim as u32);
        w.u8(u8::from(!self.is_identity()));
        w.f64s(&[
            self.separation,
            self.noise_std,
            self.obs_std,
            self.precision,
        ]);
        for block in &self.means {
            for m in block {
                w.f64s(m);
            }
        }
        for wts in &self.weights {
            w.f64s(wts);
        }
        w.f64s(&self.matrix);
        w.f64s(&self.offset);
        for c in &self.codes {
            for &k in c {
                w.u32(k as u32);
            }
        }
        for z in &self.z {
            w.f64s(z);
        }
        for e in &self.noise {
            w.f64s(e);
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8], source: &str) -> Result<Self> {
        let mut r = ByteReader::new(buf, source);
        if r.take(4, "magic")? != TRUTH_MAGIC {
            return Err(r.error("bad magic, expected FMXT"));
        }
        let version = r.u16("version")?;
        if version != TRUTH_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let blocks = r.u32("I")? as usize;
        let dim = r.u32("D")? as usize;
        let mut ks = Vec::new();
        for _ in 0..blocks {
            ks.push(r.u32("K_i")? as usize);
        }
        let n = r.u64("N")? as usize;
        let out_dim = r.u32("output dimension")? as usize;
        let affine = r.u8("decoder kind")? == 1;
        let h = r.f64s(4, "generator scalars")?;
        let mut means = Vec::new();
        for &k in &ks {
            let mut block = Vec::new();
            for _ in 0..k {
                block.push(r.f64s(dim, "component mean")?);
            }
            means.push(block);
        }
        let mut weights = Vec::new();
        for &k in &ks {
            weights.push(r.f64s(k, "mixing weights")?);
        }
        let latent = blocks * dim;
        let (matrix, offset) = if affine {
            (
                r.f64s(out_dim * latent, "decoder matrix")?,
                r.f64s(out_dim, "decoder offset")?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let mut codes = Vec::new();
        for _ in 0..n {
            let mut c = Vec::with_capacity(blocks);
            for &k in &ks {
                let v = r.u32("code")? as usize;
                if v >= k {
                    return Err(r.error(format!("code {v} out of range 0..{k}")));
                }
                c.push(v);
            }
            codes.push(c);
        }
        let mut z = Vec::new();
        for _ in 0..n {
            z.push(r.f64s(latent, "latent")?);
        }
        let mut noise = Vec::new();
        for _ in 0..n {
            noise.push(r.f64s(out_dim, "observation noise")?);
        }
        r.expect_end()?;
        Ok(Self {
            ks,
            dim,
            separation: h[0],
            noise_std: h[1],
            obs_std: h[2],
            means,
            precision: h[3],
            weights,
            matrix,
            offset,
            out_dim,
            codes,
            z,
            noise,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FmxError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| FmxError::io(path, e))?;
        Self::from_bytes(&buf, &path.display().to_string())
    }
}

/// `k` points of a centered grid in `dim` dimensions with spacing `separation`.
pub fn lattice_means(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut side = 1usize;
    while side.pow(dim as u32) < k {
        side += 1;
    }
    let center = (side as f64 - 1.0) / 2.0;
    let mut pts: Vec<Vec<f64>> = (0..k)
        .map(|mut idx| {
            (0..dim)
                .map(|_| {
                    let c = idx % side;
                    idx /= side;
                    (c as f64 - center) * separation
                })
                .collect()
        })
        .collect();
    // Center the chosen subset so the cluster cloud has mean zero.
    for d in 0..dim {
        let mean = pts.iter().map(|p| p[d]).sum::<f64>() / k as f64;
        for p in &mut pts {
            p[d] -= mean;
        }
    }
    pts
}

/// Draws a factorial dataset with uniformly chosen codes and lattice-placed component means.
pub fn generate_synthetic(
    ks: &[usize],
    spec: &SyntheticSpec,
) -> Result<(Dataset, LabelSet, SyntheticTruth)> {
    check_len("K list length vs blocks", spec.blocks, ks.len())?;
    if spec.blocks == 0 || spec.dim == 0 || spec.n == 0 || ks.contains(&0) {
        return Err(FmxError::Config(
            "I, D, N and every K_i must be >= 1".into(),
        ));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(FmxError::Config(format!(
            "separation must be >= 0, got {}",
            spec.separation
        )));
    }
    if !(spec.noise_std > 0.0) || !(spec.obs_std >= 0.0) {
        return Err(FmxError::Config(
            "noise_std must be > 0 and obs_std >= 0".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.label_fraction) {
        return Err(FmxError::Config(format!(
            "label_fraction {} outside [0, 1]",
            spec.label_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = spec.blocks * spec.dim;
    let means: Vec<Vec<Vec<f64>>> = ks
        .iter()
        .map(|&k| lattice_means(k, spec.dim, spec.separation))
        .collect();
    let (matrix, offset, out_dim) = match spec.decoder {
        DecoderChoice::Identity => (Vec::new(), Vec::new(), latent),
        DecoderChoice::Affine { out_dim } => {
            if out_dim == 0 {
                return Err(FmxError::Config("affine decoder needs out_dim >= 1".into()));
            }
            // Rows of A get unit expected squared norm in units of the latent spread, so every
            // output coordinate has roughly unit variance.
            let mut latent_var = 0.0;
            for block in &means {
                for d in 0..spec.dim {
                    let mean = block.iter().map(|m| m[d]).sum::<f64>() / block.len() as f64;
                    latent_var += block.iter().map(|m| (m[d] - mean).powi(2)).sum::<f64>()
                        / block.len() as f64;
                }
            }
            latent_var = latent_var / latent as f64 + spec.noise_std * spec.noise_std;
            let scale = 1.0 / (latent as f64 * latent_var).sqrt();
            let a: Vec<f64> = (0..out_dim * latent)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e
                })
                .collect();
            let c: Vec<f64> = (0..out_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            (a, c, out_dim)
        }
    };
    let mut codes = Vec::with_capacity(spec.n);
    let mut zs = Vec::with_capacity(spec.n);
    let mut noise = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let code: Vec<usize> = ks.iter().map(|&k| rng.random_range(0..k)).collect();
        let mut z = Vec::with_capacity(latent);
        for (i, &k) in code.iter().enumerate() {
            for d in 0..spec.dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                z.push(means[i][k][d] + spec.noise_std * e);
            }
        }
        let e: Vec<f64> = (0..out_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                spec.obs_std * v
            })
            .collect();
        codes.push(code);
        zs.push(z);
        noise.push(e);
    }
    let truth = SyntheticTruth {
        ks: ks.to_vec(),
        dim: spec.dim,
        separation: spec.separation,
        noise_std: spec.noise_std,
        obs_std: spec.obs_std,
        means,
        precision: 1.0 / (spec.noise_std * spec.noise_std),
        weights: ks.iter().map(|&k| vec![1.0 / k as f64; k]).collect(),
        matrix,
        offset,
        out_dim,
        codes,
        z: zs,
        noise,
    };
    let data = truth.replay()?;
    let n_labeled = (spec.label_fraction * spec.n as f64).round() as usize;
    let mut labels = LabelSet::new();
    let mut chosen = sample_indices(&mut rng, spec.n, n_labeled).into_vec();
    chosen.sort_unstable();
    for n in chosen {
        labels.insert(n, 0, truth.codes[n][0], ks)?;
    }
    Ok((data, labels, truth))
}

/// Fraction of `pred[n][block] == truth[n][block]` under the identity mapping.
pub fn block_accuracy(pred: &[Vec<usize>], truth: &[Vec<usize>], block: usize) -> f64 {
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| p[block] == t[block])
        .count();
    hits as f64 / pred.len().max(1) as f64
}

/// Accuracy of block `block` maximized over relabelings of the predicted indices.
///
/// Exhaustive over permutations when both index ranges are at most 8, greedy otherwise.
pub fn permuted_block_accuracy(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    block: usize,
    k_pred: usize,
    k_true: usize,
) -> f64 {
    cross_block_accuracy(pred, truth, block, block, k_pred, k_true)
}

/// Accuracy of predicted block `pred_block` against true block `true_block`, maximized over
/// relabelings of the predicted indices.
pub fn cross_block_accuracy(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    pred_block: usize,
    true_block: usize,
    k_pred: usize,
    k_true: usize,
) -> f64 {
    let mut confusion = vec![vec![0.0; k_true]; k_pred];
    for (p, t) in pred.iter().zip(truth) {
        confusion[p[pred_block]][t[true_block]] += 1.0;
    }
    best_assignment(&confusion).0 / pred.len().max(1) as f64
}

/// Per true block accuracy after matching predicted blocks to true blocks and relabeling
/// the indices within each matched pair, both chosen to maximize the summed accuracy.
///
/// The factorial prior is exchangeable across blocks of equal size, so block order is
/// only identified up to such a matching.
pub fn matched_code_accuracy(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    ks_pred: &[usize],
    ks_true: &[usize],
) -> Vec<f64> {
    let cross: Vec<Vec<f64>> = (0..ks_pred.len())
        .map(|a| {
            (0..ks_true.len())
                .map(|b| cross_block_accuracy(pred, truth, a, b, ks_pred[a], ks_true[b]))
                .collect()
        })
        .collect();
    let (_, assign) = best_assignment(&cross);
    let mut out = vec![0.0; ks_true.len()];
    for (a, &b) in assign.iter().enumerate() {
        if b < ks_true.len() {
            out[b] = cross[a][b];
        }
    }
    out
}

/// Maximum-weight matching of rows to columns of a score matrix.
///
/// Returns the total and, per row, the matched column (`>= cols` when the row is unmatched).
/// Exhaustive over permutations up to size 8, greedy beyond.
fn best_assignment(score: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let rows = score.len();
    let cols = score.first().map_or(0, Vec::len);
    let size = rows.max(cols);
    let total = |perm: &[usize]| -> f64 {
        (0..rows)
            .map(|a| {
                if perm[a] < cols {
                    score[a][perm[a]]
                } else {
                    0.0
                }
            })
            .sum()
    };
    if size <= 8 {
        let mut perm: Vec<usize> = (0..size).collect();
        let mut best = (total(&perm), perm.clone());
        // Heap's algorithm.
        let mut c = vec![0usize; size];
        let mut i = 0;
        while i < size {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                let t = total(&perm);
                if t > best.0 {
                    best = (t, perm.clone());
                }
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best.1.truncate(rows);
        best
    } else {
        let mut assign = vec![usize::MAX; rows];
        let mut used = vec![false; cols];
        let mut cells: Vec<(f64, usize, usize)> = (0..rows)
            .flat_map(|a| (0..cols).map(move |b| (a, b)))
            .map(|(a, b)| (score[a][b], a, b))
            .collect();
        cells.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut hits = 0.0;
        for (v, a, b) in cells {
            if assign[a] == usize::MAX && !used[b] {
                assign[a] = b;
                used[b] = true;
                hits += v;
            }
        }
        (hits, assign)
    }
}
