//! Binary-labelled patch sets: the PSET file format, a seeded synthetic
//! generator with lymphocyte-like dark blobs, and stratified splits.
//!
//! PSET layout (little-endian): `"PSET"`, version u32 = 1, n, c, h, w as
//! u32, then n label bytes (0 or 1), then n·c·h·w pixel bytes in
//! patch-major, channel, row, column order.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{InputShape, Scalar, Shape4, Tensor4};

pub const PSET_MAGIC: &[u8; 4] = b"PSET";
pub const PSET_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Positive : negative patch counts of the reference dataset.
pub const REFERENCE_POSITIVES: usize = 21_773;
pub const REFERENCE_NEGATIVES: usize = 64_381;

/// Smallest patch side the synthetic generator accepts; below this five
/// separated blobs of radius up to 4 do not reliably fit.
pub const MIN_SYNTHETIC_SIDE: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("patch set format error at offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("patch set truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid patch set: {0}")]
    Invalid(String),
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchMeta {
    pub name: String,
    pub seed: Option<u64>,
    pub source: String,
}

/// Patches as raw u8 pixels with 0/1 labels. Pixels are scaled to [0, 1]
/// when batched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    shape: InputShape,
    labels: Vec<u8>,
    pixels: Vec<u8>,
    pub meta: PatchMeta,
}

impl PatchSet {
    pub fn new(shape: InputShape, labels: Vec<u8>, pixels: Vec<u8>, meta: PatchMeta) -> Result<Self, DataError> {
        if shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(DataError::Invalid(format!("patch shape {shape} has a zero dimension")));
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(DataError::Invalid(format!(
                "{} labels of shape {shape} need {} pixels, got {}",
                labels.len(),
                labels.len() * shape.len(),
                pixels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(DataError::Invalid(format!(
                "label {} at index {i} is not 0 or 1",
                labels[i]
            )));
        }
        Ok(Self {
            shape,
            labels,
            pixels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn patch(&self, i: usize) -> &[u8] {
        let len = self.shape.len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Normalized pixels and labels of the given patches, in order.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let scale = T::from_f64_lossy(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend(self.patch(i).iter().map(|&p| T::from_f64_lossy(f64::from(p)) * scale));
        }
        let shape = Shape4::new(indices.len(), self.shape.c, self.shape.h, self.shape.w);
        let tensor = Tensor4::from_vec(shape, data).expect("batch of at least one patch");
        (tensor, indices.iter().map(|&i| usize::from(self.labels[i])).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len() + self.pixels.len());
        out.extend_from_slice(PSET_MAGIC);
        for v in [
            PSET_VERSION,
            self.len() as u32,
            self.shape.c as u32,
            self.shape.h as u32,
            self.shape.w as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != PSET_MAGIC {
            return Err(DataError::Format {
                offset: 0,
                message: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let version = word(0) as u32;
        if version != PSET_VERSION {
            return Err(DataError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let (n, c, h, w) = (word(1), word(2), word(3), word(4));
        for (i, d) in [(2, c), (3, h), (4, w)] {
            if d == 0 {
                return Err(DataError::Format {
                    offset: 4 + 4 * i,
                    message: "zero dimension".into(),
                });
            }
        }
        let shape = InputShape::new(c, h, w);
        let expected = n
            .checked_mul(shape.len())
            .and_then(|p| p.checked_add(n + HEADER_LEN))
            .ok_or_else(|| DataError::Format {
                offset: 8,
                message: "declared size overflows".into(),
            })?;
        if bytes.len() != expected {
            if bytes.len() < expected {
                return Err(DataError::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            return Err(DataError::Format {
                offset: expected,
                message: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        let labels = bytes[HEADER_LEN..HEADER_LEN + n].to_vec();
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(DataError::Format {
                offset: HEADER_LEN + i,
                message: format!("label {} is not 0 or 1", labels[i]),
            });
        }
        let pixels = bytes[HEADER_LEN + n..].to_vec();
        Self::new(shape, labels, pixels, PatchMeta::default())
    }
}

pub fn save_patchset(set: &PatchSet, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, set.encode())?;
    Ok(())
}

pub fn load_patchset(path: &Path) -> Result<PatchSet, DataError> {
    let mut set = PatchSet::decode(&std::fs::read(path)?)?;
    set.meta = PatchMeta {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: None,
        source: path.display().to_string(),
    };
    Ok(set)
}

/// `(positives, negatives)` summing to `total` in the reference class ratio.
pub fn reference_counts(total: usize) -> (usize, usize) {
    let pos = (total as f64 * REFERENCE_POSITIVES as f64 / (REFERENCE_POSITIVES + REFERENCE_NEGATIVES) as f64).round()
        as usize;
    (pos, total - pos)
}

const BACKGROUND: [f64; 3] = [228.0, 196.0, 218.0];
const BLOB: [f64; 3] = [72.0, 44.0, 112.0];

/// Mean intensity below which a pixel counts as part of a blob.
pub const DARK_THRESHOLD: f64 = 128.0;

/// Seeded synthetic patches over a textured pink background. Positives
/// carry 5–8 dark disks of radius 2–4, negatives 0 or 1; disks never touch.
pub fn generate_synthetic(n_pos: usize, n_neg: usize, h: usize, w: usize, seed: u64) -> Result<PatchSet, DataError> {
    if h < MIN_SYNTHETIC_SIDE || w < MIN_SYNTHETIC_SIDE {
        return Err(DataError::Invalid(format!(
            "synthetic patches need sides of at least {MIN_SYNTHETIC_SIDE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = std::iter::repeat_n(1, n_pos)
        .chain(std::iter::repeat_n(0, n_neg))
        .collect();
    labels.shuffle(&mut rng);
    let shape = InputShape::new(3, h, w);
    let mut pixels = Vec::with_capacity(labels.len() * shape.len());
    for &label in &labels {
        let blobs = if label == 1 {
            rng.gen_range(5..=8)
        } else {
            rng.gen_range(0..=1)
        };
        pixels.extend(render_patch(h, w, blobs, &mut rng));
    }
    PatchSet::new(
        shape,
        labels,
        pixels,
        PatchMeta {
            name: format!("synthetic-{seed}"),
            seed: Some(seed),
            source: "synthetic".into(),
        },
    )
}

fn place_blobs<R: Rng>(h: usize, w: usize, count: usize, rng: &mut R) -> Vec<(f64, f64, f64)> {
    'restart: loop {
        let mut blobs: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..200 {
                let r = rng.gen_range(2..=4) as f64;
                let y = rng.gen_range(r..h as f64 - 1.0 - r);
                let x = rng.gen_range(r..w as f64 - 1.0 - r);
                // at least 3 px between disk edges keeps them separate components
                if blobs
                    .iter()
                    .all(|&(by, bx, br)| ((by - y).powi(2) + (bx - x).powi(2)).sqrt() >= br + r + 3.0)
                {
                    blobs.push((y, x, r));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return blobs;
    }
}

fn render_patch<R: Rng>(h: usize, w: usize, blobs: usize, rng: &mut R) -> Vec<u8> {
    let centers = place_blobs(h, w, blobs, rng);
    let (fy, fx, phase) = (
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = centers
                .iter()
                .any(|&(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r);
            let wave = 14.0 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in 0..3 {
                let v = if inside {
                    BLOB[c] + rng.gen_range(-12.0..12.0)
                } else {
                    BACKGROUND[c] + wave + rng.gen_range(-12.0..12.0)
                };
                out[(c * h + y) * w + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Indices of a shared patch set.
#[derive(Debug, Clone)]
pub struct Subset {
    set: Arc<PatchSet>,
    indices: Arc<[usize]>,
}

impl Subset {
    pub fn new(set: Arc<PatchSet>, indices: Vec<usize>) -> Self {
        Self {
            set,
            indices: indices.into(),
        }
    }

    pub fn all(set: Arc<PatchSet>) -> Self {
        let n = set.len();
        Self::new(set, (0..n).collect())
    }

    pub fn set(&self) -> &PatchSet {
        &self.set
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.indices.iter().filter(|&&i| self.set.labels()[i] == 1).count()
    }

    /// Batch of the subset members at `positions` (positions into this subset).
    pub fn batch<T: Scalar>(&self, positions: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let idx: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.set.batch(&idx)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices
            .iter()
            .map(|&i| usize::from(self.set.labels()[i]))
            .collect()
    }
    /// The members as a standalone set, in subset order.
    pub fn to_patchset(&self, name: &str) -> PatchSet {
        let labels = self.indices.iter().map(|&i| self.set.labels()[i]).collect();
        let pixels = self
            .indices
            .iter()
            .flat_map(|&i| self.set.patch(i).iter().copied())
            .collect();
        let meta = PatchMeta {
            name: name.to_string(),
            seed: self.set.meta.seed,
            source: format!("subset of {}", self.set.meta.name),
        };
        PatchSet::new(self.set.shape(), labels, pixels, meta).expect("subset of a valid set is valid")
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Subset,
    pub val: Subset,
    pub test: Subset,
}

/// Per-class proportional allocation by largest remainder, after a seeded
/// shuffle within each class. Every split with a nonzero fraction receives
/// at least one patch of each class.
pub fn stratified_split(set: Arc<PatchSet>, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.labels()[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < active {
            return Err(DataError::Split(format!(
                "class {class} has {} patches, fewer than the {active} splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &fractions);
        let mut start = 0;
        for (part, n) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    let [train, val, test] = parts.map(|mut p| {
        p.sort_unstable();
        Subset::new(set.clone(), p)
    });
    Ok(Splits { train, val, test })
}

fn allocate(m: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    // largest fractional part first; ties to the earlier split
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = m - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_declares_dimensions() {
        let set = PatchSet::new(
            InputShape::new(3, 100, 100),
            vec![0; 10],
            vec![7; 300_000],
            PatchMeta::default(),
        )
        .unwrap();
        let bytes = set.encode();
        assert_eq!(&bytes[..4], b"PSET");
        let words: Vec<u32> = (0..5)
            .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 10, 3, 100, 100]);
        assert_eq!(bytes.len(), 24 + 10 + 300_000);
    }

    #[test]
    fn truncation_names_both_lengths() {
        let set = generate_synthetic(2, 2, 24, 24, 1).unwrap();
        let bytes = set.encode();
        let err = PatchSet::decode(&bytes[..bytes.len() - 5]).unwrap_err();
        let full = bytes.len();
        assert_eq!(
            err.to_string(),
            format!("patch set truncated: expected {full} bytes, got {}", full - 5)
        );
    }

    #[test]
    fn bad_magic_and_version_have_offsets() {
        let mut bytes = generate_synthetic(1, 1, 24, 24, 1).unwrap().encode();
        bytes[4] = 9;
        assert!(matches!(
            PatchSet::decode(&bytes),
            Err(DataError::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            PatchSet::decode(&bytes),
            Err(DataError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn bad_label_byte_is_located() {
        let mut bytes = generate_synthetic(1, 2, 24, 24, 1).unwrap().encode();
        bytes[24 + 2] = 3;
        assert!(matches!(
            PatchSet::decode(&bytes),
            Err(DataError::Format { offset: 26, .. })
        ));
    }

    #[test]
    fn reference_ratio() {
        let (p, n) = reference_counts(4000);
        assert_eq!(p + n, 4000);
        assert!((n as f64 / p as f64 - 64_381.0 / 21_773.0).abs() < 0.01);
    }

    #[test]
    fn allocation_is_within_one_of_exact() {
        for m in 20..200 {
            for f in [
                [0.8, 0.1, 0.1],
                [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                [0.5, 0.5, 0.0],
                [0.9, 0.05, 0.05],
            ] {
                let c = allocate(m, &f);
                assert_eq!(c.iter().sum::<usize>(), m);
                for i in 0..3 {
                    assert!((c[i] as f64 - f[i] * m as f64).abs() <= 1.0, "{m} {f:?} {c:?}");
                    assert_eq!(c[i] == 0, f[i] == 0.0);
                }
            }
        }
    }

    #[test]
    fn small_sides_rejected() {
        assert!(generate_synthetic(1, 1, 16, 30, 0).is_err());
    }
}
