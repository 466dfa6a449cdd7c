//! Datasets: MNIST ingestion for the 3-vs-6 task and the synthetic
//! regression set recorded from a random generator circuit.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{bind, build_hea, Topology};
use crate::error::{Error, Result};
use crate::qsim::{expectation, Observable};
use crate::rng;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Side of the downsampled image.
pub const SMALL: usize = 8;
const MNIST_SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Mnist {
        images: String,
        labels: String,
    },
    Synthetic {
        seed: u64,
        n_qubits: usize,
        depth: usize,
        topology: Topology,
        theta_star: Vec<f64>,
        /// Factor applied to the raw expectations.
        scale: f64,
    },
    Csv {
        path: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_dim: usize, provenance: Provenance) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.features.len() != feature_dim) {
            return Err(Error::Data(format!(
                "sample with {} features in a {feature_dim}-feature dataset",
                s.features.len()
            )));
        }
        Ok(Self {
            samples,
            feature_dim,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            feature_dim: self.feature_dim,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes `f0,...,f{d-1},label` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.feature_dim {
            let _ = write!(out, "f{j},");
        }
        out.push_str("label\n");
        for s in &self.samples {
            for v in &s.features {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{:.16e}", s.label);
        }
        out
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut ds = Self::from_csv(&text)?;
        ds.provenance = Provenance::Csv {
            path: path.display().to_string(),
        };
        Ok(ds)
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.len().saturating_sub(1);
        let ok = cols.last() == Some(&"label")
            && cols[..d].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
        if !ok {
            return Err(Error::Format(format!("unexpected CSV header `{header}`")));
        }
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
            if vals.len() != d + 1 {
                return Err(Error::Format(format!(
                    "line {} has {} fields, expected {}",
                    n + 2,
                    vals.len(),
                    d + 1
                )));
            }
            samples.push(Sample {
                label: vals[d],
                features: vals[..d].to_vec(),
            });
        }
        Dataset::new(samples, d, Provenance::Csv { path: String::new() })
    }
}

/// Raw images as read from IDX files, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("image file magic {magic}, expected {IMAGES_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * size {
        return Err(Error::Format(format!(
            "image file holds {} bytes, header promises {}",
            body.len(),
            n * size
        )));
    }
    let images = body
        .chunks_exact(size.max(1))
        .take(n)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("label file magic {magic}, expected {LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "label file holds {} labels, header promises {n}",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<RawImages> {
    let (rows, cols, imgs) = parse_idx_images(&std::fs::read(images)?)?;
    let lbls = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.len() != lbls.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            imgs.len(),
            lbls.len()
        )));
    }
    Ok(RawImages {
        rows,
        cols,
        images: imgs,
        labels: lbls,
    })
}

/// Overlap of `[a0, a1)` and `[b0, b1)`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Area-averages a 28×28 image onto 8×8; each output pixel is the mean over
/// a 3.5×3.5 window of source pixels, fractional pixels weighted by area.
pub fn downsample_8x8(image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != MNIST_SIDE * MNIST_SIDE {
        return Err(Error::Shape(format!(
            "expected a 28x28 image, got {} pixels",
            image.len()
        )));
    }
    let w = MNIST_SIDE as f64 / SMALL as f64;
    // weights[o][s]: overlap of output cell o with source pixel s along one axis
    let weights: Vec<Vec<(usize, f64)>> = (0..SMALL)
        .map(|o| {
            let (lo, hi) = (o as f64 * w, (o + 1) as f64 * w);
            (lo.floor() as usize..(hi.ceil() as usize).min(MNIST_SIDE))
                .map(|s| (s, overlap(lo, hi, s as f64, s as f64 + 1.0)))
                .filter(|&(_, v)| v > 0.0)
                .collect()
        })
        .collect();
    let area = w * w;
    let mut out = vec![0.0; SMALL * SMALL];
    for (i, wr) in weights.iter().enumerate() {
        for (j, wc) in weights.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, a) in wr {
                for &(c, b) in wc {
                    acc += a * b * image[r * MNIST_SIDE + c];
                }
            }
            out[i * SMALL + j] = acc / area;
        }
    }
    Ok(out)
}

/// Keeps digits 3 and 6 (relabelled 0 and 1), downsampling 28×28 input.
pub fn filter_3v6(raw: &RawImages, provenance: Provenance) -> Result<Dataset> {
    let shrink = match (raw.rows, raw.cols) {
        (MNIST_SIDE, MNIST_SIDE) => true,
        (SMALL, SMALL) => false,
        (r, c) => return Err(Error::Shape(format!("cannot reduce {r}x{c} images to 8x8"))),
    };
    let mut samples = Vec::new();
    for (img, &label) in raw.images.iter().zip(&raw.labels) {
        let target = match label {
            3 => 0.0,
            6 => 1.0,
            _ => continue,
        };
        let features = if shrink { downsample_8x8(img)? } else { img.clone() };
        samples.push(Sample {
            features,
            label: target,
        });
    }
    Dataset::new(samples, SMALL * SMALL, provenance)
}

/// Loads IDX files and applies [`filter_3v6`].
pub fn load_mnist_3v6(images: &Path, labels: &Path) -> Result<Dataset> {
    let raw = load_mnist_idx(images, labels)?;
    filter_3v6(
        &raw,
        Provenance::Mnist {
            images: images.display().to_string(),
            labels: labels.display().to_string(),
        },
    )
}

/// Augmentation magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_shear: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_shear: 0.2,
        }
    }
}

/// Random rotation and shear of an 8×8 image; the label is kept.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let angle = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let shear = rng.random_range(-cfg.max_shear..=cfg.max_shear);
    Sample {
        features: augment_with(&sample.features, angle, shear),
        label: sample.label,
    }
}

/// Applies `rotation(angle) · shear_x(shear)` about the image centre with
/// bilinear sampling, zero outside the image, clamped to `[0, 1]`.
///
/// Coordinates are (column, row) with rows increasing downwards.
pub fn augment_with(image: &[f64], angle: f64, shear: f64) -> Vec<f64> {
    let n = SMALL;
    debug_assert_eq!(image.len(), n * n);
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    // forward A = R·Sh with Sh = [[1, shear], [0, 1]]; inverse = Sh⁻¹·Rᵀ
    let inv = |x: f64, y: f64| {
        let (rx, ry) = (co * x + s * y, -s * x + co * y);
        (rx - shear * ry, ry)
    };
    let px = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= n as isize || col >= n as isize {
            0.0
        } else {
            image[r as usize * n + col as usize]
        }
    };
    let mut out = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (sx, sy) = inv(col as f64 - c, row as f64 - c);
            let (sx, sy) = (sx + c, sy + c);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1))
                + fy * ((1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
            out[row * n + col] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Balanced train/validation split: half of each set from each class.
pub fn balanced_split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in ds.samples.iter().enumerate() {
        match s.label {
            l if l == 0.0 => by_class[0].push(i),
            l if l == 1.0 => by_class[1].push(i),
            l => return Err(Error::Data(format!("label {l} is not binary"))),
        }
    }
    let (tr, va) = (n_train / 2, n_val / 2);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        let want_t = if c == 0 { tr } else { n_train - tr };
        let want_v = if c == 0 { va } else { n_val - va };
        if idx.len() < want_t + want_v {
            return Err(Error::Data(format!(
                "class {c} has {} samples, split needs {}",
                idx.len(),
                want_t + want_v
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[0x5917, c as u64]));
        train.extend_from_slice(&idx[..want_t]);
        val.extend_from_slice(&idx[want_t..want_t + want_v]);
    }
    train.shuffle(&mut rng::stream(seed, &[0x5917, 2]));
    val.shuffle(&mut rng::stream(seed, &[0x5917, 3]));
    Ok((ds.select(&train), ds.select(&val)))
}

/// Synthetic regression data labelled by a random generator circuit.
pub fn gen_synthetic(
    n_qubits: usize,
    depth: usize,
    topology: Topology,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_qubits > crate::qsim::MAX_QUBITS {
        return Err(Error::Size(format!("{n_qubits} qubits exceed the simulator limit")));
    }
    let mut seed = seed;
    loop {
        let (samples, theta_star, mean_sq) = synthetic_raw(n_qubits, depth, topology, n_samples, seed)?;
        if mean_sq < 1e-12 {
            log::warn!("synthetic labels degenerate for seed {seed}; retrying with {}", seed + 1);
            seed += 1;
            continue;
        }
        let scale = 1.0 / mean_sq.sqrt();
        let samples = samples
            .into_iter()
            .map(|s| Sample {
                label: s.label * scale,
                features: s.features,
            })
            .collect();
        return Dataset::new(
            samples,
            n_qubits,
            Provenance::Synthetic {
                seed,
                n_qubits,
                depth,
                topology,
                theta_star,
                scale,
            },
        );
    }
}

/// Unnormalised samples, the generator parameters and `mean(y²)`.
pub(crate) fn synthetic_raw(
    n_qubits: usize,
    depth: usize,
    topology: Topology,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<f64>, f64)> {
    let circuit = build_hea(n_qubits, depth, topology)?;
    let obs = Observable::pauli_z(n_qubits, 0)?;
    let mut r = rng::stream(seed, &[0x7e7a]);
    let theta_star: Vec<f64> = (0..circuit.n_theta())
        .map(|_| r.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<Sample> {
            let mut r = rng::stream(seed, &[0xda7a, i as u64]);
            let x: Vec<f64> = (0..n_qubits)
                .map(|_| r.random_range(0.0..2.0 * std::f64::consts::PI))
                .collect();
            let y = expectation(&bind(&circuit, &x, &theta_star, &[])?.run()?, &obs)?;
            Ok(Sample { features: x, label: y })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_sq = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.label * s.label).sum::<f64>() / samples.len() as f64
    };
    Ok((samples, theta_star, mean_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn idx_parsing() {
        let bytes = idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        let (r, c, imgs) = parse_idx_images(&bytes).unwrap();
        assert_eq!((r, c, imgs.len()), (2, 2, 2));
        assert_eq!(imgs[0], vec![0.0, 1.0, 0.2, 0.4]);
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&bytes[..20]), Err(Error::Format(_))));
        let mut labels = LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[3, 6, 7]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 6, 7]);
        assert!(parse_idx_labels(&labels[..10]).is_err());
    }

    #[test]
    fn downsample_examples() {
        let c = vec![0.37; 784];
        assert!(downsample_8x8(&c).unwrap().iter().all(|v| (v - 0.37).abs() < 1e-12));
        assert!(downsample_8x8(&[0.0; 784]).unwrap().iter().all(|&v| v == 0.0));
        let half: Vec<f64> = (0..784).map(|i| if i % 28 < 14 { 1.0 } else { 0.0 }).collect();
        let d = downsample_8x8(&half).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if c < 4 { 1.0 } else { 0.0 };
                assert!((d[r * 8 + c] - want).abs() < 1e-12);
            }
        }
        assert!(matches!(downsample_8x8(&[0.0; 64]), Err(Error::Shape(_))));
    }

    #[test]
    fn filter_examples() {
        let raw = RawImages {
            rows: 8,
            cols: 8,
            images: vec![vec![0.1; 64], vec![0.2; 64], vec![0.3; 64]],
            labels: vec![3, 6, 7],
        };
        let ds = filter_3v6(&raw, Provenance::Csv { path: String::new() }).unwrap();
        assert_eq!(ds.labels(), vec![0.0, 1.0]);
        let none = RawImages {
            labels: vec![1, 2, 7],
            ..raw
        };
        assert!(filter_3v6(&none, Provenance::Csv { path: String::new() }).unwrap().is_empty());
    }

    #[test]
    fn augment_identity_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let same = augment_with(&img, 0.0, 0.0);
        assert!(img.iter().zip(&same).all(|(a, b)| (a - b).abs() < 1e-12));
        let s = Sample {
            features: img,
            label: 1.0,
        };
        for _ in 0..50 {
            let a = augment(&s, &mut rng, &AugmentConfig::default());
            assert_eq!(a.label, 1.0);
            assert!(a.features.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn centroid(img: &[f64]) -> (f64, f64) {
        let total: f64 = img.iter().sum();
        let (mut x, mut y) = (0.0, 0.0);
        for (i, v) in img.iter().enumerate() {
            x += v * (i % 8) as f64;
            y += v * (i / 8) as f64;
        }
        (x / total, y / total)
    }

    #[test]
    fn rotation_moves_impulse_along_arc() {
        let mut img = vec![0.0; 64];
        let (row, col) = (1usize, 5usize);
        img[row * 8 + col] = 1.0;
        let angle = 15f64.to_radians();
        let out = augment_with(&img, angle, 0.0);
        let (dx, dy) = (col as f64 - 3.5, row as f64 - 3.5);
        let want = (3.5 + angle.cos() * dx - angle.sin() * dy, 3.5 + angle.sin() * dx + angle.cos() * dy);
        let got = centroid(&out);
        let err = ((got.0 - want.0).powi(2) + (got.1 - want.1).powi(2)).sqrt();
        assert!(err < 0.5, "{got:?} vs {want:?}");
        let arc = 2.0 * (dx * dx + dy * dy).sqrt() * (angle / 2.0).sin();
        let moved = ((got.0 - col as f64).powi(2) + (got.1 - row as f64).powi(2)).sqrt();
        assert!((moved - arc).abs() < 0.5);
    }

    #[test]
    fn synthetic_examples() {
        let ds = gen_synthetic(4, 2, Topology::Ring, 200, 9).unwrap();
        let ms: f64 = ds.samples.iter().map(|s| s.label * s.label).sum::<f64>() / 200.0;
        assert!((ms - 1.0).abs() < 1e-12);
        let (raw, _, _) = synthetic_raw(4, 2, Topology::Ring, 200, 9).unwrap();
        assert!(raw.iter().all(|s| s.label.abs() <= 1.0 + 1e-12));
        let again = gen_synthetic(4, 2, Topology::Ring, 200, 9).unwrap();
        assert_eq!(ds.to_csv(), again.to_csv());
        assert!(ds
            .samples
            .iter()
            .flat_map(|s| &s.features)
            .all(|v| (0.0..2.0 * std::f64::consts::PI).contains(v)));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = gen_synthetic(3, 1, Topology::Line, 20, 1).unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert!(Dataset::from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn split_is_balanced() {
        let samples = (0..100)
            .map(|i| Sample {
                features: vec![i as f64],
                label: (i % 2) as f64,
            })
            .collect();
        let ds = Dataset::new(samples, 1, Provenance::Csv { path: String::new() }).unwrap();
        let (t, v) = balanced_split(&ds, 40, 20, 3).unwrap();
        assert_eq!(t.labels().iter().filter(|&&l| l == 1.0).count(), 20);
        assert_eq!(v.labels().iter().filter(|&&l| l == 0.0).count(), 10);
        assert!(balanced_split(&ds, 90, 20, 3).is_err());
    }
}
