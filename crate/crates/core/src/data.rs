//! Synthetic lesion volumes, the `vseg` volume file format and dataset splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, LabelVolume, Tensor};

/// One image/label pair. Image intensities are stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub case_id: String,
    /// `[channels, D, H, W]`.
    pub image: Tensor,
    pub label: LabelVolume,
    /// Voxel spacing `(sz, sy, sx)` in millimetres.
    pub spacing: (f64, f64, f64),
}

impl VolumeSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.label.dims
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (d, h, w) = self.label.dims;
        let s = self.image.shape();
        if s.len() != 4 || s[1..] != [d, h, w] {
            return Err(Error::Data(format!(
                "{}: image shape {s:?} does not match label dims {:?}",
                self.case_id, self.label.dims
            )));
        }
        if !self.image.is_finite() {
            return Err(Error::Data(format!("{}: image has non-finite values", self.case_id)));
        }
        if let Some(&l) = self.label.data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "{}: label {l} outside [0, {num_classes})",
                self.case_id
            )));
        }
        Ok(())
    }
}

/// Parameters of the synthetic lesion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Volume extent `(D, H, W)`.
    pub size: (usize, usize, usize),
    /// Inclusive range for the number of lesions.
    pub lesions: (usize, usize),
    /// Semi-axis range in voxels.
    pub radius: (f64, f64),
    pub background: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub spacing: (f64, f64, f64),
    pub num_cases: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: (32, 32, 32),
            lesions: (1, 3),
            radius: (3.0, 6.0),
            background: 0.0,
            contrast: 1.0,
            noise_sigma: 0.1,
            blur_sigma: 0.5,
            spacing: (1.0, 1.0, 1.0),
            num_cases: 60,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.size;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("synthetic size {:?} has a zero extent", self.size)));
        }
        if self.radius.0 < 1.0 || self.radius.1 < self.radius.0 {
            return Err(Error::Config(format!(
                "radius range {:?} must satisfy 1 <= min <= max",
                self.radius
            )));
        }
        if self.lesions.1 < self.lesions.0 {
            return Err(Error::Config(format!("lesion count range {:?} is empty", self.lesions)));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Config("noise and blur sigmas must be non-negative".into()));
        }
        let (a, b, c) = self.spacing;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::Config(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }
}

/// An axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
}

impl Ellipsoid {
    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let q = |p: f64, c: f64, r: f64| ((p - c) / r).powi(2);
        q(z, self.center.0, self.radii.0) + q(y, self.center.1, self.radii.1) + q(x, self.center.2, self.radii.2)
            <= 1.0
    }
}

/// Draws the lesion geometry for `seed`.
pub fn sample_lesions(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let n = rng.gen_range(spec.lesions.0..=spec.lesions.1);
    let dims = [spec.size.0, spec.size.1, spec.size.2];
    (0..n)
        .map(|_| {
            let mut r = [0.0; 3];
            let mut c = [0.0; 3];
            for a in 0..3 {
                r[a] = if spec.radius.1 > spec.radius.0 {
                    rng.gen_range(spec.radius.0..=spec.radius.1)
                } else {
                    spec.radius.0
                };
                // Keep the centre inside the volume, away from the border when possible.
                let ext = dims[a] as f64 - 1.0;
                let lo = r[a].min(ext / 2.0);
                let hi = (ext - r[a]).max(lo);
                c[a] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            }
            Ellipsoid {
                center: (c[0], c[1], c[2]),
                radii: (r[0], r[1], r[2]),
            }
        })
        .collect()
}

/// Union-of-ellipsoids label map evaluated at voxel centres.
pub fn lesion_mask(size: (usize, usize, usize), lesions: &[Ellipsoid]) -> Vec<u8> {
    let (d, h, w) = size;
    let mut out = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if lesions.iter().any(|e| e.contains(z as f64, y as f64, x as f64)) {
                    out[(z * h + y) * w + x] = 1;
                }
            }
        }
    }
    out
}

/// `image = background + contrast·mask`, Gaussian-blurred, plus white noise.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesions = sample_lesions(spec, &mut rng);
    let label = lesion_mask(spec.size, &lesions);
    let (d, h, w) = spec.size;
    let mut img: Vec<f64> = label
        .iter()
        .map(|&l| spec.background + spec.contrast * l as f64)
        .collect();
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut img, spec.size, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = *v as f32 as f64;
    }
    Ok(VolumeSample {
        case_id: format!("case_{seed:06}"),
        image: Tensor::new(&[1, d, h, w], img)?,
        label: LabelVolume::new(spec.size, label)?,
        spacing: spec.spacing,
    })
}

/// Separable Gaussian blur truncated at 3σ with edge replication.
pub fn gaussian_blur(data: &mut [f64], dims: (usize, usize, usize), sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (d, h, w) = dims;
    let strides = [h * w, w, 1];
    let extents = [d, h, w];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = extents[axis];
        let step = strides[axis];
        for start in 0..d * h * w {
            // Only visit the first element of each line along `axis`.
            let coord = (start / step) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| data[start + i * step]));
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let p = (i as isize + j as isize - radius).clamp(0, n as isize - 1) as usize;
                    acc += kv * line[p];
                }
                data[start + i * step] = acc;
            }
        }
    }
}

const VSEG_MAGIC: &[u8; 4] = b"VSEG";
pub const VSEG_VERSION: u32 = 1;

/// JSON header of a `vseg` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsegHeader {
    pub version: u32,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub dtype: DType,
    pub channels: usize,
    pub case_id: String,
}

/// Serializes a sample: magic `VSEG`, u32 LE header length, JSON header,
/// little-endian f32 image (channel-major), then one u8 label per voxel.
pub fn encode_vseg(sample: &VolumeSample) -> Result<Vec<u8>> {
    let header = VsegHeader {
        version: VSEG_VERSION,
        dims: sample.dims(),
        spacing: sample.spacing,
        dtype: DType::Real32,
        channels: sample.channels(),
        case_id: sample.case_id.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + sample.image.numel() * 4 + sample.label.len());
    out.extend_from_slice(VSEG_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in sample.image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&sample.label.data);
    Ok(out)
}

pub fn decode_vseg(bytes: &[u8]) -> Result<VolumeSample> {
    let bad = |m: &str| Error::Data(format!("malformed vseg: {m}"));
    if bytes.len() < 8 || &bytes[..4] != VSEG_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: VsegHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.version != VSEG_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let width = match header.dtype {
        DType::Real32 => 4,
        DType::Real64 => 8,
        other => return Err(bad(&format!("unsupported image dtype {other:?}"))),
    };
    let (d, h, w) = header.dims;
    let voxels = d * h * w;
    let n = header.channels * voxels;
    let start = 8 + hlen;
    let expected = start + n * width + voxels;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let img_bytes = &bytes[start..start + n * width];
    let image: Vec<f64> = if width == 4 {
        img_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        img_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let label = bytes[start + n * width..].to_vec();
    Ok(VolumeSample {
        case_id: header.case_id,
        image: Tensor::new(&[header.channels, d, h, w], image)?,
        label: LabelVolume::new(header.dims, label)?,
        spacing: header.spacing,
    })
}

pub fn write_vseg(path: &Path, sample: &VolumeSample) -> Result<()> {
    fs::write(path, encode_vseg(sample)?).map_err(|e| Error::io(path, e))
}

pub fn read_vseg(path: &Path) -> Result<VolumeSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vseg(&bytes)
}

/// Disjoint train / validation / test case indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Random 70/10/20 assignment; the test share takes the rounding remainder.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }
}

/// An in-memory dataset plus its split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<VolumeSample>,
    pub split: Split,
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub cases: Vec<String>,
    pub split: Split,
}

impl Dataset {
    /// `spec.num_cases` volumes; case `i` uses seed `seed·1_000_003 + i`.
    pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        let cases = (0..spec.num_cases)
            .map(|i| generate_synthetic(spec, case_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: Split::random(cases.len(), seed),
            cases,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&VolumeSample> {
        idx.iter().map(|&i| &self.cases[i]).collect()
    }

    /// Writes one `vseg` file per case and a `manifest.json`.
    pub fn save(&self, dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &self.cases {
            write_vseg(&dir.join(format!("{}.vseg", c.case_id)), c)?;
        }
        let manifest = Manifest {
            version: VSEG_VERSION,
            spec: spec.clone(),
            seed,
            cases: self.cases.iter().map(|c| c.case_id.clone()).collect(),
            split: self.split.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let cases = manifest
            .cases
            .iter()
            .map(|id| read_vseg(&dir.join(format!("{id}.vseg"))))
            .collect::<Result<Vec<_>>>()?;
        let n = cases.len();
        let s = &manifest.split;
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(Error::Data(format!("{}: split is not a partition of the cases", path.display())));
        }
        Ok((
            Self {
                cases,
                split: manifest.split.clone(),
            },
            manifest,
        ))
    }
}

pub fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> SyntheticSpec {
        SyntheticSpec {
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn clean_construction_is_exact() {
        let s = generate_synthetic(&clean(), 3).unwrap();
        for (v, &l) in s.image.data().iter().zip(&s.label.data) {
            assert_eq!(*v, l as f64);
        }
        assert!(s.label.data.iter().any(|&l| l == 1));
    }

    #[test]
    fn label_equals_analytic_union() {
        let spec = SyntheticSpec::default();
        let s = generate_synthetic(&spec, 11).unwrap();
        let lesions = sample_lesions(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(s.label.data, lesion_mask(spec.size, &lesions));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec, 4).unwrap(), generate_synthetic(&spec, 4).unwrap());
        assert_ne!(generate_synthetic(&spec, 4).unwrap().image, generate_synthetic(&spec, 5).unwrap().image);
    }

    #[test]
    fn sphere_volume_matches_analytic() {
        let spec = SyntheticSpec {
            lesions: (1, 1),
            radius: (4.0, 4.0),
            ..clean()
        };
        let s = generate_synthetic(&spec, 1).unwrap();
        let count = s.label.data.iter().filter(|&&l| l == 1).count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 64.0;
        assert!((count - analytic).abs() / analytic < 0.10, "{count} vs {analytic}");
        assert!((count / 32768.0 - 0.0082).abs() < 0.001);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let mut v = vec![2.5; 5 * 6 * 7];
        gaussian_blur(&mut v, (5, 6, 7), 1.2);
        assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-12));
        let mut p = vec![0.0; 9 * 9 * 9];
        p[4 * 81 + 4 * 9 + 4] = 1.0;
        gaussian_blur(&mut p, (9, 9, 9), 0.8);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vseg_roundtrip_and_rejection() {
        let s = generate_synthetic(&SyntheticSpec::default(), 2).unwrap();
        let bytes = encode_vseg(&s).unwrap();
        assert_eq!(decode_vseg(&bytes).unwrap(), s);
        assert!(decode_vseg(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_vseg(&bad).is_err());
    }

    #[test]
    fn split_partitions_seventy_ten_twenty() {
        let s = Split::random(60, 9);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (42, 6, 12));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(s, Split::random(60, 9));
    }

    #[test]
    fn dataset_save_load_roundtrip() {
        let spec = SyntheticSpec {
            size: (8, 8, 8),
            radius: (1.0, 2.0),
            num_cases: 5,
            ..SyntheticSpec::default()
        };
        let ds = Dataset::synthetic(&spec, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &spec, 7).unwrap();
        let (back, manifest) = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.cases, ds.cases);
        assert_eq!(manifest.spec, spec);
        assert_eq!(back.split, ds.split);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            radius: (0.5, 2.0),
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::Config(_))));
    }
}
