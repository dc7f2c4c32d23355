//! Overlap and boundary-distance metrics for binary segmentation masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Foreground voxels of a `(D, H, W)` volume with physical voxel spacing
/// `(sz, sy, sx)` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: (usize, usize, usize),
    words: Vec<u64>,
    spacing: (f64, f64, f64),
}

impl BinaryMask {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Self> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !(ok(spacing.0) && ok(spacing.1) && ok(spacing.2)) {
            return Err(Error::Usage(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = dims.0 * dims.1 * dims.2;
        Ok(Self {
            dims,
            words: vec![0; n.div_ceil(64)],
            spacing,
        })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut m = Self::new(dims, spacing)?;
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    if f(z, y, x) {
                        m.set(m.index(z, y, x), true);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Voxels of `labels` equal to `class`.
    pub fn from_labels(
        labels: &[u8],
        dims: (usize, usize, usize),
        class: u8,
        spacing: (f64, f64, f64),
    ) -> Result<Self> {
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Usage(format!(
                "label buffer has {} voxels, dims {dims:?} need {}",
                labels.len(),
                dims.0 * dims.1 * dims.2
            )));
        }
        let mut m = Self::new(dims, spacing)?;
        for (i, &l) in labels.iter().enumerate() {
            if l == class {
                m.set(i, true);
            }
        }
        Ok(m)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn with_spacing(&self, spacing: (f64, f64, f64)) -> Result<Self> {
        let mut m = Self::new(self.dims, spacing)?;
        m.words.clone_from(&self.words);
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|&w| w != 0)
    }

    /// Foreground voxels with at least one six-connected background
    /// neighbour; voxels outside the volume count as background.
    pub fn surface(&self) -> Vec<(usize, usize, usize)> {
        let (d, h, w) = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.get(self.index(z, y, x)) {
                        continue;
                    }
                    let bg = |dz: isize, dy: isize, dx: isize| {
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                            return true;
                        }
                        !self.get(self.index(nz as usize, ny as usize, nx as usize))
                    };
                    if bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1) {
                        out.push((z, y, x));
                    }
                }
            }
        }
        out
    }

    /// Length of the volume's physical diagonal.
    pub fn diagonal(&self) -> f64 {
        let (d, h, w) = self.dims;
        let (sz, sy, sx) = self.spacing;
        ((d as f64 * sz).powi(2) + (h as f64 * sy).powi(2) + (w as f64 * sx).powi(2)).sqrt()
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Usage(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let inter: usize = a.words.iter().zip(&b.words).map(|(x, y)| (x & y).count_ones() as usize).sum();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// 95th percentile of the pooled directed surface distances A→B and B→A.
///
/// Both empty gives 0; exactly one empty gives the volume diagonal.
/// Masks must share dims; spacing is taken from `a`.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let mut d = pooled_surface_distances(a, b)?;
    match d {
        None => Ok(empty_convention(a, b)),
        Some(ref mut v) => Ok(percentile(v, 0.95)),
    }
}

/// Maximum of the pooled surface distances (the classical Hausdorff distance
/// between the two surfaces), with the same empty-mask conventions as [`hd95`].
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    match pooled_surface_distances(a, b)? {
        None => Ok(empty_convention(a, b)),
        Some(v) => Ok(v.into_iter().fold(0.0, f64::max)),
    }
}

fn empty_convention(a: &BinaryMask, b: &BinaryMask) -> f64 {
    if a.any() || b.any() {
        a.diagonal()
    } else {
        0.0
    }
}

/// `None` when either mask is empty.
fn pooled_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Option<Vec<f64>>> {
    check_pair(a, b)?;
    if !a.any() || !b.any() {
        return Ok(None);
    }
    let sa = a.surface();
    let sb = b.surface();
    let da = squared_edt(a.dims, a.spacing, &sa);
    let db = squared_edt(a.dims, a.spacing, &sb);
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    out.extend(sa.iter().map(|&(z, y, x)| db[a.index(z, y, x)].sqrt()));
    out.extend(sb.iter().map(|&(z, y, x)| da[a.index(z, y, x)].sqrt()));
    Ok(Some(out))
}

/// Linear interpolation between order statistics at rank `q·(n−1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// using separable lower-envelope passes with per-axis spacing.
pub fn squared_edt(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    seeds: &[(usize, usize, usize)],
) -> Vec<f64> {
    let (d, h, w) = dims;
    let mut f = vec![f64::INFINITY; d * h * w];
    for &(z, y, x) in seeds {
        f[(z * h + y) * w + x] = 0.0;
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |f: &mut [f64], n: usize, step: usize, starts: &mut dyn Iterator<Item = usize>, s: f64| {
        for start in starts {
            line.clear();
            line.extend((0..n).map(|i| f[start + i * step]));
            envelope_1d(&line, s, &mut out);
            for (i, &v) in out.iter().enumerate() {
                f[start + i * step] = v;
            }
        }
    };
    pass(&mut f, w, 1, &mut (0..d * h).map(|r| r * w), spacing.2);
    pass(&mut f, h, w, &mut (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)), spacing.1);
    pass(&mut f, d, h * w, &mut (0..h * w), spacing.0);
    f
}

/// `out[q] = min_p (s·(q − p))² + f[p]` over sample positions `p`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let pos = |i: usize| i as f64 * s;
    // Parabola vertices and the boundaries between them.
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut zb: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let intersect = |p: usize, q: usize| {
        let (xp, xq) = (pos(p), pos(q));
        ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
    };
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.clear();
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = intersect(p, q);
                    if x <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        zb.push(x);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = pos(q);
        while k + 1 < v.len() && zb[k + 1] < xq {
            k += 1;
        }
        let dx = xq - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "HD95")]
    pub hd95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "HD95")]
    pub hd95: f64,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let n = cases.len().max(1) as f64;
        let mean = MeanMetrics {
            dice: cases.iter().map(|c| c.dice).sum::<f64>() / n,
            hd95: cases.iter().map(|c| c.hd95).sum::<f64>() / n,
        };
        Self { cases, mean }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT: (f64, f64, f64) = (1.0, 1.0, 1.0);

    fn points(dims: (usize, usize, usize), pts: &[(usize, usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(dims, UNIT, |z, y, x| pts.contains(&(z, y, x))).unwrap()
    }

    #[test]
    fn dice_hand_counts() {
        let a = points((1, 2, 2), &[(0, 0, 0), (0, 0, 1)]);
        let b = points((1, 2, 2), &[(0, 0, 1)]);
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = points((1, 2, 2), &[(0, 1, 1)]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn single_voxel_distance() {
        let a = points((1, 1, 4), &[(0, 0, 0)]);
        let b = points((1, 1, 4), &[(0, 0, 3)]);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::new((2, 3, 4), (1.0, 2.0, 2.0)).unwrap();
        let a = BinaryMask::from_fn((2, 3, 4), (1.0, 2.0, 2.0), |z, _, _| z == 0).unwrap();
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        let diag = (4.0f64 + 36.0 + 64.0).sqrt();
        assert_eq!(hd95(&a, &e).unwrap(), diag);
        assert_eq!(hd95(&e, &a).unwrap(), diag);
    }

    #[test]
    fn mismatched_dims_are_usage_errors() {
        let a = BinaryMask::new((2, 2, 2), UNIT).unwrap();
        let b = BinaryMask::new((2, 2, 3), UNIT).unwrap();
        assert!(matches!(dice(&a, &b), Err(Error::Usage(_))));
        assert!(matches!(hd95(&a, &b), Err(Error::Usage(_))));
        assert!(BinaryMask::new((1, 1, 1), (1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 2.0, 1.0, 3.0];
        assert_eq!(percentile(&mut v, 0.5), 2.0);
        assert!((percentile(&mut v, 0.95) - 3.8).abs() < 1e-15);
        assert_eq!(percentile(&mut [7.0], 0.95), 7.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dims = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
            let sp = (rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0));
            let seeds: Vec<_> = (0..rng.gen_range(1..5))
                .map(|_| (rng.gen_range(0..dims.0), rng.gen_range(0..dims.1), rng.gen_range(0..dims.2)))
                .collect();
            let f = squared_edt(dims, sp, &seeds);
            for z in 0..dims.0 {
                for y in 0..dims.1 {
                    for x in 0..dims.2 {
                        let want = seeds
                            .iter()
                            .map(|&(a, b, c)| {
                                let dz = (z as f64 - a as f64) * sp.0;
                                let dy = (y as f64 - b as f64) * sp.1;
                                let dx = (x as f64 - c as f64) * sp.2;
                                dz * dz + dy * dy + dx * dx
                            })
                            .fold(f64::INFINITY, f64::min);
                        let got = f[(z * dims.1 + y) * dims.2 + x];
                        assert!((got - want).abs() < 1e-9 * want.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_and_bounded_by_hausdorff() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let dims = (5, 6, 7);
            let a = BinaryMask::from_fn(dims, (1.0, 0.7, 1.3), |_, _, _| rng.gen_bool(0.2)).unwrap();
            let b = BinaryMask::from_fn(dims, (1.0, 0.7, 1.3), |_, _, _| rng.gen_bool(0.2)).unwrap();
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            let h = hd95(&a, &b).unwrap();
            assert_eq!(h, hd95(&b, &a).unwrap());
            assert!(h >= 0.0 && h <= hausdorff(&a, &b).unwrap());
        }
    }

    #[test]
    fn report_serializes_table_columns() {
        let r = EvalReport::from_cases(vec![
            CaseMetrics { case_id: "a".into(), dice: 1.0, hd95: 0.0 },
            CaseMetrics { case_id: "b".into(), dice: 0.5, hd95: 2.0 },
        ]);
        assert_eq!(r.mean.dice, 0.75);
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["mean"]["HD95"], 1.0);
        assert!(j["cases"][0].get("Dice").is_some());
    }
}
