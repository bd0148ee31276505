//! The helix toy manifold: sampling, labels, regression targets, and an
//! exact distance oracle.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::fmt_f64;

pub const HELIX_MIN: f64 = -4.0;
pub const HELIX_MAX: f64 = 4.0;

/// Helix `s ↦ (sin s, cos s, s)` for `s ∈ (-4, 4)`, optionally thickened by
/// isotropic Gaussian noise of standard deviation `noise_width / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelixSpec {
    pub noise_width: f64,
}

impl Default for HelixSpec {
    fn default() -> Self {
        Self { noise_width: 0.0 }
    }
}

pub fn helix_point(s: f64) -> [f64; 3] {
    [s.sin(), s.cos(), s]
}

/// Unit tangent of the helix at parameter `s`.
pub fn helix_tangent(s: f64) -> [f64; 3] {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    [s.cos() * r, -s.sin() * r, r]
}

impl HelixSpec {
    pub fn new(noise_width: f64) -> Result<Self> {
        if !(noise_width >= 0.0) || !noise_width.is_finite() {
            return Err(Error::Config(format!("noise width must be >= 0, got {noise_width}")));
        }
        Ok(Self { noise_width })
    }

    /// Draws `n` points as an `[n, 3]` tensor.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let param = Uniform::new(HELIX_MIN, HELIX_MAX).expect("valid range");
        let noise = (self.noise_width > 0.0)
            .then(|| Normal::new(0.0, self.noise_width / 2.0).expect("valid std"));
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let s = param.sample(rng);
            let p = helix_point(s);
            for c in p {
                let e = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                data.push(c + e);
            }
        }
        Tensor::new(data, vec![n, 3]).expect("consistent shape")
    }

    /// Draws `n` points with parameters restricted to `[lo, hi)`.
    pub fn sample_range<R: Rng + ?Sized>(&self, n: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let param = Uniform::new(lo, hi).expect("valid range");
        let noise = (self.noise_width > 0.0)
            .then(|| Normal::new(0.0, self.noise_width / 2.0).expect("valid std"));
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let p = helix_point(param.sample(rng));
            for c in p {
                data.push(c + noise.as_ref().map_or(0.0, |d| d.sample(rng)));
            }
        }
        Tensor::new(data, vec![n, 3]).expect("consistent shape")
    }
}

/// Seeded convenience wrapper around [`HelixSpec::sample`].
pub fn sample_helix(n: usize, noise_width: f64, seed: u64) -> Result<Tensor> {
    use rand::SeedableRng;
    if n == 0 {
        return Err(Error::Empty("sample_helix needs n >= 1"));
    }
    let spec = HelixSpec::new(noise_width)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(spec.sample(n, &mut rng))
}

/// Class 1 for `x3 >= 0`, class 0 otherwise. The boundary itself is class 1.
pub fn class_label(p: &[f64]) -> u8 {
    u8::from(p[2] >= 0.0)
}

pub fn regression_target(p: &[f64]) -> f64 {
    p[2]
}

fn dist2(p: &[f64], s: f64) -> f64 {
    let q = helix_point(s);
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
}

const GRID_POINTS: usize = 10_001;

/// Closest helix parameter: dense grid over `[-4, 4]`, then golden-section
/// refinement on the bracketing cell until its width is below `1e-8`.
pub fn helix_closest_parameter(p: &[f64]) -> f64 {
    let step = (HELIX_MAX - HELIX_MIN) / (GRID_POINTS - 1) as f64;
    let at = |i: usize| HELIX_MIN + step * i as f64;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..GRID_POINTS {
        let d = dist2(p, at(i));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    let mut lo = at(best.saturating_sub(1));
    let mut hi = at((best + 1).min(GRID_POINTS - 1));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (dist2(p, c), dist2(p, d));
    while hi - lo > 1e-8 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = dist2(p, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = dist2(p, d);
        }
    }
    let mid = 0.5 * (lo + hi);
    // the grid point may still beat the refined interior point at an endpoint
    [mid, at(best)]
        .into_iter()
        .min_by(|a, b| dist2(p, *a).total_cmp(&dist2(p, *b)))
        .expect("two candidates")
}

/// Euclidean distance from `p` to the helix segment `s ∈ [-4, 4]`.
pub fn helix_distance(p: &[f64]) -> f64 {
    dist2(p, helix_closest_parameter(p)).sqrt()
}

/// Distance oracle for an analytic manifold.
pub trait ManifoldOracle: Sync {
    fn distance(&self, p: &[f64]) -> f64;
    /// Unit tangent at the nearest manifold point.
    fn tangent_at(&self, p: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct HelixOracle;

impl ManifoldOracle for HelixOracle {
    fn distance(&self, p: &[f64]) -> f64 {
        helix_distance(p)
    }

    fn tangent_at(&self, p: &[f64]) -> Vec<f64> {
        helix_tangent(helix_closest_parameter(p)).to_vec()
    }
}

/// Labeled helix sample as exported to CSV (`x1,x2,x3,label,target`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub points: Tensor,
    pub labels: Vec<u8>,
    pub targets: Vec<f64>,
}

impl LabeledSample {
    pub fn from_points(points: Tensor) -> Self {
        let n = points.shape()[0];
        let labels = (0..n).map(|i| class_label(points.row_slice(i))).collect();
        let targets = (0..n).map(|i| regression_target(points.row_slice(i))).collect();
        Self {
            points,
            labels,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        if let Some(h) = config_hash {
            writeln!(w, "# config_hash: {h}")?;
        }
        writeln!(w, "x1,x2,x3,label,target")?;
        for i in 0..self.len() {
            let p = self.points.row_slice(i);
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                fmt_f64(p[2]),
                self.labels[i],
                fmt_f64(self.targets[i])
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut header_seen = false;
        let (mut data, mut labels, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != "x1,x2,x3,label,target" {
                    return Err(Error::Format(format!("unexpected dataset header '{line}'")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
            };
            for f in &fields[..3] {
                data.push(num(f)?);
            }
            let label: u8 = fields[3]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if label > 1 {
                return Err(Error::Format(format!("line {}: label must be 0 or 1", lineno + 1)));
            }
            labels.push(label);
            targets.push(num(fields[4])?);
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset csv has no rows"));
        }
        let n = labels.len();
        Ok(Self {
            points: Tensor::new(data, vec![n, 3])?,
            labels,
            targets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn helix_points_by_hand() {
        assert_eq!(helix_point(0.0), [0.0, 1.0, 0.0]);
        let p = helix_point(FRAC_PI_2);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15 && p[2] == FRAC_PI_2);
    }

    #[test]
    fn noiseless_samples_lie_on_cylinder() {
        let t = sample_helix(1000, 0.0, 7).unwrap();
        for i in 0..1000 {
            let p = t.row_slice(i);
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-12);
            assert!(p[2] > -4.0 && p[2] < 4.0);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_helix(10, 0.1, 3).unwrap(), sample_helix(10, 0.1, 3).unwrap());
        assert_ne!(sample_helix(10, 0.1, 3).unwrap(), sample_helix(10, 0.1, 4).unwrap());
        assert!(sample_helix(0, 0.0, 1).is_err());
        assert!(HelixSpec::new(-0.1).is_err());
    }

    #[test]
    fn distance_examples() {
        assert!(helix_distance(&[0.0, 1.0, 0.0]) < 1e-9);
        assert!((helix_distance(&[0.0, 0.0, 0.0]) - 1.0).abs() < 1e-9);
        assert!((helix_distance(&[0.0, 2.0, 0.0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distance_beyond_segment_end_uses_endpoint() {
        let end = helix_point(4.0);
        let p = [end[0], end[1], 6.0];
        assert!((helix_distance(&p) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn labels_and_targets() {
        assert_eq!(class_label(&[0.0, 1.0, 0.5]), 1);
        assert_eq!(class_label(&[0.0, 1.0, -0.5]), 0);
        assert_eq!(class_label(&[0.0, 1.0, 0.0]), 1);
        assert_eq!(regression_target(&[0.0, 1.0, 0.0]), 0.0);
        assert_eq!(regression_target(&[1.0, 0.0, FRAC_PI_2]), FRAC_PI_2);
    }

    #[test]
    fn target_mean_and_class_balance() {
        let t = sample_helix(10_000, 0.0, 11).unwrap();
        let s = LabeledSample::from_points(t);
        let mean = s.targets.iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.2, "{mean}");
        let frac = s.labels.iter().filter(|&&l| l == 1).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn csv_round_trip() {
        let s = LabeledSample::from_points(sample_helix(5, 0.2, 1).unwrap());
        let mut buf = Vec::new();
        s.write_csv(&mut buf, Some("abc")).unwrap();
        let back = LabeledSample::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(LabeledSample::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
