//! Induced-metric diagnostics for a generator `g: Z → X`: Jacobian, inverse
//! metric `γ⁻¹ = J Jᵀ`, its spectrum and the tangent directions it singles out.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{jacobian, Graph, Tensor};
use crate::error::{Error, Result};
use crate::generator::{check_dim, Generator, Predictor};
use crate::io::fmt_f64;
use crate::linalg::{gram_outer, matvec, norm, svd, Matrix};

/// Default cut on `σᵢ²/σ₁²` below which a direction counts as degenerate.
pub const DEFAULT_RATIO_CUT: f64 = 1e-2;

/// `∂g/∂z` at `z`, a `data_dim × latent_dim` matrix.
pub fn generator_jacobian(g: &dyn Generator, z: &[f64]) -> Result<Matrix> {
    check_dim(g.latent_dim(), z.len())?;
    jacobian(|graph, v| g.generate_graph(graph, v), z)
}

pub fn inverse_metric(g: &dyn Generator, z: &[f64]) -> Result<Matrix> {
    Ok(gram_outer(&generator_jacobian(g, z)?))
}

/// `∇_x f` at `x`.
pub fn predictor_gradient(f: &dyn Predictor, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(f.input_dim(), x.len())?;
    let mut g = Graph::new();
    let v = g.variable(Tensor::row(x));
    let y = f.output_graph(&mut g, v)?;
    let root = g.sum(y);
    g.backward(root)?;
    Ok(g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// `∇_z (f∘g)` at `z`, differentiated through the generator.
pub fn composite_gradient(f: &dyn Predictor, gen: &dyn Generator, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(gen.latent_dim(), z.len())?;
    let mut g = Graph::new();
    let v = g.variable(Tensor::row(z));
    let x = gen.generate_graph(&mut g, v)?;
    let y = f.output_graph(&mut g, x)?;
    let root = g.sum(y);
    g.backward(root)?;
    Ok(g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z.len()]))
}

/// Deviation of one plain latent ascent step from the metric-weighted input
/// step, `‖g(z + λ∇_z(f∘g)) − g(z) − λ γ⁻¹ ∇_x f‖`. It vanishes for linear
/// `g` and is `O(λ²)` for smooth `g`.
pub fn metric_step_residual(f: &dyn Predictor, gen: &dyn Generator, z: &[f64], step: f64) -> Result<f64> {
    let x = gen.generate(z)?;
    let grad_z = composite_gradient(f, gen, z)?;
    let moved: Vec<f64> = z.iter().zip(&grad_z).map(|(a, b)| a + step * b).collect();
    let x_moved = gen.generate(&moved)?;
    let predicted = matvec(&inverse_metric(gen, z)?, &predictor_gradient(f, &x)?);
    let r: Vec<f64> = x_moved
        .iter()
        .zip(&x)
        .zip(&predicted)
        .map(|((a, b), p)| a - b - step * p)
        .collect();
    Ok(norm(&r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    /// Singular values of the Jacobian, descending, zero-padded to `data_dim`.
    pub singular_values: Vec<f64>,
    /// Columns of `U`, one vector per entry.
    pub left_singular_vectors: Vec<Vec<f64>>,
    pub tangent_rank: usize,
}

impl SpectrumReport {
    /// Eigenvalues of `γ⁻¹`, descending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.singular_values.iter().map(|s| s * s).collect()
    }

    /// `U diag(σ²) Uᵀ`.
    pub fn reconstructed_metric(&self) -> Matrix {
        let d = self.x.len();
        let ev = self.eigenvalues();
        let mut out = vec![vec![0.0; d]; d];
        for (u, l) in self.left_singular_vectors.iter().zip(&ev) {
            for i in 0..d {
                for j in 0..d {
                    out[i][j] += l * u[i] * u[j];
                }
            }
        }
        out
    }

    /// `σ₁²/σ₂²`; infinite when `σ₂ = 0`.
    pub fn leading_ratio(&self) -> f64 {
        let ev = self.eigenvalues();
        match ev.get(1) {
            Some(&s2) => ev[0] / s2,
            None => f64::INFINITY,
        }
    }
}

pub fn spectrum(g: &dyn Generator, z: &[f64], ratio_cut: f64) -> Result<SpectrumReport> {
    if !(ratio_cut > 0.0 && ratio_cut <= 1.0) {
        return Err(Error::Config(format!("ratio_cut must be in (0, 1], got {ratio_cut}")));
    }
    let j = generator_jacobian(g, z)?;
    if j.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator Jacobian".into()));
    }
    let x = g.generate(z)?;
    let dec = svd(&j);
    let mut sigma = dec.sigma;
    sigma.resize(x.len(), 0.0);
    let top = sigma[0] * sigma[0];
    let tangent_rank = if top > 0.0 {
        sigma.iter().filter(|s| *s * *s / top >= ratio_cut).count()
    } else {
        0
    };
    Ok(SpectrumReport {
        z: z.to_vec(),
        x,
        singular_values: sigma,
        left_singular_vectors: dec.u,
        tangent_rank,
    })
}

/// Spectra at many latent points, in input order.
pub fn spectrum_batch(g: &dyn Generator, points: &[Vec<f64>], ratio_cut: f64) -> Result<Vec<SpectrumReport>> {
    points.par_iter().map(|z| spectrum(g, z, ratio_cut)).collect()
}

/// First `k` left singular vectors at `z`.
pub fn tangent_basis(g: &dyn Generator, z: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > g.data_dim() {
        return Err(Error::Config(format!("k must be in 1..={}, got {k}", g.data_dim())));
    }
    let mut u = spectrum(g, z, DEFAULT_RATIO_CUT)?.left_singular_vectors;
    u.truncate(k);
    Ok(u)
}

/// Index-wise mean of the descending `σ²` spectra.
pub fn eigenvalue_profile(g: &dyn Generator, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let reports = spectrum_batch(g, points, DEFAULT_RATIO_CUT)?;
    mean_profile(&reports)
}

pub fn mean_profile(reports: &[SpectrumReport]) -> Result<Vec<f64>> {
    let first = reports.first().ok_or(Error::Empty("eigenvalue profile points"))?;
    let mut acc = vec![0.0; first.singular_values.len()];
    for r in reports {
        for (a, e) in acc.iter_mut().zip(r.eigenvalues()) {
            *a += e;
        }
    }
    let n = reports.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// CSV with columns `index, x1..xd, sigma2_1..sigma2_d, tangent_rank`.
pub fn write_spectrum_csv<W: Write>(mut w: W, config_hash: Option<&str>, reports: &[SpectrumReport]) -> Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_hash: {h}")?;
    }
    let d = reports.first().map_or(0, |r| r.x.len());
    let mut header = vec!["index".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend((1..=d).map(|i| format!("sigma2_{i}")));
    header.push("tangent_rank".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, r) in reports.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(r.x.iter().map(|v| fmt_f64(*v)));
        row.extend(r.eigenvalues().into_iter().map(fmt_f64));
        row.push(r.tangent_rank.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{IdentityGenerator, LinearGenerator};

    #[test]
    fn identity_metric_and_spectrum() {
        let g = IdentityGenerator { dim: 3 };
        let m = inverse_metric(&g, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let s = spectrum(&g, &[0.3, -1.0, 2.0], DEFAULT_RATIO_CUT).unwrap();
        assert_eq!(s.eigenvalues(), vec![1.0; 3]);
        assert_eq!(s.tangent_rank, 3);
        let b = tangent_basis(&g, &[0.0; 3], 2).unwrap();
        assert_eq!(b, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(eigenvalue_profile(&g, &[vec![0.0; 3], vec![1.0; 3]]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn diagonal_maps() {
        let g = LinearGenerator::from_matrix(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(inverse_metric(&g, &[1.0, 1.0]).unwrap(), vec![vec![4.0, 0.0], vec![0.0, 1.0]]);

        let g = LinearGenerator::from_matrix(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 1e-3, 0.0],
            vec![0.0, 0.0, 1e-3],
        ])
        .unwrap();
        let s = spectrum(&g, &[0.1, 0.2, 0.3], DEFAULT_RATIO_CUT).unwrap();
        let ev = s.eigenvalues();
        assert!((ev[0] - 9.0).abs() < 1e-12);
        assert!((ev[1] - 1e-6).abs() < 1e-18 && (ev[2] - 1e-6).abs() < 1e-18);
        assert_eq!(s.tangent_rank, 1);
        assert_eq!(tangent_basis(&g, &[0.0; 3], 1).unwrap(), vec![vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn linear_generator_step_residual_vanishes() {
        let g = LinearGenerator::from_matrix(&[
            vec![1.5, 0.2, 0.0],
            vec![-0.3, 0.7, 0.1],
            vec![0.0, 0.4, 2.0],
        ])
        .unwrap();
        let w = Tensor::new(vec![0.5, -1.0, 0.25], vec![3, 1]).unwrap();
        let f = crate::predictor::MlpClassifier::from_net(
            crate::nn::Mlp::from_parts(vec![3, 1], crate::nn::Activation::Relu, vec![w], vec![Tensor::zeros(&[1])])
                .unwrap(),
        )
        .unwrap();
        for lr in [1e-2, 5e-3, 2.5e-3] {
            assert!(metric_step_residual(&f, &g, &[0.1, -0.2, 0.3], lr).unwrap() < 1e-12);
        }
        let gz = composite_gradient(&f, &IdentityGenerator { dim: 3 }, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(gz, predictor_gradient(&f, &[0.1, 0.2, 0.3]).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = IdentityGenerator { dim: 3 };
        assert!(eigenvalue_profile(&g, &[]).is_err());
        assert!(tangent_basis(&g, &[0.0; 3], 0).is_err());
        assert!(tangent_basis(&g, &[0.0; 3], 4).is_err());
        assert!(spectrum(&g, &[0.0; 2], DEFAULT_RATIO_CUT).is_err());
    }

    #[test]
    fn csv_layout() {
        let g = IdentityGenerator { dim: 2 };
        let r = spectrum_batch(&g, &[vec![0.5, 1.0]], DEFAULT_RATIO_CUT).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, Some("ff"), &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: ff");
        assert_eq!(lines[1], "index,x1,x2,sigma2_1,sigma2_2,tangent_rank");
        assert!(lines[2].starts_with("0,5.0000000000000000e-1,"));
        assert!(lines[2].ends_with(",2"));
    }
}
