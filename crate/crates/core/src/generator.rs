//! Interfaces shared by the ascent loops: a differentiable generator with an
//! (exact or approximate) inverse, and a differentiable scalar predictor.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Differentiable map `g: Z → X` with an inverse `g⁻¹: X → Z`.
pub trait Generator: Sync {
    fn latent_dim(&self) -> usize;
    fn data_dim(&self) -> usize;

    /// Records `g(z)` for `z` of shape `[n, latent_dim]`.
    fn generate_graph<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<Var>;

    fn invert(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim(), z.len())?;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z));
        let x = self.generate_graph(&mut g, zv)?;
        Ok(g.value(x).to_vec())
    }
}

/// Scalar-output differentiable model (probability or regression value).
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;

    /// Records the `[n, 1]` output for `x` of shape `[n, input_dim]`.
    fn output_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var>;

    /// Whether the output is a class-1 probability in `[0, 1]`.
    fn outputs_probability(&self) -> bool {
        false
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x.len())?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::row(x));
        let y = self.output_graph(&mut g, xv)?;
        Ok(g.item(y))
    }

    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape().len() != 2 {
            return Err(Error::Domain {
                op: "predict",
                detail: format!("expects [n, d] input, got {:?}", x.shape()),
            });
        }
        check_dim(self.input_dim(), x.shape()[1])?;
        let mut g = Graph::new();
        let xv = g.input_ref(x, false);
        let y = self.output_graph(&mut g, xv)?;
        Ok(g.value(y).to_vec())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// `g = id` on `ℝᵈ`.
#[derive(Clone, Copy, Debug)]
pub struct IdentityGenerator {
    pub dim: usize,
}

impl Generator for IdentityGenerator {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn generate_graph<'a>(&'a self, _g: &mut Graph<'a>, z: Var) -> Result<Var> {
        Ok(z)
    }

    fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(x.to_vec())
    }
}

/// `g(z) = z·W`, i.e. the linear map `Wᵀ` acting on column vectors. `W` is
/// square and invertible; the inverse is obtained by Gaussian elimination.
#[derive(Clone, Debug)]
pub struct LinearGenerator {
    weight: Tensor,
}

impl LinearGenerator {
    /// Generator for the column-vector map `x = A z`.
    pub fn from_matrix(a: &[Vec<f64>]) -> Result<Self> {
        let d = a.len();
        if d == 0 || a.iter().any(|r| r.len() != d) {
            return Err(Error::Config("linear generator needs a square matrix".into()));
        }
        // row-vector convention stores Aᵀ
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                data[j * d + i] = a[i][j];
            }
        }
        Ok(Self {
            weight: Tensor::new(data, vec![d, d])?,
        })
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let d = self.weight.shape()[0];
        let w = self.weight.data();
        (0..d).map(|i| (0..d).map(|j| w[j * d + i]).collect()).collect()
    }
}

impl Generator for LinearGenerator {
    fn latent_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn data_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn generate_graph<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<Var> {
        let w = g.input_ref(&self.weight, false);
        g.matmul(z, w)
    }

    fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.data_dim(), x.len())?;
        crate::linalg::solve(&self.matrix(), x)
    }
}
