//! Small double-precision neural network stack with hand-written reverse-mode
//! gradients.

mod adam;
mod attention;
mod heads;
mod mlp;

pub use adam::Adam;
pub use attention::{Manager, ManagerCache, ManagerSpec};
pub use heads::{Categorical, DiagGaussian};
pub use mlp::{Mlp, MlpCache, MlpSpec};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_array2(a: Array2<f64>) -> Self {
        let shape = a.shape().to_vec();
        let data = if a.is_standard_layout() { a.into_raw_vec_and_offset().0 } else { a.iter().copied().collect() };
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("rank-2 tensor")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("rank-2 tensor")
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data)
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(&p.shape)).collect()
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
    }
}

pub fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape != y.shape) {
        return Err(Error::ShapeMismatch("parameter and gradient sets differ".into()));
    }
    Ok(())
}

pub fn all_finite(params: &[Tensor]) -> bool {
    params.iter().all(Tensor::all_finite)
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is
/// smaller), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // n x m gaussian, orthonormalize its m columns
    let mut a = Array2::<f64>::from_shape_simple_fn((n, m), || rng.sample(StandardNormal));
    for j in 0..m {
        for i in 0..j {
            let d = a.column(i).dot(&a.column(j));
            let ci = a.column(i).to_owned();
            a.column_mut(j).scaled_add(-d, &ci);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        a.column_mut(j).mapv_inplace(|v| v / norm);
    }
    let q = if rows >= cols { a } else { a.reversed_axes().as_standard_layout().to_owned() };
    q * gain
}
