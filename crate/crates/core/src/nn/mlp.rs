use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{orthogonal, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// init gain of the ReLU layers
    pub hidden_gain: f64,
    /// init gain of the final linear layer
    pub output_gain: f64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self { input, hidden: hidden.to_vec(), output, hidden_gain: std::f64::consts::SQRT_2, output_gain: 1.0 }
    }

    pub fn with_output_gain(mut self, gain: f64) -> Self {
        self.output_gain = gain;
        self
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input];
        s.extend(&self.hidden);
        s.push(self.output);
        s
    }
}

/// Fully connected ReLU network with a linear output layer. Parameters are
/// stored as `[w0, b0, w1, b1, ...]` with `w_i` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

/// Inputs seen by each layer during the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    layer_inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let sizes = spec.sizes();
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("layer widths must be positive: {sizes:?}")));
        }
        let n_layers = sizes.len() - 1;
        let mut params = Vec::with_capacity(2 * n_layers);
        for i in 0..n_layers {
            let gain = if i + 1 == n_layers { spec.output_gain } else { spec.hidden_gain };
            params.push(Tensor::from_array2(orthogonal(sizes[i], sizes[i + 1], gain, rng)));
            params.push(Tensor::zeros(&[sizes[i + 1]]));
        }
        Ok(Self { spec, params })
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input {
            return Err(Error::ShapeMismatch(format!("mlp expects {} inputs, got {}", self.spec.input, x.ncols())));
        }
        Ok(())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let n = self.n_layers();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut a = x.to_owned();
        for i in 0..n {
            let mut z = a.dot(&self.params[2 * i].view2());
            z += &self.params[2 * i + 1].view1();
            layer_inputs.push(a);
            if i + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok((a, MlpCache { layer_inputs }))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n = self.n_layers();
        let mut a = x.to_owned();
        for i in 0..n {
            let mut z = a.dot(&self.params[2 * i].view2());
            z += &self.params[2 * i + 1].view1();
            if i + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Gradients of a scalar loss given `dout = dloss/doutput`; also returns
    /// the gradient with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache, dout: ArrayView2<f64>) -> Result<(Vec<Tensor>, Array2<f64>)> {
        let n = self.n_layers();
        let rows = cache.layer_inputs[0].nrows();
        if dout.dim() != (rows, self.spec.output) {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?}, expected ({rows}, {})",
                dout.dim(),
                self.spec.output
            )));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let mut dz = dout.to_owned();
        for i in (0..n).rev() {
            let a = &cache.layer_inputs[i];
            grads[2 * i] = Tensor::from_array2(a.t().dot(&dz));
            grads[2 * i + 1] = Tensor { shape: vec![dz.ncols()], data: dz.sum_axis(Axis(0)).to_vec() };
            let mut da = dz.dot(&self.params[2 * i].view2().t());
            if i > 0 {
                // a = relu(z_prev), so the mask is a > 0
                ndarray::Zip::from(&mut da).and(a).for_each(|d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dz = da;
        }
        Ok((grads, dz))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_final_layer_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::new(MlpSpec::new(4, &[8], 2), &mut rng).unwrap();
        m.params[2].data.fill(0.0);
        let y = m.predict(array![[1.0, -2.0, 3.0, 0.5]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::new(MlpSpec::new(3, &[], 3), &mut rng).unwrap();
        m.params[0] = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = array![[0.3, -1.0, 2.0], [4.0, 5.0, 6.0]];
        assert_eq!(m.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::new(MlpSpec::new(3, &[4], 2), &mut rng).unwrap();
        assert!(m.forward(array![[1.0, 2.0]].view()).is_err());
        let (_, cache) = m.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(m.backward(&cache, array![[1.0, 2.0, 3.0]].view()).is_err());
        assert!(Mlp::new(MlpSpec::new(3, &[0], 2), &mut rng).is_err());
    }

    #[test]
    fn forward_and_predict_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::new(MlpSpec::new(9, &[16, 16], 3), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 9), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(m.forward(x.view()).unwrap().0, m.predict(x.view()).unwrap());
    }
}
