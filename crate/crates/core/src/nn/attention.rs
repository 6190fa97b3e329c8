//! Allocation manager: entity tokens -> single-head self-attention with a
//! residual connection -> mean pool -> ReLU FC -> one logit per allocation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{orthogonal, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerSpec {
    pub n_users: usize,
    pub n_segments: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl ManagerSpec {
    pub fn new(n_users: usize, n_segments: usize) -> Self {
        Self { n_users, n_segments, embed_dim: 32, hidden: 128 }
    }

    /// Position block (3), focal block (3), class tag (2), one-hot entity index.
    pub fn token_dim(&self) -> usize {
        8 + self.n_users.max(self.n_segments)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_users + self.n_segments
    }

    pub fn n_allocations(&self) -> usize {
        self.n_users.pow(self.n_segments as u32)
    }

    pub fn state_dim(&self) -> usize {
        3 * self.n_users + 6 * self.n_segments
    }

    /// Entity tokens from a global state laid out as `[users, segment refs, focals]`.
    pub fn tokens(&self, state: &[f64]) -> Result<Array2<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::ShapeMismatch(format!(
                "manager state has {} entries, expected {}",
                state.len(),
                self.state_dim()
            )));
        }
        let (k, l) = (self.n_users, self.n_segments);
        let mut t = Array2::zeros((self.n_tokens(), self.token_dim()));
        for u in 0..k {
            for d in 0..3 {
                t[[u, d]] = state[3 * u + d];
            }
            t[[u, 6]] = 1.0;
            t[[u, 8 + u]] = 1.0;
        }
        for s in 0..l {
            let row = k + s;
            for d in 0..3 {
                t[[row, d]] = state[3 * k + 3 * s + d];
                t[[row, 3 + d]] = state[3 * k + 3 * l + 3 * s + d];
            }
            t[[row, 7]] = 1.0;
            t[[row, 8 + s]] = 1.0;
        }
        Ok(t)
    }
}

const W_EMBED: usize = 0;
const B_EMBED: usize = 1;
const W_Q: usize = 2;
const W_K: usize = 3;
const W_V: usize = 4;
const W_FC: usize = 5;
const B_FC: usize = 6;
const W_OUT: usize = 7;
const B_OUT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manager {
    pub spec: ManagerSpec,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ManagerCache {
    tokens: Array2<f64>,
    embed: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    pooled: Array1<f64>,
    hidden: Array1<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl Manager {
    pub fn new<R: Rng + ?Sized>(spec: ManagerSpec, output_gain: f64, rng: &mut R) -> Result<Self> {
        if spec.n_users == 0 || spec.n_segments == 0 || spec.embed_dim == 0 || spec.hidden == 0 {
            return Err(Error::Config("manager dimensions must be positive".into()));
        }
        let (d, e, h, a) = (spec.token_dim(), spec.embed_dim, spec.hidden, spec.n_allocations());
        let params = vec![
            Tensor::from_array2(orthogonal(d, e, 1.0, rng)),
            Tensor::zeros(&[e]),
            Tensor::from_array2(orthogonal(e, e, 1.0, rng)),
            Tensor::from_array2(orthogonal(e, e, 1.0, rng)),
            Tensor::from_array2(orthogonal(e, e, 1.0, rng)),
            Tensor::from_array2(orthogonal(e, h, std::f64::consts::SQRT_2, rng)),
            Tensor::zeros(&[h]),
            Tensor::from_array2(orthogonal(h, a, output_gain, rng)),
            Tensor::zeros(&[a]),
        ];
        Ok(Self { spec, params })
    }

    pub fn forward(&self, state: &[f64]) -> Result<(Vec<f64>, ManagerCache)> {
        let tokens = self.spec.tokens(state)?;
        let p = &self.params;
        let mut embed = tokens.dot(&p[W_EMBED].view2());
        embed += &p[B_EMBED].view1();
        let q = embed.dot(&p[W_Q].view2());
        let k = embed.dot(&p[W_K].view2());
        let v = embed.dot(&p[W_V].view2());
        let scale = 1.0 / (self.spec.embed_dim as f64).sqrt();
        let mut attn = q.dot(&k.t()) * scale;
        softmax_rows(&mut attn);
        let mixed = &embed + &attn.dot(&v);
        let pooled = mixed.mean_axis(Axis(0)).expect("at least one token");
        let mut hidden = pooled.dot(&p[W_FC].view2());
        hidden += &p[B_FC].view1();
        hidden.mapv_inplace(|x| x.max(0.0));
        let mut logits = hidden.dot(&p[W_OUT].view2());
        logits += &p[B_OUT].view1();
        let cache = ManagerCache { tokens, embed, q, k, v, attn, pooled, hidden };
        Ok((logits.to_vec(), cache))
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(state)?.0)
    }

    /// Parameter gradients for `dlogits = dloss/dlogits`.
    pub fn backward(&self, cache: &ManagerCache, dlogits: &[f64]) -> Result<Vec<Tensor>> {
        if dlogits.len() != self.spec.n_allocations() {
            return Err(Error::ShapeMismatch(format!(
                "{} logit gradients, expected {}",
                dlogits.len(),
                self.spec.n_allocations()
            )));
        }
        let p = &self.params;
        let g = Array1::from(dlogits.to_vec());
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        let d_wout = outer(&cache.hidden, &g);
        let mut dh = p[W_OUT].view2().dot(&g);
        ndarray::Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let d_wfc = outer(&cache.pooled, &dh);
        let dpooled = p[W_FC].view2().dot(&dh);

        let n = cache.tokens.nrows() as f64;
        let mut dmixed = Array2::zeros(cache.embed.raw_dim());
        for mut row in dmixed.rows_mut() {
            row.assign(&(&dpooled / n));
        }
        // mixed = embed + attn . v
        let mut dembed = dmixed.clone();
        let dattn = dmixed.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&dmixed);
        let mut ds = &cache.attn * &dattn;
        let row_dots = ds.sum_axis(Axis(1));
        for (mut row, (a_row, &rd)) in ds.rows_mut().into_iter().zip(cache.attn.rows().into_iter().zip(&row_dots)) {
            row.zip_mut_with(&a_row, |x, &a| *x -= a * rd);
        }
        let scale = 1.0 / (self.spec.embed_dim as f64).sqrt();
        ds *= scale;
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);
        let d_wq = cache.embed.t().dot(&dq);
        let d_wk = cache.embed.t().dot(&dk);
        let d_wv = cache.embed.t().dot(&dv);
        dembed += &dq.dot(&p[W_Q].view2().t());
        dembed += &dk.dot(&p[W_K].view2().t());
        dembed += &dv.dot(&p[W_V].view2().t());
        let d_wembed = cache.tokens.t().dot(&dembed);
        let d_bembed = dembed.sum_axis(Axis(0));

        Ok(vec![
            Tensor::from_array2(d_wembed),
            Tensor { shape: p[B_EMBED].shape.clone(), data: d_bembed.to_vec() },
            Tensor::from_array2(d_wq),
            Tensor::from_array2(d_wk),
            Tensor::from_array2(d_wv),
            Tensor::from_array2(d_wfc),
            Tensor { shape: p[B_FC].shape.clone(), data: dh.to_vec() },
            Tensor::from_array2(d_wout),
            Tensor { shape: p[B_OUT].shape.clone(), data: g.to_vec() },
        ])
    }
}
