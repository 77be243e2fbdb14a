use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::rng;

/// Predicted probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before
/// taking logs.
pub const P_CLAMP: f64 = 1e-7;

/// Factorization-machine second-order term plus a one-hidden-layer ReLU MLP
/// over the concatenated field embeddings:
///
/// `p = sigmoid(sum_{i<j} <v_i, v_j> + w2 . relu(W1 x + b1) + b2)`
///
/// The dense parameters live in one flat vector laid out as
/// `[W1 (hidden x fields*dim), b1 (hidden), w2 (hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFmLite {
    num_fields: usize,
    dim: usize,
    hidden: usize,
    params: Array1<f64>,
}

/// Result of one forward/backward pass over a worker minibatch.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    /// Mean binary cross-entropy over the rows.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. each input embedding, `rows x fields x dim`.
    pub embedding_grads: Array3<f64>,
    /// Gradient of `loss` w.r.t. the flat dense parameters.
    pub dense_grads: Array1<f64>,
}

impl DeepFmLite {
    pub fn num_dense_params(num_fields: usize, dim: usize, hidden: usize) -> usize {
        hidden * num_fields * dim + 2 * hidden + 1
    }

    /// Glorot-uniform weights and zero biases, drawn from the seed's
    /// `dense` stream.
    pub fn init(seed: u64, num_fields: usize, dim: usize, hidden: usize) -> Self {
        let input = num_fields * dim;
        let mut r = rng::stream(seed, "dense", 0);
        let mut params = Array1::zeros(Self::num_dense_params(num_fields, dim, hidden));
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        for p in params.slice_mut(s![..hidden * input]) {
            *p = r.random_range(-a1..a1);
        }
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w2 = hidden * input + hidden;
        for p in params.slice_mut(s![w2..w2 + hidden]) {
            *p = r.random_range(-a2..a2);
        }
        Self {
            num_fields,
            dim,
            hidden,
            params,
        }
    }

    pub fn from_params(num_fields: usize, dim: usize, hidden: usize, params: Array1<f64>) -> Self {
        assert_eq!(params.len(), Self::num_dense_params(num_fields, dim, hidden));
        Self {
            num_fields,
            dim,
            hidden,
            params,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &Array1<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Array1<f64> {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.num_fields * self.dim
    }

    fn w1(&self) -> ArrayView2<'_, f64> {
        let n = self.hidden * self.input_len();
        self.params
            .slice(s![..n])
            .into_shape_with_order((self.hidden, self.input_len()))
            .expect("contiguous W1")
    }

    fn b1(&self) -> ArrayView1<'_, f64> {
        let o = self.hidden * self.input_len();
        self.params.slice(s![o..o + self.hidden])
    }

    fn w2(&self) -> ArrayView1<'_, f64> {
        let o = self.hidden * self.input_len() + self.hidden;
        self.params.slice(s![o..o + self.hidden])
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Loss and exact gradients of the mean clamped cross-entropy.
    pub fn forward_backward(&self, embeds: ArrayView3<'_, f64>, labels: &[u8]) -> ForwardBackward {
        let (rows, fields, dim) = embeds.dim();
        assert_eq!(fields, self.num_fields);
        assert_eq!(dim, self.dim);
        assert_eq!(rows, labels.len());
        if rows == 0 {
            return ForwardBackward {
                loss: 0.0,
                embedding_grads: Array3::zeros((0, fields, dim)),
                dense_grads: Array1::zeros(self.params.len()),
            };
        }
        let embeds = embeds.as_standard_layout();
        let x = embeds
            .view()
            .into_shape_with_order((rows, self.input_len()))
            .expect("standard layout");

        let pre = x.dot(&self.w1().t()) + &self.b1();
        let act = pre.mapv(|v| v.max(0.0));
        let mlp = act.dot(&self.w2());
        let field_sum = embeds.sum_axis(Axis(1));

        let inv_rows = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut dz = Array1::zeros(rows);
        for r in 0..rows {
            let s = field_sum.row(r);
            let sq: f64 = embeds.slice(s![r, .., ..]).iter().map(|v| v * v).sum();
            let fm = 0.5 * (s.dot(&s) - sq);
            let z = fm + mlp[r] + self.b2();
            let p = sigmoid(z);
            let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            let y = f64::from(labels[r]);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            // The clamp is flat outside its range, so the gradient vanishes there.
            if (P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
                dz[r] = (p - y) * inv_rows;
            }
        }
        loss *= inv_rows;

        let mut dense = Array1::zeros(self.params.len());
        let input = self.input_len();
        let h = self.hidden;
        let mut d_act = Array2::zeros((rows, h));
        for ((mut row, &g), p) in d_act.outer_iter_mut().zip(&dz).zip(pre.outer_iter()) {
            for ((d, &w), &pv) in row.iter_mut().zip(&self.w2()).zip(&p) {
                if pv > 0.0 {
                    *d = g * w;
                }
            }
        }
        let d_w1 = d_act.t().dot(&x);
        dense
            .slice_mut(s![..h * input])
            .assign(&d_w1.into_shape_with_order(h * input).expect("contiguous"));
        dense
            .slice_mut(s![h * input..h * input + h])
            .assign(&d_act.sum_axis(Axis(0)));
        dense
            .slice_mut(s![h * input + h..h * input + 2 * h])
            .assign(&act.t().dot(&dz));
        dense[h * input + 2 * h] = dz.sum();

        let d_x = d_act.dot(&self.w1());
        let mut grads = d_x
            .into_shape_with_order((rows, fields, dim))
            .expect("contiguous");
        for r in 0..rows {
            let s = field_sum.row(r);
            for i in 0..fields {
                let v = embeds.slice(s![r, i, ..]);
                let mut g = grads.slice_mut(s![r, i, ..]);
                for k in 0..dim {
                    g[k] += dz[r] * (s[k] - v[k]);
                }
            }
        }

        ForwardBackward {
            loss,
            embedding_grads: grads,
            dense_grads: dense,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
