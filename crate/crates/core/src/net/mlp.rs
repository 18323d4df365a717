//! Dense tanh networks with forward-mode input tangents and a reverse pass
//! through both the values and the tangents.
//!
//! A batch of `B` inputs together with `K` tangent directions is carried as
//! one stacked matrix of shape `((K + 1) B, width)`: rows `0..B` hold the
//! values and rows `(k + 1) B..(k + 2) B` the `k`-th directional derivative.
//! Since `z = W h + b` is affine, the tangents go through the same matrix
//! product as the values, and every layer costs a single GEMM in each
//! direction.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights `U(-a, a)` with `a = sqrt(3 / fan_in)`, i.e. variance
    /// `1 / fan_in`; zero biases.
    #[default]
    FanInUniform,
}

impl InitScheme {
    pub fn weight_variance(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::FanInUniform => 1.0 / fan_in as f64,
        }
    }

    fn bound(self, fan_in: usize) -> f64 {
        (3.0 * self.weight_variance(fan_in)).sqrt()
    }
}

/// Seeded parameter vector for a dense network with the given widths, in
/// the layout used by [`Mlp`].
pub fn init_params(widths: &[usize], seed: u64, scheme: InitScheme) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(widths, &mut rng, scheme, 1.0)
}

pub(crate) fn init_params_with(
    widths: &[usize],
    rng: &mut ChaCha8Rng,
    scheme: InitScheme,
    output_gain: f64,
) -> Vec<f64> {
    let n_layers = widths.len() - 1;
    let mut params = Vec::with_capacity(param_count(widths));
    for l in 0..n_layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
        let a = gain * scheme.bound(fan_in);
        let dist = Uniform::new_inclusive(-a, a);
        params.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
        params.extend(std::iter::repeat(0.0).take(fan_out));
    }
    params
}

pub(crate) fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    output: Activation,
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    batch: usize,
    layers: Vec<LayerTape>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Array2<f64>,
    pre: Array2<f64>,
    // tanh activations of the value rows, empty for identity layers
    act: Array2<f64>,
}

impl Mlp {
    /// # Panics
    /// If fewer than two widths are given, a width is zero, or the
    /// parameter vector has the wrong length.
    pub fn from_params(widths: Vec<usize>, params: Vec<f64>, output: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "zero-width layer");
        assert_eq!(params.len(), param_count(&widths), "parameter count");
        Self {
            widths,
            params,
            output,
        }
    }

    pub fn new(widths: &[usize], seed: u64, scheme: InitScheme, output: Activation) -> Self {
        Self::from_params(widths.to_vec(), init_params(widths, seed, scheme), output)
    }

    pub(crate) fn with_rng(
        widths: &[usize],
        rng: &mut ChaCha8Rng,
        scheme: InitScheme,
        output: Activation,
        output_gain: f64,
    ) -> Self {
        let params = init_params_with(widths, rng, scheme, output_gain);
        Self::from_params(widths.to_vec(), params, output)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    /// Weight matrix `(out, in)` and bias of one layer.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
            .expect("layout");
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    /// Forward pass over a stacked batch of `batch` values followed by any
    /// number of tangent blocks of the same size.
    pub fn forward(&self, stack: Array2<f64>, batch: usize) -> (Array2<f64>, MlpTape) {
        assert_eq!(stack.ncols(), self.input_width(), "input width");
        assert!(batch > 0 && stack.nrows() % batch == 0, "stack is not a whole number of blocks");
        let mut layers = Vec::with_capacity(self.n_layers());
        let mut h = stack;
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w.t());
            z.slice_mut(s![..batch, ..]).outer_iter_mut().for_each(|mut row| row += &b);
            let (out, act) = match self.activation(l) {
                Activation::Identity => (z.clone(), Array2::zeros((0, 0))),
                Activation::Tanh => {
                    let act = z.slice(s![..batch, ..]).mapv(f64::tanh);
                    let slope = act.mapv(|a| 1.0 - a * a);
                    let mut out = Array2::zeros(z.raw_dim());
                    out.slice_mut(s![..batch, ..]).assign(&act);
                    for k in 1..z.nrows() / batch {
                        let rows = s![k * batch..(k + 1) * batch, ..];
                        Zip::from(out.slice_mut(rows))
                            .and(z.slice(rows))
                            .and(&slope)
                            .for_each(|o, &zk, &sl| *o = zk * sl);
                    }
                    (out, act)
                }
            };
            layers.push(LayerTape {
                input: h,
                pre: z,
                act,
            });
            h = out;
        }
        (h, MlpTape { batch, layers })
    }

    /// Reverse pass. `grad_out` has the shape of the forward output stack and
    /// holds the loss gradient with respect to every value and tangent.
    /// Parameter gradients are accumulated into `grad_params`; the returned
    /// matrix is the gradient with respect to the input stack.
    pub fn backward(&self, tape: &MlpTape, grad_out: Array2<f64>, grad_params: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad_params.len(), self.n_params());
        let batch = tape.batch;
        let mut g = grad_out;
        for l in (0..self.n_layers()).rev() {
            let lt = &tape.layers[l];
            let gz = match self.activation(l) {
                Activation::Identity => g,
                Activation::Tanh => {
                    let act = &lt.act;
                    let slope = act.mapv(|a| 1.0 - a * a);
                    let blocks = g.nrows() / batch;
                    let mut gz = Array2::zeros(g.raw_dim());
                    // gradient reaching the slope 1 - a^2 through the tangents
                    let mut g_slope = Array2::<f64>::zeros(act.raw_dim());
                    for k in 1..blocks {
                        let rows = s![k * batch..(k + 1) * batch, ..];
                        Zip::from(&mut g_slope)
                            .and(g.slice(rows))
                            .and(lt.pre.slice(rows))
                            .for_each(|gs, &gk, &zk| *gs += gk * zk);
                        Zip::from(gz.slice_mut(rows))
                            .and(g.slice(rows))
                            .and(&slope)
                            .for_each(|o, &gk, &sl| *o = gk * sl);
                    }
                    Zip::from(gz.slice_mut(s![..batch, ..]))
                        .and(g.slice(s![..batch, ..]))
                        .and(&g_slope)
                        .and(act)
                        .for_each(|o, &g0, &gs, &a| *o = (g0 - 2.0 * a * gs) * (1.0 - a * a));
                    gz
                }
            };
            let (w, _) = self.layer(l);
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let dw = gz.t().dot(&lt.input);
            let db: Array1<f64> = gz.slice(s![..batch, ..]).sum_axis(Axis(0));
            {
                let (gw, gb) = grad_params[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (dst, src) in gw.iter_mut().zip(dw.iter()) {
                    *dst += src;
                }
                for (dst, src) in gb.iter_mut().zip(db.iter()) {
                    *dst += src;
                }
            }
            g = gz.dot(&w);
        }
        g
    }
}
