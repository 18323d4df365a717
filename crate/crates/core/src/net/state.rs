//! Shared-feature state network: one feature extractor, one linear head for
//! density and an optional one for velocity.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{Activation, InitScheme, Mlp, MlpTape};
use crate::error::{Error, Result};

/// Width of the periodic input embedding `(2t - 1, cos 2 pi x, sin 2 pi x)`.
pub const EMBED_WIDTH: usize = 3;

const HEAD_GAIN: f64 = 0.1;

/// Head values and, when requested, their `t` and `x` derivatives at a batch
/// of points. Velocity entries are zero for a single-head network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateJet {
    pub rho: Vec<f64>,
    pub rho_t: Vec<f64>,
    pub rho_x: Vec<f64>,
    pub v: Vec<f64>,
    pub v_t: Vec<f64>,
    pub v_x: Vec<f64>,
}

/// Loss gradient with respect to every entry of a [`StateJet`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateJetGrad {
    pub rho: Vec<f64>,
    pub rho_t: Vec<f64>,
    pub rho_x: Vec<f64>,
    pub v: Vec<f64>,
    pub v_t: Vec<f64>,
    pub v_x: Vec<f64>,
}

impl StateJetGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            rho: vec![0.0; n],
            rho_t: vec![0.0; n],
            rho_x: vec![0.0; n],
            v: vec![0.0; n],
            v_t: vec![0.0; n],
            v_x: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedHeadNet {
    features: Mlp,
    /// `n` weights followed by a bias.
    head_rho: Vec<f64>,
    head_v: Option<Vec<f64>>,
}

/// Saved forward pass for [`SharedHeadNet::backward`].
#[derive(Debug, Clone)]
pub struct StateTape {
    batch: usize,
    with_derivs: bool,
    features: Array2<f64>,
    mlp: MlpTape,
}

fn embed(t: f64, x: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    // reducing x first makes x and x + 1 produce identical features
    let (s, c) = (2.0 * PI * x.rem_euclid(1.0)).sin_cos();
    (
        [2.0 * t - 1.0, c, s],
        [2.0, 0.0, 0.0],
        [0.0, -2.0 * PI * s, 2.0 * PI * c],
    )
}

fn head_apply(head: &[f64], feats: ArrayView1<'_, f64>, with_bias: bool) -> f64 {
    let n = head.len() - 1;
    let dot: f64 = head[..n].iter().zip(feats.iter()).map(|(a, b)| a * b).sum();
    if with_bias {
        dot + head[n]
    } else {
        dot
    }
}

impl SharedHeadNet {
    /// Fresh network. `hidden` lists the feature-network widths; the last
    /// entry is the latent dimension `n`.
    pub fn new(hidden: &[usize], with_velocity_head: bool, seed: u64, scheme: InitScheme) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![EMBED_WIDTH];
        widths.extend_from_slice(hidden);
        let features = Mlp::with_rng(&widths, &mut rng, scheme, Activation::Tanh, 1.0);
        let n = features.output_width();
        let head_rho = fresh_head(n, &mut rng, scheme);
        let head_v = with_velocity_head.then(|| fresh_head(n, &mut rng, scheme));
        Self {
            features,
            head_rho,
            head_v,
        }
    }

    pub fn from_parts(features: Mlp, head_rho: Vec<f64>, head_v: Option<Vec<f64>>) -> Result<Self> {
        if features.input_width() != EMBED_WIDTH {
            return Err(Error::Format(format!(
                "feature network input width {} != {EMBED_WIDTH}",
                features.input_width()
            )));
        }
        let n = features.output_width();
        let ok = head_rho.len() == n + 1 && head_v.as_ref().map_or(true, |h| h.len() == n + 1);
        if !ok {
            return Err(Error::Format(format!("head length must be {}", n + 1)));
        }
        Ok(Self {
            features,
            head_rho,
            head_v,
        })
    }

    pub fn features(&self) -> &Mlp {
        &self.features
    }

    pub fn head_rho(&self) -> &[f64] {
        &self.head_rho
    }

    pub fn head_v(&self) -> Option<&[f64]> {
        self.head_v.as_deref()
    }

    pub fn latent_dim(&self) -> usize {
        self.features.output_width()
    }

    pub fn has_velocity_head(&self) -> bool {
        self.head_v.is_some()
    }

    /// Adds a freshly initialized velocity head, keeping features and the
    /// density head. Used to warm-start the second stage.
    pub fn with_fresh_velocity_head(&self, seed: u64, scheme: InitScheme) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e1a_0c17_0001);
        let head_v = fresh_head(self.latent_dim(), &mut rng, scheme);
        Self {
            features: self.features.clone(),
            head_rho: self.head_rho.clone(),
            head_v: Some(head_v),
        }
    }

    /// Drops the velocity head.
    pub fn density_only(&self) -> Self {
        Self {
            features: self.features.clone(),
            head_rho: self.head_rho.clone(),
            head_v: None,
        }
    }

    pub fn n_feature_params(&self) -> usize {
        self.features.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.features.n_params() + self.head_rho.len() + self.head_v.as_ref().map_or(0, Vec::len)
    }

    /// Flat parameters: features, density head, velocity head.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(self.features.params());
        p.extend_from_slice(&self.head_rho);
        if let Some(h) = &self.head_v {
            p.extend_from_slice(h);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter count");
        let nf = self.features.n_params();
        let nh = self.head_rho.len();
        self.features.params_mut().copy_from_slice(&p[..nf]);
        self.head_rho.copy_from_slice(&p[nf..nf + nh]);
        if let Some(h) = &mut self.head_v {
            h.copy_from_slice(&p[nf + nh..]);
        }
    }

    /// Index range of the velocity head inside [`Self::params`].
    pub fn velocity_head_range(&self) -> Option<std::ops::Range<usize>> {
        let start = self.features.n_params() + self.head_rho.len();
        self.head_v.as_ref().map(|h| start..start + h.len())
    }

    pub fn forward(&self, t: f64, x: f64) -> (f64, f64) {
        let (jet, _) = self.eval_batch(&[[t, x]], false);
        (jet.rho[0], jet.v[0])
    }

    /// Values together with exact `t` and `x` partial derivatives at one
    /// point: `([rho, v], [rho_t, v_t], [rho_x, v_x])`.
    pub fn forward_with_input_derivs(&self, t: f64, x: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let (j, _) = self.eval_batch(&[[t, x]], true);
        ([j.rho[0], j.v[0]], [j.rho_t[0], j.v_t[0]], [j.rho_x[0], j.v_x[0]])
    }

    pub fn eval_batch(&self, points: &[[f64; 2]], with_derivs: bool) -> (StateJet, StateTape) {
        let batch = points.len();
        assert!(batch > 0, "empty batch");
        let blocks = if with_derivs { 3 } else { 1 };
        let mut stack = Array2::zeros((blocks * batch, EMBED_WIDTH));
        for (i, &[t, x]) in points.iter().enumerate() {
            let (e, et, ex) = embed(t, x);
            stack.row_mut(i).assign(&ArrayView1::from(&e));
            if with_derivs {
                stack.row_mut(batch + i).assign(&ArrayView1::from(&et));
                stack.row_mut(2 * batch + i).assign(&ArrayView1::from(&ex));
            }
        }
        let (features, mlp) = self.features.forward(stack, batch);
        let zeros = || vec![0.0; batch];
        let mut jet = StateJet {
            rho: zeros(),
            rho_t: zeros(),
            rho_x: zeros(),
            v: zeros(),
            v_t: zeros(),
            v_x: zeros(),
        };
        for i in 0..batch {
            jet.rho[i] = head_apply(&self.head_rho, features.row(i), true);
            if let Some(hv) = &self.head_v {
                jet.v[i] = head_apply(hv, features.row(i), true);
            }
            if with_derivs {
                jet.rho_t[i] = head_apply(&self.head_rho, features.row(batch + i), false);
                jet.rho_x[i] = head_apply(&self.head_rho, features.row(2 * batch + i), false);
                if let Some(hv) = &self.head_v {
                    jet.v_t[i] = head_apply(hv, features.row(batch + i), false);
                    jet.v_x[i] = head_apply(hv, features.row(2 * batch + i), false);
                }
            }
        }
        let tape = StateTape {
            batch,
            with_derivs,
            features,
            mlp,
        };
        (jet, tape)
    }

    /// Accumulates the parameter gradient for the upstream jet gradient into
    /// `grad` (layout of [`Self::params`]).
    pub fn backward(&self, tape: &StateTape, g: &StateJetGrad, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.n_params());
        let batch = tape.batch;
        let n = self.latent_dim();
        let blocks = if tape.with_derivs { 3 } else { 1 };
        let nf = self.features.n_params();
        let (g_feat_params, g_heads) = grad.split_at_mut(nf);
        let (g_head_rho, g_head_v) = g_heads.split_at_mut(n + 1);

        let mut g_stack = Array2::zeros((blocks * batch, n));
        let channels: [(&[f64], &[f64]); 3] = [(&g.rho, &g.v), (&g.rho_t, &g.v_t), (&g.rho_x, &g.v_x)];
        for (blk, (gr, gv)) in channels.iter().take(blocks).enumerate() {
            for i in 0..batch {
                let row = blk * batch + i;
                let feats = tape.features.row(row);
                accumulate_head(&mut g_head_rho[..], feats, gr[i], blk == 0);
                add_scaled(g_stack.row_mut(row), &self.head_rho[..n], gr[i]);
                if let Some(hv) = &self.head_v {
                    accumulate_head(&mut g_head_v[..], feats, gv[i], blk == 0);
                    add_scaled(g_stack.row_mut(row), &hv[..n], gv[i]);
                }
            }
        }
        self.features.backward(&tape.mlp, g_stack, g_feat_params);
    }
}

fn fresh_head(n: usize, rng: &mut ChaCha8Rng, scheme: InitScheme) -> Vec<f64> {
    let mut head = super::mlp::init_params_with(&[n, 1], rng, scheme, HEAD_GAIN);
    // bias is already zero; layout is n weights then the bias
    head.truncate(n + 1);
    head
}

fn accumulate_head(dst: &mut [f64], feats: ArrayView1<'_, f64>, g: f64, with_bias: bool) {
    if g == 0.0 {
        return;
    }
    let n = feats.len();
    for (d, f) in dst[..n].iter_mut().zip(feats.iter()) {
        *d += g * f;
    }
    if with_bias {
        dst[n] += g;
    }
}

fn add_scaled(mut row: ArrayViewMut1<'_, f64>, w: &[f64], g: f64) {
    if g == 0.0 {
        return;
    }
    for (r, wi) in row.iter_mut().zip(w) {
        *r += g * wi;
    }
}
