//! Equilibrium-velocity network with the free-flow and jam endpoints built
//! into the architecture:
//!
//! `V(rho) = (V_max + Psi(rho) rho) (1 - rho)`
//!
//! so `V(0) = V_max` and `V(1) = 0` for every parameter vector. Any
//! Lipschitz diagram with these endpoints and one-sided slopes there is
//! reachable, since `Psi = (V - V_max (1 - rho)) / (rho (1 - rho))` extends
//! continuously to `[0, 1]`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{Activation, InitScheme, Mlp, MlpTape};
use crate::diagram::V_MAX;
use crate::error::{Error, Result};

const PSI_OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VeqNet {
    psi: Mlp,
    v_max: f64,
}

/// Batched evaluation of `V` and `dV/drho` with what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct VeqBatch {
    pub value: Vec<f64>,
    pub slope: Vec<f64>,
    rho: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
    tape: MlpTape,
}

impl VeqNet {
    /// `widths` must start and end with 1.
    pub fn new(widths: &[usize], seed: u64, scheme: InitScheme) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = Mlp::with_rng(widths, &mut rng, scheme, Activation::Identity, PSI_OUTPUT_GAIN);
        Self::from_psi(psi).expect("scalar widths")
    }

    pub fn from_psi(psi: Mlp) -> Result<Self> {
        if psi.input_width() != 1 || psi.output_width() != 1 {
            return Err(Error::Format(format!(
                "equilibrium network must map R -> R, got widths {:?}",
                psi.widths()
            )));
        }
        Ok(Self { psi, v_max: V_MAX })
    }

    pub fn psi(&self) -> &Mlp {
        &self.psi
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn n_params(&self) -> usize {
        self.psi.n_params()
    }

    pub fn params(&self) -> &[f64] {
        self.psi.params()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.psi.params_mut().copy_from_slice(p);
    }

    pub fn value(&self, rho: f64) -> f64 {
        self.value_and_slope(rho).0
    }

    /// `(V(rho), V'(rho))` with the derivative exact by product and chain rule.
    pub fn value_and_slope(&self, rho: f64) -> (f64, f64) {
        let b = self.eval_batch(&[rho]);
        (b.value[0], b.slope[0])
    }

    /// Alias of [`Self::value_and_slope`] under its operation name.
    pub fn veq_forward(&self, rho: f64) -> (f64, f64) {
        self.value_and_slope(rho)
    }

    pub fn eval_batch(&self, rhos: &[f64]) -> VeqBatch {
        let batch = rhos.len();
        assert!(batch > 0, "empty batch");
        let mut stack = Array2::zeros((2 * batch, 1));
        for (i, &r) in rhos.iter().enumerate() {
            stack[[i, 0]] = r;
            stack[[batch + i, 0]] = 1.0;
        }
        let (out, tape) = self.psi.forward(stack, batch);
        let vm = self.v_max;
        let mut value = Vec::with_capacity(batch);
        let mut slope = Vec::with_capacity(batch);
        let mut psi = Vec::with_capacity(batch);
        let mut dpsi = Vec::with_capacity(batch);
        for (i, &r) in rhos.iter().enumerate() {
            let (p, dp) = (out[[i, 0]], out[[batch + i, 0]]);
            value.push((vm + p * r) * (1.0 - r));
            slope.push(dp * r * (1.0 - r) + p * (1.0 - 2.0 * r) - vm);
            psi.push(p);
            dpsi.push(dp);
        }
        VeqBatch {
            value,
            slope,
            rho: rhos.to_vec(),
            psi,
            dpsi,
            tape,
        }
    }

    /// Given the loss gradient with respect to `V` and `V'` at each point,
    /// accumulates the `Psi` parameter gradient into `grad_params` and
    /// returns the total gradient with respect to each input density.
    pub fn backward(&self, b: &VeqBatch, g_value: &[f64], g_slope: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let batch = b.rho.len();
        let vm = self.v_max;
        let mut g_stack = Array2::zeros((2 * batch, 1));
        let mut g_rho = Vec::with_capacity(batch);
        for i in 0..batch {
            let (r, p, dp) = (b.rho[i], b.psi[i], b.dpsi[i]);
            let (gv, gs) = (g_value[i], g_slope[i]);
            g_stack[[i, 0]] = gv * r * (1.0 - r) + gs * (1.0 - 2.0 * r);
            g_stack[[batch + i, 0]] = gs * r * (1.0 - r);
            g_rho.push(gv * (p * (1.0 - 2.0 * r) - vm) + gs * (dp * (1.0 - 2.0 * r) - 2.0 * p));
        }
        let g_in = self.psi.backward(&b.tape, g_stack, grad_params);
        for (i, g) in g_rho.iter_mut().enumerate() {
            *g += g_in[[i, 0]];
        }
        g_rho
    }
}
