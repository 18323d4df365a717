//! Small dense networks with exact input derivatives and exact parameter
//! gradients through those derivatives.

mod checkpoint;
mod mlp;
mod state;
mod veq;

pub use checkpoint::{sidecar_path, Checkpoint, CheckpointMeta, EMBEDDING, FORMAT_VERSION, MAGIC};
pub use mlp::{init_params, Activation, InitScheme, Mlp, MlpTape};
pub use state::{SharedHeadNet, StateJet, StateJetGrad, StateTape, EMBED_WIDTH};
pub use veq::{VeqBatch, VeqNet};

use crate::error::{Error, Result};

/// Gradient of a scalar built from network values and input derivatives at
/// `points`.
///
/// `loss` receives the jet at every point and returns the scalar together
/// with its partials with respect to each jet entry; the returned vector is
/// the exact gradient over [`SharedHeadNet::params`], including the
/// second-order paths through `rho_t`, `rho_x`, `v_t` and `v_x`.
pub fn param_gradient<F>(net: &SharedHeadNet, points: &[[f64; 2]], loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&StateJet) -> (f64, StateJetGrad),
{
    let (jet, tape) = net.eval_batch(points, true);
    let (value, g) = loss(&jet);
    ensure_finite("loss value", std::iter::once(value))?;
    let channels: [(&str, &[f64]); 6] = [
        ("d/d rho", &g.rho),
        ("d/d rho_t", &g.rho_t),
        ("d/d rho_x", &g.rho_x),
        ("d/d v", &g.v),
        ("d/d v_t", &g.v_t),
        ("d/d v_x", &g.v_x),
    ];
    for (name, vals) in channels {
        ensure_finite(name, vals.iter().copied())?;
    }
    let mut grad = vec![0.0; net.n_params()];
    net.backward(&tape, &g, &mut grad);
    ensure_finite("parameter gradient", grad.iter().copied())?;
    Ok((value, grad))
}

pub(crate) fn ensure_finite(term: &str, mut values: impl Iterator<Item = f64>) -> Result<()> {
    if values.all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric { term: term.to_string() })
    }
}
