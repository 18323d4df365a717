//! Fundamental-diagram functions in normalized units (`v_max = 1`).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::VeqNet;

/// Normalized free-flow speed.
pub const V_MAX: f64 = 1.0;

/// Which equilibrium velocity a model uses.
#[derive(Clone)]
pub enum VeqSpec {
    /// `V_max (1 - rho)`.
    Greenshields,
    /// A finalized equilibrium-velocity network from stage-1 training.
    Learned(Arc<VeqNet>),
}

impl fmt::Debug for VeqSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VeqSpec::Greenshields => f.write_str("Greenshields"),
            VeqSpec::Learned(net) => write!(f, "Learned({:?})", net.psi().widths()),
        }
    }
}

/// Serializable selector for the equilibrium velocity used by a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VeqChoice {
    Greenshields,
    Learned,
}

impl fmt::Display for VeqChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VeqChoice::Greenshields => f.write_str("greenshields"),
            VeqChoice::Learned => f.write_str("learned"),
        }
    }
}

impl VeqSpec {
    pub fn learned(net: VeqNet) -> Self {
        VeqSpec::Learned(Arc::new(net))
    }

    /// The network of a learned diagram.
    pub fn network(&self) -> Option<&VeqNet> {
        match self {
            VeqSpec::Greenshields => None,
            VeqSpec::Learned(net) => Some(net),
        }
    }

    pub fn choice(&self) -> VeqChoice {
        match self {
            VeqSpec::Greenshields => VeqChoice::Greenshields,
            VeqSpec::Learned(_) => VeqChoice::Learned,
        }
    }

    /// Equilibrium speed at any real density, without a domain check.
    /// Training evaluates the diagram at raw network outputs, which may
    /// leave `[0, 1]` slightly.
    pub fn value(&self, rho: f64) -> f64 {
        match self {
            VeqSpec::Greenshields => V_MAX * (1.0 - rho),
            VeqSpec::Learned(net) => net.value(rho),
        }
    }

    /// `(V_eq(rho), V_eq'(rho))`.
    pub fn value_and_slope(&self, rho: f64) -> (f64, f64) {
        match self {
            VeqSpec::Greenshields => (V_MAX * (1.0 - rho), -V_MAX),
            VeqSpec::Learned(net) => net.value_and_slope(rho),
        }
    }

    pub fn eval(&self, rho: f64) -> Result<f64> {
        check_density(rho)?;
        Ok(self.value(rho))
    }
}

pub(crate) fn check_density(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "rho",
            value: rho,
            domain: "[0, 1]",
        })
    }
}

pub fn greenshields_veq(rho: f64) -> Result<f64> {
    VeqSpec::Greenshields.eval(rho)
}

/// Traffic pressure `p(rho) = V_max - V_eq(rho)`.
pub fn pressure(rho: f64, veq: &VeqSpec) -> Result<f64> {
    Ok(V_MAX - veq.eval(rho)?)
}

/// LWR flux `rho V_eq(rho)`.
pub fn lwr_flux(rho: f64, veq: &VeqSpec) -> Result<f64> {
    Ok(rho * veq.eval(rho)?)
}
