//! Physical scales of the ring road and the maps between physical and
//! normalized units.
//!
//! Everything inside the crate works on the unit square: `x = position /
//! road_length`, `t = time / horizon`, `v = speed / v_max` and
//! `rho = s_jam / headway`. Physical units only appear at I/O boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// Ring circumference in metres.
    pub road_length: f64,
    /// Observation horizon in seconds.
    pub horizon: f64,
    /// Free-flow speed in m/s.
    pub v_max: f64,
    /// Spacing per vehicle at jam density in metres.
    pub s_jam: f64,
}

impl Default for Scales {
    /// 6.2 km ring observed for 40 minutes. `s_jam` is chosen so that 100
    /// vehicles give an average normalized density of 0.4.
    fn default() -> Self {
        Self {
            road_length: 6200.0,
            horizon: 2400.0,
            v_max: 25.0,
            s_jam: 24.8,
        }
    }
}

impl Scales {
    pub fn new(road_length: f64, horizon: f64, v_max: f64, s_jam: f64) -> Result<Self> {
        let s = Self {
            road_length,
            horizon,
            v_max,
            s_jam,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("road_length", self.road_length),
            ("horizon", self.horizon),
            ("v_max", self.v_max),
            ("s_jam", self.s_jam),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Domain {
                    what: name,
                    value,
                    domain: "(0, inf)",
                });
            }
        }
        if self.s_jam > self.road_length {
            return Err(Error::config("s_jam exceeds the road length"));
        }
        Ok(())
    }

    /// Jam spacing as a fraction of the ring.
    pub fn jam_gap(&self) -> f64 {
        self.s_jam / self.road_length
    }

    /// Number of ring lengths covered at free-flow speed over the horizon.
    ///
    /// This is the transport coefficient in front of every spatial flux
    /// derivative once time and space are both scaled to `[0, 1]`.
    pub fn speed_ratio(&self) -> f64 {
        self.v_max * self.horizon / self.road_length
    }

    /// Converts a physical duration (s) into horizon units.
    pub fn normalize_duration(&self, seconds: f64) -> f64 {
        seconds / self.horizon
    }

    pub fn normalize_position(&self, metres: f64) -> f64 {
        metres / self.road_length
    }

    pub fn denormalize_position(&self, x: f64) -> f64 {
        x * self.road_length
    }

    pub fn normalize_time(&self, seconds: f64) -> f64 {
        seconds / self.horizon
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        t * self.horizon
    }

    pub fn normalize_speed(&self, metres_per_second: f64) -> f64 {
        metres_per_second / self.v_max
    }

    pub fn denormalize_speed(&self, v: f64) -> f64 {
        v * self.v_max
    }

    /// Vehicles per metre corresponding to a normalized density.
    pub fn denormalize_density(&self, rho: f64) -> f64 {
        rho / self.s_jam
    }

    pub fn normalize_density(&self, vehicles_per_metre: f64) -> f64 {
        vehicles_per_metre * self.s_jam
    }
}
