//! Dense spatiotemporal fields of normalized density and speed.
//!
//! Nodes are uniform: `t_m = m / (n_t - 1)` covers `[0, 1]` inclusive and
//! `x_n = n / n_x` covers the periodic axis `[0, 1)`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scales::Scales;

/// Values this far outside `[0, 1]` are treated as round-off and clamped.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    /// Shape `(n_t, n_x)`.
    pub rho: Array2<f64>,
    /// Shape `(n_t, n_x)`.
    pub vel: Array2<f64>,
    pub domain: Scales,
}

#[derive(Debug, Deserialize)]
struct Row {
    t: f64,
    x: f64,
    rho: f64,
    v: f64,
}

fn clamp_checked(a: &mut Array2<f64>, what: &'static str) -> Result<()> {
    for value in a.iter_mut() {
        if !value.is_finite() || *value < -RANGE_SLACK || *value > 1.0 + RANGE_SLACK {
            return Err(Error::Domain {
                what,
                value: *value,
                domain: "[0, 1]",
            });
        }
        *value = value.clamp(0.0, 1.0);
    }
    Ok(())
}

impl GridField {
    pub fn new(mut rho: Array2<f64>, mut vel: Array2<f64>, domain: Scales) -> Result<Self> {
        if rho.dim() != vel.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", rho.dim()),
                found: format!("{:?}", vel.dim()),
            });
        }
        let (n_t, n_x) = rho.dim();
        if n_t == 0 || n_x == 0 {
            return Err(Error::config("grid must have at least one node per axis"));
        }
        clamp_checked(&mut rho, "grid density")?;
        clamp_checked(&mut vel, "grid velocity")?;
        Ok(Self { rho, vel, domain })
    }

    pub fn constant(n_t: usize, n_x: usize, rho: f64, vel: f64, domain: Scales) -> Result<Self> {
        Self::new(
            Array2::from_elem((n_t, n_x), rho),
            Array2::from_elem((n_t, n_x), vel),
            domain,
        )
    }

    pub fn n_t(&self) -> usize {
        self.rho.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.rho.ncols()
    }

    pub fn t_node(&self, m: usize) -> f64 {
        time_node(m, self.n_t())
    }

    pub fn x_node(&self, n: usize) -> f64 {
        space_node(n, self.n_x())
    }

    pub fn same_shape(&self, other: &GridField) -> Result<()> {
        if self.rho.dim() != other.rho.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.rho.dim()),
                found: format!("{:?}", other.rho.dim()),
            });
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(32 * self.rho.len() + 16);
        out.push_str("t,x,rho,v\n");
        for m in 0..self.n_t() {
            let t = self.t_node(m);
            for n in 0..self.n_x() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    t,
                    self.x_node(n),
                    self.rho[[m, n]],
                    self.vel[[m, n]]
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, domain: Scales) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "x", "rho", "v"] {
            return Err(Error::Format(format!(
                "grid csv header must be `t,x,rho,v`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::Format("grid csv has no rows".into()));
        }
        let t0 = rows[0].t;
        let n_x = rows.iter().take_while(|r| r.t == t0).count();
        if rows.len() % n_x != 0 {
            return Err(Error::Format(format!(
                "{} rows is not a multiple of {n_x} columns",
                rows.len()
            )));
        }
        let n_t = rows.len() / n_x;
        let mut rho = Array2::zeros((n_t, n_x));
        let mut vel = Array2::zeros((n_t, n_x));
        for (k, row) in rows.iter().enumerate() {
            let (m, n) = (k / n_x, k % n_x);
            if (row.x - space_node(n, n_x)).abs() > 1e-9 || (row.t - time_node(m, n_t)).abs() > 1e-9 {
                return Err(Error::Format(format!(
                    "row {k} at (t={}, x={}) is not on the uniform grid",
                    row.t, row.x
                )));
            }
            rho[[m, n]] = row.rho;
            vel[[m, n]] = row.v;
        }
        Self::new(rho, vel, domain)
    }

    pub fn read_csv(path: &Path, domain: Scales) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file), domain)
    }
}

pub fn time_node(m: usize, n_t: usize) -> f64 {
    if n_t <= 1 {
        0.0
    } else {
        m as f64 / (n_t - 1) as f64
    }
}

pub fn space_node(n: usize, n_x: usize) -> f64 {
    n as f64 / n_x as f64
}
