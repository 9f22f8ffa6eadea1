//! Ground-truth labeling functions for the benchmark problems, plus uniform
//! input sampling within each problem's bounds.

mod bessel;
mod dataset;
mod stack;

pub use bessel::{bessel_j_series, bessel_oracle};
pub use dataset::{DatasetOracleTable, DEFAULT_KNN};
pub use stack::{reflectance_at, stack_oracle, StackConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;

/// Arm segment lengths for the robotic-arm oracle.
pub const ARM_LENGTHS: [f64; 3] = [0.5, 0.5, 1.0];
/// Time step of the damped-oscillator trajectory.
pub const DAMP_DT: f64 = 0.1;
pub const DAMP_STEPS: usize = 100;

const SINE_A1: f64 = 3.0;
const SINE_A2: f64 = 30.0;

/// y = x sin(a1 sin(a2 x)).
pub fn sine_oracle(x: f64) -> f64 {
    x * (SINE_A1 * (SINE_A2 * x).sin()).sin()
}

/// Planar arm endpoint: y0 = sum cos(pi/2 x_i) l_i over the three joints,
/// y1 = x_0 + sum sin(pi/2 x_i) l_i. x_0 is a horizontal base offset.
pub fn arm_oracle(x: &[f64; 4]) -> [f64; 2] {
    let mut y0 = 0.0;
    let mut y1 = x[0];
    for (i, &l) in ARM_LENGTHS.iter().enumerate() {
        let angle = std::f64::consts::FRAC_PI_2 * x[i + 1];
        y0 += angle.cos() * l;
        y1 += angle.sin() * l;
    }
    [y0, y1]
}

/// First 100 samples of a e^{-b t} cos(freq t) on the fixed time grid.
pub fn damp_oracle(a: f64, b: f64, freq: f64) -> Vec<f64> {
    (0..DAMP_STEPS)
        .map(|i| {
            let t = i as f64 * DAMP_DT;
            a * (-b * t).exp() * (freq * t).cos()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleKind {
    Sine,
    Arm,
    /// Integer order snapped from the first input coordinate.
    BesselJ,
    Damp,
    Stack(StackConfig),
    Dataset(DatasetOracleTable),
}

impl OracleKind {
    pub fn label(&self) -> &'static str {
        match self {
            OracleKind::Sine => "analytical",
            OracleKind::Arm => "analytical",
            OracleKind::BesselJ => "ode solution",
            OracleKind::Damp => "ode solution",
            OracleKind::Stack(_) => "numerical simulator",
            OracleKind::Dataset(_) => "dataset proxy",
        }
    }
}

/// One benchmark problem: dimensions, input bounds, oracle binding, and the
/// reference network architecture (hidden width x depth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub dim_x: usize,
    pub dim_y: usize,
    /// Per-dimension closed interval.
    pub bounds: Vec<[f64; 2]>,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub oracle: OracleKind,
}

pub const BUILTIN_PROBLEMS: [&str; 5] = ["sine", "robo", "stack", "bess", "damp"];
pub const DATASET_PROBLEMS: [&str; 3] = ["foil", "hydr", "adm"];

impl ProblemSpec {
    /// Problems with a self-contained oracle. FOIL/HYDR/ADM require a dataset
    /// table; see [`ProblemSpec::dataset`].
    pub fn builtin(name: &str) -> Result<ProblemSpec> {
        let spec = match name {
            "sine" => ProblemSpec {
                name: "sine".into(),
                dim_x: 1,
                dim_y: 1,
                bounds: vec![[-1.0, 1.0]],
                hidden_width: 20,
                hidden_layers: 9,
                oracle: OracleKind::Sine,
            },
            "robo" => ProblemSpec {
                name: "robo".into(),
                dim_x: 4,
                dim_y: 2,
                bounds: vec![[-1.0, 1.0]; 4],
                hidden_width: 500,
                hidden_layers: 4,
                oracle: OracleKind::Arm,
            },
            "stack" => ProblemSpec {
                name: "stack".into(),
                dim_x: 5,
                dim_y: 201,
                bounds: vec![[30.0, 250.0]; 5],
                hidden_width: 700,
                hidden_layers: 9,
                oracle: OracleKind::Stack(StackConfig::default()),
            },
            "bess" => ProblemSpec {
                name: "bess".into(),
                dim_x: 2,
                dim_y: 1,
                bounds: vec![[0.0, 9.0], [0.0, 10.0]],
                hidden_width: 50,
                hidden_layers: 6,
                oracle: OracleKind::BesselJ,
            },
            "damp" => ProblemSpec {
                name: "damp".into(),
                dim_x: 3,
                dim_y: 100,
                bounds: vec![[0.2, 2.0], [0.1, 1.0], [0.5, 5.0]],
                hidden_width: 500,
                hidden_layers: 6,
                oracle: OracleKind::Damp,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown builtin problem '{other}' (dataset problems need a table)"
                )))
            }
        };
        Ok(spec)
    }

    /// Dataset-backed problems: foil (5->1), hydr (6->1), adm (14->2000).
    pub fn dataset(name: &str, table: DatasetOracleTable) -> Result<ProblemSpec> {
        let (dim_x, dim_y, width, layers) = match name {
            "foil" => (5, 1, 200, 4),
            "hydr" => (6, 1, 50, 6),
            "adm" => (14, 2000, 1500, 4),
            other => {
                return Err(Error::Config(format!("unknown dataset problem '{other}'")));
            }
        };
        if table.dim_x() != dim_x || table.dim_y() != dim_y {
            return Err(Error::InvalidInput(format!(
                "{name} table is {}x{}, expected {dim_x}x{dim_y}",
                table.dim_x(),
                table.dim_y()
            )));
        }
        // Bounds from the table's axis-aligned hull.
        let bounds = (0..dim_x)
            .map(|d| {
                let lo = table.x.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
                let hi = table.x.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
                [lo, hi]
            })
            .collect();
        Ok(ProblemSpec {
            name: name.into(),
            dim_x,
            dim_y,
            bounds,
            hidden_width: width,
            hidden_layers: layers,
            oracle: OracleKind::Dataset(table),
        })
    }

    /// Regressor architecture for this problem. `hidden_scale` shrinks hidden
    /// widths for desk-scale runs; `dropout_rate` is nonzero only for the
    /// MC-dropout scoring model.
    pub fn network(&self, hidden_scale: f64, dropout_rate: f64) -> NetworkSpec {
        let width = ((self.hidden_width as f64 * hidden_scale).round() as usize).max(1);
        let mut widths = Vec::with_capacity(self.hidden_layers + 2);
        widths.push(self.dim_x);
        widths.extend(std::iter::repeat(width).take(self.hidden_layers));
        widths.push(self.dim_y);
        NetworkSpec::new(widths).with_dropout(dropout_rate)
    }

    pub fn check_bounds(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_x {
            return Err(Error::InvalidInput(format!(
                "input dim {} != {}",
                x.len(),
                self.dim_x
            )));
        }
        for (v, b) in x.iter().zip(&self.bounds) {
            if !(b[0]..=b[1]).contains(v) {
                return Err(Error::InvalidInput(format!(
                    "coordinate {v} outside [{}, {}]",
                    b[0], b[1]
                )));
            }
        }
        Ok(())
    }

    /// Oracle label for one input.
    pub fn label(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_bounds(x)?;
        match &self.oracle {
            OracleKind::Sine => Ok(vec![sine_oracle(x[0])]),
            OracleKind::Arm => Ok(arm_oracle(&[x[0], x[1], x[2], x[3]]).to_vec()),
            OracleKind::BesselJ => {
                let alpha = x[0].round().clamp(0.0, 9.0) as i64;
                Ok(vec![bessel_oracle(alpha, x[1])?])
            }
            OracleKind::Damp => Ok(damp_oracle(x[0], x[1], x[2])),
            OracleKind::Stack(cfg) => stack_oracle(cfg, x),
            OracleKind::Dataset(table) => table.query(x),
        }
    }

    pub fn label_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.label(x)).collect()
    }

    /// n i.i.d. uniform samples within the bounds, per dimension.
    pub fn sample_uniform(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.bounds
                    .iter()
                    .map(|b| {
                        if b[0] == b[1] {
                            b[0]
                        } else {
                            rng.random_range(b[0]..=b[1])
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
