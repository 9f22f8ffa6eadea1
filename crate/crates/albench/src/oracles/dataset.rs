//! Dataset-backed proxy oracle: inverse-distance-weighted k-NN interpolation
//! over a stored table. Stands in for problems whose original oracle is a
//! fitted model that is not distributed with this crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KNN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOracleTable {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub k_nn: usize,
}

impl DatasetOracleTable {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, k_nn: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidInput("empty or mismatched table".into()));
        }
        if k_nn == 0 || k_nn > x.len() {
            return Err(Error::InvalidInput(format!(
                "k_nn {} outside 1..={}",
                k_nn,
                x.len()
            )));
        }
        Ok(DatasetOracleTable { x, y, k_nn })
    }

    /// Loads `x_0..x_{d-1}, y_0..y_{m-1}` columns from a headed CSV file.
    pub fn load_csv(path: &Path, k_nn: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim_x = cols.iter().take_while(|c| c.starts_with("x_")).count();
        let dim_y = cols[dim_x..].iter().take_while(|c| c.starts_with("y_")).count();
        if dim_x == 0 || dim_y == 0 || dim_x + dim_y != cols.len() {
            return Err(Error::InvalidInput(format!(
                "CSV header must be x_0..x_{{d-1}},y_0..y_{{m-1}}, got '{header}'"
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("row {}: {e}", lineno + 2)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != dim_x + dim_y {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} columns, expected {}",
                    lineno + 2,
                    vals.len(),
                    dim_x + dim_y
                )));
            }
            xs.push(vals[..dim_x].to_vec());
            ys.push(vals[dim_x..].to_vec());
        }
        Self::new(xs, ys, k_nn)
    }

    pub fn dim_x(&self) -> usize {
        self.x[0].len()
    }

    pub fn dim_y(&self) -> usize {
        self.y[0].len()
    }

    /// Inverse-distance-weighted mean of the k nearest rows; an exact-match
    /// row returns its stored label.
    pub fn query(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim_x() {
            return Err(Error::InvalidInput(format!(
                "query dim {} != table dim {}",
                q.len(),
                self.dim_x()
            )));
        }
        let mut dists: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let d2: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if dists[0].0 == 0.0 {
            return Ok(self.y[dists[0].1].clone());
        }
        let mut out = vec![0.0; self.dim_y()];
        let mut wsum = 0.0;
        for &(d, i) in dists.iter().take(self.k_nn) {
            let w = 1.0 / d;
            wsum += w;
            for (o, v) in out.iter_mut().zip(&self.y[i]) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= wsum);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(k: usize) -> DatasetOracleTable {
        DatasetOracleTable::new(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![5.0], vec![9.0]],
            vec![vec![10.0], vec![20.0], vec![30.0], vec![40.0], vec![50.0]],
            k,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_returns_stored_row() {
        assert_eq!(table(3).query(&[2.0]).unwrap(), vec![30.0]);
    }

    #[test]
    fn knn_one_returns_nearest() {
        assert_eq!(table(1).query(&[4.2]).unwrap(), vec![40.0]);
    }

    #[test]
    fn knn_three_hand_computed_weighted_mean() {
        // Query 1.5: nearest rows 1.0 (d=0.5), 2.0 (d=0.5), 0.0 (d=1.5).
        // Weights 2, 2, 2/3 -> (2*20 + 2*30 + 2/3*10) / (14/3) = 320/14*1.4...
        let expected = (2.0 * 20.0 + 2.0 * 30.0 + (1.0 / 1.5) * 10.0) / (2.0 + 2.0 + 1.0 / 1.5);
        let got = table(3).query(&[1.5]).unwrap()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn rejects_empty_table() {
        assert!(DatasetOracleTable::new(vec![], vec![], 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("albench-dataset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.csv");
        std::fs::write(&path, "x_0,x_1,y_0\n0.0,0.0,1.5\n1.0,2.0,-3.25\n4.0,1.0,0.0\n").unwrap();
        let t = DatasetOracleTable::load_csv(&path, 2).unwrap();
        assert_eq!(t.dim_x(), 2);
        assert_eq!(t.dim_y(), 1);
        assert_eq!(t.query(&[1.0, 2.0]).unwrap(), vec![-3.25]);
    }
}
