//! Dense proximity matrices and their on-disk format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{QcmlError, Result};

const MAGIC: &[u8] = b"QPRX1";

/// Allowed overshoot above 1 (and below 0) from floating-point round-off.
pub const RANGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProximityMetric {
    Qcml,
    RfBreiman,
    RfOob,
    RfGap,
    Euclidean,
}

impl ProximityMetric {
    pub const ALL: [ProximityMetric; 5] = [
        ProximityMetric::Qcml,
        ProximityMetric::RfBreiman,
        ProximityMetric::RfOob,
        ProximityMetric::RfGap,
        ProximityMetric::Euclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProximityMetric::Qcml => "qcml",
            ProximityMetric::RfBreiman => "rf-breiman",
            ProximityMetric::RfOob => "rf-oob",
            ProximityMetric::RfGap => "rf-gap",
            ProximityMetric::Euclidean => "euclidean",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| QcmlError::Format(format!("unknown metric code {c}")))
    }
}

impl fmt::Display for ProximityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProximityMetric {
    type Err = QcmlError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| QcmlError::usage(format!("unknown proximity metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::Test => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Role::Train),
            1 => Ok(Role::Test),
            _ => Err(QcmlError::Format(format!("unknown role code {c}"))),
        }
    }
}

/// Row-major matrix of proximities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub metric: ProximityMetric,
    pub row_role: Role,
    pub col_role: Role,
}

impl ProximityMatrix {
    /// Entries within [`RANGE_TOL`] of the unit interval are clamped into it;
    /// anything further out is rejected.
    pub fn new(
        rows: usize,
        cols: usize,
        mut values: Vec<f64>,
        metric: ProximityMetric,
        row_role: Role,
        col_role: Role,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(QcmlError::schema(format!(
                "proximity matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        for (idx, v) in values.iter_mut().enumerate() {
            if !(v.is_finite() && *v >= -RANGE_TOL && *v <= 1.0 + RANGE_TOL) {
                return Err(QcmlError::numeric(format!(
                    "{metric} proximity ({}, {}) = {v} outside [0, 1]",
                    idx / cols.max(1),
                    idx % cols.max(1)
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            rows,
            cols,
            values,
            metric,
            row_role,
            col_role,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest `|P(i,j) − P(j,i)|`; `None` for non-square matrices.
    pub fn max_asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.magic(MAGIC);
        enc.u8(self.metric.code());
        enc.u64(self.rows as u64);
        enc.u64(self.cols as u64);
        enc.u8(self.row_role.code());
        enc.u8(self.col_role.code());
        for &v in &self.values {
            enc.f64(v);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(MAGIC)?;
        let metric = ProximityMetric::from_code(dec.u8()?)?;
        let rows = dec.u64()? as usize;
        let cols = dec.u64()? as usize;
        let row_role = Role::from_code(dec.u8()?)?;
        let col_role = Role::from_code(dec.u8()?)?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| QcmlError::Format("matrix size overflows".into()))?;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            values.push(dec.f64()?);
        }
        dec.finish()?;
        Self::new(rows, cols, values, metric, row_role, col_role)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let r = ProximityMatrix::new(
            1,
            2,
            vec![0.5, 1.1],
            ProximityMetric::Qcml,
            Role::Test,
            Role::Train,
        );
        assert!(r.is_err());
    }

    #[test]
    fn clamps_roundoff() {
        let p = ProximityMatrix::new(
            1,
            2,
            vec![1.0 + 1e-14, -1e-15],
            ProximityMetric::RfGap,
            Role::Train,
            Role::Train,
        )
        .unwrap();
        assert_eq!(p.values(), &[1.0, 0.0]);
    }

    #[test]
    fn bytes_round_trip_and_truncation() {
        let p = ProximityMatrix::new(
            2,
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            ProximityMetric::RfOob,
            Role::Test,
            Role::Train,
        )
        .unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..5], b"QPRX1");
        assert_eq!(ProximityMatrix::from_bytes(&bytes).unwrap(), p);
        assert!(ProximityMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn metric_names_parse() {
        for m in ProximityMetric::ALL {
            assert_eq!(m.name().parse::<ProximityMetric>().unwrap(), m);
        }
        assert!("cosine".parse::<ProximityMetric>().is_err());
    }
}
