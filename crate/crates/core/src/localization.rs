//! Planar trilateration by linearized least squares.
//!
//! Subtracting the first anchor's range equation from the others removes the
//! quadratic terms and leaves `2 (a_i - a_0) · p = |a_i|² - |a_0|² - d_i² + d_0²`,
//! which is solved in the least-squares sense.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("need at least 3 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("anchors are collinear or coincident")]
    DegenerateGeometry,
    #[error("got {distances} distances for {anchors} anchors")]
    CountMismatch { anchors: usize, distances: usize },
    #[error("distance {index} is {value}, must be positive and finite")]
    BadDistance { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// At least three non-collinear planar anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    positions: Vec<Point>,
}

impl AnchorSet {
    pub fn new(positions: Vec<Point>) -> Result<Self, LocalizationError> {
        if positions.len() < 3 {
            return Err(LocalizationError::TooFewAnchors(positions.len()));
        }
        let (design, _) = linear_system(&positions, &vec![1.0; positions.len()]);
        if design.rank(rank_eps(&positions)) < 2 {
            return Err(LocalizationError::DegenerateGeometry);
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn rank_eps(positions: &[Point]) -> f64 {
    let scale = positions
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(1.0, f64::max);
    1e-9 * scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionFix {
    pub p: Point,
    /// RMS of `|p - a_i| - d_i` over all anchors, meters.
    pub residual: f64,
}

fn linear_system(anchors: &[Point], distances: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let a0 = anchors[0];
    let d0 = distances[0];
    let rows = anchors.len() - 1;
    let mut design = DMatrix::zeros(rows, 2);
    let mut rhs = DVector::zeros(rows);
    for (row, (a, d)) in anchors.iter().zip(distances).skip(1).enumerate() {
        design[(row, 0)] = 2.0 * (a.x - a0.x);
        design[(row, 1)] = 2.0 * (a.y - a0.y);
        rhs[row] = (a.x * a.x + a.y * a.y) - (a0.x * a0.x + a0.y * a0.y) - d * d + d0 * d0;
    }
    (design, rhs)
}

pub fn trilaterate(
    anchors: &AnchorSet,
    distances: &[f64],
) -> Result<PositionFix, LocalizationError> {
    let positions = anchors.positions();
    if distances.len() != positions.len() {
        return Err(LocalizationError::CountMismatch {
            anchors: positions.len(),
            distances: distances.len(),
        });
    }
    if let Some((index, &value)) = distances
        .iter()
        .enumerate()
        .find(|(_, d)| !(d.is_finite() && **d > 0.0))
    {
        return Err(LocalizationError::BadDistance { index, value });
    }

    let (design, rhs) = linear_system(positions, distances);
    let solution = if design.nrows() == 2 {
        design.lu().solve(&rhs)
    } else {
        // normal equations are 2x2; solve them directly
        let normal = design.transpose() * &design;
        normal.lu().solve(&(design.transpose() * rhs))
    }
    .ok_or(LocalizationError::DegenerateGeometry)?;

    let p = Point::new(solution[0], solution[1]);
    let sq: f64 = positions
        .iter()
        .zip(distances)
        .map(|(a, d)| (p.distance(a) - d).powi(2))
        .sum();
    Ok(PositionFix {
        p,
        residual: (sq / positions.len() as f64).sqrt(),
    })
}

/// Gauss–Newton polish of a linear fix on the true range residuals.
pub fn refine(
    anchors: &AnchorSet,
    distances: &[f64],
    start: PositionFix,
    iterations: usize,
) -> Result<PositionFix, LocalizationError> {
    let positions = anchors.positions();
    if distances.len() != positions.len() {
        return Err(LocalizationError::CountMismatch {
            anchors: positions.len(),
            distances: distances.len(),
        });
    }
    let mut p = start.p;
    for _ in 0..iterations {
        let mut jac = DMatrix::zeros(positions.len(), 2);
        let mut res = DVector::zeros(positions.len());
        for (i, (a, d)) in positions.iter().zip(distances).enumerate() {
            let r = p.distance(a).max(1e-12);
            jac[(i, 0)] = (p.x - a.x) / r;
            jac[(i, 1)] = (p.y - a.y) / r;
            res[i] = r - d;
        }
        let normal = jac.transpose() * &jac;
        let Some(delta) = normal.lu().solve(&(jac.transpose() * res)) else {
            break;
        };
        p = Point::new(p.x - delta[0], p.y - delta[1]);
        if delta.norm() < 1e-12 {
            break;
        }
    }
    let sq: f64 = positions
        .iter()
        .zip(distances)
        .map(|(a, d)| (p.distance(a) - d).powi(2))
        .sum();
    Ok(PositionFix {
        p,
        residual: (sq / positions.len() as f64).sqrt(),
    })
}
