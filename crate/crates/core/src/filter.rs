//! Discrete-time linear Kalman filter primitives.
//!
//! The same three steps back both the standalone baseline filter and every
//! local filter inside a federation:
//!
//! - predict: `x = A x + B u`, `P = A P Aᵀ + Q`
//! - gain:    `K = P Cᵀ (C P Cᵀ + R)⁻¹`
//! - update:  `x = x + K (z - C x)`, `P = (I - K C) P (I - K C)ᵀ + K R Kᵀ`
//!
//! The covariance update is always the Joseph form. One measurement matrix `C`
//! serves both the gain and the update.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("shape mismatch in {matrix}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        matrix: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("innovation covariance C P Cᵀ + R is numerically singular")]
    SingularInnovation,
}

/// State vector and covariance at time index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: u64,
}

impl StateEstimate {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, k: u64) -> Result<Self, FilterError> {
        let n = x.len();
        check_shape("P", &p, (n, n))?;
        Ok(Self { x, p, k })
    }

    pub fn scalar(x: f64, p: f64, k: u64) -> Self {
        Self {
            x: DVector::from_element(1, x),
            p: DMatrix::from_element(1, 1, p),
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Largest elementwise `|P - Pᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        max_asymmetry(&self.p)
    }

    /// Smallest eigenvalue of the symmetric part of `P`.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.p + self.p.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

/// System matrices for one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KfModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl KfModel {
    /// Builds a model and checks that every dimension agrees with `A` and `C`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let model = Self { a, b, c, q, r };
        model.validate()?;
        Ok(model)
    }

    /// Random-walk scalar model with no control channel (`n_u = 0`).
    pub fn scalar(a: f64, c: f64, q: f64, r: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::zeros(1, 0),
            c: DMatrix::from_element(1, 1, c),
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let n = self.a.nrows();
        let m = self.c.nrows();
        check_shape("A", &self.a, (n, n))?;
        check_shape("B", &self.b, (n, self.b.ncols()))?;
        check_shape("C", &self.c, (m, n))?;
        check_shape("Q", &self.q, (n, n))?;
        check_shape("R", &self.r, (m, m))?;
        Ok(())
    }

    /// Same model with the process noise replaced.
    pub fn with_process_noise(&self, q: DMatrix<f64>) -> Result<Self, FilterError> {
        let n = self.state_dim();
        check_shape("Q", &q, (n, n))?;
        Ok(Self { q, ..self.clone() })
    }
}

fn check_shape(
    matrix: &'static str,
    m: &DMatrix<f64>,
    expected: (usize, usize),
) -> Result<(), FilterError> {
    let found = m.shape();
    if found != expected {
        return Err(FilterError::ShapeMismatch {
            matrix,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(name: &'static str, v: &DVector<f64>, expected: usize) -> Result<(), FilterError> {
    if v.len() != expected {
        return Err(FilterError::ShapeMismatch {
            matrix: name,
            expected: (expected, 1),
            found: (v.len(), 1),
        });
    }
    Ok(())
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Time update. A missing control vector is treated as zero.
pub fn predict(
    state: &StateEstimate,
    model: &KfModel,
    u: Option<&DVector<f64>>,
) -> Result<StateEstimate, FilterError> {
    model.validate()?;
    let n = model.state_dim();
    check_len("x", &state.x, n)?;
    check_shape("P", &state.p, (n, n))?;

    let mut x = &model.a * &state.x;
    if let Some(u) = u {
        check_len("u", u, model.control_dim())?;
        x += &model.b * u;
    }
    let p = &model.a * &state.p * model.a.transpose() + &model.q;
    Ok(StateEstimate {
        x,
        p,
        k: state.k + 1,
    })
}

/// Kalman gain `P Cᵀ (C P Cᵀ + R)⁻¹`, computed with a linear solve.
pub fn gain(
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FilterError> {
    let n = p.nrows();
    let m = c.nrows();
    check_shape("P", p, (n, n))?;
    check_shape("C", c, (m, n))?;
    check_shape("R", r, (m, m))?;

    let pct = p * c.transpose();
    let s = c * &pct + r;
    // K S = P Cᵀ  <=>  Sᵀ Kᵀ = (P Cᵀ)ᵀ
    let kt = s
        .transpose()
        .lu()
        .solve(&pct.transpose())
        .ok_or(FilterError::SingularInnovation)?;
    if kt.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::SingularInnovation);
    }
    Ok(kt.transpose())
}

/// Measurement update with the Joseph-form covariance.
pub fn update(
    state: &StateEstimate,
    model: &KfModel,
    z: &DVector<f64>,
) -> Result<StateEstimate, FilterError> {
    model.validate()?;
    let n = model.state_dim();
    check_len("x", &state.x, n)?;
    check_shape("P", &state.p, (n, n))?;
    check_len("z", z, model.measurement_dim())?;

    let k = gain(&state.p, &model.c, &model.r)?;
    let innovation = z - &model.c * &state.x;
    let x = &state.x + &k * innovation;

    let i_kc = DMatrix::identity(n, n) - &k * &model.c;
    let p = &i_kc * &state.p * i_kc.transpose() + &k * &model.r * k.transpose();
    Ok(StateEstimate { x, p, k: state.k })
}

/// One predict + update cycle.
pub fn step(
    state: &StateEstimate,
    model: &KfModel,
    z: &DVector<f64>,
) -> Result<StateEstimate, FilterError> {
    let prior = predict(state, model, None)?;
    update(&prior, model, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_z(z: f64) -> DVector<f64> {
        DVector::from_element(1, z)
    }

    #[test]
    fn predict_identity_dynamics_is_noop() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 1.0);
        let out = predict(&StateEstimate::scalar(5.0, 2.0, 0), &model, None).unwrap();
        assert_eq!(out.x[0], 5.0);
        assert_eq!(out.p[(0, 0)], 2.0);
        assert_eq!(out.k, 1);
    }

    #[test]
    fn predict_adds_process_noise() {
        let model = KfModel::scalar(1.0, 1.0, 0.5, 1.0);
        let out = predict(&StateEstimate::scalar(-57.0, 1.0, 3), &model, None).unwrap();
        assert_eq!(out.x[0], -57.0);
        assert!((out.p[(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(out.k, 4);
    }

    #[test]
    fn predict_constant_velocity() {
        let model = KfModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let state = StateEstimate::new(
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::identity(2, 2),
            0,
        )
        .unwrap();
        let out = predict(&state, &model, Some(&DVector::zeros(1))).unwrap();
        assert_eq!(out.x, DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(out.p, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn predict_rejects_bad_control_length() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 1.0);
        let err = predict(
            &StateEstimate::scalar(0.0, 1.0, 0),
            &model,
            Some(&DVector::zeros(2)),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            FilterError::ShapeMismatch { matrix: "u", .. }
        ));
    }

    #[test]
    fn model_new_names_offending_matrix() {
        let err = KfModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(3, 3),
            DMatrix::identity(1, 1),
        )
        .unwrap_err();
        assert_eq!(
            err,
            FilterError::ShapeMismatch {
                matrix: "Q",
                expected: (2, 2),
                found: (3, 3)
            }
        );
    }

    #[test]
    fn gain_limits() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let k = gain(&one, &one, &one).unwrap();
        assert_eq!(k[(0, 0)], 0.5);

        let k = gain(&one, &one, &DMatrix::from_element(1, 1, 1e12)).unwrap();
        assert!(k[(0, 0)].abs() < 1e-10);

        let k = gain(
            &DMatrix::from_element(1, 1, 4.0),
            &one,
            &DMatrix::from_element(1, 1, 1e-12),
        )
        .unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gain_singular_innovation() {
        let zero = DMatrix::zeros(1, 1);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(
            gain(&zero, &one, &zero).unwrap_err(),
            FilterError::SingularInnovation
        );
    }

    #[test]
    fn update_hand_values() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 1.0);
        let out = update(&StateEstimate::scalar(0.0, 1.0, 0), &model, &scalar_z(2.0)).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-15);
        assert!((out.p[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn update_ignores_untrusted_measurement() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 1e12);
        let out = update(
            &StateEstimate::scalar(0.0, 1.0, 0),
            &model,
            &scalar_z(100.0),
        )
        .unwrap();
        assert!(out.x[0].abs() < 1e-6);
    }

    #[test]
    fn zero_innovation_keeps_state_bits() {
        let model = KfModel::scalar(1.0, 1.0, 0.3, 2.0);
        let state = StateEstimate::scalar(-61.37, 3.1, 7);
        let out = update(&state, &model, &scalar_z(-61.37)).unwrap();
        assert_eq!(out.x[0].to_bits(), state.x[0].to_bits());
        assert_ne!(out.p, state.p);
    }

    #[test]
    fn update_rejects_bad_measurement_length() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 1.0);
        let err = update(
            &StateEstimate::scalar(0.0, 1.0, 0),
            &model,
            &DVector::zeros(3),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            FilterError::ShapeMismatch { matrix: "z", .. }
        ));
    }

    #[test]
    fn trace_non_increasing_without_process_noise() {
        let model = KfModel::scalar(1.0, 1.0, 0.0, 4.0);
        let mut state = StateEstimate::scalar(0.0, 50.0, 0);
        let mut last = state.p.trace();
        for i in 0..100 {
            state = step(&state, &model, &scalar_z((i % 7) as f64)).unwrap();
            let tr = state.p.trace();
            assert!(tr <= last + 1e-15);
            last = tr;
        }
    }
}
