//! Kalman filter, RTS smoother and backward sampler for
//! `η_t = M_t η_{t-1} + u_t`, `z̃_t = S_t η_t + ε_t` with diagonal `V_t`.
//!
//! The measurement update runs in information form on the r x r quantities
//! `F_t = S_t' V_t⁻¹ S_t` and `b_t = S_t' V_t⁻¹ z̃_t`, so nothing of size n_t x n_t
//! is ever factorized.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{default_pinv_tolerance, psd_factor, pseudo_inverse, sample_mvn, symmetrize, OpCounter};
use crate::{Error, Result};

/// Sufficient statistics of one time point's measurements for the state.
#[derive(Debug, Clone)]
pub struct Measurement {
    /// `S_t' V_t⁻¹ S_t`
    pub information: DMatrix<f64>,
    /// `S_t' V_t⁻¹ z̃_t`
    pub score: DVector<f64>,
}

impl Measurement {
    pub fn new(s: &DMatrix<f64>, z_tilde: &DVector<f64>, variances: &DVector<f64>) -> Result<Self> {
        if s.nrows() != z_tilde.len() || z_tilde.len() != variances.len() {
            return Err(Error::Dimension(format!(
                "S has {} rows, z̃ has {} entries, V has {}",
                s.nrows(),
                z_tilde.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation(
                "measurement variances must be positive and finite".into(),
            ));
        }
        let precision = variances.map(|v| 1.0 / v);
        let mut weighted = s.clone();
        for (mut row, w) in weighted.row_iter_mut().zip(precision.iter()) {
            row *= *w;
        }
        Ok(Self {
            information: symmetrize(&(s.transpose() * &weighted)),
            score: weighted.transpose() * z_tilde,
        })
    }

    /// A time point with no observations.
    pub fn empty(r: usize) -> Self {
        Self {
            information: DMatrix::zeros(r, r),
            score: DVector::zeros(r),
        }
    }
}

/// Filtered and one-step predicted moments for `t = 1..T` (index `t - 1`).
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
}

impl FilterOutput {
    pub fn horizon(&self) -> usize {
        self.filtered_mean.len()
    }
}

fn check_finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Forward filter in information form.
///
/// `transitions[t - 2]` and `innovations[t - 2]` hold `M_t` and the innovation
/// covariance for `t = 2..T`; the state starts from `N(0, initial_cov)`.
pub fn filter_information(
    initial_cov: &DMatrix<f64>,
    transitions: &[DMatrix<f64>],
    innovations: &[DMatrix<f64>],
    measurements: &[Measurement],
    counter: Option<&OpCounter>,
) -> Result<FilterOutput> {
    let horizon = measurements.len();
    let r = initial_cov.nrows();
    if horizon == 0 {
        return Err(Error::Dimension("the filter needs at least one time point".into()));
    }
    if initial_cov.shape() != (r, r) || transitions.len() + 1 != horizon || innovations.len() + 1 != horizon {
        return Err(Error::Dimension(format!(
            "{horizon} measurements need {} transitions and innovations, got {} and {}",
            horizon - 1,
            transitions.len(),
            innovations.len()
        )));
    }
    check_finite_matrix(initial_cov, "initial covariance")?;

    let mut out = FilterOutput {
        predicted_mean: Vec::with_capacity(horizon),
        predicted_cov: Vec::with_capacity(horizon),
        filtered_mean: Vec::with_capacity(horizon),
        filtered_cov: Vec::with_capacity(horizon),
    };
    for (ti, meas) in measurements.iter().enumerate() {
        if meas.information.shape() != (r, r) || meas.score.len() != r {
            return Err(Error::Dimension(format!(
                "measurement {} is not conformable with r = {r}",
                ti + 1
            )));
        }
        check_finite_matrix(&meas.information, "measurement information")?;
        if meas.score.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("measurement score at time {}", ti + 1)));
        }
        let (pred_mean, pred_cov) = if ti == 0 {
            (DVector::zeros(r), symmetrize(initial_cov))
        } else {
            let m = &transitions[ti - 1];
            let w = &innovations[ti - 1];
            if m.shape() != (r, r) || w.shape() != (r, r) {
                return Err(Error::Dimension(format!(
                    "transition or innovation at time {} is not r x r",
                    ti + 1
                )));
            }
            check_finite_matrix(m, "transition")?;
            check_finite_matrix(w, "innovation covariance")?;
            let prev_cov = &out.filtered_cov[ti - 1];
            (
                m * &out.filtered_mean[ti - 1],
                symmetrize(&(m * prev_cov * m.transpose() + w)),
            )
        };

        // P_{t|t} = L (I + L' F L)⁻¹ L' with L L' = P_{t|t-1}.
        let factor = psd_factor(&pred_cov);
        if let Some(c) = counter {
            c.record(r);
        }
        let inner = DMatrix::identity(r, r) + factor.transpose() * &meas.information * &factor;
        let chol = symmetrize(&inner)
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("filter update at time {}", ti + 1)))?;
        if let Some(c) = counter {
            c.record(r);
        }
        let half = chol.solve(&factor.transpose());
        let filt_cov = symmetrize(&(&factor * half));
        let filt_mean = &pred_mean + &filt_cov * (&meas.score - &meas.information * &pred_mean);

        out.predicted_mean.push(pred_mean);
        out.predicted_cov.push(pred_cov);
        out.filtered_mean.push(filt_mean);
        out.filtered_cov.push(filt_cov);
    }
    Ok(out)
}

/// Kalman filter on shifted measurements `z̃_t` with observation matrices `S_t`,
/// transitions `M_t` and innovation covariances `W_t` (both for `t = 2..T`),
/// initial covariance `K_1` and diagonal measurement variances `V_t`.
pub fn kalman_filter(
    z_tilde: &[DVector<f64>],
    s: &[DMatrix<f64>],
    m: &[DMatrix<f64>],
    k1: &DMatrix<f64>,
    w: &[DMatrix<f64>],
    v: &[DVector<f64>],
) -> Result<FilterOutput> {
    if z_tilde.len() != s.len() || s.len() != v.len() {
        return Err(Error::Dimension("z̃, S and V must cover the same time points".into()));
    }
    let r = k1.nrows();
    let measurements = z_tilde
        .iter()
        .zip(s)
        .zip(v)
        .map(|((z, s), v)| {
            if s.ncols() != r {
                return Err(Error::Dimension(format!(
                    "S has {} columns, K_1 is {r} x {r}",
                    s.ncols()
                )));
            }
            if z.iter().chain(v.iter()).chain(s.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("filter input".into()));
            }
            Measurement::new(s, z, v)
        })
        .collect::<Result<Vec<_>>>()?;
    filter_information(k1, m, w, &measurements, None)
}

/// `J_t = P_{t|t} M_{t+1}' P_{t+1|t}⁻¹`, with a pseudoinverse fallback when the
/// predicted covariance is singular.
fn smoother_gain(
    filt_cov: &DMatrix<f64>,
    m_next: &DMatrix<f64>,
    pred_cov_next: &DMatrix<f64>,
    counter: Option<&OpCounter>,
) -> DMatrix<f64> {
    let rhs = m_next * filt_cov;
    if let Some(c) = counter {
        c.record(pred_cov_next.nrows());
    }
    match pred_cov_next.clone().cholesky() {
        Some(chol) => chol.solve(&rhs).transpose(),
        None => {
            log::debug!("singular predicted covariance in the backward pass; using the pseudoinverse");
            if let Some(c) = counter {
                c.record_pinv_fallback();
            }
            let pinv = pseudo_inverse(pred_cov_next, default_pinv_tolerance(pred_cov_next));
            (pinv * rhs).transpose()
        }
    }
}

/// Draws `η_{1:T}` from its joint smoothing distribution.
///
/// `η_T ~ N(η_{T|T}, P_{T|T})`, then backwards
/// `η_t ~ N(η_{t|t} + J_t(η_{t+1} - η_{t+1|t}), P_{t|t} - J_t P_{t+1|t} J_t')`.
/// The conditional covariance is evaluated in the equivalent Joseph form
/// `(I - J_t M_{t+1}) P_{t|t} (I - J_t M_{t+1})' + J_t W_{t+1} J_t'`, which is PSD by construction.
pub fn backward_sample<R: Rng + ?Sized>(
    filtered: &FilterOutput,
    transitions: &[DMatrix<f64>],
    innovations: &[DMatrix<f64>],
    rng: &mut R,
    counter: Option<&OpCounter>,
) -> Result<Vec<DVector<f64>>> {
    let horizon = filtered.horizon();
    if transitions.len() + 1 != horizon || innovations.len() + 1 != horizon {
        return Err(Error::Dimension(
            "backward pass needs T - 1 transitions and innovations".into(),
        ));
    }
    let mut draws = vec![DVector::zeros(0); horizon];
    draws[horizon - 1] = sample_mvn(
        &filtered.filtered_mean[horizon - 1],
        &filtered.filtered_cov[horizon - 1],
        rng,
    );
    if let Some(c) = counter {
        c.record(filtered.filtered_cov[horizon - 1].nrows());
    }
    for ti in (0..horizon - 1).rev() {
        let m_next = &transitions[ti];
        let w_next = &innovations[ti];
        let p = &filtered.filtered_cov[ti];
        let j = smoother_gain(p, m_next, &filtered.predicted_cov[ti + 1], counter);
        let mean = &filtered.filtered_mean[ti] + &j * (&draws[ti + 1] - &filtered.predicted_mean[ti + 1]);
        let r = p.nrows();
        let a = DMatrix::identity(r, r) - &j * m_next;
        let cov = symmetrize(&(&a * p * a.transpose() + &j * w_next * j.transpose()));
        if let Some(c) = counter {
            c.record(r);
        }
        draws[ti] = sample_mvn(&mean, &cov, rng);
    }
    Ok(draws)
}

/// Rauch-Tung-Striebel smoothed means and covariances.
pub fn rts_smoother(
    filtered: &FilterOutput,
    transitions: &[DMatrix<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let horizon = filtered.horizon();
    if transitions.len() + 1 != horizon {
        return Err(Error::Dimension("smoother needs T - 1 transitions".into()));
    }
    let mut means = filtered.filtered_mean.clone();
    let mut covs = filtered.filtered_cov.clone();
    for ti in (0..horizon - 1).rev() {
        let j = smoother_gain(
            &filtered.filtered_cov[ti],
            &transitions[ti],
            &filtered.predicted_cov[ti + 1],
            None,
        );
        means[ti] = &filtered.filtered_mean[ti] + &j * (&means[ti + 1] - &filtered.predicted_mean[ti + 1]);
        covs[ti] = symmetrize(
            &(&filtered.filtered_cov[ti] + &j * (&covs[ti + 1] - &filtered.predicted_cov[ti + 1]) * j.transpose()),
        );
    }
    Ok((means, covs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn scalar_bayes_rule() {
        let (k, v, z) = (2.0, 0.5, 1.3);
        let out = kalman_filter(
            &[DVector::from_element(1, z)],
            &[scalar(1.0)],
            &[],
            &scalar(k),
            &[],
            &[DVector::from_element(1, v)],
        )
        .unwrap();
        assert_abs_diff_eq!(out.filtered_mean[0][0], k * z / (k + v), epsilon = 1e-14);
        assert_abs_diff_eq!(out.filtered_cov[0][(0, 0)], k * v / (k + v), epsilon = 1e-14);
    }

    #[test]
    fn uninformative_measurements_keep_prior() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let z = DVector::from_vec(vec![5.0, -3.0, 2.0]);
        let v = DVector::from_element(3, 1e12);
        let m = DMatrix::identity(2, 2);
        let out = kalman_filter(
            &[z.clone(), z.clone()],
            &[s.clone(), s.clone()],
            std::slice::from_ref(&m),
            &DMatrix::identity(2, 2),
            &[DMatrix::identity(2, 2) * 0.5],
            &[v.clone(), v],
        )
        .unwrap();
        for mean in &out.filtered_mean {
            assert!(mean.amax() < 1e-3);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let err = kalman_filter(
            &[DVector::from_element(1, f64::NAN)],
            &[scalar(1.0)],
            &[],
            &scalar(1.0),
            &[],
            &[DVector::from_element(1, 1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn degenerate_dynamics_copy_the_state() {
        let r = 2;
        let s = DMatrix::identity(r, r);
        let z = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        let v = vec![DVector::from_element(r, 0.3); 3];
        let m = vec![DMatrix::identity(r, r); 2];
        let w = vec![DMatrix::zeros(r, r); 2];
        let out = kalman_filter(&z, &[s.clone(), s.clone(), s], &m, &DMatrix::identity(r, r), &w, &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = backward_sample(&out, &m, &w, &mut rng, None).unwrap();
        assert_abs_diff_eq!(draw[0], draw[2], epsilon = 1e-10);
        assert_abs_diff_eq!(draw[1], draw[2], epsilon = 1e-10);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let s = vec![DMatrix::identity(2, 2); 2];
        let z = vec![DVector::from_vec(vec![0.4, -0.2]); 2];
        let v = vec![DVector::from_element(2, 0.5); 2];
        let m = vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])];
        let w = vec![DMatrix::identity(2, 2) * 0.1];
        let out = kalman_filter(&z, &s, &m, &DMatrix::identity(2, 2), &w, &v).unwrap();
        let a = backward_sample(&out, &m, &w, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        let b = backward_sample(&out, &m, &w, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        assert_eq!(a, b);
    }
}
