//! Measurement model, synthetic measurement generation, and the extended
//! Kalman filter that tracks the disturbance vector from grid measurements.
//!
//! Pseudo-measurement channels are direct noisy observations of
//! disturbance channels: the reading is a configured forecast (typically
//! the load-profile average), not the true disturbance, and their rows in
//! the linearized measurement map hit `d` directly instead of going
//! through the state sensitivity.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{clamp_box, GridModel, PowerKind};
use crate::powerflow;

/// One measurement channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeasChannel {
    /// Voltage magnitude at a non-slack bus.
    VoltageMag(usize),
    /// Voltage angle at a non-slack bus.
    VoltageAngle(usize),
    /// Pseudo-measurement of the active-power disturbance at a bus.
    PseudoP(usize),
    /// Pseudo-measurement of the reactive-power disturbance at a bus.
    PseudoQ(usize),
}

/// Measurement channels with per-channel noise and the pseudo forecast.
#[derive(Clone, Debug)]
pub struct MeasurementModel {
    channels: Vec<MeasChannel>,
    sigma: DVector<f64>,
    /// Forecast per disturbance channel, read by pseudo channels.
    forecast: DVector<f64>,
    /// For each channel, the disturbance index it observes (pseudo only).
    d_index: Vec<Option<usize>>,
}

impl MeasurementModel {
    pub fn new(
        model: &GridModel,
        channels: Vec<(MeasChannel, f64)>,
        forecast: DVector<f64>,
    ) -> Result<Self> {
        if forecast.len() != model.n_disturbances() {
            return Err(Error::Dimension(
                "forecast length must match disturbance channels".into(),
            ));
        }
        let mut kinds = Vec::with_capacity(channels.len());
        let mut sigma = DVector::zeros(channels.len());
        let mut d_index = Vec::with_capacity(channels.len());
        for (k, (ch, sd)) in channels.into_iter().enumerate() {
            if !(sd > 0.0) {
                return Err(Error::Measurement(format!(
                    "channel {k}: sigma must be positive (noise covariance must stay invertible)"
                )));
            }
            let di = match ch {
                MeasChannel::VoltageMag(bus) => {
                    if bus == model.slack() {
                        return Err(Error::Measurement(format!(
                            "channel {k}: slack voltage magnitude is an input, not a state"
                        )));
                    }
                    if model.state_position(bus).is_none() {
                        return Err(Error::Measurement(format!("channel {k}: bus {bus} invalid")));
                    }
                    None
                }
                MeasChannel::VoltageAngle(bus) => {
                    if bus == model.slack() {
                        return Err(Error::Measurement(format!(
                            "channel {k}: slack voltage angle is identically zero"
                        )));
                    }
                    if model.state_position(bus).is_none() {
                        return Err(Error::Measurement(format!("channel {k}: bus {bus} invalid")));
                    }
                    None
                }
                MeasChannel::PseudoP(bus) => Some(
                    model
                        .disturbance_index(bus, PowerKind::Active)
                        .ok_or_else(|| {
                            Error::Measurement(format!(
                                "channel {k}: no P disturbance channel at bus {bus}"
                            ))
                        })?,
                ),
                MeasChannel::PseudoQ(bus) => Some(
                    model
                        .disturbance_index(bus, PowerKind::Reactive)
                        .ok_or_else(|| {
                            Error::Measurement(format!(
                                "channel {k}: no Q disturbance channel at bus {bus}"
                            ))
                        })?,
                ),
            };
            kinds.push(ch);
            sigma[k] = sd;
            d_index.push(di);
        }
        Ok(MeasurementModel {
            channels: kinds,
            sigma,
            forecast,
            d_index,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[MeasChannel] {
        &self.channels
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn forecast(&self) -> &DVector<f64> {
        &self.forecast
    }

    /// Noise-free channel readings: voltage channels from the state,
    /// pseudo channels from `d_ref`.
    pub fn predict(&self, model: &GridModel, x: &DVector<f64>, d_ref: &DVector<f64>) -> DVector<f64> {
        let m = model.n_buses() - 1;
        DVector::from_fn(self.channels.len(), |k, _| match self.channels[k] {
            MeasChannel::VoltageMag(bus) => x[model.state_position(bus).unwrap()],
            MeasChannel::VoltageAngle(bus) => x[m + model.state_position(bus).unwrap()],
            MeasChannel::PseudoP(_) | MeasChannel::PseudoQ(_) => {
                d_ref[self.d_index[k].unwrap()]
            }
        })
    }
}

/// Zero-mean Gaussian truncated at +-6 sigma, so the noise stays bounded.
fn bounded_noise(rng: &mut impl Rng, sigma: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 6.0 {
            return sigma * v;
        }
    }
}

/// Draw one noisy measurement vector. Voltage channels read the true
/// state; pseudo channels read the configured forecast.
pub fn measure(
    model: &GridModel,
    meas: &MeasurementModel,
    x_true: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    if x_true.len() != model.n_states() {
        return Err(Error::Dimension("state length mismatch".into()));
    }
    let clean = meas.predict(model, x_true, meas.forecast());
    Ok(DVector::from_fn(meas.n_channels(), |k, _| {
        clean[k] + bounded_noise(rng, meas.sigma()[k])
    }))
}

/// Jacobian of the channel readings with respect to the state. Voltage
/// channels are unit selection rows; pseudo channels do not depend on the
/// state, so their rows are zero.
pub fn measurement_jacobian(
    model: &GridModel,
    meas: &MeasurementModel,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let m = model.n_buses() - 1;
    let _ = x; // the map is linear in x; kept for signature symmetry
    let mut jc = DMatrix::zeros(meas.n_channels(), 2 * m);
    for (k, ch) in meas.channels().iter().enumerate() {
        match ch {
            MeasChannel::VoltageMag(bus) => {
                jc[(k, model.state_position(*bus).unwrap())] = 1.0;
            }
            MeasChannel::VoltageAngle(bus) => {
                jc[(k, m + model.state_position(*bus).unwrap())] = 1.0;
            }
            MeasChannel::PseudoP(_) | MeasChannel::PseudoQ(_) => {}
        }
    }
    jc
}

/// Disturbance estimate, covariance, drift, and process covariance.
#[derive(Clone, Debug)]
pub struct EstimatorState {
    pub d_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma_omega: DMatrix<f64>,
}

impl EstimatorState {
    /// Standard initialization: estimate from the pseudo forecast,
    /// covariance ten times the process covariance.
    pub fn from_forecast(model: &GridModel, forecast: &DVector<f64>, sigma_omega: DVector<f64>, mu: DVector<f64>) -> Result<Self> {
        let n_d = model.n_disturbances();
        if forecast.len() != n_d || sigma_omega.len() != n_d || mu.len() != n_d {
            return Err(Error::Dimension("estimator vectors must match n_d".into()));
        }
        let sw = DMatrix::from_diagonal(&sigma_omega);
        Ok(EstimatorState {
            d_hat: clamp_box(forecast, model.d_lo(), model.d_hi()),
            p: &sw * 10.0,
            mu,
            sigma_omega: sw,
        })
    }

    /// Smallest eigenvalue of P (symmetry is maintained by the update).
    pub fn p_min_eig(&self) -> f64 {
        self.p
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Information-form Kalman gain
/// `K = (C' Sn^-1 C + P_prior^-1)^-1 C' Sn^-1` with `Sn = diag(sigma^2)`.
pub fn kalman_gain(
    c: &DMatrix<f64>,
    sigma: &DVector<f64>,
    p_prior: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let sn_inv = DMatrix::from_diagonal(&sigma.map(|s| 1.0 / (s * s)));
    let p_lu = linalg::lu(p_prior.clone())
        .map_err(|s| Error::DegeneratePrior { pivot: s.pivot })?;
    let p_inv = p_lu.solve_mat(&DMatrix::identity(p_prior.nrows(), p_prior.ncols()));
    let info = c.transpose() * &sn_inv * c + p_inv;
    let info_lu = linalg::lu(info).map_err(|s| Error::DegeneratePrior { pivot: s.pivot })?;
    Ok(info_lu.solve_mat(&(c.transpose() * &sn_inv)))
}

/// One EKF update. `z_prior` is the online power-flow approximation of the
/// state at `(u_t, d_hat + mu)`.
pub fn ekf_update(
    model: &GridModel,
    meas: &MeasurementModel,
    est: &EstimatorState,
    u_t: &DVector<f64>,
    z_prior: &DVector<f64>,
    y_t: &DVector<f64>,
) -> Result<EstimatorState> {
    let all = vec![true; meas.n_channels()];
    ekf_update_with_mask(model, meas, est, u_t, z_prior, y_t, &all)
}

/// EKF update restricted to the channels flagged in `active`; used to
/// build degraded baselines (for example pseudo-measurements only).
pub fn ekf_update_with_mask(
    model: &GridModel,
    meas: &MeasurementModel,
    est: &EstimatorState,
    u_t: &DVector<f64>,
    z_prior: &DVector<f64>,
    y_t: &DVector<f64>,
    active: &[bool],
) -> Result<EstimatorState> {
    if y_t.len() != meas.n_channels() || active.len() != meas.n_channels() {
        return Err(Error::Dimension("measurement length mismatch".into()));
    }
    for k in 0..y_t.len() {
        if !y_t[k].is_finite() {
            return Err(Error::NonFiniteMeasurement(k));
        }
    }

    let d_prior = &est.d_hat + &est.mu;
    let p_prior = &est.p + &est.sigma_omega;

    // C_t: voltage rows through the state sensitivity at the prior
    // operating point, pseudo rows hitting d directly.
    let (_, sx_d) = powerflow::sensitivities(model, z_prior, u_t, &d_prior)?;
    let jc = measurement_jacobian(model, meas, z_prior);
    let mut c = &jc * &sx_d;
    for (k, di) in (0..meas.n_channels()).map(|k| (k, meas_d_index(meas, k))) {
        if let Some(d) = di {
            c[(k, d)] = 1.0;
        }
    }

    let predicted = meas.predict(model, z_prior, &d_prior);
    let innovation = y_t - predicted;

    let rows: Vec<usize> = (0..meas.n_channels()).filter(|&k| active[k]).collect();
    if rows.is_empty() {
        return Err(Error::Measurement("no active measurement channels".into()));
    }
    let c_act = c.select_rows(rows.iter());
    let sigma_act = DVector::from_fn(rows.len(), |i, _| meas.sigma()[rows[i]]);
    let innov_act = DVector::from_fn(rows.len(), |i, _| innovation[rows[i]]);

    let k_gain = kalman_gain(&c_act, &sigma_act, &p_prior)?;

    let mut d_hat = &d_prior + &k_gain * innov_act;
    let p = (DMatrix::identity(d_hat.len(), d_hat.len()) - &k_gain * &c_act) * &p_prior;
    // symmetrize to keep P PSD over long runs
    let p = (&p + p.transpose()) * 0.5;

    let clamped = clamp_box(&d_hat, model.d_lo(), model.d_hi());
    if (&clamped - &d_hat).amax() > 0.0 {
        log::warn!(
            "disturbance estimate clamped to the configured box (max shift {:.3e})",
            (&clamped - &d_hat).amax()
        );
        d_hat = clamped;
    }

    Ok(EstimatorState {
        d_hat,
        p,
        mu: est.mu.clone(),
        sigma_omega: est.sigma_omega.clone(),
    })
}

fn meas_d_index(meas: &MeasurementModel, k: usize) -> Option<usize> {
    match meas.channels()[k] {
        MeasChannel::PseudoP(_) | MeasChannel::PseudoQ(_) => meas.d_index_of(k),
        _ => None,
    }
}

impl MeasurementModel {
    fn d_index_of(&self, k: usize) -> Option<usize> {
        self.d_index[k]
    }
}
