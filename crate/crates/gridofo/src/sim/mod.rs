//! Closed-loop harness: disturbance playback, measurement generation, the
//! per-step operator sequence (prior power-flow update, estimator update,
//! posterior power-flow update, controller step, saturation at the next
//! step), and trace/metrics emission.
//!
//! The plant is exact physics: the true state is always re-solved by
//! Newton to 1e-10, while the controller only ever sees its own online
//! approximation `z` and the estimate `dhat`.

pub mod metrics;
pub mod profiles;
pub mod trace;

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    ekf_update_with_mask, measure, EstimatorState, MeasChannel, MeasurementModel,
};
use crate::network::{clamp_box, GridFixture, GridModel};
use crate::ofo::{self, OfoConfig, Theta};
use crate::oracle::OracleCache;
use crate::powerflow::{self, flat_start, newton_solve, online_pf_step};

pub use metrics::{compare, metrics, CompareReport, StepsToBand, Summary};
pub use profiles::{load_profiles, ProfileSet, ProfileSource, ProfileSpec};
pub use trace::{csv_header, ScenarioTrace, TraceRow, TraceWriter};

/// Invariants checked while building a scenario, in check order.
pub const VALIDATED_INVARIANTS: &[&str] = &[
    "bus index",
    "zero impedance",
    "connectivity",
    "slack channel",
    "channel completeness",
    "bound length",
    "bound ordering",
    "measurement placement",
    "estimator shape",
    "controller config",
    "profile length",
    "profile finiteness",
    "bound profile ordering",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path { path: String },
    Inline(GridFixture),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Qp,
    Pg,
    /// Holds the initial set-points forever; baseline for uncontrolled
    /// comparisons.
    Frozen,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Qp => write!(f, "qp"),
            ControllerKind::Pg => write!(f, "pg"),
            ControllerKind::Frozen => write!(f, "frozen"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub controller: ControllerKind,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::zeta")]
    pub zeta: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "defaults::yes")]
    pub soft_mode: bool,
    pub u_ref: Vec<f64>,
    #[serde(default = "defaults::vmin")]
    pub vmin: f64,
    #[serde(default = "defaults::vmax")]
    pub vmax: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasKindSpec {
    Vm,
    Va,
    PseudoP,
    PseudoQ,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasSpec {
    pub kind: MeasKindSpec,
    pub bus: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfilesSpec {
    pub d: ProfileSource,
    pub u_lo: ProfileSource,
    pub u_hi: ProfileSource,
}

/// Scenario file schema. The network fixture may be inline or referenced
/// by a path relative to the scenario file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelRef,
    pub horizon: usize,
    /// Seconds per step, metadata only: the loop is a discrete-time map.
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Inner iterations of the online power-flow operator.
    #[serde(default = "defaults::one")]
    pub n_inner: usize,
    /// Oracle cadence in steps; 0 disables the oracle.
    #[serde(default)]
    pub oracle_every: usize,
    /// Solve the reference problem at the estimated theta instead of the
    /// true one.
    #[serde(default)]
    pub oracle_on_estimate: bool,
    /// Replace the online solver with Newton-to-convergence inside the
    /// loop (reference variant for the approximation study).
    #[serde(default)]
    pub exact_pf_in_loop: bool,
    #[serde(default)]
    pub u0: Option<Vec<f64>>,
    /// Start the online approximation from the flat profile instead of the
    /// solved state at `(u0, dhat0)`.
    #[serde(default)]
    pub z0_flat: bool,
    pub controller: ControllerSpec,
    pub measurements: Vec<MeasSpec>,
    /// Diagonal of the process covariance, one entry per disturbance
    /// channel.
    pub sigma_omega: Vec<f64>,
    /// Drift term; defaults to zero.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    /// Pseudo-measurement forecast override; defaults to the per-channel
    /// mean of the disturbance profiles.
    #[serde(default)]
    pub pseudo_forecast: Option<Vec<f64>>,
    pub profiles: ProfilesSpec,
    #[serde(default = "defaults::radius")]
    pub residual_radius: f64,
    /// Restrict the estimator gain to the pseudo channels (degraded
    /// baseline for estimator studies).
    #[serde(default)]
    pub ekf_pseudo_only: bool,
}

mod defaults {
    pub fn eta() -> f64 {
        5.0
    }
    pub fn zeta() -> f64 {
        1e3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn vmin() -> f64 {
        0.94
    }
    pub fn vmax() -> f64 {
        1.06
    }
    pub fn dt() -> f64 {
        1.0
    }
    pub fn one() -> usize {
        1
    }
    pub fn radius() -> f64 {
        crate::powerflow::DEFAULT_RESIDUAL_RADIUS
    }
}

/// A fully resolved scenario, ready to run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub model: GridModel,
    pub meas: MeasurementModel,
    pub ofo: OfoConfig,
    pub d_profiles: ProfileSet,
    pub lo_profiles: ProfileSet,
    pub hi_profiles: ProfileSet,
    pub mu: DVector<f64>,
    pub sigma_omega: DVector<f64>,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read scenario {}: {e}", path.display()))
        })?;
        let spec: ScenarioSpec = serde_json::from_str(&text)?;
        Self::from_spec(spec, path.parent().map(PathBuf::from).as_deref())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        Self::from_spec(spec, None)
    }

    pub fn from_spec(spec: ScenarioSpec, base_dir: Option<&Path>) -> Result<Self> {
        let model = match &spec.model {
            ModelRef::Inline(fx) => GridModel::from_fixture(fx)?,
            ModelRef::Path { path } => {
                let full = match base_dir {
                    Some(dir) => dir.join(path),
                    None => PathBuf::from(path),
                };
                let text = std::fs::read_to_string(&full).map_err(|e| {
                    Error::Config(format!("cannot read model {}: {e}", full.display()))
                })?;
                GridModel::from_json(&text)?
            }
        };
        if spec.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }

        let n_d = model.n_disturbances();
        let n_u = model.n_inputs();
        if spec.sigma_omega.len() != n_d {
            return Err(Error::Invariant {
                name: "estimator shape",
                detail: format!("sigma_omega needs {n_d} entries"),
            });
        }
        let mu = match &spec.mu {
            Some(v) if v.len() != n_d => {
                return Err(Error::Invariant {
                    name: "estimator shape",
                    detail: format!("mu needs {n_d} entries"),
                });
            }
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(n_d),
        };
        if spec.controller.u_ref.len() != n_u {
            return Err(Error::Invariant {
                name: "controller config",
                detail: format!("u_ref needs {n_u} entries"),
            });
        }
        let mut ofo = OfoConfig::new(
            spec.controller.eta,
            DVector::from_vec(spec.controller.u_ref.clone()),
            spec.controller.vmin,
            spec.controller.vmax,
        )
        .map_err(|e| Error::Invariant {
            name: "controller config",
            detail: e.to_string(),
        })?;
        ofo.zeta = spec.controller.zeta;
        ofo.alpha = spec.controller.alpha;
        ofo.soft_mode = spec.controller.soft_mode;
        ofo.validate().map_err(|e| Error::Invariant {
            name: "controller config",
            detail: e.to_string(),
        })?;

        // profiles use their own deterministic stream
        let mut profile_rng = ChaCha12Rng::seed_from_u64(spec.seed);
        profile_rng.set_stream(1);
        let d_profiles = load_profiles(
            &spec.profiles.d,
            n_d,
            spec.horizon,
            base_dir,
            &mut profile_rng,
        )?;
        let lo_profiles = load_profiles(
            &spec.profiles.u_lo,
            n_u,
            spec.horizon,
            base_dir,
            &mut profile_rng,
        )?;
        let hi_profiles = load_profiles(
            &spec.profiles.u_hi,
            n_u,
            spec.horizon,
            base_dir,
            &mut profile_rng,
        )?;
        for t in 0..spec.horizon {
            let lo = lo_profiles.at(t);
            let hi = hi_profiles.at(t);
            for j in 0..n_u {
                if lo[j] > hi[j] {
                    return Err(Error::Invariant {
                        name: "bound profile ordering",
                        detail: format!("u_lo[{j}] > u_hi[{j}] at step {t}"),
                    });
                }
            }
        }

        let forecast = match &spec.pseudo_forecast {
            Some(v) => {
                if v.len() != n_d {
                    return Err(Error::Invariant {
                        name: "estimator shape",
                        detail: format!("pseudo_forecast needs {n_d} entries"),
                    });
                }
                DVector::from_vec(v.clone())
            }
            None => d_profiles.channel_means(),
        };
        let channels = spec
            .measurements
            .iter()
            .map(|m| {
                let ch = match m.kind {
                    MeasKindSpec::Vm => MeasChannel::VoltageMag(m.bus),
                    MeasKindSpec::Va => MeasChannel::VoltageAngle(m.bus),
                    MeasKindSpec::PseudoP => MeasChannel::PseudoP(m.bus),
                    MeasKindSpec::PseudoQ => MeasChannel::PseudoQ(m.bus),
                };
                (ch, m.sigma)
            })
            .collect();
        let meas = MeasurementModel::new(&model, channels, forecast).map_err(|e| {
            Error::Invariant {
                name: "measurement placement",
                detail: e.to_string(),
            }
        })?;

        if spec.n_inner < 1 {
            return Err(Error::Config("n_inner must be at least 1".into()));
        }

        let sigma_omega = DVector::from_vec(spec.sigma_omega.clone());
        Ok(Scenario {
            spec,
            model,
            meas,
            ofo,
            d_profiles,
            lo_profiles,
            hi_profiles,
            mu,
            sigma_omega,
        })
    }

    fn theta_at(&self, t: usize, d: DVector<f64>) -> Theta {
        Theta {
            d,
            lo: self.lo_profiles.at(t),
            hi: self.hi_profiles.at(t),
        }
    }
}

/// Run the closed loop and collect the trace in memory.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioTrace> {
    let mut sink = |_: &TraceRow| Ok(());
    run_with_sink(scenario, &mut sink)
}

/// Run the closed loop, streaming every row into `writer` as it is
/// produced (aborted runs keep their partial trace on disk).
pub fn run_scenario_streaming<W: Write>(
    scenario: &Scenario,
    writer: &mut TraceWriter<W>,
) -> Result<ScenarioTrace> {
    let mut sink = |row: &TraceRow| writer.write_row(row);
    run_with_sink(scenario, &mut sink)
}

fn run_with_sink(
    scenario: &Scenario,
    sink: &mut dyn FnMut(&TraceRow) -> Result<()>,
) -> Result<ScenarioTrace> {
    let model = &scenario.model;
    let spec = &scenario.spec;
    let horizon = spec.horizon;
    let n_steps = spec.n_inner;
    let radius = spec.residual_radius;
    let newton_tol = powerflow::DEFAULT_NEWTON_TOL;
    let newton_max = powerflow::DEFAULT_NEWTON_MAX_ITER;

    let mut meas_rng = ChaCha12Rng::seed_from_u64(spec.seed);
    meas_rng.set_stream(2);

    let abort = |step: usize, source: Error, diag: String| Error::Aborted {
        step,
        source: Box::new(source),
        diagnostic: diag,
    };

    // controller configuration local to this run (PG step size resolution)
    let mut ofo_cfg = scenario.ofo.clone();

    // initial estimator state
    let mut est = EstimatorState::from_forecast(
        model,
        scenario.meas.forecast(),
        scenario.sigma_omega.clone(),
        scenario.mu.clone(),
    )?;

    // initial inputs, saturated by the step-0 box
    let lo0 = scenario.lo_profiles.at(0);
    let hi0 = scenario.hi_profiles.at(0);
    let u_init = match &spec.u0 {
        Some(v) => {
            if v.len() != model.n_inputs() {
                return Err(Error::Config("u0 length mismatch".into()));
            }
            DVector::from_vec(v.clone())
        }
        None => ofo_cfg.u_ref.clone(),
    };
    let mut u_t = clamp_box(&u_init, &lo0, &hi0);
    let mut u_prev = u_t.clone();

    // plant state at t = 0
    let d0 = scenario.d_profiles.at(0);
    let mut x_t = newton_solve(model, &flat_start(model), &u_t, &d0, newton_tol, newton_max)
        .map_err(|e| abort(0, e, "plant solve at t = 0".into()))?
        .x;

    // online approximation start
    let mut z_prev = if spec.z0_flat {
        flat_start(model)
    } else {
        newton_solve(model, &flat_start(model), &u_t, &est.d_hat, newton_tol, newton_max)
            .map_err(|e| abort(0, e, "online init at (u0, dhat0)".into()))?
            .x
    };

    if spec.controller.controller == ControllerKind::Pg {
        ofo_cfg
            .resolve_alpha(model, &z_prev, &u_t, &est.d_hat)
            .map_err(|e| abort(0, e, "pg step-size resolution".into()))?;
        log::info!("pg step size alpha = {:?}", ofo_cfg.alpha);
    }

    let mask: Vec<bool> = scenario
        .meas
        .channels()
        .iter()
        .map(|c| {
            !spec.ekf_pseudo_only
                || matches!(c, MeasChannel::PseudoP(_) | MeasChannel::PseudoQ(_))
        })
        .collect();

    let mut oracle_cache = OracleCache::new();
    let mut zeta_flagged = false;
    let mut rows = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let d_t = scenario.d_profiles.at(t);
        let diag = |what: &str, u: &DVector<f64>, dh: &DVector<f64>| {
            format!(
                "{what}; u = {:?}, dhat = {:?}",
                u.as_slice(),
                dh.as_slice()
            )
        };

        // 1. measure
        let y_t = measure(model, &scenario.meas, &x_t, &mut meas_rng)
            .map_err(|e| abort(t, e, diag("measurement", &u_t, &est.d_hat)))?;

        // 2. prior power-flow update toward (u_t, dhat_{t-1} + mu)
        let d_drift = &est.d_hat + &est.mu;
        let z_pr = if spec.exact_pf_in_loop {
            newton_solve(model, &z_prev, &u_t, &d_drift, newton_tol, newton_max)
                .map_err(|e| abort(t, e, diag("prior pf", &u_t, &d_drift)))?
                .x
        } else {
            online_pf_step(
                model, &z_prev, &u_t, &u_prev, &d_drift, &est.d_hat, n_steps, radius,
            )
            .map_err(|e| abort(t, e, diag("prior pf", &u_t, &d_drift)))?
        };

        // 3. estimator update at the prior approximation
        let est_next = ekf_update_with_mask(
            model,
            &scenario.meas,
            &est,
            &u_t,
            &z_pr,
            &y_t,
            &mask,
        )
        .map_err(|e| abort(t, e, diag("ekf", &u_t, &est.d_hat)))?;

        // 4. posterior power-flow update toward (u_t, dhat_t)
        let z_t = if spec.exact_pf_in_loop {
            newton_solve(model, &z_pr, &u_t, &est_next.d_hat, newton_tol, newton_max)
                .map_err(|e| abort(t, e, diag("posterior pf", &u_t, &est_next.d_hat)))?
                .x
        } else {
            online_pf_step(
                model,
                &z_pr,
                &u_t,
                &u_t,
                &est_next.d_hat,
                &d_drift,
                n_steps,
                radius,
            )
            .map_err(|e| abort(t, e, diag("posterior pf", &u_t, &est_next.d_hat)))?
        };
        est = est_next;

        // 5. controller step at the online approximation
        let theta_hat = scenario.theta_at(t, est.d_hat.clone());
        let (u_plus, max_dual, relaxed) = match spec.controller.controller {
            ControllerKind::Qp => {
                let step = ofo::qp_operator(model, &u_t, &z_t, &theta_hat, &ofo_cfg)
                    .map_err(|e| abort(t, e, diag("controller", &u_t, &est.d_hat)))?;
                (step.u_plus, step.max_dual, step.relaxed)
            }
            ControllerKind::Pg => {
                let u_plus = ofo::pg_operator(model, &u_t, &z_t, &theta_hat, &ofo_cfg)
                    .map_err(|e| abort(t, e, diag("controller", &u_t, &est.d_hat)))?;
                (u_plus, 0.0, false)
            }
            ControllerKind::Frozen => (u_t.clone(), 0.0, false),
        };
        if !zeta_flagged && max_dual >= ofo_cfg.zeta {
            log::warn!(
                "penalty weight zeta = {} no longer dominates the observed duals ({max_dual:.3e}); merit descent is not certified",
                ofo_cfg.zeta
            );
            zeta_flagged = true;
        }

        // diagnostics
        let h_norm = powerflow::residual(model, &z_t, &u_t, &est.d_hat)
            .map(|h| h.norm())
            .unwrap_or(f64::NAN);
        let x_hat = newton_solve(model, &z_t, &u_t, &est.d_hat, newton_tol, newton_max)
            .map_err(|e| abort(t, e, diag("xhat solve", &u_t, &est.d_hat)))?
            .x;
        let pf_gap = (&z_t - &x_hat).amax();
        let m = model.n_buses() - 1;
        let mut viol_max = 0.0_f64;
        for i in 0..m {
            viol_max = viol_max
                .max(x_t[i] - ofo_cfg.vmax)
                .max(ofo_cfg.vmin - x_t[i]);
        }
        viol_max = viol_max.max(0.0);

        // oracle reference at the configured cadence
        let (u_star, err_track) = if spec.oracle_every > 0 && t % spec.oracle_every == 0 {
            let d_oracle = if spec.oracle_on_estimate {
                est.d_hat.clone()
            } else {
                d_t.clone()
            };
            let theta_oracle = scenario.theta_at(t, d_oracle);
            let sol = oracle_cache
                .get_or_solve(model, &theta_oracle, &ofo_cfg, 1e-9, 500)
                .map_err(|e| abort(t, e, diag("oracle", &u_t, &est.d_hat)))?;
            let err = (&u_plus - &sol.u_star).norm();
            (Some(sol.u_star), Some(err))
        } else {
            (None, None)
        };

        let row = TraceRow {
            t,
            u: u_t.clone(),
            u_plus: u_plus.clone(),
            d: d_t.clone(),
            d_hat: est.d_hat.clone(),
            x: x_t.clone(),
            z: z_t.clone(),
            z_pr: z_pr.clone(),
            y: y_t,
            h_norm,
            viol_max,
            cost: ofo::cost(&u_t, &ofo_cfg.u_ref),
            pf_gap,
            p_min_eig: est.p_min_eig(),
            max_dual,
            relaxed,
            u_star,
            err_track,
        };
        sink(&row)?;
        rows.push(row);

        // advance the plant: saturate at the next step's box and re-solve
        // the true physics
        if t + 1 < horizon {
            let lo_next = scenario.lo_profiles.at(t + 1);
            let hi_next = scenario.hi_profiles.at(t + 1);
            let u_next = clamp_box(&u_plus, &lo_next, &hi_next);
            let d_next = scenario.d_profiles.at(t + 1);
            x_t = newton_solve(model, &x_t, &u_next, &d_next, newton_tol, newton_max)
                .map_err(|e| abort(t + 1, e, diag("plant solve", &u_next, &est.d_hat)))?
                .x;
            u_prev = u_t;
            u_t = u_next;
            z_prev = z_t;
        }
    }

    Ok(ScenarioTrace { rows })
}
