//! Aggregation of closed-loop traces into plot-ready summaries and paired
//! controller comparisons.

use serde::Serialize;

use super::trace::ScenarioTrace;

/// Step counts until the tracking error enters and stays inside a band.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StepsToBand {
    #[serde(rename = "steps_to_1e-2")]
    pub to_1e2: Option<usize>,
    #[serde(rename = "steps_to_1e-3")]
    pub to_1e3: Option<usize>,
    #[serde(rename = "steps_to_1e-4")]
    pub to_1e4: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub controller: String,
    pub horizon: usize,
    pub final_tracking_error: Option<f64>,
    pub mean_tracking_error: Option<f64>,
    pub max_tracking_error: Option<f64>,
    #[serde(flatten)]
    pub steps_to: StepsToBand,
    /// Worst voltage violation across the run, p.u.
    pub viol_max: f64,
    /// Time-integrated violation, p.u. * steps.
    pub viol_integral: f64,
    /// Root-mean-square of `||d - dhat||_2`.
    pub estimation_rmse: f64,
    pub h_norm_max: f64,
    pub pf_gap_max: f64,
    pub cost_final: f64,
    pub max_dual_seen: f64,
    pub relaxed_steps: usize,
    /// Smallest covariance eigenvalue seen over the run.
    pub p_min_eig_min: f64,
}

/// First step after which the series stays at or below `eps` for good.
pub fn steps_to_band(series: &[(usize, f64)], eps: f64) -> Option<usize> {
    let mut entry: Option<usize> = None;
    for &(t, e) in series {
        if e <= eps {
            entry.get_or_insert(t);
        } else {
            entry = None;
        }
    }
    entry
}

pub fn metrics(trace: &ScenarioTrace, controller: &str) -> Summary {
    let n = trace.len();
    let track = trace.tracking_errors();
    let errs: Vec<f64> = track.iter().map(|&(_, e)| e).collect();
    let (final_e, mean_e, max_e) = if errs.is_empty() {
        (None, None, None)
    } else {
        (
            Some(*errs.last().unwrap()),
            Some(errs.iter().sum::<f64>() / errs.len() as f64),
            Some(errs.iter().cloned().fold(0.0, f64::max)),
        )
    };
    let steps_to = StepsToBand {
        to_1e2: steps_to_band(&track, 1e-2),
        to_1e3: steps_to_band(&track, 1e-3),
        to_1e4: steps_to_band(&track, 1e-4),
    };
    let mut viol_max = 0.0_f64;
    let mut viol_integral = 0.0;
    let mut h_norm_max = 0.0_f64;
    let mut pf_gap_max = 0.0_f64;
    let mut rmse_acc = 0.0;
    let mut max_dual_seen = 0.0_f64;
    let mut relaxed_steps = 0;
    let mut p_min = f64::INFINITY;
    for row in &trace.rows {
        viol_max = viol_max.max(row.viol_max);
        viol_integral += row.viol_max;
        h_norm_max = h_norm_max.max(row.h_norm);
        pf_gap_max = pf_gap_max.max(row.pf_gap);
        rmse_acc += (&row.d - &row.d_hat).norm_squared();
        max_dual_seen = max_dual_seen.max(row.max_dual);
        relaxed_steps += row.relaxed as usize;
        p_min = p_min.min(row.p_min_eig);
    }
    Summary {
        controller: controller.to_string(),
        horizon: n,
        final_tracking_error: final_e,
        mean_tracking_error: mean_e,
        max_tracking_error: max_e,
        steps_to,
        viol_max,
        viol_integral,
        estimation_rmse: if n > 0 {
            (rmse_acc / n as f64).sqrt()
        } else {
            0.0
        },
        h_norm_max,
        pf_gap_max,
        cost_final: trace.rows.last().map(|r| r.cost).unwrap_or(0.0),
        max_dual_seen,
        relaxed_steps,
        p_min_eig_min: if p_min.is_finite() { p_min } else { 0.0 },
    }
}

/// Paired comparison of two runs over identical seeds and profiles.
#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub qp: Summary,
    pub pg: Summary,
    /// `pg steps-to-1e-3 / qp steps-to-1e-3`; null when either side never
    /// settles in the band.
    #[serde(rename = "ratio_steps_to_1e-3")]
    pub ratio_steps_to_1e3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

pub fn compare(qp: Summary, pg: Summary) -> CompareReport {
    if qp.horizon < 2 {
        return CompareReport {
            qp,
            pg,
            ratio_steps_to_1e3: None,
            reason: Some("insufficient horizon".into()),
        };
    }
    let ratio = match (qp.steps_to.to_1e3, pg.steps_to.to_1e3) {
        (Some(q), Some(p)) => Some(p.max(1) as f64 / q.max(1) as f64),
        _ => None,
    };
    let reason = if ratio.is_none() {
        Some("one of the runs never settled in the 1e-3 band".into())
    } else {
        None
    };
    CompareReport {
        qp,
        pg,
        ratio_steps_to_1e3: ratio,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trace::TraceRow;
    use nalgebra::DVector;

    fn row(t: usize, err: Option<f64>, viol: f64) -> TraceRow {
        TraceRow {
            t,
            u: DVector::zeros(1),
            u_plus: DVector::zeros(1),
            d: DVector::zeros(1),
            d_hat: DVector::zeros(1),
            x: DVector::zeros(2),
            z: DVector::zeros(2),
            z_pr: DVector::zeros(2),
            y: DVector::zeros(1),
            h_norm: 0.0,
            viol_max: viol,
            cost: 0.0,
            pf_gap: 0.0,
            p_min_eig: 0.0,
            max_dual: 0.0,
            relaxed: false,
            u_star: err.map(|_| DVector::zeros(1)),
            err_track: err,
        }
    }

    #[test]
    fn perfect_tracking_gives_zero_errors() {
        let trace = ScenarioTrace {
            rows: (0..5).map(|t| row(t, Some(0.0), 0.0)).collect(),
        };
        let s = metrics(&trace, "qp");
        assert_eq!(s.final_tracking_error, Some(0.0));
        assert_eq!(s.max_tracking_error, Some(0.0));
        assert_eq!(s.steps_to.to_1e4, Some(0));
    }

    #[test]
    fn single_violation_sample() {
        let mut rows: Vec<TraceRow> = (0..4).map(|t| row(t, None, 0.0)).collect();
        rows[2].viol_max = 0.01; // one vm sample at 1.07 against vmax 1.06
        let trace = ScenarioTrace { rows };
        let s = metrics(&trace, "qp");
        assert!((s.viol_max - 0.01).abs() < 1e-15);
        assert!((s.viol_integral - 0.01).abs() < 1e-15);
    }

    #[test]
    fn steps_to_band_requires_sustained_entry() {
        let series = vec![(0, 1.0), (1, 5e-4), (2, 2.0), (3, 5e-4), (4, 1e-4)];
        assert_eq!(steps_to_band(&series, 1e-3), Some(3));
        assert_eq!(steps_to_band(&series, 1e-5), None);
    }

    #[test]
    fn degenerate_horizon_reports_reason() {
        let qp = metrics(
            &ScenarioTrace {
                rows: vec![row(0, Some(0.0), 0.0)],
            },
            "qp",
        );
        let pg = metrics(
            &ScenarioTrace {
                rows: vec![row(0, Some(0.0), 0.0)],
            },
            "pg",
        );
        let report = compare(qp, pg);
        assert!(report.ratio_steps_to_1e3.is_none());
        assert_eq!(report.reason.as_deref(), Some("insufficient horizon"));
    }
}
