//! Per-step records and streaming CSV emission.
//!
//! Column order is fixed: `t`, inputs `u_*`, controller outputs `uplus_*`,
//! true disturbances `d_*`, estimates `dhat_*`, true state `xvm_<bus>` /
//! `xva_<bus>`, online approximation `zvm_*` / `zva_*`, prior approximation
//! `zprvm_*` / `zprva_*`, measurements `y_*`, then the scalar diagnostics
//! `h_norm`, `viol_max`, `cost`, `pf_gap`, `p_min_eig`, `max_dual`,
//! `relaxed`, and the oracle block `ustar_*`, `err_track` (cells empty on
//! steps where the oracle did not run).

use std::io::Write;

use nalgebra::DVector;

use crate::error::Result;
use crate::network::GridModel;

/// One step of a closed-loop run.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: usize,
    pub u: DVector<f64>,
    pub u_plus: DVector<f64>,
    pub d: DVector<f64>,
    pub d_hat: DVector<f64>,
    /// True state from the exact plant solve.
    pub x: DVector<f64>,
    /// Online power-flow approximation after the posterior update.
    pub z: DVector<f64>,
    /// Online approximation after the prior update.
    pub z_pr: DVector<f64>,
    pub y: DVector<f64>,
    /// `||h(z_t, u_t, dhat_t)||_2`.
    pub h_norm: f64,
    /// Worst voltage-limit violation of the true state, in p.u. (0 when
    /// every magnitude is inside the band).
    pub viol_max: f64,
    pub cost: f64,
    /// `||z_t - chi(u_t, dhat_t)||_inf`.
    pub pf_gap: f64,
    /// Smallest eigenvalue of the estimator covariance.
    pub p_min_eig: f64,
    /// Largest voltage-row multiplier reported by the controller.
    pub max_dual: f64,
    /// True when the controller had to relax the voltage rows.
    pub relaxed: bool,
    pub u_star: Option<DVector<f64>>,
    /// `||u_plus - u_star||_2` when the oracle ran at this step.
    pub err_track: Option<f64>,
}

/// Full record of one scenario run.
#[derive(Clone, Debug, Default)]
pub struct ScenarioTrace {
    pub rows: Vec<TraceRow>,
}

impl ScenarioTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Tracking-error series over the steps where the oracle ran.
    pub fn tracking_errors(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.err_track.map(|e| (r.t, e)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, model: &GridModel, out: W) -> Result<()> {
        let mut writer = TraceWriter::new(model, out);
        for row in &self.rows {
            writer.write_row(row)?;
        }
        writer.flush()
    }
}

/// Column names, given the number of measurement channels.
pub fn csv_header(model: &GridModel, n_y: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    let block = |prefix: &str, n: usize, cols: &mut Vec<String>| {
        for j in 0..n {
            cols.push(format!("{prefix}{j}"));
        }
    };
    block("u", model.n_inputs(), &mut cols);
    block("uplus", model.n_inputs(), &mut cols);
    block("d", model.n_disturbances(), &mut cols);
    block("dhat", model.n_disturbances(), &mut cols);
    for prefix in ["xvm", "xva", "zvm", "zva", "zprvm", "zprva"] {
        for &bus in model.non_slack() {
            cols.push(format!("{prefix}_{bus}"));
        }
    }
    block("y", n_y, &mut cols);
    for name in [
        "h_norm", "viol_max", "cost", "pf_gap", "p_min_eig", "max_dual", "relaxed",
    ] {
        cols.push(name.to_string());
    }
    block("ustar", model.n_inputs(), &mut cols);
    cols.push("err_track".to_string());
    cols
}

/// Streaming writer: every row is flushed as it is produced so an aborted
/// run keeps its diagnostics.
pub struct TraceWriter<W: Write> {
    writer: csv::Writer<W>,
    model: GridModel,
    header_written: bool,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(model: &GridModel, out: W) -> Self {
        TraceWriter {
            writer: csv::Writer::from_writer(out),
            model: model.clone(),
            header_written: false,
        }
    }

    pub fn write_row(&mut self, row: &TraceRow) -> Result<()> {
        if !self.header_written {
            self.writer
                .write_record(csv_header(&self.model, row.y.len()))?;
            self.header_written = true;
        }
        let m = self.model.n_buses() - 1;
        let mut rec: Vec<String> = Vec::with_capacity(16 + 6 * m);
        rec.push(row.t.to_string());
        let push_vec = |rec: &mut Vec<String>, v: &DVector<f64>| {
            for x in v.iter() {
                rec.push(format!("{x}"));
            }
        };
        push_vec(&mut rec, &row.u);
        push_vec(&mut rec, &row.u_plus);
        push_vec(&mut rec, &row.d);
        push_vec(&mut rec, &row.d_hat);
        push_vec(&mut rec, &row.x);
        push_vec(&mut rec, &row.z);
        push_vec(&mut rec, &row.z_pr);
        push_vec(&mut rec, &row.y);
        for v in [
            row.h_norm,
            row.viol_max,
            row.cost,
            row.pf_gap,
            row.p_min_eig,
            row.max_dual,
        ] {
            rec.push(format!("{v}"));
        }
        rec.push(if row.relaxed { "1" } else { "0" }.to_string());
        match &row.u_star {
            Some(us) => push_vec(&mut rec, us),
            None => rec.extend(std::iter::repeat_n(String::new(), row.u.len())),
        }
        rec.push(row.err_track.map(|e| format!("{e}")).unwrap_or_default());
        self.writer.write_record(&rec)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}
