//! Grid topology, per-unit admittance matrix, and the channel maps that
//! split the complex injection vector `S` into controllable inputs `u` and
//! exogenous disturbances `d`.
//!
//! Everything is single-phase positive-sequence in per-unit. The slack bus
//! is the phase reference (angle fixed to 0); its voltage magnitude is a
//! controllable input channel.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Active or reactive side of an injection channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PowerKind {
    #[serde(rename = "P")]
    Active,
    #[serde(rename = "Q")]
    Reactive,
}

/// One controllable set-point channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputChannel {
    /// Active or reactive power set-point at a bus, in p.u.
    Power { bus: usize, kind: PowerKind },
    /// Voltage magnitude at the slack bus, in p.u.
    SlackVoltage,
}

/// One exogenous injection channel (uncontrollable load or generation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisturbanceChannel {
    pub bus: usize,
    pub kind: PowerKind,
}

/// Series branch with optional total shunt susceptance `b` (split pi-model).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
}

/// Channel descriptor as it appears in fixture files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelDesc {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bus: Option<usize>,
    pub kind: ChannelKindDesc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKindDesc {
    P,
    Q,
    Vslack,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureBounds {
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub d_lo: Vec<f64>,
    pub d_hi: Vec<f64>,
}

/// On-disk grid description (`buses`, `slack`, `lines`, `inputs`,
/// `disturbances`, `bounds`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridFixture {
    pub buses: usize,
    pub slack: usize,
    pub lines: Vec<Line>,
    pub inputs: Vec<ChannelDesc>,
    pub disturbances: Vec<ChannelDesc>,
    pub bounds: FixtureBounds,
    /// Base power in MVA, metadata only: all math is in p.u.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_mva: Option<f64>,
    /// Base voltage in kV, metadata only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_kv: Option<f64>,
}

/// Immutable network model. Safe to share read-only across threads.
#[derive(Clone, Debug)]
pub struct GridModel {
    n_buses: usize,
    slack: usize,
    lines: Vec<Line>,
    y: DMatrix<Complex64>,
    inputs: Vec<InputChannel>,
    disturbances: Vec<DisturbanceChannel>,
    u_lo: DVector<f64>,
    u_hi: DVector<f64>,
    d_lo: DVector<f64>,
    d_hi: DVector<f64>,
    non_slack: Vec<usize>,
    slack_input: usize,
}

/// Build the bus admittance matrix from a line list.
///
/// `Y[i][i]` sums `1/z + j b/2` over incident lines; `Y[i][j] = -1/z` for
/// each line between `i != j` (parallel lines add).
pub fn build_admittance(lines: &[Line], n_buses: usize) -> Result<DMatrix<Complex64>> {
    if n_buses == 0 {
        return Err(Error::Invariant {
            name: "connectivity",
            detail: "network has no buses".into(),
        });
    }
    let mut y = DMatrix::<Complex64>::zeros(n_buses, n_buses);
    for line in lines {
        if line.from >= n_buses || line.to >= n_buses {
            return Err(Error::Invariant {
                name: "bus index",
                detail: format!("line {}-{} outside 0..{}", line.from, line.to, n_buses),
            });
        }
        let z = Complex64::new(line.r, line.x);
        if z.norm() == 0.0 {
            return Err(Error::Invariant {
                name: "zero impedance",
                detail: format!("line {}-{} has zero series impedance", line.from, line.to),
            });
        }
        let ys = z.inv();
        let ysh = Complex64::new(0.0, line.b / 2.0);
        y[(line.from, line.from)] += ys + ysh;
        y[(line.to, line.to)] += ys + ysh;
        y[(line.from, line.to)] -= ys;
        y[(line.to, line.from)] -= ys;
    }
    check_connected(lines, n_buses)?;
    Ok(y)
}

fn check_connected(lines: &[Line], n_buses: usize) -> Result<()> {
    let mut seen = vec![false; n_buses];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(b) = stack.pop() {
        for line in lines {
            let other = if line.from == b {
                line.to
            } else if line.to == b {
                line.from
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    if let Some(isolated) = seen.iter().position(|s| !s) {
        return Err(Error::Invariant {
            name: "connectivity",
            detail: format!("disconnected network: bus {isolated} unreachable from bus 0"),
        });
    }
    Ok(())
}

/// Assemble the complex injection vector `S` (length `n_buses`) from the
/// channel maps. The slack entry is left at 0; it is never used in the
/// power-flow residual.
pub fn assemble_injections(
    model: &GridModel,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DVector<Complex64>> {
    if u.len() != model.inputs.len() {
        return Err(Error::Dimension(format!(
            "u has {} entries, model has {} input channels",
            u.len(),
            model.inputs.len()
        )));
    }
    if d.len() != model.disturbances.len() {
        return Err(Error::Dimension(format!(
            "d has {} entries, model has {} disturbance channels",
            d.len(),
            model.disturbances.len()
        )));
    }
    let mut s = DVector::<Complex64>::zeros(model.n_buses);
    for (j, ch) in model.inputs.iter().enumerate() {
        if let InputChannel::Power { bus, kind } = ch {
            s[*bus] += to_complex(u[j], *kind);
        }
    }
    for (j, ch) in model.disturbances.iter().enumerate() {
        s[ch.bus] += to_complex(d[j], ch.kind);
    }
    Ok(s)
}

fn to_complex(v: f64, kind: PowerKind) -> Complex64 {
    match kind {
        PowerKind::Active => Complex64::new(v, 0.0),
        PowerKind::Reactive => Complex64::new(0.0, v),
    }
}

impl GridModel {
    /// Validate a fixture and build the model.
    pub fn from_fixture(fx: &GridFixture) -> Result<Self> {
        if fx.slack >= fx.buses {
            return Err(Error::Invariant {
                name: "slack index",
                detail: format!("slack bus {} outside 0..{}", fx.slack, fx.buses),
            });
        }
        let y = build_admittance(&fx.lines, fx.buses)?;

        let mut inputs = Vec::with_capacity(fx.inputs.len());
        let mut slack_inputs = Vec::new();
        for (j, ch) in fx.inputs.iter().enumerate() {
            match ch.kind {
                ChannelKindDesc::Vslack => {
                    slack_inputs.push(j);
                    inputs.push(InputChannel::SlackVoltage);
                }
                ChannelKindDesc::P | ChannelKindDesc::Q => {
                    let bus = ch.bus.ok_or_else(|| Error::Invariant {
                        name: "channel completeness",
                        detail: format!("input channel {j} has no bus"),
                    })?;
                    let kind = match ch.kind {
                        ChannelKindDesc::P => PowerKind::Active,
                        _ => PowerKind::Reactive,
                    };
                    inputs.push(InputChannel::Power { bus, kind });
                }
            }
        }
        if slack_inputs.len() != 1 {
            return Err(Error::Invariant {
                name: "slack channel",
                detail: format!(
                    "exactly one Vslack input channel required, found {}",
                    slack_inputs.len()
                ),
            });
        }
        let disturbances = fx
            .disturbances
            .iter()
            .enumerate()
            .map(|(j, ch)| {
                let bus = ch.bus.ok_or_else(|| Error::Invariant {
                    name: "channel completeness",
                    detail: format!("disturbance channel {j} has no bus"),
                })?;
                let kind = match ch.kind {
                    ChannelKindDesc::P => PowerKind::Active,
                    ChannelKindDesc::Q => PowerKind::Reactive,
                    ChannelKindDesc::Vslack => {
                        return Err(Error::Invariant {
                            name: "channel completeness",
                            detail: format!("disturbance channel {j} cannot be Vslack"),
                        })
                    }
                };
                Ok(DisturbanceChannel { bus, kind })
            })
            .collect::<Result<Vec<_>>>()?;

        // No (bus, P/Q) may be covered twice across the union of the maps,
        // and power channels may not target the slack bus.
        let mut covered = std::collections::HashSet::new();
        let mut claim = |bus: usize, kind: PowerKind| -> Result<()> {
            if bus >= fx.buses {
                return Err(Error::Invariant {
                    name: "bus index",
                    detail: format!("channel bus {bus} outside 0..{}", fx.buses),
                });
            }
            if bus == fx.slack {
                return Err(Error::Invariant {
                    name: "channel completeness",
                    detail: format!("power channel at slack bus {bus}"),
                });
            }
            if !covered.insert((bus, kind)) {
                return Err(Error::Invariant {
                    name: "channel completeness",
                    detail: format!("bus {bus} {kind:?} covered by more than one channel"),
                });
            }
            Ok(())
        };
        for ch in &inputs {
            if let InputChannel::Power { bus, kind } = ch {
                claim(*bus, *kind)?;
            }
        }
        for ch in &disturbances {
            claim(ch.bus, ch.kind)?;
        }

        let n_u = inputs.len();
        let n_d = disturbances.len();
        let bounds = &fx.bounds;
        if bounds.u_lo.len() != n_u || bounds.u_hi.len() != n_u {
            return Err(Error::Invariant {
                name: "bound length",
                detail: format!("u bounds must have {n_u} entries"),
            });
        }
        if bounds.d_lo.len() != n_d || bounds.d_hi.len() != n_d {
            return Err(Error::Invariant {
                name: "bound length",
                detail: format!("d bounds must have {n_d} entries"),
            });
        }
        for j in 0..n_u {
            if !(bounds.u_lo[j] <= bounds.u_hi[j]) {
                return Err(Error::Invariant {
                    name: "bound ordering",
                    detail: format!("u_lo[{j}] > u_hi[{j}]"),
                });
            }
        }
        for j in 0..n_d {
            if !(bounds.d_lo[j] <= bounds.d_hi[j]) {
                return Err(Error::Invariant {
                    name: "bound ordering",
                    detail: format!("d_lo[{j}] > d_hi[{j}]"),
                });
            }
        }

        let non_slack = (0..fx.buses).filter(|&b| b != fx.slack).collect();
        Ok(GridModel {
            n_buses: fx.buses,
            slack: fx.slack,
            lines: fx.lines.clone(),
            y,
            slack_input: slack_inputs[0],
            inputs,
            disturbances,
            u_lo: DVector::from_vec(bounds.u_lo.clone()),
            u_hi: DVector::from_vec(bounds.u_hi.clone()),
            d_lo: DVector::from_vec(bounds.d_lo.clone()),
            d_hi: DVector::from_vec(bounds.d_hi.clone()),
            non_slack,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fx: GridFixture = serde_json::from_str(text)?;
        Self::from_fixture(&fx)
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    pub fn inputs(&self) -> &[InputChannel] {
        &self.inputs
    }

    pub fn disturbances(&self) -> &[DisturbanceChannel] {
        &self.disturbances
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_disturbances(&self) -> usize {
        self.disturbances.len()
    }

    /// Number of state variables, `2 * (n_buses - 1)`.
    pub fn n_states(&self) -> usize {
        2 * (self.n_buses - 1)
    }

    /// Non-slack buses in increasing index order; position in this list is
    /// the row/column position in state vectors and Jacobians.
    pub fn non_slack(&self) -> &[usize] {
        &self.non_slack
    }

    /// Position of `bus` in the non-slack ordering, if it is not the slack.
    pub fn state_position(&self, bus: usize) -> Option<usize> {
        if bus == self.slack {
            None
        } else {
            self.non_slack.binary_search(&bus).ok()
        }
    }

    /// Index of the slack-voltage channel inside the input vector.
    pub fn slack_input(&self) -> usize {
        self.slack_input
    }

    pub fn u_lo(&self) -> &DVector<f64> {
        &self.u_lo
    }

    pub fn u_hi(&self) -> &DVector<f64> {
        &self.u_hi
    }

    pub fn d_lo(&self) -> &DVector<f64> {
        &self.d_lo
    }

    pub fn d_hi(&self) -> &DVector<f64> {
        &self.d_hi
    }

    /// Disturbance index of the `(bus, kind)` channel, if present.
    pub fn disturbance_index(&self, bus: usize, kind: PowerKind) -> Option<usize> {
        self.disturbances
            .iter()
            .position(|c| c.bus == bus && c.kind == kind)
    }
}

/// Controllable set-points with their actuator box.
#[derive(Clone, Debug)]
pub struct InputVector {
    pub values: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl InputVector {
    pub fn new(values: DVector<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if values.len() != lo.len() || values.len() != hi.len() {
            return Err(Error::Dimension("input vector and bounds disagree".into()));
        }
        for j in 0..lo.len() {
            if !(lo[j] <= hi[j]) {
                return Err(Error::Invariant {
                    name: "bound ordering",
                    detail: format!("lo[{j}] > hi[{j}]"),
                });
            }
        }
        Ok(InputVector { values, lo, hi })
    }

    /// Element-wise clip of the values into the box.
    pub fn saturate(&mut self) {
        self.values = clamp_box(&self.values, &self.lo, &self.hi);
    }
}

/// Exogenous injections.
#[derive(Clone, Debug)]
pub struct DisturbanceVector {
    pub values: DVector<f64>,
}

impl DisturbanceVector {
    /// Checked constructor: entries must be finite and inside the model's
    /// disturbance box.
    pub fn checked(values: DVector<f64>, model: &GridModel) -> Result<Self> {
        if values.len() != model.n_disturbances() {
            return Err(Error::Dimension("disturbance length mismatch".into()));
        }
        for j in 0..values.len() {
            if !values[j].is_finite() {
                return Err(Error::Invariant {
                    name: "disturbance finiteness",
                    detail: format!("d[{j}] not finite"),
                });
            }
            if values[j] < model.d_lo()[j] - 1e-12 || values[j] > model.d_hi()[j] + 1e-12 {
                return Err(Error::Invariant {
                    name: "disturbance box",
                    detail: format!("d[{j}] = {} outside the configured box", values[j]),
                });
            }
        }
        Ok(DisturbanceVector { values })
    }
}

/// Element-wise `min(max(v, lo), hi)`.
pub fn clamp_box(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |j, _| v[j].max(lo[j]).min(hi[j]))
}
