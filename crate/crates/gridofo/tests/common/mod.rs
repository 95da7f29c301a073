//! Shared fixtures and scenario builders for the integration suites.
#![allow(dead_code)]

use gridofo::network::{ChannelDesc, ChannelKindDesc, FixtureBounds, GridFixture, Line};
use gridofo::sim::{
    ControllerKind, ControllerSpec, MeasKindSpec, MeasSpec, ModelRef, ProfileSource, ProfileSpec,
    ProfilesSpec, ScenarioSpec,
};

pub fn line(from: usize, to: usize, r: f64, x: f64) -> Line {
    Line { from, to, r, x, b: 0.0 }
}

fn chan(bus: Option<usize>, kind: ChannelKindDesc) -> ChannelDesc {
    ChannelDesc { bus, kind }
}

/// Two buses, slack plus one load bus; the only input is the slack
/// magnitude, the disturbances are P and Q at bus 1.
pub fn two_bus_fixture() -> GridFixture {
    GridFixture {
        buses: 2,
        slack: 0,
        lines: vec![line(0, 1, 0.01, 0.1)],
        inputs: vec![chan(None, ChannelKindDesc::Vslack)],
        disturbances: vec![
            chan(Some(1), ChannelKindDesc::P),
            chan(Some(1), ChannelKindDesc::Q),
        ],
        bounds: FixtureBounds {
            u_lo: vec![0.90],
            u_hi: vec![1.10],
            d_lo: vec![-2.0, -2.0],
            d_hi: vec![2.0, 2.0],
        },
        base_mva: None,
        base_kv: None,
    }
}

/// Radial 15-bus feeder: main 0..9 with laterals 3-10-11, 5-12, 7-13-14.
/// Three controllable P/Q pairs (buses 6, 11, 14) plus the slack
/// magnitude; eight disturbance channels (P/Q at buses 2, 4, 9, 12).
pub fn feeder15_fixture() -> GridFixture {
    GridFixture {
        buses: 15,
        slack: 0,
        lines: vec![
            line(0, 1, 0.006, 0.018),
            line(1, 2, 0.008, 0.024),
            line(2, 3, 0.008, 0.024),
            line(3, 4, 0.010, 0.030),
            line(4, 5, 0.010, 0.030),
            line(5, 6, 0.012, 0.036),
            line(6, 7, 0.012, 0.036),
            line(7, 8, 0.014, 0.042),
            line(8, 9, 0.014, 0.042),
            line(3, 10, 0.016, 0.032),
            line(10, 11, 0.016, 0.032),
            line(5, 12, 0.020, 0.040),
            line(7, 13, 0.016, 0.032),
            line(13, 14, 0.016, 0.032),
        ],
        inputs: vec![
            chan(None, ChannelKindDesc::Vslack),
            chan(Some(6), ChannelKindDesc::P),
            chan(Some(6), ChannelKindDesc::Q),
            chan(Some(11), ChannelKindDesc::P),
            chan(Some(11), ChannelKindDesc::Q),
            chan(Some(14), ChannelKindDesc::P),
            chan(Some(14), ChannelKindDesc::Q),
        ],
        disturbances: vec![
            chan(Some(2), ChannelKindDesc::P),
            chan(Some(2), ChannelKindDesc::Q),
            chan(Some(4), ChannelKindDesc::P),
            chan(Some(4), ChannelKindDesc::Q),
            chan(Some(9), ChannelKindDesc::P),
            chan(Some(9), ChannelKindDesc::Q),
            chan(Some(12), ChannelKindDesc::P),
            chan(Some(12), ChannelKindDesc::Q),
        ],
        bounds: FixtureBounds {
            u_lo: vec![0.95, 0.0, -0.4, 0.0, -0.4, 0.0, -0.4],
            u_hi: vec![1.05, 0.8, 0.4, 0.8, 0.4, 0.8, 0.4],
            d_lo: vec![-1.5; 8],
            d_hi: vec![1.5; 8],
        },
        base_mva: None,
        base_kv: None,
    }
}

pub fn constant(value: f64) -> ProfileSpec {
    ProfileSpec::Constant { value }
}

pub fn ramp(from: f64, to: f64) -> ProfileSpec {
    ProfileSpec::Ramp { from, to }
}

pub fn qp_controller(u_ref: Vec<f64>) -> ControllerSpec {
    ControllerSpec {
        controller: ControllerKind::Qp,
        eta: 5.0,
        zeta: 1e3,
        alpha: None,
        soft_mode: true,
        u_ref,
        vmin: 0.94,
        vmax: 1.06,
    }
}

pub fn meas(kind: MeasKindSpec, bus: usize, sigma: f64) -> MeasSpec {
    MeasSpec { kind, bus, sigma }
}

/// Two-bus scenario skeleton: constant load, near-exact voltage phasor
/// measurements, biased pseudo readings. Tests override what they need.
pub fn two_bus_spec(horizon: usize, d: [f64; 2]) -> ScenarioSpec {
    ScenarioSpec {
        model: ModelRef::Inline(two_bus_fixture()),
        horizon,
        dt: 1.0,
        seed: 42,
        n_inner: 1,
        oracle_every: 0,
        oracle_on_estimate: false,
        exact_pf_in_loop: false,
        u0: Some(vec![1.0]),
        z0_flat: false,
        controller: qp_controller(vec![1.08]),
        measurements: vec![
            meas(MeasKindSpec::Vm, 1, 1e-6),
            meas(MeasKindSpec::Va, 1, 1e-6),
            meas(MeasKindSpec::PseudoP, 1, 0.2),
            meas(MeasKindSpec::PseudoQ, 1, 0.2),
        ],
        sigma_omega: vec![1e-6, 1e-6],
        mu: None,
        pseudo_forecast: None,
        profiles: ProfilesSpec {
            d: ProfileSource::Synthetic(vec![constant(d[0]), constant(d[1])]),
            u_lo: ProfileSource::Synthetic(vec![constant(0.94)]),
            u_hi: ProfileSource::Synthetic(vec![constant(1.10)]),
        },
        residual_radius: 1.0,
        ekf_pseudo_only: false,
    }
}

/// Feeder scenario skeleton: nominal loads, voltage sensors at the
/// generation buses plus pseudo readings for every load channel.
pub fn feeder15_spec(horizon: usize) -> ScenarioSpec {
    ScenarioSpec {
        model: ModelRef::Inline(feeder15_fixture()),
        horizon,
        dt: 1.0,
        seed: 11,
        n_inner: 1,
        oracle_every: 0,
        oracle_on_estimate: false,
        exact_pf_in_loop: false,
        u0: None,
        z0_flat: false,
        controller: qp_controller(vec![1.0, 0.8, 0.0, 0.8, 0.0, 0.8, 0.0]),
        measurements: vec![
            meas(MeasKindSpec::Vm, 6, 1e-6),
            meas(MeasKindSpec::Vm, 9, 1e-6),
            meas(MeasKindSpec::Vm, 14, 1e-6),
            meas(MeasKindSpec::Va, 6, 1e-6),
            meas(MeasKindSpec::Va, 9, 1e-6),
            meas(MeasKindSpec::Va, 14, 1e-6),
            meas(MeasKindSpec::PseudoP, 2, 0.2),
            meas(MeasKindSpec::PseudoQ, 2, 0.2),
            meas(MeasKindSpec::PseudoP, 4, 0.2),
            meas(MeasKindSpec::PseudoQ, 4, 0.2),
            meas(MeasKindSpec::PseudoP, 9, 0.2),
            meas(MeasKindSpec::PseudoQ, 9, 0.2),
            meas(MeasKindSpec::PseudoP, 12, 0.2),
            meas(MeasKindSpec::PseudoQ, 12, 0.2),
        ],
        sigma_omega: vec![1e-6; 8],
        mu: None,
        pseudo_forecast: None,
        profiles: ProfilesSpec {
            d: ProfileSource::Synthetic(vec![
                constant(-0.15),
                constant(-0.05),
                constant(-0.20),
                constant(-0.07),
                constant(-0.15),
                constant(-0.05),
                constant(-0.20),
                constant(-0.08),
            ]),
            u_lo: ProfileSource::Synthetic(vec![
                constant(0.95),
                constant(0.0),
                constant(-0.4),
                constant(0.0),
                constant(-0.4),
                constant(0.0),
                constant(-0.4),
            ]),
            u_hi: ProfileSource::Synthetic(vec![
                constant(1.05),
                constant(0.3),
                constant(0.4),
                constant(0.3),
                constant(0.4),
                constant(0.3),
                constant(0.4),
            ]),
        },
        residual_radius: 1.0,
        ekf_pseudo_only: false,
    }
}
