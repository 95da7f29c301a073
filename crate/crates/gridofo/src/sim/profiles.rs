//! Per-channel time series: CSV ingestion and synthetic generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic series generator for one channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    Constant {
        value: f64,
    },
    /// Affine series with exact endpoints.
    Ramp {
        from: f64,
        to: f64,
    },
    Sinusoid {
        mean: f64,
        amplitude: f64,
        /// Period in steps.
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Seeded random walk `v_{t+1} = v_t + w_t` with `w ~ N(0, sigma^2)`
    /// truncated at six sigma.
    RandomWalk {
        start: f64,
        sigma: f64,
    },
    /// Piecewise-constant step change at step `at`.
    Step {
        before: f64,
        after: f64,
        at: usize,
    },
}

/// Where a profile block comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Csv { csv: String },
    Synthetic(Vec<ProfileSpec>),
}

/// Dense series, `horizon` rows by `n_channels` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSet {
    data: DMatrix<f64>,
}

impl ProfileSet {
    pub fn horizon(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.data.ncols()
    }

    /// All channels at step `t`.
    pub fn at(&self, t: usize) -> DVector<f64> {
        self.data.row(t).transpose()
    }

    pub fn column(&self, c: usize) -> DVector<f64> {
        self.data.column(c).into_owned()
    }

    /// Per-channel mean over the horizon (the pseudo-measurement forecast
    /// when none is configured explicitly).
    pub fn channel_means(&self) -> DVector<f64> {
        DVector::from_fn(self.n_channels(), |c, _| {
            self.data.column(c).sum() / self.horizon() as f64
        })
    }

    pub fn from_matrix(data: DMatrix<f64>) -> Self {
        ProfileSet { data }
    }
}

fn bounded_step(rng: &mut impl Rng, sigma: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 6.0 {
            return sigma * v;
        }
    }
}

/// Materialize a profile block. CSV files must carry a header row and at
/// least `horizon` data rows with exactly `n_channels` columns.
pub fn load_profiles(
    source: &ProfileSource,
    n_channels: usize,
    horizon: usize,
    base_dir: Option<&std::path::Path>,
    rng: &mut impl Rng,
) -> Result<ProfileSet> {
    let set = match source {
        ProfileSource::Csv { csv } => {
            let path = match base_dir {
                Some(dir) => dir.join(csv),
                None => std::path::PathBuf::from(csv),
            };
            let mut reader = csv::Reader::from_path(&path).map_err(|e| {
                Error::Config(format!("cannot read profile csv {}: {e}", path.display()))
            })?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for record in reader.records() {
                let record = record?;
                if record.len() != n_channels {
                    return Err(Error::Invariant {
                        name: "profile length",
                        detail: format!(
                            "csv row {} has {} columns, expected {n_channels}",
                            rows.len() + 1,
                            record.len()
                        ),
                    });
                }
                let row = record
                    .iter()
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| Error::Invariant {
                            name: "profile finiteness",
                            detail: format!("non-numeric profile value '{s}'"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
            if rows.len() < horizon {
                return Err(Error::Invariant {
                    name: "profile length",
                    detail: format!("csv has {} rows, horizon needs {horizon}", rows.len()),
                });
            }
            let data = DMatrix::from_fn(horizon, n_channels, |t, c| rows[t][c]);
            ProfileSet { data }
        }
        ProfileSource::Synthetic(specs) => {
            if specs.len() != n_channels {
                return Err(Error::Invariant {
                    name: "profile length",
                    detail: format!(
                        "{} synthetic specs for {n_channels} channels",
                        specs.len()
                    ),
                });
            }
            let mut data = DMatrix::zeros(horizon, n_channels);
            for (c, spec) in specs.iter().enumerate() {
                let series = generate(spec, horizon, rng);
                for t in 0..horizon {
                    data[(t, c)] = series[t];
                }
            }
            ProfileSet { data }
        }
    };
    for t in 0..set.horizon() {
        for c in 0..set.n_channels() {
            if !set.data[(t, c)].is_finite() {
                return Err(Error::Invariant {
                    name: "profile finiteness",
                    detail: format!("profile value at step {t}, channel {c} is not finite"),
                });
            }
        }
    }
    Ok(set)
}

fn generate(spec: &ProfileSpec, horizon: usize, rng: &mut impl Rng) -> Vec<f64> {
    match spec {
        ProfileSpec::Constant { value } => vec![*value; horizon],
        ProfileSpec::Ramp { from, to } => (0..horizon)
            .map(|t| {
                if horizon <= 1 {
                    *from
                } else {
                    from + (to - from) * t as f64 / (horizon - 1) as f64
                }
            })
            .collect(),
        ProfileSpec::Sinusoid {
            mean,
            amplitude,
            period,
            phase,
        } => (0..horizon)
            .map(|t| {
                mean + amplitude * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin()
            })
            .collect(),
        ProfileSpec::RandomWalk { start, sigma } => {
            let mut v = *start;
            let mut out = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                out.push(v);
                v += bounded_step(rng, *sigma);
            }
            out
        }
        ProfileSpec::Step { before, after, at } => (0..horizon)
            .map(|t| if t < *at { *before } else { *after })
            .collect(),
    }
}
