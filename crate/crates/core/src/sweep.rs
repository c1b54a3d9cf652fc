//! Parameter sweeps over one axis, emitting one CSV row per
//! (axis value, method).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method, BaselineResult, Method};
use crate::error::{Error, Result};
use crate::instance::{heterogeneous_case, ProblemInstance};
use crate::solver::{OptimalityStatus, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    UserCount,
    AcceptRate,
    HeteroCase,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::UserCount => "user_count",
            Axis::AcceptRate => "accept_rate",
            Axis::HeteroCase => "hetero_case",
        }
    }
}

/// Values held fixed while the axis varies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOverrides {
    /// Number of users when the axis is not `user_count`.
    pub user_count: Option<usize>,
    /// Acceptance rate applied to every user when the axis is not `accept_rate`.
    pub accept_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub overrides: SweepOverrides,
}

impl SweepSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self, cfg: &SolverConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Usage("sweep values must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Usage("sweep methods must not be empty".into()));
        }
        let min_users =
            if cfg.allow_single_batch || !self.methods.iter().any(Method::scans_batch_count) {
                1
            } else {
                2
            };
        for &v in &self.values {
            match self.axis {
                Axis::UserCount => {
                    if v.fract() != 0.0 || v < min_users as f64 {
                        return Err(Error::Usage(format!(
                            "user_count values must be integers >= {min_users}, got {v}"
                        )));
                    }
                }
                Axis::AcceptRate => {
                    if !(v > 0.0 && v < 1.0) {
                        return Err(Error::Usage(format!(
                            "accept_rate values must lie in (0, 1), got {v}"
                        )));
                    }
                }
                Axis::HeteroCase => {
                    if ![1.0, 2.0, 3.0].contains(&v) {
                        return Err(Error::Usage(format!(
                            "hetero_case values must be 1, 2 or 3, got {v}"
                        )));
                    }
                }
            }
        }
        if let Some(m) = self.overrides.user_count {
            if m < min_users {
                return Err(Error::Usage(format!(
                    "overrides.user_count must be >= {min_users}"
                )));
            }
        }
        Ok(())
    }

    /// The instance at one axis value. Heterogeneous cases are fixed six-user
    /// instances and ignore the template; the other axes replicate the
    /// template's first user.
    pub fn instance_at(&self, value: f64, template: &ProblemInstance) -> Result<ProblemInstance> {
        let replicate = |m: usize| {
            let mut inst = template.clone();
            inst.users = vec![template.users[0]; m];
            inst
        };
        let mut inst = match self.axis {
            Axis::UserCount => replicate(value as usize),
            Axis::AcceptRate => match self.overrides.user_count {
                Some(m) => replicate(m),
                None => template.clone(),
            },
            Axis::HeteroCase => heterogeneous_case(value as u8)?,
        };
        match self.axis {
            Axis::AcceptRate => inst = inst.with_accept_rate(value),
            _ => {
                if let Some(a) = self.overrides.accept_rate {
                    inst = inst.with_accept_rate(a);
                }
            }
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: Axis,
    pub axis_value: f64,
    pub method: Method,
    pub outcome: std::result::Result<BaselineResult, String>,
}

pub const CSV_HEADER: [&str; 9] = [
    "axis_name",
    "axis_value",
    "method",
    "throughput_tps",
    "N_star",
    "span_ms",
    "utility_tokens",
    "lengths",
    "status",
];

/// Shortest decimal that parses back to the same `f64`; never fewer
/// significant digits than the value carries.
pub fn fmt_float(x: f64) -> String {
    format!("{x}")
}

impl SweepRow {
    pub fn record(&self) -> Vec<String> {
        let axis_value = match self.axis {
            Axis::AcceptRate => fmt_float(self.axis_value),
            _ => format!("{}", self.axis_value as u64),
        };
        let mut rec = vec![
            self.axis.name().to_string(),
            axis_value,
            self.method.id().to_string(),
        ];
        match &self.outcome {
            Ok(r) => {
                rec.push(fmt_float(r.throughput_tps));
                rec.push(r.batch_count.to_string());
                rec.push(fmt_float(r.span_ms));
                rec.push(fmt_float(r.utility_tokens));
                rec.push(
                    r.lengths
                        .iter()
                        .map(u32::to_string)
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                rec.push(
                    match r.status {
                        OptimalityStatus::Exact => "exact",
                        OptimalityStatus::BudgetTruncated { .. } => "budget_truncated",
                    }
                    .to_string(),
                );
            }
            Err(msg) => {
                rec.extend(std::iter::repeat_n(String::new(), 5));
                rec.push(format!("error: {msg}"));
            }
        }
        rec
    }
}

/// Evaluates every (value, method) point. Points run concurrently; rows are
/// returned sorted by axis value, then method id. A failing point is kept
/// as a row with its error message.
pub fn run_sweep(
    spec: &SweepSpec,
    template: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<Vec<SweepRow>> {
    spec.validate(cfg)?;
    template.validate()?;
    let mut methods = spec.methods.clone();
    methods.sort_by_key(|m| m.id());
    methods.dedup();
    let mut values = spec.values.clone();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let points: Vec<(f64, Method)> = values
        .iter()
        .flat_map(|&v| methods.iter().map(move |&m| (v, m)))
        .collect();
    Ok(points
        .into_par_iter()
        .map(|(value, method)| {
            let outcome = spec
                .instance_at(value, template)
                .and_then(|inst| run_method(method, &inst, cfg))
                .map_err(|e| e.to_string());
            SweepRow {
                axis: spec.axis,
                axis_value: value,
                method,
                outcome,
            }
        })
        .collect())
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
