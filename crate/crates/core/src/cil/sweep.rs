//! One full protocol run per grid point along a single axis.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocol::{run_experiment, RunReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Adapters in the first `n` blocks.
    AdapterCount,
    /// Adapters in a 1-based block range such as `4-9`.
    AdapterPosition,
    /// The kind set placed in every configured block.
    Kinds,
    Bottleneck,
    Imbalance,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::AdapterCount => "adapter_count",
            Self::AdapterPosition => "adapter_position",
            Self::Kinds => "kinds",
            Self::Bottleneck => "bottleneck",
            Self::Imbalance => "imbalance",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "adapter_count" | "count" => Self::AdapterCount,
            "adapter_position" | "position" => Self::AdapterPosition,
            "kinds" => Self::Kinds,
            "bottleneck" => Self::Bottleneck,
            "imbalance" => Self::Imbalance,
            _ => {
                return Err(Error::config(
                    "axis",
                    format!("unknown sweep axis `{s}`"),
                ))
            }
        })
    }
}

/// The eight kind subsets, empty set first.
pub const KINDS_ALL8: [&str; 8] = [
    "none",
    "mlp",
    "atten",
    "all",
    "mlp+atten",
    "atten+all",
    "mlp+all",
    "mlp+atten+all",
];

pub const POSITIONS_STANDARD: [&str; 10] = [
    "1-3", "1-6", "1-9", "1-12", "4-6", "4-9", "4-12", "7-9", "7-12", "10-12",
];

/// Splits a comma-separated grid. Shorthands: `all8` (kinds), `standard`
/// (positions over 12 blocks), `pow2` (bottleneck 1..=256), `table`
/// (imbalance factors 0.01, 0.05, 0.1, 0.5, 1).
pub fn expand_grid(axis: SweepAxis, spec: &str) -> Result<Vec<String>> {
    let spec = spec.trim();
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    Ok(match (axis, spec) {
        (_, "") => Vec::new(),
        (SweepAxis::Kinds, "all8") => owned(&KINDS_ALL8),
        (SweepAxis::AdapterPosition, "standard") => owned(&POSITIONS_STANDARD),
        (SweepAxis::Bottleneck, "pow2") => (0..=8).map(|e| (1u32 << e).to_string()).collect(),
        (SweepAxis::Imbalance, "table") => owned(&["0.01", "0.05", "0.1", "0.5", "1"]),
        _ => spec.split(',').map(|s| s.trim().to_string()).collect(),
    })
}

fn bad_point(axis: SweepAxis, value: &str) -> Error {
    Error::config("grid", format!("bad {} value `{value}`", axis.name()))
}

/// `base` with the axis set to `value`.
pub fn apply_point(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::AdapterCount => {
            let n: usize = value.parse().map_err(|_| bad_point(axis, value))?;
            c.adapters.blocks = if n == 0 { "none".into() } else { format!("1-{n}") };
        }
        SweepAxis::AdapterPosition => c.adapters.blocks = value.to_string(),
        SweepAxis::Kinds => c.adapters.kinds = value.to_string(),
        SweepAxis::Bottleneck => {
            c.adapters.bottleneck = value.parse().map_err(|_| bad_point(axis, value))?;
        }
        SweepAxis::Imbalance => {
            c.data.imb_factor = value.parse().map_err(|_| bad_point(axis, value))?;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub fingerprint: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// Points where more capacity gave a lower final average.
    pub notes: Vec<String>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "axis,value,task,last,avg,params,seed";

    /// One row per grid point with its final task.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            if let Some(t) = r.report.rows.last() {
                writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{},{}",
                    self.axis.name(),
                    r.value,
                    t.task,
                    t.last,
                    t.avg,
                    r.report.params,
                    r.report.seed
                )
                .expect("write to string");
            }
        }
        out
    }

    /// Every task of every grid point.
    pub fn tasks_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            for t in &r.report.rows {
                writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{},{}",
                    self.axis.name(),
                    r.value,
                    t.task,
                    t.last,
                    t.avg,
                    r.report.params,
                    r.report.seed
                )
                .expect("write to string");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }
}

/// Worker cap from `ADAPTCL_THREADS`; `None` means the rayon default.
pub fn sweep_threads() -> Option<usize> {
    std::env::var("ADAPTCL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Pairs `(smaller, larger)` where the larger configuration contains the
/// smaller one and yet ended with a lower average. Only nested axes are
/// compared; nothing is asserted.
pub fn capacity_notes(axis: SweepAxis, base: &RunConfig, rows: &[SweepRow]) -> Vec<String> {
    let placements = |v: &str| {
        apply_point(base, axis, v)
            .and_then(|c| c.adapter_config())
            .map(|a| (a.placements, a.bottleneck))
            .ok()
    };
    let mut notes = Vec::new();
    for small in rows {
        for large in rows {
            let nested = match axis {
                SweepAxis::Imbalance => false,
                SweepAxis::Bottleneck => {
                    small.value.parse::<usize>().ok() < large.value.parse::<usize>().ok()
                }
                _ => match (placements(&small.value), placements(&large.value)) {
                    (Some((a, _)), Some((b, _))) => a.len() < b.len() && a.is_subset(&b),
                    _ => false,
                },
            };
            let (Some(sa), Some(la)) = (small.report.final_avg(), large.report.final_avg()) else {
                continue;
            };
            if nested && la < sa {
                notes.push(format!(
                    "{} `{}` (avg {:.4}) below nested `{}` (avg {:.4})",
                    axis.name(),
                    large.value,
                    la,
                    small.value,
                    sa
                ));
            }
        }
    }
    notes
}

/// Runs every grid point, in parallel, and returns rows in grid order.
pub fn sweep(base: &RunConfig, axis: SweepAxis, grid: &[String]) -> Result<SweepTable> {
    let configs = grid
        .iter()
        .map(|v| apply_point(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = sweep_threads() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let reports = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run_experiment(c).map(|o| o.report))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<SweepRow> = grid
        .iter()
        .zip(reports)
        .map(|(v, report)| SweepRow {
            value: v.clone(),
            report,
        })
        .collect();
    let notes = capacity_notes(axis, base, &rows);
    for n in &notes {
        log::info!("non-monotone capacity: {n}");
    }
    Ok(SweepTable {
        axis,
        fingerprint: base.fingerprint(),
        seed: base.protocol.seed,
        rows,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_expand() {
        assert_eq!(expand_grid(SweepAxis::Kinds, "all8").unwrap().len(), 8);
        assert_eq!(
            expand_grid(SweepAxis::AdapterPosition, "standard").unwrap().len(),
            10
        );
        assert_eq!(
            expand_grid(SweepAxis::Bottleneck, "pow2").unwrap(),
            ["1", "2", "4", "8", "16", "32", "64", "128", "256"]
        );
        assert!(expand_grid(SweepAxis::Kinds, "").unwrap().is_empty());
        assert_eq!(expand_grid(SweepAxis::Bottleneck, "4, 8").unwrap(), ["4", "8"]);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [
            SweepAxis::AdapterCount,
            SweepAxis::AdapterPosition,
            SweepAxis::Kinds,
            SweepAxis::Bottleneck,
            SweepAxis::Imbalance,
        ] {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let t = sweep(&RunConfig::default(), SweepAxis::Kinds, &[]).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.to_csv(), format!("{}\n", SweepTable::CSV_HEADER));
    }

    #[test]
    fn kinds_point_validated() {
        let base = RunConfig::default();
        assert!(apply_point(&base, SweepAxis::Kinds, "mlp+bogus").is_err());
        let c = apply_point(&base, SweepAxis::Kinds, "mlp+atten").unwrap();
        assert_eq!(c.adapter_config().unwrap().len(), 2 * base.encoder.num_blocks);
    }
}
