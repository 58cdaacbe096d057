//! Per-episode metrics rows, their CSV form, and cross-seed summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 13] = [
    "step",
    "episode",
    "episode_return",
    "success",
    "wm_recon_loss",
    "wm_dyn_loss",
    "wm_rew_loss",
    "codec_loss",
    "abstract_latent_mse",
    "abstract_rew_mse",
    "manager_pg",
    "worker_pg",
    "plan_time_us",
];

/// One row per `eval_every` completed episodes. `episode` counts completed
/// episodes (1-based); losses are the most recent values at row time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    /// Mean return over the row's episodes.
    pub episode_return: f64,
    /// 1 if any of the row's episodes reached the goal.
    pub success: u8,
    pub wm_recon_loss: f64,
    pub wm_dyn_loss: f64,
    pub wm_rew_loss: f64,
    pub codec_loss: f64,
    pub abstract_latent_mse: f64,
    pub abstract_rew_mse: f64,
    pub manager_pg: f64,
    pub worker_pg: f64,
    /// Total planner wall time over the row's episodes (0 unless enabled).
    pub plan_time_us: u64,
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics file, checking the header against [`COLUMNS`].
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Format(format!(
            "{}: metrics header {:?} does not match the expected columns",
            path.display(),
            header
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Episode count of the first successful row.
pub fn episodes_to_first_success(rows: &[MetricsRow]) -> Option<u64> {
    rows.iter().find(|r| r.success == 1).map(|r| r.episode)
}

pub fn steps_to_first_success(rows: &[MetricsRow]) -> Option<u64> {
    rows.iter().find(|r| r.success == 1).map(|r| r.step)
}

/// Median treating `None` (never succeeded) as +infinity.
pub fn median_with_failures(values: &[Option<u64>]) -> f64 {
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| x.map_or(f64::INFINITY, |n| n as f64))
        .collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            a.max(b)
        } else {
            (a + b) / 2.0
        }
    }
}

/// Mean and standard error of `column` across runs, row by row, truncated to
/// the shortest run. Output lines: `row mean stderr`, gnuplot-ready.
pub fn aggregate(runs: &[Vec<MetricsRow>], column: &str) -> Result<String> {
    let pick = |r: &MetricsRow| -> Option<f64> {
        Some(match column {
            "step" => r.step as f64,
            "episode" => r.episode as f64,
            "episode_return" => r.episode_return,
            "success" => r.success as f64,
            "wm_recon_loss" => r.wm_recon_loss,
            "wm_dyn_loss" => r.wm_dyn_loss,
            "wm_rew_loss" => r.wm_rew_loss,
            "codec_loss" => r.codec_loss,
            "abstract_latent_mse" => r.abstract_latent_mse,
            "abstract_rew_mse" => r.abstract_rew_mse,
            "manager_pg" => r.manager_pg,
            "worker_pg" => r.worker_pg,
            "plan_time_us" => r.plan_time_us as f64,
            _ => return None,
        })
    };
    if !COLUMNS.contains(&column) {
        return Err(Error::Usage(format!("unknown metrics column '{column}'")));
    }
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = format!("# row mean_{column} stderr_{column} (n={})\n", runs.len());
    for i in 0..len {
        let xs: Vec<f64> = runs.iter().filter_map(|r| pick(&r[i])).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.push_str(&format!("{} {} {}\n", i + 1, mean, (var / n).sqrt()));
    }
    Ok(out)
}
