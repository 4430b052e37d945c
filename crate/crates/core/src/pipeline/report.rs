use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;

/// Orientation only: figures for real H&E slides, which synthetic
/// phantoms cannot reproduce. Never compared against.
pub const REFERENCE_NOTE: &str = "reference (real slides, not comparable): two-shot network 42.25 dB, single-input U-net 39.44 dB average PSNR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record: String,
    pub delta_d_um: f64,
    pub absolute_offset_um: f64,
    pub psnr_y1: f64,
    pub psnr_y2: f64,
    pub psnr_output: f64,
    pub psnr_ablation: Option<f64>,
    pub count_gt: usize,
    pub count_output: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub delta_d_um: f64,
    pub records: usize,
    pub y1: MeanSd,
    pub y2: MeanSd,
    pub output: MeanSd,
    pub ablation: Option<MeanSd>,
    pub mean_abs_count_error: f64,
}

/// Shots needed by each workflow for a scan of `tiles` tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotCounts {
    pub tiles: usize,
    pub two_shot: usize,
    pub conventional: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Peak value the PSNR columns are computed against.
    pub peak: f64,
    pub rows: Vec<EvalRow>,
    pub groups: Vec<GroupSummary>,
    pub shots: Option<ShotCounts>,
    pub initial_focal_plane_um: Option<f64>,
    pub error_maps: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(peak: f64, rows: Vec<EvalRow>) -> Self {
        let groups = group_rows(&rows);
        Self {
            peak,
            rows,
            groups,
            shots: None,
            initial_focal_plane_um: None,
            error_maps: Vec::new(),
            notes: vec![REFERENCE_NOTE.to_string()],
        }
    }

    pub fn group(&self, delta_d_um: f64) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.delta_d_um == delta_d_um)
    }

    /// Per-record rows; identical inputs give identical bytes.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Domain(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Everything except the per-record rows.
    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            peak: f64,
            records: usize,
            groups: &'a [GroupSummary],
            shots: Option<ShotCounts>,
            initial_focal_plane_um: Option<f64>,
            error_maps: &'a [PathBuf],
            notes: &'a [String],
        }
        write_json(
            path,
            &Summary {
                peak: self.peak,
                records: self.rows.len(),
                groups: &self.groups,
                shots: self.shots,
                initial_focal_plane_um: self.initial_focal_plane_um,
                error_maps: &self.error_maps,
                notes: &self.notes,
            },
        )
    }
}

/// Aggregates by ΔD, in order of first appearance.
pub fn group_rows(rows: &[EvalRow]) -> Vec<GroupSummary> {
    let mut keys: Vec<f64> = Vec::new();
    for r in rows {
        if !keys.contains(&r.delta_d_um) {
            keys.push(r.delta_d_um);
        }
    }
    keys.into_iter()
        .map(|dd| {
            let g: Vec<&EvalRow> = rows.iter().filter(|r| r.delta_d_um == dd).collect();
            let col = |f: fn(&EvalRow) -> f64| MeanSd::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let ablation: Option<Vec<f64>> = g.iter().map(|r| r.psnr_ablation).collect();
            let count_err = g
                .iter()
                .map(|r| (r.count_output as f64 - r.count_gt as f64).abs())
                .sum::<f64>()
                / g.len() as f64;
            GroupSummary {
                delta_d_um: dd,
                records: g.len(),
                y1: col(|r| r.psnr_y1),
                y2: col(|r| r.psnr_y2),
                output: col(|r| r.psnr_output),
                ablation: ablation.map(|v| MeanSd::of(&v)),
                mean_abs_count_error: count_err,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_small_cases() {
        assert_eq!(MeanSd::of(&[3.0]), MeanSd { mean: 3.0, sd: 0.0 });
        let m = MeanSd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
