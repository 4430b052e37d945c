use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::find_focus;
use crate::imaging::{capture_pair_with, render_with, DepthLayeredSample, KernelBank};
use crate::optics::OpticalConfig;
use crate::pipeline::count::cell_count;
use crate::pipeline::metrics::psnr;
use crate::pipeline::report::{EvalReport, EvalRow, ShotCounts};
use crate::scalar::Scalar;
use crate::tsva::{infer, TsvaModel};

/// One tile of a slide: its specimen and how far its in-focus plane sits
/// from the stage's nominal zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTile<T> {
    pub sample: DepthLayeredSample<T>,
    pub absolute_offset_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPolicy {
    /// Captures in the first tile's z-stack, centred on the nominal zero.
    pub zstack_shots_first_tile: usize,
    pub shots_per_tile_two_shot: usize,
    pub shots_per_tile_conventional: usize,
}

impl Default for ShotPolicy {
    fn default() -> Self {
        Self {
            zstack_shots_first_tile: 41,
            shots_per_tile_two_shot: 2,
            shots_per_tile_conventional: 21,
        }
    }
}

impl ShotPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.zstack_shots_first_tile == 0
            || self.shots_per_tile_two_shot == 0
            || self.shots_per_tile_conventional == 0
        {
            return Err(Error::domain("shot counts must be >= 1"));
        }
        Ok(())
    }

    /// Totals for a scan of `tiles` tiles.
    pub fn totals(&self, tiles: usize) -> ShotCounts {
        ShotCounts {
            tiles,
            two_shot: self.zstack_shots_first_tile + self.shots_per_tile_two_shot * tiles.saturating_sub(1),
            conventional: self.shots_per_tile_conventional * tiles,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPlan<T> {
    pub tiles: Vec<ScanTile<T>>,
    pub shots: ShotPolicy,
    /// Spacing of the first tile's z-stack, µm.
    pub zstack_step_um: f64,
}

impl<T> ScanPlan<T> {
    pub fn new(tiles: Vec<ScanTile<T>>) -> Self {
        Self {
            tiles,
            shots: ShotPolicy::default(),
            zstack_step_um: 0.5,
        }
    }
}

/// Scans every tile with the two-shot workflow.
///
/// Tile 0 is z-stacked to find the initial focal plane `F`; each later tile
/// is captured at `F ± ΔD` and fused. PSNR rows cover tiles 1.. only.
pub fn scan_simulate<T: Scalar>(
    plan: &ScanPlan<T>,
    delta_d_um: f64,
    cfg: &OpticalConfig,
    model: Option<&TsvaModel<T>>,
) -> Result<EvalReport> {
    plan.shots.validate()?;
    let first = plan.tiles.first().ok_or_else(|| Error::domain("scan plan has no tiles"))?;
    if plan.tiles.len() > 1 && model.is_none() {
        return Err(Error::domain("scanning more than one tile needs a checkpoint"));
    }
    if !(delta_d_um > 0.0) {
        return Err(Error::domain("delta D must be positive"));
    }
    let spacing = first.sample.layer_spacing_um;
    let bank = KernelBank::optical(*cfg, spacing)?;

    let half = (plan.shots.zstack_shots_first_tile - 1) as f64 / 2.0;
    let stack = (0..plan.shots.zstack_shots_first_tile)
        .map(|i| {
            let stage = (i as f64 - half) * plan.zstack_step_um;
            let shift = first.sample.offset_to_layers(stage - first.absolute_offset_um)?;
            Ok((stage, render_with(&first.sample, shift, &bank)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let focal_plane = find_focus(&stack)?;

    let mut rows = Vec::new();
    for (t, tile) in plan.tiles.iter().enumerate().skip(1) {
        let model = model.expect("checked above");
        let offset = focal_plane - tile.absolute_offset_um;
        let pair = capture_pair_with(&tile.sample, offset, delta_d_um, &bank)?;
        let out = infer(model, &pair.y1, &pair.y2)?.clamp01();
        rows.push(EvalRow {
            record: format!("tile{t:04}"),
            delta_d_um,
            absolute_offset_um: offset,
            psnr_y1: psnr(&pair.y1, &pair.ground_truth, 1.0)?,
            psnr_y2: psnr(&pair.y2, &pair.ground_truth, 1.0)?,
            psnr_output: psnr(&out, &pair.ground_truth, 1.0)?,
            psnr_ablation: None,
            count_gt: cell_count(&pair.ground_truth),
            count_output: cell_count(&out),
        });
    }
    let mut report = EvalReport::new(1.0, rows);
    report.shots = Some(plan.shots.totals(plan.tiles.len()));
    report.initial_focal_plane_um = Some(focal_plane);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shot_totals_closed_form() {
        let p = ShotPolicy::default();
        assert_eq!(p.totals(1), ShotCounts { tiles: 1, two_shot: 41, conventional: 21 });
        assert_eq!(p.totals(10), ShotCounts { tiles: 10, two_shot: 59, conventional: 210 });
        for t in 1..200 {
            let s = p.totals(t);
            assert_eq!(s.two_shot, 41 + 2 * (t - 1));
            assert_eq!(s.conventional, 21 * t);
        }
    }
}
