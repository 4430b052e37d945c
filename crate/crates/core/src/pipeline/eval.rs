use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::io::write_png;
use crate::phantom::{DatasetSplit, PatchRecord};
use crate::pipeline::count::cell_count;
use crate::pipeline::metrics::{error_map, psnr};
use crate::pipeline::report::{EvalReport, EvalRow};
use crate::scalar::Scalar;
use crate::tsva::{infer_batch, TsvaModel};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// ΔD values to evaluate, µm, all positive.
    pub delta_d_sweep: Vec<f64>,
    /// Error maps written per ΔD group when `out_dir` is set.
    pub error_maps_per_group: usize,
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            delta_d_sweep: (1..=6).map(|i| 0.5 * i as f64).collect(),
            error_maps_per_group: 2,
            out_dir: None,
            batch_size: 20,
        }
    }
}

fn check_compatible<T: Scalar>(model: &TsvaModel<T>, patch_px: usize) -> Result<()> {
    let m = model.config.size_multiple();
    if model.config.input_channels != 1 {
        return Err(Error::ConfigMismatch(format!(
            "dataset is grayscale but the model expects {} channels",
            model.config.input_channels
        )));
    }
    if patch_px % m != 0 {
        return Err(Error::ConfigMismatch(format!(
            "patch size {patch_px} is not a multiple of {m}"
        )));
    }
    Ok(())
}

fn outputs<T: Scalar>(model: &TsvaModel<T>, records: &[PatchRecord<T>], batch: usize) -> Result<Vec<crate::image::Image<T>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|r| (&r.y1, &r.y2)).collect();
        out.extend(infer_batch(model, &pairs)?);
    }
    Ok(out)
}

/// PSNR (peak 1) and cell counts over the validation records, once per ΔD
/// in the sweep. Rows are ordered by sweep position, then record order.
pub fn evaluate<T: Scalar>(
    dataset: &DatasetSplit<T>,
    model: &TsvaModel<T>,
    ablation: Option<&TsvaModel<T>>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_compatible(model, dataset.recipe.patch_px)?;
    if let Some(a) = ablation {
        check_compatible(a, dataset.recipe.patch_px)?;
    }
    if dataset.validation.is_empty() {
        return Err(Error::domain("dataset has no validation records"));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for &dd in &opts.delta_d_sweep {
        let regenerated;
        let records: &[PatchRecord<T>] = if dd == dataset.recipe.delta_d_um {
            &dataset.validation
        } else {
            regenerated = dataset.validation_at(dd)?;
            &regenerated
        };
        let fused = outputs(model, records, opts.batch_size)?;
        let ablated = ablation.map(|a| outputs(a, records, opts.batch_size)).transpose()?;
        for (i, (rec, out)) in records.iter().zip(&fused).enumerate() {
            let gt = &rec.ground_truth;
            rows.push(EvalRow {
                record: rec.meta.id(),
                delta_d_um: dd,
                absolute_offset_um: rec.meta.absolute_offset_um,
                psnr_y1: psnr(&rec.y1, gt, 1.0)?,
                psnr_y2: psnr(&rec.y2, gt, 1.0)?,
                psnr_output: psnr(&out.clamp01(), gt, 1.0)?,
                psnr_ablation: ablated
                    .as_ref()
                    .map(|a| psnr(&a[i].clamp01(), gt, 1.0))
                    .transpose()?,
                count_gt: cell_count(gt),
                count_output: cell_count(&out.clamp01()),
            });
            if let Some(dir) = &opts.out_dir {
                if i < opts.error_maps_per_group {
                    let stem = format!("dd{dd}_{}", rec.meta.id());
                    for (tag, img) in [("y1", &rec.y1), ("output", &out.clamp01())] {
                        let path = dir.join(format!("{stem}_err_{tag}.png"));
                        write_png(&path, &error_map(img, gt)?)?;
                        maps.push(path);
                    }
                }
            }
        }
    }
    let mut report = EvalReport::new(1.0, rows);
    report.error_maps = maps;
    Ok(report)
}
