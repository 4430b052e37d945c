//! Synthetic bright-field specimens and patch datasets built from them.
//!
//! A phantom is a light, gently textured background carrying dark
//! elliptical cells with darker nuclei. Every pixel belongs to exactly one
//! depth layer (the depth of the cell covering it, or layer 0), so the
//! layers sum to the in-focus image.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::select_sharper;
use crate::image::Image;
use crate::io::{read_image, read_json, write_json, write_pgm};
use crate::imaging::{add_sensor_noise, capture_pair_with, DepthLayeredSample, KernelBank};
use crate::nn::seeded_rng;
use crate::optics::OpticalConfig;
use crate::scalar::Scalar;

/// Default layer spacing of synthesized specimens, µm.
pub const LAYER_SPACING_UM: f64 = 0.5;

/// Absolute offsets are clamped to this magnitude, µm.
pub const MAX_ABSOLUTE_OFFSET_UM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive.
    pub cell_count_range: (usize, usize),
    pub cell_radius_px_range: (f64, f64),
    /// Odd number of distinct depth layers cells may occupy, centred on 0.
    pub depth_relief_layers: usize,
    pub background_level: f64,
    pub cell_contrast_range: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 128,
            height: 128,
            cell_count_range: (8, 16),
            cell_radius_px_range: (4.0, 7.0),
            depth_relief_layers: 5,
            background_level: 0.85,
            cell_contrast_range: (0.25, 0.45),
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::domain("phantom must be at least 64x64"));
        }
        let (cmin, cmax) = self.cell_count_range;
        if cmin > cmax {
            return Err(Error::domain("cell_count_range is empty"));
        }
        let (rmin, rmax) = self.cell_radius_px_range;
        if !(rmin >= 2.0 && rmin <= rmax) {
            return Err(Error::domain("cell radii must satisfy 2 <= min <= max"));
        }
        if 2.0 * rmax + 4.0 > self.width.min(self.height) as f64 {
            return Err(Error::domain("cells do not fit inside the phantom"));
        }
        if self.depth_relief_layers % 2 == 0 {
            return Err(Error::domain("depth_relief_layers must be odd"));
        }
        if !(self.background_level > 0.0 && self.background_level <= 1.0) {
            return Err(Error::domain("background_level must be in (0, 1]"));
        }
        let (lo, hi) = self.cell_contrast_range;
        if !(lo > 0.0 && lo <= hi && hi < self.background_level) {
            return Err(Error::domain(
                "cell contrast must satisfy 0 < min <= max < background_level",
            ));
        }
        Ok(())
    }
}

/// Geometry of one synthesized cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub depth_index: i64,
}

/// Ground truth recorded alongside a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub cell_count: usize,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub sample: DepthLayeredSample<T>,
    pub truth: PhantomTruth,
}

/// Fraction of a pixel covered by an ellipse, with a one-pixel soft edge.
fn coverage(x: f64, y: f64, c: &CellRecord, scale: f64, dx: f64, dy: f64) -> f64 {
    let (s, co) = c.angle.sin_cos();
    let px = x - (c.cx + dx);
    let py = y - (c.cy + dy);
    let u = (px * co + py * s) / (c.rx * scale);
    let v = (-px * s + py * co) / (c.ry * scale);
    let rho = (u * u + v * v).sqrt();
    let edge = (rho - 1.0) * c.rx.min(c.ry) * scale;
    (0.5 - edge).clamp(0.0, 1.0)
}

/// Synthesizes a phantom; a `cell_count_range` of `(k, k)` always yields `k`
/// separated cells or fails.
pub fn synth_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, 0);
    let (w, h) = (spec.width, spec.height);
    let (rmin, rmax) = spec.cell_radius_px_range;
    let target = rng.random_range(spec.cell_count_range.0..=spec.cell_count_range.1);

    let half = (spec.depth_relief_layers / 2) as i64;
    let depth_dist = Binomial::new(2 * half as u64, 0.5).expect("valid binomial");

    let mut cells: Vec<CellRecord> = Vec::with_capacity(target);
    let mut contrasts = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while cells.len() < target {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::domain(format!(
                "could only place {} of {target} separated cells",
                cells.len()
            )));
        }
        let rx = rng.random_range(rmin..=rmax);
        let ry = rx * rng.random_range(0.7..=1.0);
        let margin = rx + 2.0;
        let cx = rng.random_range(margin..=(w as f64 - 1.0 - margin));
        let cy = rng.random_range(margin..=(h as f64 - 1.0 - margin));
        let clear = cells
            .iter()
            .all(|c| ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt() >= c.rx + rx + 3.0);
        if !clear {
            continue;
        }
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let depth_index = depth_dist.sample(&mut rng) as i64 - half;
        cells.push(CellRecord { cx, cy, rx, ry, angle, depth_index });
        contrasts.push(rng.random_range(spec.cell_contrast_range.0..=spec.cell_contrast_range.1));
    }

    // low-frequency illumination plus fine granular texture
    let mut waves = Vec::new();
    for _ in 0..3 {
        let fx: f64 = rng.random_range(-0.05..0.05);
        let fy: f64 = rng.random_range(-0.05..0.05);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        waves.push((fx, fy, phase));
    }
    let grain = Normal::new(0.0, 0.02).expect("valid normal");
    let raw: Vec<f64> = (0..w * h).map(|_| grain.sample(&mut rng)).collect();
    let smooth = |x: usize, y: usize| {
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                s += raw[yy * w + xx];
            }
        }
        s / 3.0
    };

    let mut values = vec![0.0; w * h];
    let mut depth = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = spec.background_level
                + waves
                    .iter()
                    .map(|(fx, fy, p)| 0.01 * (std::f64::consts::TAU * (fx * xf + fy * yf) + p).sin())
                    .sum::<f64>()
                + smooth(x, y);
            for (c, &contrast) in cells.iter().zip(&contrasts) {
                let body = coverage(xf, yf, c, 1.0, 0.0, 0.0);
                if body <= 0.0 {
                    continue;
                }
                let nucleus = coverage(xf, yf, c, 0.45, 0.15 * c.rx, 0.0);
                let cell_level = spec.background_level - contrast;
                let nucleus_level = cell_level - 0.5 * contrast;
                v = v * (1.0 - body) + cell_level * body;
                v = v * (1.0 - nucleus) + nucleus_level * nucleus;
                depth[y * w + x] = c.depth_index;
            }
            values[y * w + x] = v.clamp(0.0, 1.0);
        }
    }

    let mut by_depth: BTreeMap<i64, Image<T>> = BTreeMap::new();
    by_depth.insert(0, Image::zeros(w, h));
    for (i, (&v, &d)) in values.iter().zip(&depth).enumerate() {
        let layer = by_depth.entry(d).or_insert_with(|| Image::zeros(w, h));
        layer.as_mut_slice()[i] = T::lit(v);
    }
    let sample = DepthLayeredSample::new(by_depth.into_iter().collect(), LAYER_SPACING_UM, 0)?;
    Ok(Phantom {
        sample,
        truth: PhantomTruth { cell_count: cells.len(), cells },
    })
}

/// Draws an absolute offset from `N(0, 1)` µm, rounded to the layer grid
/// and clamped to ±3 µm.
pub fn sample_absolute_offset(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, 1);
    let draw: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    let snapped = (draw / LAYER_SPACING_UM).round() * LAYER_SPACING_UM;
    snapped.clamp(-MAX_ABSOLUTE_OFFSET_UM, MAX_ABSOLUTE_OFFSET_UM) + 0.0
}

/// One training or validation example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord<T> {
    pub y1: Image<T>,
    pub y2: Image<T>,
    pub ground_truth: Image<T>,
    pub meta: PatchMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    /// Index into the dataset's phantom list.
    pub phantom: usize,
    pub phantom_seed: u64,
    pub tile_x: usize,
    pub tile_y: usize,
    /// Counter-clockwise quarter turns applied after cropping.
    pub rotation: u32,
    pub delta_d_um: f64,
    pub absolute_offset_um: f64,
    /// Cells whose centre lies in this patch.
    pub cell_count: usize,
}

impl PatchMeta {
    pub fn id(&self) -> String {
        format!(
            "p{:04}_x{}_y{}_r{}",
            self.phantom,
            self.tile_x,
            self.tile_y,
            self.rotation * 90
        )
    }
}

/// How a [`DatasetSplit`] was generated; enough to regenerate any record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub phantoms: Vec<PhantomSpec>,
    pub optics: OpticalConfig,
    pub delta_d_um: f64,
    pub patch_px: usize,
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub noise_sigma: f64,
}

impl DatasetRecipe {
    /// `count` default phantoms with seeds derived from `seed`.
    pub fn standard(count: usize, seed: u64, delta_d_um: f64) -> Self {
        Self {
            phantoms: (0..count)
                .map(|i| PhantomSpec::with_seed(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
                .collect(),
            optics: OpticalConfig::default(),
            delta_d_um,
            patch_px: 64,
            split_seed: seed,
            validation_fraction: 0.15,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        if self.phantoms.is_empty() {
            return Err(Error::domain("dataset needs at least one phantom"));
        }
        if !(self.delta_d_um > 0.0) {
            return Err(Error::domain("delta D must be positive"));
        }
        if self.patch_px < 8 {
            return Err(Error::domain("patch_px must be >= 8"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::domain("validation_fraction must be in (0, 1)"));
        }
        for spec in &self.phantoms {
            spec.validate()?;
            if spec.width < self.patch_px || spec.height < self.patch_px {
                return Err(Error::domain("patch larger than phantom"));
            }
        }
        Ok(())
    }
}

/// Train and validation records; the split is by base patch, so all four
/// rotations of a patch land on the same side.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub recipe: DatasetRecipe,
    pub train: Vec<PatchRecord<T>>,
    pub validation: Vec<PatchRecord<T>>,
}

/// Patches of one phantom captured at `delta_d_um`, in tile then rotation order.
fn phantom_records<T: Scalar>(
    recipe: &DatasetRecipe,
    index: usize,
    delta_d_um: f64,
    bank: &KernelBank<T>,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<Vec<PatchRecord<T>>> {
    let spec = &recipe.phantoms[index];
    let phantom = synth_phantom::<T>(spec)?;
    let offset = sample_absolute_offset(spec.seed);
    let pair = capture_pair_with(&phantom.sample, offset, delta_d_um, bank)?;
    let p = recipe.patch_px;
    let mut out = Vec::new();
    for ty in 0..spec.height / p {
        for tx in 0..spec.width / p {
            if !keep(tx, ty) {
                continue;
            }
            let (x0, y0) = (tx * p, ty * p);
            let cut = |img: &Image<T>| img.crop(x0, y0, p, p);
            let (a, b, gt) = (cut(&pair.y1)?, cut(&pair.y2)?, cut(&pair.ground_truth)?);
            let cell_count = phantom
                .truth
                .cells
                .iter()
                .filter(|c| {
                    c.cx >= x0 as f64 && c.cx < (x0 + p) as f64 && c.cy >= y0 as f64 && c.cy < (y0 + p) as f64
                })
                .count();
            for rotation in 0..4u32 {
                let meta = PatchMeta {
                    phantom: index,
                    phantom_seed: spec.seed,
                    tile_x: tx,
                    tile_y: ty,
                    rotation,
                    delta_d_um,
                    absolute_offset_um: offset,
                    cell_count,
                };
                let noise_seed = spec.seed ^ ((tx as u64) << 40) ^ ((ty as u64) << 48) ^ ((rotation as u64) << 56);
                let a = add_sensor_noise(&a.rotate90(rotation), recipe.noise_sigma, noise_seed)?;
                let b = add_sensor_noise(&b.rotate90(rotation), recipe.noise_sigma, !noise_seed)?;
                // rotation and noise can change which capture scores sharper
                let (y1, y2) = select_sharper(&a, &b)?;
                out.push(PatchRecord {
                    y1,
                    y2,
                    ground_truth: gt.rotate90(rotation),
                    meta,
                });
            }
        }
    }
    Ok(out)
}

/// Renders every phantom of `recipe` and splits the patches.
pub fn build_dataset<T: Scalar>(recipe: &DatasetRecipe) -> Result<DatasetSplit<T>> {
    recipe.validate()?;
    let bank = KernelBank::optical(recipe.optics, LAYER_SPACING_UM)?;
    let mut records = Vec::new();
    for i in 0..recipe.phantoms.len() {
        records.extend(phantom_records(recipe, i, recipe.delta_d_um, &bank, |_, _| true)?);
    }

    let mut groups: Vec<(usize, usize, usize)> = records
        .iter()
        .filter(|r| r.meta.rotation == 0)
        .map(|r| (r.meta.phantom, r.meta.tile_x, r.meta.tile_y))
        .collect();
    groups.shuffle(&mut seeded_rng(recipe.split_seed, 2));
    let n_val = ((groups.len() as f64) * recipe.validation_fraction).round() as usize;
    let n_val = n_val.clamp(1, groups.len().saturating_sub(1).max(1));
    let val_groups: std::collections::BTreeSet<_> = groups[..n_val].iter().copied().collect();

    let (validation, train) = records
        .into_iter()
        .partition(|r| val_groups.contains(&(r.meta.phantom, r.meta.tile_x, r.meta.tile_y)));
    Ok(DatasetSplit {
        recipe: recipe.clone(),
        train,
        validation,
    })
}

impl<T: Scalar> DatasetSplit<T> {
    /// The validation records regenerated with a different ΔD; same
    /// phantoms, offsets, patches and rotations.
    pub fn validation_at(&self, delta_d_um: f64) -> Result<Vec<PatchRecord<T>>> {
        if !(delta_d_um > 0.0) {
            return Err(Error::domain("delta D must be positive"));
        }
        let bank = KernelBank::optical(self.recipe.optics, LAYER_SPACING_UM)?;
        let mut wanted: BTreeMap<usize, Vec<(usize, usize, u32)>> = BTreeMap::new();
        for r in &self.validation {
            wanted
                .entry(r.meta.phantom)
                .or_default()
                .push((r.meta.tile_x, r.meta.tile_y, r.meta.rotation));
        }
        let mut out = Vec::new();
        for (phantom, keys) in wanted {
            let recs = phantom_records(&self.recipe, phantom, delta_d_um, &bank, |tx, ty| {
                keys.iter().any(|k| k.0 == tx && k.1 == ty)
            })?;
            out.extend(
                recs.into_iter()
                    .filter(|r| keys.contains(&(r.meta.tile_x, r.meta.tile_y, r.meta.rotation))),
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    recipe: DatasetRecipe,
    train: Vec<String>,
    validation: Vec<String>,
}

/// Writes one directory per record (`y1.pgm`, `y2.pgm`, `gt.pgm` as 16-bit
/// PGM, plus `meta.json`) under `train/` and `validation/`, and a top-level
/// `manifest.json` with the recipe and both record lists.
pub fn write_dataset<T: Scalar>(dir: impl AsRef<Path>, split: &DatasetSplit<T>) -> Result<()> {
    let dir = dir.as_ref();
    let mut lists = [Vec::new(), Vec::new()];
    for (k, (name, records)) in [("train", &split.train), ("validation", &split.validation)]
        .into_iter()
        .enumerate()
    {
        for r in records {
            let rel = format!("{name}/{}", r.meta.id());
            let rd = dir.join(&rel);
            std::fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
            write_pgm(rd.join("y1.pgm"), &r.y1, 16)?;
            write_pgm(rd.join("y2.pgm"), &r.y2, 16)?;
            write_pgm(rd.join("gt.pgm"), &r.ground_truth, 16)?;
            write_json(rd.join("meta.json"), &r.meta)?;
            lists[k].push(rel);
        }
    }
    let [train, validation] = lists;
    write_json(
        dir.join("manifest.json"),
        &DatasetManifest {
            seed: split.recipe.split_seed,
            recipe: split.recipe.clone(),
            train,
            validation,
        },
    )
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<DatasetSplit<T>> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
    manifest.recipe.validate()?;
    let load = |rels: &[String]| -> Result<Vec<PatchRecord<T>>> {
        rels.iter()
            .map(|rel| {
                let rd = dir.join(rel);
                Ok(PatchRecord {
                    y1: read_image(rd.join("y1.pgm"))?,
                    y2: read_image(rd.join("y2.pgm"))?,
                    ground_truth: read_image(rd.join("gt.pgm"))?,
                    meta: read_json(rd.join("meta.json"))?,
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: load(&manifest.train)?,
        validation: load(&manifest.validation)?,
        recipe: manifest.recipe,
    })
}
