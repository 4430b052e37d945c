use statrs::distribution::{ContinuousCDF, Normal};
use twoshot::phantom::{
    build_dataset, read_dataset, sample_absolute_offset, synth_phantom, write_dataset, DatasetRecipe, PhantomSpec,
    LAYER_SPACING_UM, MAX_ABSOLUTE_OFFSET_UM,
};

/// Probability of each grid offset under N(0, 1) rounded to 0.5 and clamped to ±3.
fn offset_pmf() -> Vec<(f64, f64)> {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let n = (MAX_ABSOLUTE_OFFSET_UM / LAYER_SPACING_UM) as i64;
    (-n..=n)
        .map(|k| {
            let lo = if k == -n { f64::NEG_INFINITY } else { (k as f64 - 0.5) * LAYER_SPACING_UM };
            let hi = if k == n { f64::INFINITY } else { (k as f64 + 0.5) * LAYER_SPACING_UM };
            (k as f64 * LAYER_SPACING_UM, phi.cdf(hi) - phi.cdf(lo))
        })
        .collect()
}

#[test]
fn offsets_follow_the_discretized_normal() {
    let draws: Vec<f64> = (0..100_000u64).map(sample_absolute_offset).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    let pmf = offset_pmf();
    let mut tv = 0.0;
    for (value, p) in &pmf {
        let freq = draws.iter().filter(|&&d| d == *value).count() as f64 / draws.len() as f64;
        tv += (freq - p).abs();
    }
    let outside = draws.iter().filter(|d| !pmf.iter().any(|(v, _)| v == *d)).count();
    assert_eq!(outside, 0);
    assert!(tv / 2.0 <= 0.02, "total variation {}", tv / 2.0);
    let near = draws.iter().filter(|d| d.abs() <= 0.5).count();
    let far = draws.iter().filter(|d| d.abs() >= 2.0).count();
    assert!(near > far);
}

#[test]
fn exact_cell_counts_are_honoured() {
    for seed in 0..5 {
        let spec = PhantomSpec {
            cell_count_range: (20, 20),
            ..PhantomSpec::with_seed(seed)
        };
        let p = synth_phantom::<f64>(&spec).unwrap();
        assert_eq!(p.truth.cell_count, 20);
        assert_eq!(p.truth.cells.len(), 20);
    }
}

#[test]
fn cells_sit_on_the_relief_grid() {
    for seed in 0..10 {
        let spec = PhantomSpec::with_seed(seed);
        let p = synth_phantom::<f64>(&spec).unwrap();
        let half = (spec.depth_relief_layers as i64 - 1) / 2;
        for c in &p.truth.cells {
            let rel = p.sample.relative_depth(c.depth_index);
            assert!(rel.abs() <= half);
        }
        let layers = p.sample.layers();
        assert!(layers.iter().all(|(m, _)| p.sample.relative_depth(*m).abs() <= half));
    }
}

fn small_recipe(seed: u64) -> DatasetRecipe {
    let mut r = DatasetRecipe::standard(3, seed, 0.5);
    r.noise_sigma = 0.005;
    r
}

#[test]
fn split_keeps_tiles_together() {
    let data = build_dataset::<f64>(&small_recipe(8)).unwrap();
    let key = |m: &twoshot::phantom::PatchMeta| (m.phantom, m.tile_x, m.tile_y);
    for v in &data.validation {
        assert!(data.train.iter().all(|t| key(&t.meta) != key(&v.meta)));
    }
    for t in &data.train {
        assert!(data.validation.iter().all(|v| v.ground_truth != t.ground_truth));
    }
    assert_eq!(data.train.len() + data.validation.len(), 3 * 4 * 4);
    assert_eq!(data.validation.len() % 4, 0);
}

#[test]
fn records_are_sharper_first_and_on_grid() {
    let data = build_dataset::<f64>(&small_recipe(9)).unwrap();
    for r in data.train.iter().chain(&data.validation) {
        let b1 = twoshot::focus::brenner(&r.y1).unwrap().value;
        let b2 = twoshot::focus::brenner(&r.y2).unwrap().value;
        assert!(b1 >= b2);
        let steps = r.meta.absolute_offset_um / LAYER_SPACING_UM;
        assert_eq!(steps, steps.round());
        assert_eq!(r.y1.dims(), (64, 64));
    }
}

#[test]
fn datasets_are_reproducible_on_disk() {
    let recipe = small_recipe(10);
    let a = build_dataset::<f64>(&recipe).unwrap();
    let b = build_dataset::<f64>(&recipe).unwrap();
    assert_eq!(a, b);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    write_dataset(dirs[0].path(), &a).unwrap();
    write_dataset(dirs[1].path(), &b).unwrap();
    let manifest = |d: &tempfile::TempDir| std::fs::read(d.path().join("manifest.json")).unwrap();
    assert_eq!(manifest(&dirs[0]), manifest(&dirs[1]));
    let first = a.train[0].meta.id();
    let y1 = |d: &tempfile::TempDir| std::fs::read(d.path().join("train").join(&first).join("y1.pgm")).unwrap();
    assert_eq!(y1(&dirs[0]), y1(&dirs[1]));
    let back = read_dataset::<f64>(dirs[0].path()).unwrap();
    assert_eq!(back.train.len(), a.train.len());
    assert_eq!(back.recipe, a.recipe);
}

#[test]
fn validation_can_be_rerendered_at_another_delta() {
    let data = build_dataset::<f64>(&small_recipe(11)).unwrap();
    let same = data.validation_at(0.5).unwrap();
    assert_eq!(same, data.validation);
    let wide = data.validation_at(3.0).unwrap();
    assert_eq!(wide.len(), data.validation.len());
    for (w, v) in wide.iter().zip(&data.validation) {
        assert_eq!(w.meta.id(), v.meta.id());
        assert_eq!(w.ground_truth, v.ground_truth);
        assert_eq!(w.meta.delta_d_um, 3.0);
    }
}
