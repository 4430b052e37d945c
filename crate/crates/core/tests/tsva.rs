mod common;

use common::lcg_tensor;
use twoshot::image::Image;
use twoshot::nn::{adam_step, AdamState, Mode, Tape};
use twoshot::phantom::{build_dataset, DatasetRecipe};
use twoshot::tsva::{infer, train, Checkpoint, TrainOptions, TrainingMeta, TsvaConfig, TsvaModel};
use twoshot::{Error, Model32, Model64};

fn toy() -> TsvaConfig {
    TsvaConfig {
        depth_levels: 2,
        base_channels: 4,
        input_channels: 1,
        single_input: false,
    }
}

/// Parameter count of one shared encoder, the bottleneck and the decoder,
/// written out independently of the builder.
fn expected_parameters(cfg: &TsvaConfig) -> usize {
    let block = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
    let c = |l: usize| cfg.base_channels << l;
    let d = cfg.depth_levels;
    let ci = cfg.input_channels;
    let mut n = 0;
    for l in 0..d {
        n += block(if l == 0 { ci } else { c(l - 1) }, c(l)) + block(c(l), c(l));
    }
    n += block(2 * c(d - 1), c(d)) + block(c(d), c(d));
    for l in 0..d {
        n += 4 * c(l + 1) * c(l) + c(l);
        n += block(3 * c(l), c(l)) + block(c(l), c(l));
    }
    n + ci * c(0) + ci
}

#[test]
fn full_network_gradients_at_toy_size() {
    let model = Model64::build(toy(), 3).unwrap();
    let y1 = lcg_tensor([2, 1, 16, 16], 1, 0.0, 1.0);
    let y2 = lcg_tensor([2, 1, 16, 16], 2, 0.0, 1.0);
    let report = common::model_grad_check(&model, &y1, &y2, 6);
    assert!(report.checked > 200, "{report:?}");
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn zeroed_projection_is_the_identity_on_y1() {
    let mut model = Model64::build(TsvaConfig::default(), 5).unwrap();
    model.zero_output_projection();
    for seed in 0..10 {
        let y1 = lcg_tensor([1, 1, 16, 24], 2 * seed, 0.0, 1.0);
        let y2 = lcg_tensor([1, 1, 16, 24], 2 * seed + 1, 0.0, 1.0);
        assert_eq!(model.clone().forward(&y1, &y2, Mode::Train).unwrap(), y1);
        assert_eq!(model.predict(&y1, &y2).unwrap(), y1);
    }
}

#[test]
fn encoder_weights_are_counted_once() {
    for (d, b, c) in [(2, 4, 1), (3, 16, 1), (4, 8, 3), (3, 6, 2)] {
        let cfg = TsvaConfig {
            depth_levels: d,
            base_channels: b,
            input_channels: c,
            single_input: false,
        };
        let two = Model64::build(cfg, 0).unwrap();
        let one = Model64::build(TsvaConfig { single_input: true, ..cfg }, 0).unwrap();
        assert_eq!(two.parameter_count(), expected_parameters(&cfg));
        assert_eq!(one.parameter_count(), two.parameter_count());
    }
}

#[test]
fn single_input_mode_ignores_y2() {
    let model = Model64::build(TsvaConfig { single_input: true, ..toy() }, 0).unwrap();
    let y1 = lcg_tensor([2, 1, 8, 8], 4, 0.0, 1.0);
    let y2 = lcg_tensor([2, 1, 8, 8], 5, 0.0, 1.0);
    assert_eq!(model.predict(&y1, &y2).unwrap(), model.predict(&y1, &y1).unwrap());
    let two = Model64::build(toy(), 0).unwrap();
    assert_ne!(two.predict(&y1, &y2).unwrap(), two.predict(&y1, &y1).unwrap());
}

#[test]
fn depth_four_has_27_convolutions() {
    let cfg = TsvaConfig {
        depth_levels: 4,
        ..TsvaConfig::default()
    };
    assert_eq!(cfg.conv_layer_count(), 27);
    assert_eq!(cfg.size_multiple(), 16);
}

#[test]
fn build_is_seeded() {
    let a = Model64::build(toy(), 9).unwrap();
    assert_eq!(a, Model64::build(toy(), 9).unwrap());
    assert_ne!(a, Model64::build(toy(), 10).unwrap());
}

fn trained_checkpoint() -> Checkpoint<f64> {
    let mut model = Model64::build(toy(), 1).unwrap();
    let mut opt = AdamState::new(&model.params, 0.001);
    for step in 0..3 {
        let y1 = lcg_tensor([2, 1, 8, 8], step, 0.0, 1.0);
        let y2 = lcg_tensor([2, 1, 8, 8], step + 10, 0.0, 1.0);
        let gt = lcg_tensor([2, 1, 8, 8], step + 20, 0.0, 1.0);
        let mut tape = Tape::new();
        let (a, b, t) = (tape.input(y1), tape.input(y2), tape.input(gt));
        let out = model.forward_on_tape(&mut tape, a, b, Mode::Train).unwrap();
        let loss = tape.mse_loss(out, t).unwrap();
        model.params.zero_grads();
        tape.backward(loss, &mut model.params).unwrap();
        adam_step(&mut model.params, &mut opt);
    }
    // gradient buffers are scratch space, not checkpoint state
    model.params.zero_grads();
    Checkpoint {
        model,
        meta: TrainingMeta {
            seed: 1,
            epochs: 3,
            best_epoch: 3,
            delta_d_um: 0.5,
            history: Vec::new(),
        },
        optimizer: Some(opt),
    }
}

#[test]
fn checkpoint_round_trips_byte_exactly() {
    let ckpt = trained_checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let y = lcg_tensor([1, 1, 8, 8], 77, 0.0, 1.0);
    assert_eq!(back.model.predict(&y, &y).unwrap(), ckpt.model.predict(&y, &y).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    for cut in [0, 7, 12, 16, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::<f64>::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err:?}");
    }
}

fn edit_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let pos = bytes.windows(from.len()).position(|w| w == from.as_bytes()).expect("pattern in header");
    let mut out = bytes.to_vec();
    out[pos..pos + to.len()].copy_from_slice(to.as_bytes());
    out
}

#[test]
fn version_and_shape_mismatches_are_reported() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    let bumped = edit_header(&bytes, "\"format_version\":1", "\"format_version\":7");
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bumped), Err(Error::Checkpoint(_))));
    let wider = edit_header(&bytes, "\"base_channels\":4", "\"base_channels\":6");
    assert!(matches!(Checkpoint::<f64>::from_bytes(&wider), Err(Error::ConfigMismatch(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&magic), Err(Error::Checkpoint(_))));
}

#[test]
fn infer_keeps_odd_shapes_and_input_order_free() {
    let model = Model64::build(toy(), 2).unwrap();
    let a = Image::from_fn(21, 13, |x, y| ((x * 7 + y * 3) % 11) as f64 / 11.0);
    let b = a.map(|v| 0.5 * v + 0.2);
    let out = infer(&model, &a, &b).unwrap();
    assert_eq!(out.dims(), (21, 13));
    assert_eq!(infer(&model, &b, &a).unwrap(), out);
}

#[test]
fn single_precision_model_runs() {
    let model = Model32::build(toy(), 2).unwrap();
    let a = Image::<f32>::from_fn(16, 16, |x, y| ((x + y) % 5) as f32 / 5.0);
    let out = infer(&model, &a, &a.map(|v| v * 0.9)).unwrap();
    assert!(out.as_slice().iter().all(|v| v.is_finite()));
}

#[test]
fn training_is_deterministic_and_learns() {
    let mut recipe = DatasetRecipe::standard(1, 21, 1.0);
    recipe.patch_px = 32;
    recipe.noise_sigma = 0.005;
    let data = build_dataset::<f64>(&recipe).unwrap();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 8,
        seed: 4,
        ..TrainOptions::default()
    };
    let run = || {
        let model = Model64::build(toy(), 4).unwrap();
        train(model, &data.train, &data.validation, &opts, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    let bytes = |o: &twoshot::tsva::TrainOutcome<f64>| {
        Checkpoint {
            model: o.last.clone(),
            meta: TrainingMeta::default(),
            optimizer: Some(o.optimizer.clone()),
        }
        .to_bytes()
        .unwrap()
    };
    assert_eq!(bytes(&a), bytes(&b));
    let losses: Vec<f64> = a.history.iter().map(|h| h.train_loss).collect();
    assert!(losses[2] < losses[0], "{losses:?}");
    assert!(a.history.iter().all(|h| h.val_loss.is_finite()));
}

#[test]
fn builder_rejects_degenerate_configs() {
    for cfg in [
        TsvaConfig { depth_levels: 1, ..toy() },
        TsvaConfig { base_channels: 2, ..toy() },
        TsvaConfig { input_channels: 0, ..toy() },
    ] {
        assert!(TsvaModel::<f64>::build(cfg, 0).is_err());
    }
}
