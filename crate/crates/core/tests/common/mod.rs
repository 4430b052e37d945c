#![allow(dead_code)]

use twoshot::image::Image;
use twoshot::nn::{grad_check, GradCheckOptions, GradCheckReport, Mode, Tensor4};
use twoshot::optics::OpticalConfig;
use twoshot::tsva::TsvaModel;

/// J0 from its integral form `(1/2π)∫cos(x sin θ) dθ`; the trapezoid rule is
/// spectrally accurate on a full period.
pub fn j0_integral(x: f64) -> f64 {
    const N: usize = 256;
    let mut s = 0.0;
    for j in 0..N {
        let theta = std::f64::consts::TAU * j as f64 / N as f64;
        s += (x * theta.sin()).cos();
    }
    s / N as f64
}

/// The defocus PSF by composite Simpson on 4096 intervals.
pub fn psf_simpson(r_um: f64, defocus_um: f64, cfg: &OpticalConfig) -> f64 {
    const INTERVALS: usize = 4096;
    let k = std::f64::consts::TAU / cfg.wavelength_um;
    let ratio = cfg.numerical_aperture / cfg.refractive_index;
    let a = k * ratio * r_um;
    let b = 0.5 * k * ratio * ratio * defocus_um;
    let h = 1.0 / INTERVALS as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..=INTERVALS {
        let rho = i as f64 * h;
        let w = if i == 0 || i == INTERVALS {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let amp = w * j0_integral(a * rho) * rho;
        re += amp * (b * rho * rho).cos();
        im += amp * (b * rho * rho).sin();
    }
    let (re, im) = (re * h / 3.0, im * h / 3.0);
    re * re + im * im
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Same-size convolution with mirrored borders, written as the plain
/// quadruple loop.
pub fn convolve_reference(img: &Image<f64>, k: &Image<f64>) -> Image<f64> {
    let (w, h) = img.dims();
    let r = (k.width() / 2) as isize;
    Image::from_fn(w, h, |x, y| {
        let mut s = 0.0;
        for v in 0..k.height() {
            for u in 0..k.width() {
                let sx = mirror(x as isize + r - u as isize, w);
                let sy = mirror(y as isize + r - v as isize, h);
                s += k.get(u, v) * img.get(sx, sy);
            }
        }
        s
    })
}

/// Uniform tensor in `[lo, hi)` from a small LCG, enough for test inputs.
pub fn lcg_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor4<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor4::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    })
}

/// Finite-difference check of a whole network: `Σ out · probe` on two inputs.
pub fn model_grad_check(model: &TsvaModel<f64>, y1: &Tensor4<f64>, y2: &Tensor4<f64>, coords: usize) -> GradCheckReport {
    let probe = lcg_tensor(y1.shape(), 99, -1.0, 1.0);
    let mut store = model.params.clone();
    // Conv biases ahead of train-mode BN have identically zero gradients;
    // the larger step and floor keep roundoff in the summed output from
    // posing as a relative error there.
    let opts = GradCheckOptions {
        step: 1e-4,
        floor: 1e-5,
        max_coords_per_tensor: Some(coords),
    };
    grad_check(
        &mut store,
        &[y1.clone(), y2.clone()],
        |tape, params, vars| {
            let mut m = model.clone();
            m.params = params.clone();
            let out = m.forward_on_tape(tape, vars[0], vars[1], Mode::Train)?;
            tape.dot(out, probe.clone())
        },
        opts,
    )
    .expect("gradient check runs")
}
