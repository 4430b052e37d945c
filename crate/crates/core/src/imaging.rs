//! Layered depth-of-field rendering of in-focus and defocused captures.
//!
//! A specimen is a stack of depth layers `x_m`. A capture taken with the
//! stage shifted by `s` layers is `Σ_m x_{m+s} ⊗ h_m`, where `h_m` is the
//! PSF kernel for defocus `m · layer_spacing_um`. Shift 0 gives the
//! in-focus image used as ground truth.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::focus::{brenner, first_is_sharper};
use crate::image::{reflect_index, Image};
use crate::optics::{build_kernel, OpticalConfig, PsfKernel};
use crate::scalar::Scalar;

/// Offsets must sit on the layer grid to within this many layers.
const GRID_TOLERANCE: f64 = 1e-9;

/// A specimen approximated by discrete depth layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayeredSample<T> {
    layers: Vec<(i64, Image<T>)>,
    pub layer_spacing_um: f64,
    pub in_focus_index: i64,
}

impl<T: Scalar> DepthLayeredSample<T> {
    /// Builds a sample; layers are sorted by depth index.
    pub fn new(
        mut layers: Vec<(i64, Image<T>)>,
        layer_spacing_um: f64,
        in_focus_index: i64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("sample has no layers"));
        }
        if !(layer_spacing_um > 0.0) {
            return Err(Error::domain("layer spacing must be positive"));
        }
        layers.sort_by_key(|(m, _)| *m);
        if layers.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::domain("duplicate depth index"));
        }
        let dims = layers[0].1.dims();
        for (m, img) in &layers {
            if img.dims() != dims {
                return Err(Error::shape(format!("layer {m} has a different shape")));
            }
            if img
                .as_slice()
                .iter()
                .any(|&v| !(v >= T::zero() && v <= T::one()))
            {
                return Err(Error::domain(format!("layer {m} has pixels outside [0, 1]")));
            }
        }
        Ok(Self {
            layers,
            layer_spacing_um,
            in_focus_index,
        })
    }

    pub fn layers(&self) -> &[(i64, Image<T>)] {
        &self.layers
    }

    pub fn dims(&self) -> (usize, usize) {
        self.layers[0].1.dims()
    }

    /// Depth of a layer relative to the in-focus plane.
    pub fn relative_depth(&self, depth_index: i64) -> i64 {
        depth_index - self.in_focus_index
    }

    /// Pixel-wise sum of all layers.
    pub fn layer_sum(&self) -> Image<T> {
        let (w, h) = self.dims();
        let mut acc = Image::zeros(w, h);
        for (_, img) in &self.layers {
            acc.add_scaled(img, T::one()).expect("shapes checked at construction");
        }
        acc
    }

    /// Converts an offset in micrometers to a whole number of layers.
    pub fn offset_to_layers(&self, offset_um: f64) -> Result<i64> {
        let steps = offset_um / self.layer_spacing_um;
        let rounded = steps.round();
        if !steps.is_finite() || (steps - rounded).abs() > GRID_TOLERANCE {
            return Err(Error::domain(format!(
                "offset {offset_um} um is not a multiple of the {} um layer spacing",
                self.layer_spacing_um
            )));
        }
        Ok(rounded as i64)
    }
}

/// Lazily built PSF kernels `h_m`, shared across renders.
#[derive(Debug)]
pub struct KernelBank<T> {
    optics: Option<(OpticalConfig, f64)>,
    cache: Mutex<BTreeMap<u64, Arc<PsfKernel<T>>>>,
}

impl<T: Scalar> KernelBank<T> {
    /// Kernels from the defocus PSF, with `h_m` at defocus `m · spacing_um`.
    pub fn optical(cfg: OpticalConfig, spacing_um: f64) -> Result<Self> {
        cfg.validate()?;
        if !(spacing_um > 0.0) {
            return Err(Error::domain("layer spacing must be positive"));
        }
        Ok(Self {
            optics: Some((cfg, spacing_um)),
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    /// Every `h_m` is the 1×1 identity.
    pub fn identity() -> Self {
        Self {
            optics: None,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn kernel(&self, m: i64) -> Result<Arc<PsfKernel<T>>> {
        // h_m depends on |m| only
        let key = m.unsigned_abs();
        if let Some(k) = self.cache.lock().expect("kernel cache").get(&key) {
            return Ok(Arc::clone(k));
        }
        let kernel = match &self.optics {
            Some((cfg, spacing)) => build_kernel(key as f64 * spacing, cfg)?,
            None => PsfKernel::identity(),
        };
        let kernel = Arc::new(kernel);
        self.cache
            .lock()
            .expect("kernel cache")
            .insert(key, Arc::clone(&kernel));
        Ok(kernel)
    }
}

/// Same-size 2-D convolution with reflect boundary handling.
pub fn convolve2d<T: Scalar>(image: &Image<T>, kernel: &Image<T>) -> Result<Image<T>> {
    let (w, h) = image.dims();
    let (kw, kh) = kernel.dims();
    if kw != kh || kw % 2 == 0 {
        return Err(Error::shape(format!("kernel must be odd and square, got {kw}x{kh}")));
    }
    if kw > w || kw > h {
        return Err(Error::shape(format!(
            "kernel {kw}x{kh} larger than image {w}x{h}"
        )));
    }
    let r = kw / 2;
    let pw = w + 2 * r;
    let padded = Image::from_fn(pw, h + 2 * r, |x, y| {
        image.get(
            reflect_index(x as isize - r as isize, w),
            reflect_index(y as isize - r as isize, h),
        )
    });
    let src = padded.as_slice();
    let taps = kernel.as_slice();
    let mut out = vec![T::zero(); w * h];
    // out(x, y) = Σ k(u, v) · img(x + r - u, y + r - v)
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for v in 0..kw {
            let py = y + 2 * r - v;
            let line = &src[py * pw..(py + 1) * pw];
            for u in 0..kw {
                let k = taps[v * kw + u];
                if k == T::zero() {
                    continue;
                }
                let shifted = &line[2 * r - u..2 * r - u + w];
                for (o, &s) in row.iter_mut().zip(shifted) {
                    *o += k * s;
                }
            }
        }
    });
    Image::from_vec(w, h, out)
}

/// Renders the capture with the stage shifted by `shift_layers` layers.
pub fn render<T: Scalar>(
    sample: &DepthLayeredSample<T>,
    shift_layers: i64,
    cfg: &OpticalConfig,
) -> Result<Image<T>> {
    let bank = KernelBank::optical(*cfg, sample.layer_spacing_um)?;
    render_with(sample, shift_layers, &bank)
}

/// [`render`] against an explicit kernel bank.
pub fn render_with<T: Scalar>(
    sample: &DepthLayeredSample<T>,
    shift_layers: i64,
    bank: &KernelBank<T>,
) -> Result<Image<T>> {
    let (w, h) = sample.dims();
    let mut acc = Image::zeros(w, h);
    // layer j = m + shift is blurred by h_m; sum in ascending depth order
    for (depth, layer) in sample.layers() {
        let m = sample.relative_depth(*depth) - shift_layers;
        let kernel = bank.kernel(m)?;
        let blurred = convolve2d(layer, kernel.samples())?;
        acc.add_scaled(&blurred, T::one())?;
    }
    Ok(acc)
}

/// Two-shot observation of a sample plus its in-focus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturePair<T> {
    pub y1: Image<T>,
    pub y2: Image<T>,
    pub ground_truth: Image<T>,
    pub delta_d_um: f64,
    pub absolute_offset_um: f64,
    pub y1_is_minus_side: bool,
}

impl<T: Scalar> CapturePair<T> {
    pub fn brenner_scores(&self) -> (T, T) {
        (
            brenner(&self.y1).map(|s| s.value).unwrap_or_else(|_| T::zero()),
            brenner(&self.y2).map(|s| s.value).unwrap_or_else(|_| T::zero()),
        )
    }
}

/// Captures at `absolute_offset ∓ ΔD`, ordered so `y1` is the sharper shot.
pub fn capture_pair<T: Scalar>(
    sample: &DepthLayeredSample<T>,
    absolute_offset_um: f64,
    delta_d_um: f64,
    cfg: &OpticalConfig,
) -> Result<CapturePair<T>> {
    let bank = KernelBank::optical(*cfg, sample.layer_spacing_um)?;
    capture_pair_with(sample, absolute_offset_um, delta_d_um, &bank)
}

/// [`capture_pair`] against an explicit kernel bank.
pub fn capture_pair_with<T: Scalar>(
    sample: &DepthLayeredSample<T>,
    absolute_offset_um: f64,
    delta_d_um: f64,
    bank: &KernelBank<T>,
) -> Result<CapturePair<T>> {
    if !(delta_d_um > 0.0) {
        return Err(Error::domain(format!("delta D must be positive, got {delta_d_um}")));
    }
    let offset = sample.offset_to_layers(absolute_offset_um)?;
    let dd = sample.offset_to_layers(delta_d_um)?;
    let minus = render_with(sample, offset - dd, bank)?;
    let plus = render_with(sample, offset + dd, bank)?;
    let ground_truth = render_with(sample, 0, bank)?;
    let minus_first = first_is_sharper(&minus, &plus)?;
    let (y1, y2) = if minus_first { (minus, plus) } else { (plus, minus) };
    Ok(CapturePair {
        y1,
        y2,
        ground_truth,
        delta_d_um,
        absolute_offset_um,
        y1_is_minus_side: minus_first,
    })
}

/// One rendered capture per offset in `min_um..=max_um`.
pub fn generate_zstack<T: Scalar>(
    sample: &DepthLayeredSample<T>,
    min_um: f64,
    max_um: f64,
    step_um: f64,
    cfg: &OpticalConfig,
) -> Result<Vec<(f64, Image<T>)>> {
    if !(step_um > 0.0) {
        return Err(Error::domain(format!("z-stack step must be positive, got {step_um}")));
    }
    if max_um < min_um {
        return Err(Error::domain("z-stack range is empty"));
    }
    let span = (max_um - min_um) / step_um;
    if (span - span.round()).abs() > GRID_TOLERANCE {
        return Err(Error::domain("z-stack step does not divide the range"));
    }
    let step_layers = sample.offset_to_layers(step_um)?;
    let first = sample.offset_to_layers(min_um)?;
    let bank = KernelBank::optical(*cfg, sample.layer_spacing_um)?;
    (0..=span.round() as i64)
        .map(|i| {
            let layers = first + i * step_layers;
            let offset = layers as f64 * sample.layer_spacing_um;
            Ok((offset, render_with(sample, layers, &bank)?))
        })
        .collect()
}

/// Adds i.i.d. zero-mean Gaussian noise and clamps to `[0, 1]`.
pub fn add_sensor_noise<T: Scalar>(image: &Image<T>, sigma: f64, seed: u64) -> Result<Image<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.dims();
    let data = image
        .as_slice()
        .iter()
        .map(|&v| (v + T::lit(normal.sample(&mut rng))).max(T::zero()).min(T::one()))
        .collect();
    Image::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_noop() {
        let img = Image::<f64>::from_fn(5, 4, |x, y| (x * 3 + y) as f64 / 20.0);
        let one = Image::filled(1, 1, 1.0);
        assert_eq!(convolve2d(&img, &one).unwrap(), img);
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let mut img = Image::<f64>::zeros(9, 9);
        img.set(4, 4, 1.0);
        let k = Image::from_fn(3, 3, |x, y| (1 + x + 3 * y) as f64);
        let out = convolve2d(&img, &k).unwrap();
        for v in 0..3 {
            for u in 0..3 {
                assert_eq!(out.get(3 + u, 3 + v), k.get(u, v));
            }
        }
    }

    #[test]
    fn oversized_or_even_kernel_is_shape_error() {
        let img = Image::<f64>::zeros(3, 3);
        assert!(matches!(
            convolve2d(&img, &Image::zeros(5, 5)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            convolve2d(&img, &Image::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sample_validation() {
        let a = Image::<f64>::filled(4, 4, 0.5);
        assert!(DepthLayeredSample::<f64>::new(vec![], 0.5, 0).is_err());
        assert!(DepthLayeredSample::new(vec![(0, a.clone()), (0, a.clone())], 0.5, 0).is_err());
        assert!(DepthLayeredSample::new(vec![(0, a.clone()), (1, Image::zeros(3, 4))], 0.5, 0).is_err());
        assert!(DepthLayeredSample::new(vec![(0, Image::filled(4, 4, 1.5))], 0.5, 0).is_err());
        let s = DepthLayeredSample::new(vec![(2, a.clone()), (-1, a)], 0.5, 0).unwrap();
        assert_eq!(s.layers()[0].0, -1);
        assert_eq!(s.offset_to_layers(1.5).unwrap(), 3);
        assert!(s.offset_to_layers(0.3).is_err());
    }

    #[test]
    fn zstack_rejects_bad_steps() {
        let s = DepthLayeredSample::new(vec![(0, Image::<f64>::filled(8, 8, 0.5))], 0.5, 0).unwrap();
        let cfg = OpticalConfig {
            kernel_radius_px: 2,
            ..OpticalConfig::default()
        };
        assert!(generate_zstack(&s, -1.0, 1.0, 0.0, &cfg).is_err());
        assert!(generate_zstack(&s, -1.0, 1.0, -0.5, &cfg).is_err());
        assert!(generate_zstack(&s, -1.0, 1.0, 0.75, &cfg).is_err());
        assert!(generate_zstack(&s, -1.0, 1.0, 0.25, &cfg).is_err());
    }

    #[test]
    fn noise_contract() {
        let img = Image::<f64>::filled(16, 16, 0.5);
        assert_eq!(add_sensor_noise(&img, 0.0, 3).unwrap(), img);
        let a = add_sensor_noise(&img, 0.05, 11).unwrap();
        let b = add_sensor_noise(&img, 0.05, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_sensor_noise(&img, 0.05, 12).unwrap());
        assert!(add_sensor_noise(&img, -1.0, 0).is_err());
    }

    #[test]
    fn capture_pair_rejects_off_grid_offsets() {
        let s = DepthLayeredSample::new(vec![(0, Image::<f64>::filled(8, 8, 0.5))], 0.5, 0).unwrap();
        let cfg = OpticalConfig {
            kernel_radius_px: 2,
            ..OpticalConfig::default()
        };
        assert!(capture_pair(&s, 0.2, 0.5, &cfg).is_err());
        assert!(capture_pair(&s, 0.0, 0.3, &cfg).is_err());
        assert!(capture_pair(&s, 0.0, 0.0, &cfg).is_err());
    }
}
