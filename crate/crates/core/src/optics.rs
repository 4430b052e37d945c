//! Scalar defocus point-spread function and its discretized kernels.
//!
//! The PSF of a circular pupil under defocus `dz` is
//!
//! ```text
//! h(r, dz) = | C ∫₀¹ J0(k·(NA/n)·r·ρ) · exp(-½·i·k·ρ²·dz·(NA/n)²) · ρ dρ |²
//! ```
//!
//! with `k = 2π/λ`. [`psf_value`] evaluates the bracket with `C = 1` by
//! fixed-node Gauss–Legendre quadrature; [`build_kernel`] samples it on a
//! centered pixel grid and fixes `C` by normalizing the grid to unit sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Physical and numerical parameters of the imaging optics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub numerical_aperture: f64,
    pub refractive_index: f64,
    pub wavelength_um: f64,
    pub pixel_pitch_um: f64,
    pub kernel_radius_px: usize,
    pub quadrature_nodes: usize,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            numerical_aperture: 0.75,
            refractive_index: 1.0,
            wavelength_um: 0.55,
            pixel_pitch_um: 0.3,
            kernel_radius_px: 15,
            quadrature_nodes: 128,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        let na = self.numerical_aperture;
        let n = self.refractive_index;
        if !(na > 0.0 && na < n) {
            return Err(Error::domain(format!("need 0 < NA < n, got NA={na}, n={n}")));
        }
        if !(self.wavelength_um > 0.0) {
            return Err(Error::domain("wavelength must be positive"));
        }
        if !(self.pixel_pitch_um > 0.0) {
            return Err(Error::domain("pixel pitch must be positive"));
        }
        if self.kernel_radius_px < 1 {
            return Err(Error::domain("kernel radius must be at least 1 px"));
        }
        if self.quadrature_nodes < 16 {
            return Err(Error::domain("at least 16 quadrature nodes required"));
        }
        Ok(())
    }

    /// Angular wave number `2π/λ` in rad/µm.
    pub fn wave_number(&self) -> f64 {
        std::f64::consts::TAU / self.wavelength_um
    }

    pub fn kernel_side(&self) -> usize {
        2 * self.kernel_radius_px + 1
    }
}

// Power series below this magnitude, Hankel asymptotic expansion above.
const J0_SPLIT: f64 = 12.0;

/// Zero-order Bessel function of the first kind.
pub fn bessel_j0<T: Scalar>(x: T) -> Result<T> {
    if !x.is_finite() {
        return Err(Error::domain(format!("bessel_j0 of non-finite {x}")));
    }
    let ax = x.abs();
    Ok(if ax < T::lit(J0_SPLIT) {
        j0_series(ax)
    } else {
        j0_asymptotic(ax)
    })
}

fn j0_series<T: Scalar>(x: T) -> T {
    let q = x * x / T::lit(4.0);
    let mut term = T::one();
    let mut sum = T::one();
    // |x| < 12 needs at most ~45 terms to reach double round-off.
    for k in 1..80 {
        let kk = T::from_usize_lossy(k);
        term = -term * q / (kk * kk);
        sum += term;
        if term.abs() <= T::epsilon() * T::lit(1e-3) {
            break;
        }
    }
    sum
}

fn j0_asymptotic<T: Scalar>(x: T) -> T {
    // a_k = ((2k-1)!!)² / (k! 8^k); truncate at the smallest term.
    let mut p = T::zero();
    let mut q = T::zero();
    let mut a = T::one();
    let mut xk = T::one();
    let mut prev = T::infinity();
    for k in 0..100usize {
        let term = a / xk;
        if term >= prev {
            break;
        }
        prev = term;
        let sign = if (k / 2) % 2 == 0 { T::one() } else { -T::one() };
        if k % 2 == 0 {
            p += sign * term;
        } else {
            q -= sign * term;
        }
        let odd = T::from_usize_lossy(2 * k + 1);
        a = a * odd * odd / (T::from_usize_lossy(k + 1) * T::lit(8.0));
        xk = xk * x;
    }
    let chi = x - T::FRAC_PI_4();
    (T::lit(2.0) / (T::PI() * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Gauss–Legendre nodes and weights mapped to `[0, 1]`.
pub fn gauss_legendre_unit<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let nn = T::from_usize_lossy(n);
    let half = T::lit(0.5);
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (T::PI() * (T::from_usize_lossy(i) + T::lit(0.75)) / (nn + half)).cos();
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() <= T::epsilon() * T::lit(4.0) {
                let (_, d) = legendre_with_derivative(n, z);
                dp = d;
                break;
            }
        }
        let w = T::lit(2.0) / ((T::one() - z * z) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = half * (T::one() - z);
        nodes[n - 1 - i] = half * (T::one() + z);
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative<T: Scalar>(n: usize, z: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = z;
    for j in 2..=n {
        let jj = T::from_usize_lossy(j);
        let p2 = ((T::lit(2.0) * jj - T::one()) * z * p1 - (jj - T::one()) * p0) / jj;
        p0 = p1;
        p1 = p2;
    }
    let nn = T::from_usize_lossy(n);
    (p1, nn * (z * p1 - p0) / (z * z - T::one()))
}

/// Reusable PSF evaluator holding the quadrature rule for one configuration.
#[derive(Debug, Clone)]
pub struct PsfEvaluator<T> {
    lateral: T,
    axial: T,
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> PsfEvaluator<T> {
    pub fn new(cfg: &OpticalConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.wave_number();
        let ratio = cfg.numerical_aperture / cfg.refractive_index;
        let (nodes, weights) = gauss_legendre_unit(cfg.quadrature_nodes);
        Ok(Self {
            lateral: T::lit(k * ratio),
            axial: T::lit(0.5 * k * ratio * ratio),
            nodes,
            weights,
        })
    }

    /// Un-normalized PSF (`C = 1`) at lateral radius `r_um` and defocus `defocus_um`.
    pub fn value(&self, r_um: T, defocus_um: T) -> Result<T> {
        if !(r_um >= T::zero()) {
            return Err(Error::domain(format!("radius must be >= 0, got {r_um}")));
        }
        if !defocus_um.is_finite() {
            return Err(Error::domain("defocus must be finite"));
        }
        let a = self.lateral * r_um;
        let b = self.axial * defocus_um;
        let mut re = T::zero();
        let mut im = T::zero();
        for (&rho, &w) in self.nodes.iter().zip(&self.weights) {
            let amp = w * bessel_j0(a * rho)? * rho;
            let phase = b * rho * rho;
            re += amp * phase.cos();
            im -= amp * phase.sin();
        }
        Ok(re * re + im * im)
    }
}

/// Un-normalized defocus PSF; see the module docs.
pub fn psf_value<T: Scalar>(r_um: T, defocus_um: T, cfg: &OpticalConfig) -> Result<T> {
    PsfEvaluator::new(cfg)?.value(r_um, defocus_um)
}

/// PSF sampled on the kernel grid, before normalization.
pub fn sample_psf_grid<T: Scalar>(defocus_um: f64, cfg: &OpticalConfig) -> Result<Image<T>> {
    let eval = PsfEvaluator::<T>::new(cfg)?;
    let radius = cfg.kernel_radius_px;
    let side = cfg.kernel_side();
    let pitch = T::lit(cfg.pixel_pitch_um);
    let dz = T::lit(defocus_um);
    // Radially symmetric: evaluate each distinct squared radius once.
    let mut by_r2: BTreeMap<usize, T> = BTreeMap::new();
    let mut grid = Image::zeros(side, side);
    for i in 0..side {
        for j in 0..side {
            let di = i.abs_diff(radius);
            let dj = j.abs_diff(radius);
            let r2 = di * di + dj * dj;
            let v = match by_r2.get(&r2) {
                Some(&v) => v,
                None => {
                    let v = eval.value(pitch * T::from_usize_lossy(r2).sqrt(), dz)?;
                    by_r2.insert(r2, v);
                    v
                }
            };
            grid.set(j, i, v);
        }
    }
    Ok(grid)
}

/// Normalized convolution kernel for one defocus distance.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel<T> {
    pub defocus_um: f64,
    samples: Image<T>,
}

impl<T: Scalar> PsfKernel<T> {
    /// Wraps an arbitrary odd, square, non-negative grid, normalizing it to unit sum.
    pub fn from_samples(defocus_um: f64, samples: Image<T>) -> Result<Self> {
        let (w, h) = samples.dims();
        if w != h || w % 2 == 0 {
            return Err(Error::shape(format!("kernel must be odd and square, got {w}x{h}")));
        }
        if samples.as_slice().iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::domain("kernel samples must be non-negative"));
        }
        let sum: T = samples.as_slice().iter().copied().sum();
        if !(sum > T::zero()) || !sum.is_finite() {
            return Err(Error::Numeric(format!("kernel grid sum is {sum}")));
        }
        Ok(Self {
            defocus_um,
            samples: samples.map(|v| v / sum),
        })
    }

    /// The 1×1 identity kernel `[1]`.
    pub fn identity() -> Self {
        Self {
            defocus_um: 0.0,
            samples: Image::filled(1, 1, T::one()),
        }
    }

    pub fn side(&self) -> usize {
        self.samples.width()
    }

    pub fn radius(&self) -> usize {
        self.side() / 2
    }

    pub fn samples(&self) -> &Image<T> {
        &self.samples
    }

    pub fn center(&self) -> T {
        let c = self.radius();
        self.samples.get(c, c)
    }

    pub fn sum(&self) -> T {
        self.samples.as_slice().iter().copied().sum()
    }
}

/// Samples the PSF on a `(2R+1)²` grid and normalizes it to unit sum.
pub fn build_kernel<T: Scalar>(defocus_um: f64, cfg: &OpticalConfig) -> Result<PsfKernel<T>> {
    PsfKernel::from_samples(defocus_um, sample_psf_grid(defocus_um, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent reference: 40-term power series.
    fn j0_series_oracle(x: f64) -> f64 {
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            term *= -q / (k as f64 * k as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn j0_at_zero_is_one() {
        assert_eq!(bessel_j0(0.0f64).unwrap(), 1.0);
    }

    #[test]
    fn j0_at_one_matches_series_oracle() {
        let want = j0_series_oracle(1.0);
        assert!((want - 0.7651976866).abs() < 1e-9);
        assert!((bessel_j0(1.0f64).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn j0_first_zero_by_bisection_on_oracle() {
        let (mut lo, mut hi) = (2.0f64, 3.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if j0_series_oracle(lo) * j0_series_oracle(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!((root - 2.404825557695773).abs() < 1e-12);
        assert!(bessel_j0(2.404825557695773f64).unwrap().abs() < 1e-9);
    }

    #[test]
    fn j0_matches_high_precision_references() {
        // Values from a 30-digit arbitrary-precision evaluation.
        let cases = [
            (5.0f64, -0.177596771314338304347397013075f64),
            (7.9, 0.194361844841278239694776017114),
            (8.0, 0.171650807137553906090869407852),
            (8.1, 0.147517454044377670298697704663),
            (20.0, 0.167024664340583154727320544701),
            (50.0, 0.0558123276692518150047504785294),
            (99.5, -0.0195430664074407835566202878356),
        ];
        for (x, want) in cases {
            let got = bessel_j0(x).unwrap();
            assert!((got - want).abs() < 1e-10, "J0({x}) = {got}, want {want}");
            assert_eq!(bessel_j0(-x).unwrap(), got);
        }
    }

    #[test]
    fn j0_continuous_across_branch_split() {
        let below = bessel_j0(J0_SPLIT - 1e-12).unwrap();
        let above = bessel_j0(J0_SPLIT).unwrap();
        assert!((below - above).abs() < 1e-10);
    }

    #[test]
    fn j0_rejects_non_finite() {
        assert!(matches!(bessel_j0(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(bessel_j0(f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre_unit::<f64>(16);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        // degree 31 is the exactness limit for 16 nodes
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(31)).sum();
        assert!((integral - 1.0 / 32.0).abs() < 1e-14);
    }

    #[test]
    fn psf_on_axis_in_focus_is_one_quarter() {
        let cfg = OpticalConfig::default();
        let v: f64 = psf_value(0.0, 0.0, &cfg).unwrap();
        assert!((v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn psf_is_even_in_defocus() {
        let cfg = OpticalConfig::default();
        for &(r, dz) in &[(0.2, 0.7), (1.1, 2.5), (0.0, 9.0)] {
            let a: f64 = psf_value(r, dz, &cfg).unwrap();
            let b: f64 = psf_value(r, -dz, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn psf_rejects_negative_radius() {
        let cfg = OpticalConfig::default();
        assert!(matches!(psf_value(-0.1f64, 0.0, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn psf_matches_arbitrary_precision_reference() {
        // 30-digit adaptive quadrature of the same integral.
        let cfg = OpticalConfig::default();
        let cases = [
            (0.5, 1.0, 0.0178429875975300362184123284528),
            (0.0, 0.5, 0.200651004074937673125212101938),
            (1.3, 3.0, 0.00399167044042637335362972726149),
        ];
        for (r, dz, want) in cases {
            let got: f64 = psf_value(r, dz, &cfg).unwrap();
            assert!(((got - want) / want).abs() < 1e-10, "h({r},{dz})={got}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = OpticalConfig::default();
        cfg.numerical_aperture = 1.2;
        assert!(cfg.validate().is_err());
        let mut cfg = OpticalConfig::default();
        cfg.quadrature_nodes = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = OpticalConfig::default();
        cfg.kernel_radius_px = 0;
        assert!(build_kernel::<f64>(0.0, &cfg).is_err());
    }

    #[test]
    fn in_focus_kernel_peaks_at_center_and_is_normalized() {
        let cfg = OpticalConfig::default();
        let k = build_kernel::<f64>(0.0, &cfg).unwrap();
        assert_eq!(k.side(), 31);
        let (_, max) = k.samples().min_max();
        assert_eq!(k.center(), max);
        assert!((k.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn defocus_lowers_unnormalized_peak() {
        let cfg = OpticalConfig::default();
        let c = cfg.kernel_radius_px;
        let focused = sample_psf_grid::<f64>(0.0, &cfg).unwrap();
        let defocused = sample_psf_grid::<f64>(0.5, &cfg).unwrap();
        assert!(defocused.get(c, c) < focused.get(c, c));
    }

    #[test]
    fn on_axis_value_bounded_by_focus() {
        let cfg = OpticalConfig::default();
        let eval = PsfEvaluator::<f64>::new(&cfg).unwrap();
        let peak = eval.value(0.0, 0.0).unwrap();
        for i in 1..=20 {
            let dz = 0.5 * i as f64;
            assert!(eval.value(0.0, dz).unwrap() <= peak);
        }
    }

    #[test]
    fn kernel_is_fourfold_symmetric() {
        let cfg = OpticalConfig {
            kernel_radius_px: 6,
            ..OpticalConfig::default()
        };
        let k = build_kernel::<f64>(1.5, &cfg).unwrap();
        let s = k.samples();
        let n = k.side();
        for y in 0..n {
            for x in 0..n {
                let v = s.get(x, y);
                assert_eq!(v, s.get(n - 1 - x, y));
                assert_eq!(v, s.get(x, n - 1 - y));
                assert_eq!(v, s.get(y, x));
            }
        }
    }

    #[test]
    fn single_precision_kernel_is_usable() {
        let cfg = OpticalConfig {
            kernel_radius_px: 4,
            ..OpticalConfig::default()
        };
        let k32 = build_kernel::<f32>(1.0, &cfg).unwrap();
        let k64 = build_kernel::<f64>(1.0, &cfg).unwrap();
        for (a, b) in k32.samples().as_slice().iter().zip(k64.samples().as_slice()) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}
