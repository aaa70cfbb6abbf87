//! Complex 2D fields, centered unitary DFTs, pupils and sampling operators.
//!
//! Conventions used throughout the crate:
//!
//! * spatial arrays keep the origin at index `(0, 0)`;
//! * spectra are centered, zero frequency at `(side/2, side/2)`;
//! * `dft2` uses the `e^{-i2πkx/N}` kernel and both directions carry a
//!   `1/side` factor, so the pair is unitary;
//! * arrays are indexed `[[row, col]] = [[y, x]]` and shifts are `(sx, sy)`.
//!
//! With this scaling the cyclic convolution theorem reads
//! `a ∗ b = side · idft2(dft2(a) ⊙ dft2(b))`.

use std::cell::RefCell;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use num_traits::Zero;
use rustfft::FftPlanner;

use crate::error::{dim_err, Error, Result};
use crate::optics::OpticsConfig;

pub type C64 = Complex64;

/// Square complex field on a spatial grid with pitch `px` (µm).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub data: Array2<C64>,
    pub px: f64,
}

/// Square complex spectrum with bin spacing `dk` (cycles/µm).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub data: Array2<C64>,
    pub centered: bool,
    pub dk: f64,
}

/// Square real image: an intensity or amplitude measurement, a real object, or
/// an illumination pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub data: Array2<f64>,
    pub px: f64,
}

/// How to treat spectral shifts that push the pupil past the array edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Reject,
    /// Cyclic wrap. Only meaningful for tests of the discrete algebra.
    Wrap,
}

pub(crate) fn square_side<T>(a: &Array2<T>, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return dim_err(format!("{what} must be square, got {r}x{c}"));
    }
    if r == 0 {
        return dim_err(format!("{what} is empty"));
    }
    Ok(r)
}

impl ComplexField {
    pub fn new(data: Array2<C64>, px: f64) -> Result<Self> {
        let n = square_side(&data, "field")?;
        if n < 2 {
            return dim_err("field side must be >= 2");
        }
        if !(px > 0.0) {
            return Err(Error::Domain(format!("pixel pitch must be positive, got {px}")));
        }
        Ok(Self { data, px })
    }

    pub fn zeros(side: usize, px: f64) -> Self {
        Self { data: Array2::zeros((side, side)), px }
    }

    pub fn side(&self) -> usize {
        self.data.nrows()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn abs(&self) -> RealImage {
        RealImage { data: self.data.mapv(|z| z.norm()), px: self.px }
    }

    pub fn intensity(&self) -> RealImage {
        RealImage { data: self.data.mapv(|z| z.norm_sqr()), px: self.px }
    }
}

impl Spectrum {
    pub fn side(&self) -> usize {
        self.data.nrows()
    }

    pub fn center(&self) -> usize {
        self.side() / 2
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

impl RealImage {
    pub fn new(data: Array2<f64>, px: f64) -> Result<Self> {
        square_side(&data, "image")?;
        Ok(Self { data, px })
    }

    pub fn side(&self) -> usize {
        self.data.nrows()
    }

    pub fn to_field(&self) -> ComplexField {
        ComplexField { data: self.data.mapv(|x| C64::new(x, 0.0)), px: self.px }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized in-place 2D FFT of a square, standard-layout array.
fn fft2_raw(a: &mut Array2<C64>, inverse: bool) {
    let n = a.nrows();
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    {
        let buf = a.as_slice_mut().expect("standard layout");
        fft.process_with_scratch(buf, &mut scratch);
    }
    let mut t = a.t().as_standard_layout().into_owned();
    fft.process_with_scratch(t.as_slice_mut().expect("standard layout"), &mut scratch);
    a.assign(&t.t());
}

/// Moves index 0 to `side/2` along both axes.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let n = a.nrows();
    let h = n / 2;
    Array2::from_shape_fn((n, n), |(r, c)| a[[(r + n - h) % n, (c + n - h) % n]].clone())
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let n = a.nrows();
    let h = n / 2;
    Array2::from_shape_fn((n, n), |(r, c)| a[[(r + h) % n, (c + h) % n]].clone())
}

/// Centered unitary 2D DFT of a spatial array.
pub fn dft2_array(x: &Array2<C64>) -> Array2<C64> {
    let n = x.nrows();
    let mut a = x.as_standard_layout().into_owned();
    fft2_raw(&mut a, false);
    let s = 1.0 / n as f64;
    a.mapv_inplace(|z| z * s);
    fftshift(&a)
}

/// Inverse of [`dft2_array`]; input is a centered spectrum.
pub fn idft2_array(x: &Array2<C64>) -> Array2<C64> {
    let n = x.nrows();
    let mut a = ifftshift(x);
    fft2_raw(&mut a, true);
    let s = 1.0 / n as f64;
    a.mapv_inplace(|z| z * s);
    a
}

pub fn dft2(field: &ComplexField) -> Result<Spectrum> {
    let n = square_side(&field.data, "field")?;
    Ok(Spectrum { data: dft2_array(&field.data), centered: true, dk: 1.0 / (n as f64 * field.px) })
}

pub fn idft2(spectrum: &Spectrum) -> Result<ComplexField> {
    let n = square_side(&spectrum.data, "spectrum")?;
    let px = 1.0 / (n as f64 * spectrum.dk);
    let data = if spectrum.centered {
        idft2_array(&spectrum.data)
    } else {
        let mut a = spectrum.data.as_standard_layout().into_owned();
        fft2_raw(&mut a, true);
        a.mapv_inplace(|z| z / n as f64);
        a
    };
    Ok(ComplexField { data, px })
}

/// Bin offsets `(u, v)` inside the objective pupil.
///
/// The pupil is stored sparsely because every per-illumination operator only
/// touches these bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Pupil {
    pub offsets: Vec<(isize, isize)>,
    /// Largest |u| or |v| present.
    pub reach: isize,
}

impl Pupil {
    pub fn new(cfg: &OpticsConfig) -> Self {
        let r = cfg.pupil_radius_bins().ceil() as isize + 1;
        let mut offsets = Vec::new();
        for v in -r..=r {
            for u in -r..=r {
                if cfg.in_pupil(u, v) {
                    offsets.push((u, v));
                }
            }
        }
        let reach = offsets.iter().map(|&(u, v)| u.abs().max(v.abs())).max().unwrap_or(0);
        Self { offsets, reach }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Binary mask on a `side`-grid centered at `side/2 + shift`.
    pub fn mask(&self, side: usize, shift: (isize, isize), boundary: Boundary) -> Result<Array2<f64>> {
        let c = (side / 2) as isize;
        let n = side as isize;
        let mut mask = Array2::zeros((side, side));
        for &(u, v) in &self.offsets {
            let (x, y) = (c + shift.0 + u, c + shift.1 + v);
            let inside = (0..n).contains(&x) && (0..n).contains(&y);
            let (x, y) = match (inside, boundary) {
                (true, _) => (x, y),
                (false, Boundary::Wrap) => (x.rem_euclid(n), y.rem_euclid(n)),
                (false, Boundary::Reject) => {
                    return Err(Error::OutOfBand(format!(
                        "pupil shifted by ({}, {}) bins leaves the {side}-bin spectrum",
                        shift.0, shift.1
                    )))
                }
            };
            mask[[y as usize, x as usize]] = 1.0;
        }
        Ok(mask)
    }
}

fn mask_to_spectrum(mask: Array2<f64>, dk: f64) -> Spectrum {
    Spectrum { data: mask.mapv(|m| C64::new(m, 0.0)), centered: true, dk }
}

/// Binary coherent transfer function of the objective on the high-res grid.
pub fn make_ctf(cfg: &OpticsConfig) -> Result<Spectrum> {
    cfg.validate()?;
    let mask = Pupil::new(cfg).mask(cfg.n_high, (0, 0), Boundary::Reject)?;
    Ok(mask_to_spectrum(mask, cfg.dk()))
}

/// CTF translated to the spectral position of illumination `n`.
pub fn make_ctf_n(cfg: &OpticsConfig, n: usize) -> Result<Spectrum> {
    make_ctf_n_with(cfg, n, Boundary::Reject)
}

pub fn make_ctf_n_with(cfg: &OpticsConfig, n: usize, boundary: Boundary) -> Result<Spectrum> {
    cfg.validate()?;
    let shift = cfg.shift_bins(n)?;
    let mask = Pupil::new(cfg).mask(cfg.n_high, shift, boundary)?;
    Ok(mask_to_spectrum(mask, cfg.dk()))
}

/// Point spread function of illumination `n`: `idft2(make_ctf_n)`.
pub fn make_psf_n(cfg: &OpticsConfig, n: usize) -> Result<ComplexField> {
    let ctf = make_ctf_n(cfg, n)?;
    let mut psf = idft2(&ctf)?;
    psf.px = cfg.px_high_um;
    Ok(psf)
}

/// Cyclic 2D convolution computed through the spectrum.
pub fn circular_convolve(a: &ComplexField, b: &ComplexField) -> Result<ComplexField> {
    square_side(&a.data, "convolution input")?;
    if b.data.dim() != a.data.dim() {
        return dim_err(format!(
            "convolution operands differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        ));
    }
    Ok(ComplexField { data: convolve_array(&a.data, &b.data), px: a.px })
}

pub(crate) fn convolve_array(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows() as f64;
    let mut fa = dft2_array(a);
    let fb = dft2_array(b);
    Zip::from(&mut fa).and(&fb).for_each(|x, &y| *x *= y * n);
    idft2_array(&fa)
}

fn check_stride(side: usize, s: usize) -> Result<()> {
    if s == 0 || !side.is_multiple_of(s) {
        return dim_err(format!("side {side} is not divisible by stride {s}"));
    }
    Ok(())
}

/// Keeps samples at `(i·s, j·s)`.
pub fn decimate<T: Clone>(a: &Array2<T>, s: usize) -> Result<Array2<T>> {
    let side = square_side(a, "decimate input")?;
    check_stride(side, s)?;
    let m = side / s;
    Ok(Array2::from_shape_fn((m, m), |(r, c)| a[[r * s, c * s]].clone()))
}

/// Adjoint of [`decimate`]: places samples at `(i·s, j·s)`, zeros elsewhere.
pub fn zero_upsample<T: Clone + Zero>(a: &Array2<T>, s: usize) -> Result<Array2<T>> {
    let m = square_side(a, "upsample input")?;
    if s == 0 {
        return dim_err("stride must be positive");
    }
    let mut out = Array2::from_elem((m * s, m * s), T::zero());
    for ((r, c), v) in a.indexed_iter() {
        out[[r * s, c * s]] = v.clone();
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn nearest_upsample<T: Clone>(a: &Array2<T>, s: usize) -> Array2<T> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r * s, c * s), |(i, j)| a[[i / s, j / s]].clone())
}

fn window_origin(side: usize, shift: (isize, isize), m: usize) -> Result<(usize, usize)> {
    if m > side {
        return Err(Error::OutOfBand(format!("window {m} larger than spectrum {side}")));
    }
    let c = (side / 2) as isize;
    let h = (m / 2) as isize;
    let x0 = c + shift.0 - h;
    let y0 = c + shift.1 - h;
    let last = (side - m) as isize;
    if x0 < 0 || y0 < 0 || x0 > last || y0 > last {
        return Err(Error::OutOfBand(format!(
            "{m}x{m} window at shift ({}, {}) leaves the {side}-bin spectrum",
            shift.0, shift.1
        )));
    }
    Ok((x0 as usize, y0 as usize))
}

/// Extracts the `m×m` window whose center bin `m/2` sits at `side/2 + shift`.
pub fn crop_subspectrum(spec: &Spectrum, shift: (isize, isize), m: usize) -> Result<Spectrum> {
    let side = square_side(&spec.data, "spectrum")?;
    let (x0, y0) = window_origin(side, shift, m)?;
    let data = spec.data.slice(ndarray::s![y0..y0 + m, x0..x0 + m]).to_owned();
    Ok(Spectrum { data, centered: true, dk: spec.dk })
}

/// Adjoint of [`crop_subspectrum`]: scatters a block into a zero `side` grid.
pub fn embed_subspectrum(block: &Spectrum, shift: (isize, isize), side: usize) -> Result<Spectrum> {
    let mut out = Array2::zeros((side, side));
    embed_add(&mut out, &block.data, shift)?;
    Ok(Spectrum { data: out, centered: true, dk: block.dk })
}

/// Accumulates `block` into `target` at the window for `shift`.
pub(crate) fn embed_add(target: &mut Array2<C64>, block: &Array2<C64>, shift: (isize, isize)) -> Result<()> {
    let side = square_side(target, "spectrum")?;
    let m = square_side(block, "block")?;
    let (x0, y0) = window_origin(side, shift, m)?;
    let mut view = target.slice_mut(ndarray::s![y0..y0 + m, x0..x0 + m]);
    view += block;
    Ok(())
}

/// `Σ conj(a)·b`.
pub fn inner(a: &Array2<C64>, b: &Array2<C64>) -> C64 {
    Zip::from(a).and(b).fold(C64::new(0.0, 0.0), |acc, x, y| acc + x.conj() * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::DEFAULT_PX_HIGH_UM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Array2<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
        Zip::from(a).and(b).fold(0.0f64, |m, x, y| m.max((x - y).norm()))
    }

    #[test]
    fn constant_field_has_single_center_bin() {
        let f = ComplexField::new(Array2::from_elem((8, 8), C64::new(2.0, 0.0)), 1.0).unwrap();
        let s = dft2(&f).unwrap();
        for ((r, c), z) in s.data.indexed_iter() {
            if (r, c) == (4, 4) {
                assert!((z - C64::new(16.0, 0.0)).norm() < 1e-12);
            } else {
                assert!(z.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let x = random_field(16, 1);
        let f = ComplexField::new(x.clone(), 0.5).unwrap();
        let back = idft2(&dft2(&f).unwrap()).unwrap();
        let rel = max_abs_diff(&back.data, &x) / x.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(rel < 1e-12);
        assert!((back.px - 0.5).abs() < 1e-15);
    }

    #[test]
    fn odd_side_round_trip() {
        let x = random_field(7, 2);
        let back = idft2_array(&dft2_array(&x));
        assert!(max_abs_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn non_square_rejected() {
        let f = ComplexField { data: Array2::zeros((4, 6)), px: 1.0 };
        assert!(matches!(dft2(&f), Err(Error::Dimension(_))));
        let f = ComplexField { data: Array2::zeros((0, 0)), px: 1.0 };
        assert!(matches!(dft2(&f), Err(Error::Dimension(_))));
    }

    #[test]
    fn fftshift_pair_inverts() {
        for n in [4usize, 5] {
            let a = Array2::from_shape_fn((n, n), |(r, c)| (r * n + c) as f64);
            assert_eq!(ifftshift(&fftshift(&a)), a);
            assert_eq!(fftshift(&a)[[n / 2, n / 2]], 0.0);
        }
    }

    #[test]
    fn tiny_aperture_is_single_bin() {
        let cfg = OpticsConfig::new(0.532, 0.001, 32, 4, DEFAULT_PX_HIGH_UM);
        let ctf = make_ctf(&cfg).unwrap();
        let nz: Vec<_> = ctf.data.indexed_iter().filter(|(_, z)| z.re != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nz, vec![(16, 16)]);
    }

    #[test]
    fn ctf_is_point_symmetric() {
        let cfg = OpticsConfig::new(0.532, 0.1, 64, 4, DEFAULT_PX_HIGH_UM);
        let ctf = make_ctf(&cfg).unwrap();
        let c = 32usize;
        for v in -31isize..=31 {
            for u in -31isize..=31 {
                let a = ctf.data[[(c as isize + v) as usize, (c as isize + u) as usize]];
                let b = ctf.data[[(c as isize - v) as usize, (c as isize - u) as usize]];
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn shifted_ctf_center_moves() {
        let n = 64;
        let scale = n as f64 * DEFAULT_PX_HIGH_UM / 0.532;
        let kx = (n / 4) as f64 / scale;
        let cfg = OpticsConfig::new(0.532, 0.05, n, 4, DEFAULT_PX_HIGH_UM).with_wavevectors(vec![(kx, 0.0)]);
        assert_eq!(cfg.shift_bins(0).unwrap(), (16, 0));
        let ctf = make_ctf_n(&cfg, 0).unwrap();
        assert_eq!(ctf.data[[n / 2, n / 2 + n / 4]].re, 1.0);
        assert_eq!(ctf.data[[n / 2, n / 2]].re, 0.0);
    }

    #[test]
    fn out_of_band_shift_rejected_unless_wrapped() {
        let cfg = OpticsConfig::new(0.532, 0.1, 64, 4, DEFAULT_PX_HIGH_UM).with_wavevectors(vec![(0.55, 0.0)]);
        assert!(matches!(make_ctf_n(&cfg, 0), Err(Error::OutOfBand(_))));
        let wrapped = make_ctf_n_with(&cfg, 0, Boundary::Wrap).unwrap();
        let base = make_ctf(&cfg).unwrap();
        let count = |s: &Spectrum| s.data.iter().filter(|z| z.re != 0.0).count();
        assert_eq!(count(&wrapped), count(&base));
    }

    #[test]
    fn decimate_upsample_identities() {
        let y = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64);
        assert_eq!(decimate(&y, 1).unwrap(), y);
        assert_eq!(zero_upsample(&y, 1).unwrap(), y);
        let up = zero_upsample(&y, 4).unwrap();
        assert_eq!(up.dim(), (12, 12));
        assert_eq!(decimate(&up, 4).unwrap(), y);
        assert!(decimate(&Array2::<f64>::zeros((10, 10)), 4).is_err());
    }

    #[test]
    fn crop_embed_identities() {
        let x = random_field(8, 3);
        let spec = Spectrum { data: x.clone(), centered: true, dk: 1.0 };
        assert_eq!(crop_subspectrum(&spec, (0, 0), 8).unwrap().data, x);
        let block = Spectrum { data: random_field(4, 4), centered: true, dk: 1.0 };
        let big = embed_subspectrum(&block, (1, -2), 12).unwrap();
        assert_eq!(crop_subspectrum(&big, (1, -2), 4).unwrap().data, block.data);
        assert!(matches!(crop_subspectrum(&spec, (3, 0), 4), Err(Error::OutOfBand(_))));
    }

    #[test]
    fn convolution_identity_and_ones() {
        let a = random_field(6, 5);
        let mut delta = Array2::zeros((6, 6));
        delta[[0, 0]] = C64::new(1.0, 0.0);
        let fa = ComplexField::new(a.clone(), 1.0).unwrap();
        let out = circular_convolve(&fa, &ComplexField::new(delta, 1.0).unwrap()).unwrap();
        assert!(max_abs_diff(&out.data, &a) < 1e-12);
        let ones = ComplexField::new(Array2::from_elem((6, 6), C64::new(1.0, 0.0)), 1.0).unwrap();
        let out = circular_convolve(&fa, &ones).unwrap();
        let total: C64 = a.iter().sum();
        assert!(out.data.iter().all(|z| (z - total).norm() < 1e-12));
        let small = ComplexField::zeros(4, 1.0);
        assert!(circular_convolve(&fa, &small).is_err());
    }
}
