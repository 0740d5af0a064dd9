//! Dense grayscale images, odd-sized kernels and "same"-size convolution with
//! mirror boundaries.
//!
//! Pixels are stored row-major. Every convolution in the crate goes through
//! [`conv2d`] and its exact transpose [`conv2d_adjoint`], so the forward
//! diffusion and the backward pass agree at the borders.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "empty image {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value at index {i}")));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    /// Internal constructor; the caller guarantees the length.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::from_raw(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Pixelwise combination of two images of equal size.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_dims(other)?;
        Ok(Image::from_raw(
            self.width,
            self.height,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the rectangle starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidImage(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
        }
        Ok(Image::from_raw(width, height, data))
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

/// Square, odd-sized, center-anchored filter kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    coeffs: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, coeffs: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!("size {size} is not odd")));
        }
        if coeffs.len() != size * size {
            return Err(Error::InvalidKernel(format!(
                "{} coefficients for a {size}x{size} kernel",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidKernel("non-finite coefficient".into()));
        }
        Ok(Kernel { size, coeffs })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; size * size];
        if size % 2 == 1 {
            coeffs[size * size / 2] = 1.0;
        }
        Kernel::new(size, coeffs)
    }

    pub(crate) fn from_raw(size: usize, coeffs: Vec<f64>) -> Self {
        debug_assert!(size % 2 == 1 && coeffs.len() == size * size);
        Kernel { size, coeffs }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.coeffs[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    /// Point reflection through the center (the `k̄` kernel).
    pub fn rotate180(&self) -> Kernel {
        let mut coeffs = self.coeffs.clone();
        coeffs.reverse();
        Kernel::from_raw(self.size, coeffs)
    }
}

pub fn rotate180(k: &Kernel) -> Kernel {
    k.rotate180()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Mirror with edge repetition: `x[-1] = x[0]`, `x[n] = x[n-1]`.
    #[default]
    Symmetric,
}

/// Kernel sizes at or above this use the FFT path.
const FFT_MIN_KERNEL: usize = 11;

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j as usize
}

fn check_kernel_fits(img: &Image, k: &Kernel) -> Result<()> {
    let limit = 2 * img.width.min(img.height) + 1;
    if k.size > limit {
        return Err(Error::InvalidKernel(format!(
            "{0}x{0} kernel too large for a {1}x{2} image",
            k.size, img.width, img.height
        )));
    }
    Ok(())
}

/// Mirror-pads by `pad` pixels on every side. `pad` must not exceed either side.
fn pad_symmetric(img: &Image, pad: usize) -> (Vec<f64>, usize) {
    let pw = img.width + 2 * pad;
    let ph = img.height + 2 * pad;
    let mut out = Vec::with_capacity(pw * ph);
    let cols: Vec<usize> = (0..pw)
        .map(|j| reflect(j as isize - pad as isize, img.width))
        .collect();
    for i in 0..ph {
        let y = reflect(i as isize - pad as isize, img.height);
        let row = &img.data[y * img.width..(y + 1) * img.width];
        out.extend(cols.iter().map(|&x| row[x]));
    }
    (out, pw)
}

/// "Same"-size true convolution with the given boundary rule.
///
/// `out(y, x) = Σ k(a, b) · img(y − a, x − b)` with offsets `a, b ∈ [−r, r]`
/// and out-of-range indices mirrored.
pub fn conv2d(img: &Image, k: &Kernel, boundary: BoundaryMode) -> Result<Image> {
    check_kernel_fits(img, k)?;
    let BoundaryMode::Symmetric = boundary;
    if k.size >= FFT_MIN_KERNEL {
        Ok(conv2d_fft_unchecked(img, k))
    } else {
        Ok(conv2d_direct_unchecked(img, k))
    }
}

/// Direct (spatial-domain) path of [`conv2d`], regardless of kernel size.
pub fn conv2d_direct(img: &Image, k: &Kernel) -> Result<Image> {
    check_kernel_fits(img, k)?;
    Ok(conv2d_direct_unchecked(img, k))
}

/// Frequency-domain path of [`conv2d`], regardless of kernel size.
pub fn conv2d_fft(img: &Image, k: &Kernel) -> Result<Image> {
    check_kernel_fits(img, k)?;
    Ok(conv2d_fft_unchecked(img, k))
}

pub(crate) fn conv2d_direct_unchecked(img: &Image, k: &Kernel) -> Image {
    let r = k.radius();
    let m = k.size;
    let (w, h) = img.dims();
    let (padded, pw) = pad_symmetric(img, r);
    let mut out = vec![0.0; w * h];
    // out(y,x) = Σ_{row,col} k[row][col] · P(y + 2r − row, x + 2r − col)
    for row in 0..m {
        for col in 0..m {
            let c = k.coeffs[row * m + col];
            if c == 0.0 {
                continue;
            }
            let dy = 2 * r - row;
            let dx = 2 * r - col;
            for y in 0..h {
                let src = &padded[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
    }
    Image::from_raw(w, h, out)
}

fn fft2(buf: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(buf);
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = buf[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            buf[r * cols + c] = column[r];
        }
    }
}

pub(crate) fn conv2d_fft_unchecked(img: &Image, k: &Kernel) -> Image {
    let r = k.radius();
    let m = k.size;
    let (w, h) = img.dims();
    let (padded, pw) = pad_symmetric(img, r);
    let ph = h + 2 * r;

    let mut a: Vec<Complex<f64>> = padded.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut b = vec![Complex::new(0.0, 0.0); pw * ph];
    for row in 0..m {
        for col in 0..m {
            // offset (row − r, col − r) wrapped onto the circular grid
            let i = (row + ph - r) % ph;
            let j = (col + pw - r) % pw;
            b[i * pw + j].re += k.coeffs[row * m + col];
        }
    }
    fft2(&mut a, ph, pw, false);
    fft2(&mut b, ph, pw, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft2(&mut a, ph, pw, true);
    let norm = 1.0 / (pw * ph) as f64;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(a[(y + r) * pw + x + r].re * norm);
        }
    }
    Image::from_raw(w, h, out)
}

/// Exact transpose of `conv2d(·, k, Symmetric)`.
///
/// Computes the full zero-padded correlation with `k` and folds the border
/// band back onto the pixels it was mirrored from.
pub fn conv2d_adjoint(img: &Image, k: &Kernel) -> Result<Image> {
    check_kernel_fits(img, k)?;
    Ok(conv2d_adjoint_unchecked(img, k))
}

pub(crate) fn conv2d_adjoint_unchecked(img: &Image, k: &Kernel) -> Image {
    let r = k.radius();
    let m = k.size;
    let (w, h) = img.dims();
    let pw = w + 2 * r;
    let ph = h + 2 * r;

    // scatter: Q(y + 2r − row, x + 2r − col) += k[row][col] · img(y, x)
    let mut q = vec![0.0; pw * ph];
    for row in 0..m {
        for col in 0..m {
            let c = k.coeffs[row * m + col];
            if c == 0.0 {
                continue;
            }
            let dy = 2 * r - row;
            let dx = 2 * r - col;
            for y in 0..h {
                let src = &img.data[y * w..(y + 1) * w];
                let dst = &mut q[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
    }

    let mut out = vec![0.0; w * h];
    let cols: Vec<usize> = (0..pw)
        .map(|j| reflect(j as isize - r as isize, w))
        .collect();
    for i in 0..ph {
        let y = reflect(i as isize - r as isize, h);
        let dst = &mut out[y * w..(y + 1) * w];
        let src = &q[i * pw..(i + 1) * pw];
        if r == 0 {
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                dst[cols[j]] += v;
            }
        }
    }
    Image::from_raw(w, h, out)
}

/// Gradient of `⟨weights, conv2d(img, k)⟩` with respect to the coefficients of `k`.
///
/// The result is an `m × m` coefficient array laid out like [`Kernel::coeffs`].
pub(crate) fn conv2d_kernel_gradient(img: &Image, weights: &Image, size: usize) -> Vec<f64> {
    let r = size / 2;
    let (w, h) = img.dims();
    let (padded, pw) = pad_symmetric(img, r);
    let mut grad = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            let dy = 2 * r - row;
            let dx = 2 * r - col;
            let mut acc = 0.0;
            for y in 0..h {
                let src = &padded[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                let wt = &weights.data[y * w..(y + 1) * w];
                acc += src.iter().zip(wt).map(|(a, b)| a * b).sum::<f64>();
            }
            grad[row * size + col] = acc;
        }
    }
    grad
}
