//! Simple pooling front-ends: non-parametric operators that shrink the time
//! axis of an `F x T` spectrogram to `F x floor(k T)` frames, with
//! `k = 1 / m` for an integer `m >= 2`.
//!
//! Every operator works on each mel row independently. Window-based methods
//! (max, avg, avg+max, uniform) use non-overlapping windows of `m` frames
//! starting at frame 0; the trailing `T mod m` frames are dropped.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis, Zip};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::features::{check_matrix, MelSpectrogram};
use crate::{Error, Result};

/// Anything that exposes an `F x T` spectrogram matrix.
pub trait TimeFrequency {
    fn matrix(&self) -> &Array2<f64>;

    fn n_rows(&self) -> usize {
        self.matrix().nrows()
    }

    fn n_cols(&self) -> usize {
        self.matrix().ncols()
    }
}

impl TimeFrequency for MelSpectrogram {
    fn matrix(&self) -> &Array2<f64> {
        self.data()
    }
}

impl TimeFrequency for CompressedSpectrogram {
    fn matrix(&self) -> &Array2<f64> {
        &self.data
    }
}

impl TimeFrequency for Array2<f64> {
    fn matrix(&self) -> &Array2<f64> {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Max,
    Avg,
    AvgMax,
    Spectral,
    Uniform,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Max,
        Method::Avg,
        Method::AvgMax,
        Method::Spectral,
        Method::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Max => "max",
            Method::Avg => "avg",
            Method::AvgMax => "avgmax",
            Method::Spectral => "spectral",
            Method::Uniform => "uniform",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Method::Max => 0,
            Method::Avg => 1,
            Method::AvgMax => 2,
            Method::Spectral => 3,
            Method::Uniform => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Method::Max),
            "avg" | "mean" => Ok(Method::Avg),
            "avgmax" | "avg-max" | "avg_max" => Ok(Method::AvgMax),
            "spectral" => Ok(Method::Spectral),
            "uniform" => Ok(Method::Uniform),
            other => Err(Error::Config(format!(
                "unknown pooling method `{other}` (expected max, avg, avgmax, spectral or uniform)"
            ))),
        }
    }
}

/// The compression factor `k = 1 / m`, stored as the integer `m >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Factor(u32);

impl Factor {
    pub fn new(denominator: u32) -> Result<Self> {
        if denominator < 2 {
            return Err(Error::Config(format!(
                "compression denominator must be an integer >= 2, got {denominator}"
            )));
        }
        Ok(Self(denominator))
    }

    pub fn denominator(self) -> usize {
        self.0 as usize
    }

    pub fn k(self) -> f64 {
        1.0 / f64::from(self.0)
    }

    /// `floor(k T)`.
    pub fn output_frames(self, frames: usize) -> usize {
        frames / self.denominator()
    }

    /// The output length for `frames`, or an error naming `floor(k T)` when
    /// it is zero.
    pub fn checked_output_frames(self, frames: usize) -> Result<usize> {
        match self.output_frames(frames) {
            0 => Err(Error::InputTooShort(format!(
                "T = {frames} frames with k = 1/{} gives floor(kT) = 0 output frames",
                self.0
            ))),
            n => Ok(n),
        }
    }
}

impl TryFrom<u32> for Factor {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        Factor::new(value)
    }
}

impl From<Factor> for u32 {
    fn from(f: Factor) -> u32 {
        f.0
    }
}

/// A pooling method together with its compression factor. The textual form
/// is `method:denominator`, e.g. `spectral:2` for spectral pooling at k = 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub method: Method,
    pub factor: Factor,
}

impl CompressionSpec {
    pub fn new(method: Method, denominator: u32) -> Result<Self> {
        Ok(Self {
            method,
            factor: Factor::new(denominator)?,
        })
    }

    pub fn k(&self) -> f64 {
        self.factor.k()
    }
}

impl fmt::Display for CompressionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.method, self.factor.0)
    }
}

impl FromStr for CompressionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, denom) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!("compression spec `{s}` is not of the form method:denominator"))
        })?;
        let denom: u32 = denom.trim().parse().map_err(|_| {
            Error::Config(format!("compression denominator `{denom}` is not an integer"))
        })?;
        CompressionSpec::new(method.trim().parse()?, denom)
    }
}

/// Output of a pooling front-end: `F x floor(k T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSpectrogram {
    data: Array2<f64>,
    spec: CompressionSpec,
    original_frames: usize,
}

impl CompressedSpectrogram {
    /// Reassembles a compressed spectrogram, e.g. when reading it from disk.
    pub fn from_parts(
        data: Array2<f64>,
        spec: CompressionSpec,
        original_frames: usize,
    ) -> Result<Self> {
        check_matrix(&data)?;
        if spec.factor.output_frames(original_frames) != data.ncols() {
            return Err(Error::Shape(format!(
                "{} frames is not floor({original_frames} / {})",
                data.ncols(),
                spec.factor.0
            )));
        }
        Ok(Self {
            data,
            spec,
            original_frames,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn spec(&self) -> CompressionSpec {
        self.spec
    }

    pub fn original_frames(&self) -> usize {
        self.original_frames
    }

    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-row DFT along the time axis of an `F x T` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAxisSpectrum {
    coeffs: Array2<Complex<f64>>,
    shifted: bool,
}

fn fft_rows(coeffs: &mut Array2<Complex<f64>>, fft: &dyn Fft<f64>) {
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); coeffs.ncols()];
    for mut row in coeffs.rows_mut() {
        buf.iter_mut().zip(row.iter()).for_each(|(b, c)| *b = *c);
        fft.process_with_scratch(&mut buf, &mut scratch);
        row.iter_mut().zip(&buf).for_each(|(c, b)| *c = *b);
    }
}

fn roll_rows(coeffs: &Array2<Complex<f64>>, offset: usize) -> Array2<Complex<f64>> {
    let n = coeffs.ncols();
    Array2::from_shape_fn(coeffs.dim(), |(r, i)| coeffs[[r, (i + offset) % n]])
}

impl TimeAxisSpectrum {
    /// Forward DFT of every row; zero frequency at column 0.
    pub fn forward(x: &Array2<f64>) -> Self {
        let mut coeffs = x.mapv(|v| Complex::new(v, 0.0));
        if x.ncols() > 0 {
            let fft = FftPlanner::new().plan_fft_forward(x.ncols());
            fft_rows(&mut coeffs, fft.as_ref());
        }
        Self {
            coeffs,
            shifted: false,
        }
    }

    pub fn coeffs(&self) -> &Array2<Complex<f64>> {
        &self.coeffs
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn len(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Column holding the zero frequency once shifted: `floor(T / 2)`.
    pub fn center(&self) -> usize {
        self.len() / 2
    }

    /// Moves the zero frequency to the center column. No-op if already shifted.
    pub fn shift(self) -> Self {
        if self.shifted {
            return self;
        }
        let n = self.len();
        Self {
            coeffs: roll_rows(&self.coeffs, n - n / 2),
            shifted: true,
        }
    }

    /// Moves the zero frequency back to column 0. No-op if not shifted.
    pub fn unshift(self) -> Self {
        if !self.shifted {
            return self;
        }
        Self {
            coeffs: roll_rows(&self.coeffs, self.len() / 2),
            shifted: false,
        }
    }

    /// Keeps `width` coefficients around the center, using the half-open
    /// window `[c - floor(width / 2), c - floor(width / 2) + width)`.
    pub fn crop_center(self, width: usize) -> Result<Self> {
        let n = self.len();
        if width == 0 || width > n {
            return Err(Error::Shape(format!(
                "cannot crop {width} coefficients out of {n}"
            )));
        }
        let shifted = self.shift();
        let start = shifted.center() - width / 2;
        Ok(Self {
            coeffs: shifted
                .coeffs
                .slice(ndarray::s![.., start..start + width])
                .to_owned(),
            shifted: true,
        })
    }

    /// Inverse DFT (normalized by `1 / T`) of every row, real part only.
    pub fn inverse(self) -> Array2<f64> {
        let spectrum = self.unshift();
        let n = spectrum.len();
        let mut coeffs = spectrum.coeffs;
        if n == 0 {
            return Array2::zeros(coeffs.dim());
        }
        let fft = FftPlanner::new().plan_fft_inverse(n);
        fft_rows(&mut coeffs, fft.as_ref());
        let scale = 1.0 / n as f64;
        coeffs.mapv(|c| c.re * scale)
    }
}

fn window_max(row: ArrayView1<f64>, t: usize, m: usize) -> f64 {
    row.slice(ndarray::s![t * m..(t + 1) * m])
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn window_mean(row: ArrayView1<f64>, t: usize, m: usize) -> f64 {
    row.slice(ndarray::s![t * m..(t + 1) * m]).iter().sum::<f64>() / m as f64
}

fn max_row(row: ArrayView1<f64>, m: usize, mut out: ArrayViewMut1<f64>) {
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = window_max(row, t, m);
    }
}

fn avg_row(row: ArrayView1<f64>, m: usize, mut out: ArrayViewMut1<f64>) {
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = window_mean(row, t, m);
    }
}

fn avg_max_row(row: ArrayView1<f64>, m: usize, mut out: ArrayViewMut1<f64>) {
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = window_max(row, t, m) + window_mean(row, t, m);
    }
}

fn uniform_row(row: ArrayView1<f64>, m: usize, mut out: ArrayViewMut1<f64>) {
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = row[t * m];
    }
}

/// Spectral pooling of one row: DFT, center-crop to `out.len()` coefficients,
/// inverse DFT, real part, scaled by `T' / T` so the mean is preserved.
struct SpectralRow {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl SpectralRow {
    fn new(n_in: usize, n_out: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n_in),
            inverse: planner.plan_fft_inverse(n_out),
        }
    }

    fn apply(&self, row: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
        let n = row.len();
        let n_out = out.len();
        let mut spectrum: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut spectrum);

        // Centered index i of the length-n spectrum holds frequency i - n/2;
        // the crop keeps frequencies -n_out/2 .. n_out - n_out/2 - 1.
        let lo = -((n_out / 2) as isize);
        let mut cropped = vec![Complex::default(); n_out];
        for j in 0..n_out {
            let freq = lo + j as isize;
            // Place into the unshifted length-n_out layout.
            let dst = freq.rem_euclid(n_out as isize) as usize;
            let src = freq.rem_euclid(n as isize) as usize;
            cropped[dst] = spectrum[src];
        }
        self.inverse.process(&mut cropped);
        // 1/n_out from the inverse DFT, times n_out/n for amplitude.
        let scale = 1.0 / n as f64;
        for (slot, c) in out.iter_mut().zip(&cropped) {
            *slot = c.re * scale;
        }
    }
}

fn pool_matrix(x: &Array2<f64>, method: Method, factor: Factor, parallel: bool) -> Result<Array2<f64>> {
    check_matrix(x)?;
    let n_out = factor.checked_output_frames(x.ncols())?;
    let m = factor.denominator();
    let mut out = Array2::zeros((x.nrows(), n_out));
    let spectral = (method == Method::Spectral).then(|| SpectralRow::new(x.ncols(), n_out));
    let apply = |row: ArrayView1<f64>, dst: ArrayViewMut1<f64>| match method {
        Method::Max => max_row(row, m, dst),
        Method::Avg => avg_row(row, m, dst),
        Method::AvgMax => avg_max_row(row, m, dst),
        Method::Uniform => uniform_row(row, m, dst),
        Method::Spectral => spectral.as_ref().expect("planned").apply(row, dst),
    };
    let zip = Zip::from(x.axis_iter(Axis(0))).and(out.axis_iter_mut(Axis(0)));
    if parallel {
        zip.par_for_each(apply);
    } else {
        zip.for_each(apply);
    }
    Ok(out)
}

fn pool<X: TimeFrequency + ?Sized>(x: &X, method: Method, factor: Factor) -> Result<CompressedSpectrogram> {
    let data = pool_matrix(x.matrix(), method, factor, false)?;
    Ok(CompressedSpectrogram {
        data,
        spec: CompressionSpec { method, factor },
        original_frames: x.n_cols(),
    })
}

/// Max over each window of `m` consecutive frames.
pub fn pool_max<X: TimeFrequency + ?Sized>(x: &X, factor: Factor) -> Result<CompressedSpectrogram> {
    pool(x, Method::Max, factor)
}

/// Mean over each window of `m` consecutive frames.
pub fn pool_avg<X: TimeFrequency + ?Sized>(x: &X, factor: Factor) -> Result<CompressedSpectrogram> {
    pool(x, Method::Avg, factor)
}

/// Elementwise sum of [`pool_max`] and [`pool_avg`].
pub fn pool_avg_max<X: TimeFrequency + ?Sized>(x: &X, factor: Factor) -> Result<CompressedSpectrogram> {
    pool(x, Method::AvgMax, factor)
}

/// Every `m`-th frame, starting at frame 0.
pub fn pool_uniform<X: TimeFrequency + ?Sized>(x: &X, factor: Factor) -> Result<CompressedSpectrogram> {
    pool(x, Method::Uniform, factor)
}

/// Low-pass in the modulation domain: keeps the `floor(k T)` lowest
/// time-axis DFT coefficients of each row and resynthesizes a shorter row.
pub fn pool_spectral<X: TimeFrequency + ?Sized>(x: &X, factor: Factor) -> Result<CompressedSpectrogram> {
    pool(x, Method::Spectral, factor)
}

/// Applies the operator selected by `spec`.
pub fn compress<X: TimeFrequency + ?Sized>(x: &X, spec: CompressionSpec) -> Result<CompressedSpectrogram> {
    pool(x, spec.method, spec.factor)
}

/// Same as [`compress`], with rows processed on the rayon thread pool.
/// Results are identical to the sequential path.
pub fn compress_par<X: TimeFrequency + ?Sized>(x: &X, spec: CompressionSpec) -> Result<CompressedSpectrogram> {
    let data = pool_matrix(x.matrix(), spec.method, spec.factor, true)?;
    Ok(CompressedSpectrogram {
        data,
        spec,
        original_frames: x.n_cols(),
    })
}
