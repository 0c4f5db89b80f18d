//! Morlet continuous wavelet transform and per-scale wavelet cross-correlation.
//!
//! The transform is the truncated sum
//!
//! ```text
//! W(s, tau) = sum_t x[t] * s^(-1/2) * conj(psi((t - tau) / s))
//! psi(u)    = pi^(-1/4) * exp(i * omega0 * u) * exp(-u^2 / 2)
//! ```
//!
//! over the samples of the window only (no padding). [`cwt`] evaluates it
//! with zero-padded FFT convolution; [`cwt_direct`] is the literal sum.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{window, Recording, RecordingError};

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("window has {0} samples, need at least 2")]
    WindowTooShort(usize),
    #[error("invalid wavelet config: {0}")]
    InvalidConfig(String),
    #[error("coefficient shapes differ: {0}")]
    Mismatch(String),
    #[error("lag_max {lag_max} must be smaller than the series length {len}")]
    LagTooLarge { lag_max: usize, len: usize },
    #[error("self pair: sensor {0} against itself")]
    SelfPair(usize),
    #[error("malformed ASC: {0}")]
    Asc(String),
    #[error(transparent)]
    Recording(#[from] RecordingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Default Morlet center parameter.
pub const DEFAULT_OMEGA0: f64 = 6.0;
/// Center frequency of the smallest default scale.
pub const DEFAULT_TOP_FREQUENCY_HZ: f64 = 60.0;
pub const DEFAULT_WINDOW_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletConfig {
    pub omega0: f64,
    /// Smallest scale, in samples.
    pub s0: f64,
    pub voices_per_octave: usize,
    pub octaves: usize,
    pub lag_max: usize,
}

impl WaveletConfig {
    /// Six octaves at four voices, topping out near 60 Hz, with
    /// `lag_max = window_len / 4`.
    pub fn for_rate(sample_rate_hz: f64, window_len: usize) -> Self {
        Self {
            omega0: DEFAULT_OMEGA0,
            s0: sample_rate_hz * DEFAULT_OMEGA0 / (2.0 * PI * DEFAULT_TOP_FREQUENCY_HZ),
            voices_per_octave: 4,
            octaves: 6,
            lag_max: window_len / 4,
        }
    }

    pub fn scale_count(&self) -> usize {
        self.octaves * self.voices_per_octave
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.scale_count())
            .map(|k| self.s0 * 2f64.powf(k as f64 / self.voices_per_octave as f64))
            .collect()
    }

    /// Frequency in Hz at which the wavelet at `scale` is centered.
    pub fn center_frequency(&self, scale: f64, sample_rate_hz: f64) -> f64 {
        self.omega0 * sample_rate_hz / (2.0 * PI * scale)
    }

    pub fn validate(&self) -> Result<(), WaveletError> {
        if !(self.s0.is_finite() && self.s0 >= 1.0) {
            return Err(WaveletError::InvalidConfig(format!(
                "s0 = {} must be at least one sample",
                self.s0
            )));
        }
        if self.scale_count() == 0 {
            return Err(WaveletError::InvalidConfig(
                "octaves and voices_per_octave must be positive".into(),
            ));
        }
        if !self.omega0.is_finite() {
            return Err(WaveletError::InvalidConfig("omega0 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoefficients {
    pub scales: Vec<f64>,
    len: usize,
    /// Scale-major, `scales.len() * len` entries.
    data: Vec<Complex64>,
}

impl WaveletCoefficients {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.len..(k + 1) * self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.len)
    }

    pub fn get(&self, k: usize, tau: usize) -> Complex64 {
        self.data[k * self.len + tau]
    }
}

/// The complex kernel `s^(-1/2) * conj(psi(u / s))`.
fn kernel(omega0: f64, scale: f64, u: f64) -> Complex64 {
    let x = u / scale;
    let amp = PI.powf(-0.25) * (-0.5 * x * x).exp() / scale.sqrt();
    Complex64::from_polar(amp, -omega0 * x)
}

fn check_input(signal: &[f64], cfg: &WaveletConfig) -> Result<(), WaveletError> {
    if signal.len() < 2 {
        return Err(WaveletError::WindowTooShort(signal.len()));
    }
    cfg.validate()
}

/// Literal evaluation of the truncated transform sum. O(K * N^2).
pub fn cwt_direct(signal: &[f64], cfg: &WaveletConfig) -> Result<WaveletCoefficients, WaveletError> {
    check_input(signal, cfg)?;
    let n = signal.len();
    let scales = cfg.scales();
    let mut data = Vec::with_capacity(scales.len() * n);
    for &s in &scales {
        for tau in 0..n {
            let acc: Complex64 = signal
                .iter()
                .enumerate()
                .map(|(t, &x)| kernel(cfg.omega0, s, t as f64 - tau as f64) * x)
                .sum();
            data.push(acc);
        }
    }
    Ok(WaveletCoefficients { scales, len: n, data })
}

/// The transform via zero-padded FFT convolution. Agrees with
/// [`cwt_direct`] to rounding.
pub fn cwt(signal: &[f64], cfg: &WaveletConfig) -> Result<WaveletCoefficients, WaveletError> {
    check_input(signal, cfg)?;
    let n = signal.len();
    // kernel lags run over [-(n-1), n-1]; the linear convolution has 3n-2 terms
    let fft_len = (3 * n - 2).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);

    let mut spectrum: Vec<Complex64> = signal
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(fft_len)
        .collect();
    forward.process(&mut spectrum);

    let scales = cfg.scales();
    let mut data = Vec::with_capacity(scales.len() * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    let norm = 1.0 / fft_len as f64;
    for &s in &scales {
        // h[j] = g(-(j - (n - 1))), so that (x * h)[tau + n - 1] = W(s, tau)
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (j, b) in buf.iter_mut().enumerate().take(2 * n - 1) {
            let lag = (n - 1) as f64 - j as f64;
            *b = kernel(cfg.omega0, s, lag);
        }
        forward.process(&mut buf);
        for (b, x) in buf.iter_mut().zip(&spectrum) {
            *b *= x;
        }
        inverse.process(&mut buf);
        data.extend(buf[n - 1..2 * n - 1].iter().map(|c| c * norm));
    }
    Ok(WaveletCoefficients { scales, len: n, data })
}

/// Per-scale, per-lag normalized correlation magnitudes in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub scales: Vec<f64>,
    pub lag_max: usize,
    /// `scales.len()` rows of `2 * lag_max + 1` values, lag ascending.
    pub magnitudes: Vec<Vec<f64>>,
    /// Scales where either input carried no energy; their rows are zero.
    pub degenerate_scales: Vec<usize>,
}

impl CorrelationMap {
    pub fn lags(&self) -> impl Iterator<Item = i64> {
        let m = self.lag_max as i64;
        -m..=m
    }

    pub fn at(&self, k: usize, lag: i64) -> f64 {
        self.magnitudes[k][(lag + self.lag_max as i64) as usize]
    }

    /// Lag of the largest magnitude at scale `k`; the first one on ties.
    pub fn peak_lag(&self, k: usize) -> i64 {
        let row = &self.magnitudes[k];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best as i64 - self.lag_max as i64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.magnitudes
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Index of the scale carrying the most energy.
pub fn dominant_scale(w: &WaveletCoefficients) -> usize {
    let energies: Vec<f64> = w.rows().map(|r| r.iter().map(|c| c.norm_sqr()).sum()).collect();
    energies
        .iter()
        .enumerate()
        .fold(0, |best, (k, e)| if *e > energies[best] { k } else { best })
}

pub fn wavelet_cross_correlation(
    wa: &WaveletCoefficients,
    wb: &WaveletCoefficients,
    lag_max: usize,
) -> Result<CorrelationMap, WaveletError> {
    if wa.scales != wb.scales {
        return Err(WaveletError::Mismatch("scale grids differ".into()));
    }
    if wa.len != wb.len {
        return Err(WaveletError::Mismatch(format!(
            "lengths {} and {}",
            wa.len, wb.len
        )));
    }
    let n = wa.len;
    if lag_max >= n {
        return Err(WaveletError::LagTooLarge { lag_max, len: n });
    }
    let mut magnitudes = Vec::with_capacity(wa.scales.len());
    let mut degenerate_scales = Vec::new();
    for k in 0..wa.scales.len() {
        let (a, b) = (wa.row(k), wb.row(k));
        let zero_a = a.iter().all(|c| c.norm_sqr() == 0.0);
        let zero_b = b.iter().all(|c| c.norm_sqr() == 0.0);
        if zero_a || zero_b {
            degenerate_scales.push(k);
            magnitudes.push(vec![0.0; 2 * lag_max + 1]);
            continue;
        }
        let row = (-(lag_max as i64)..=lag_max as i64)
            .map(|lag| {
                // tau ranges over indices with both tau and tau + lag in [0, n)
                let lo = (-lag).max(0) as usize;
                let hi = (n as i64 - lag.max(0)) as usize;
                let mut num = Complex64::new(0.0, 0.0);
                let (mut ea, mut eb) = (0.0, 0.0);
                for tau in lo..hi {
                    let x = a[tau];
                    let y = b[(tau as i64 + lag) as usize];
                    num += x * y.conj();
                    ea += x.norm_sqr();
                    eb += y.norm_sqr();
                }
                let den = (ea * eb).sqrt();
                if den > 0.0 {
                    num.norm() / den
                } else {
                    0.0
                }
            })
            .collect();
        magnitudes.push(row);
    }
    Ok(CorrelationMap {
        scales: wa.scales.clone(),
        lag_max,
        magnitudes,
        degenerate_scales,
    })
}

/// Transforms the windows of sensors `a` and `b` starting at `offset` and
/// correlates them.
pub fn analyze_pair(
    recording: &Recording,
    a: usize,
    b: usize,
    offset: usize,
    window_len: usize,
    cfg: &WaveletConfig,
) -> Result<CorrelationMap, WaveletError> {
    if a == b {
        return Err(WaveletError::SelfPair(a));
    }
    let wa = cwt(&window(recording, a, offset, window_len)?.values, cfg)?;
    let wb = cwt(&window(recording, b, offset, window_len)?.values, cfg)?;
    wavelet_cross_correlation(&wa, &wb, cfg.lag_max)
}

pub fn output_stem(a: usize, b: usize, offset: usize) -> String {
    format!("pair_{a}_{b}_off_{offset}")
}

/// One row per scale, magnitudes in 9 significant digits.
pub fn asc_bytes(map: &CorrelationMap) -> Vec<u8> {
    let mut out = String::new();
    for row in &map.magnitudes {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_asc(text: &str) -> Result<Vec<Vec<f64>>, WaveletError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| WaveletError::Asc(format!("{tok:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(WaveletError::Asc("ragged rows".into()));
        }
    }
    Ok(rows)
}

/// Linear blue-to-red ramp: map minimum is pure blue, maximum pure red.
pub fn heat_color(value: f64, min: f64, max: f64) -> [u8; 3] {
    if !(max > min) {
        return [0, 0, 255];
    }
    let v = ((value - min) / (max - min)).clamp(0.0, 1.0);
    let red = (255.0 * v).round() as u8;
    [red, 0, 255 - red]
}

/// Binary P6 image, one pixel per (scale, lag) cell; rows are scales.
pub fn ppm_bytes(map: &CorrelationMap) -> Vec<u8> {
    let height = map.magnitudes.len();
    let width = 2 * map.lag_max + 1;
    let (min, max) = map.min_max();
    let mut out = format!("P6 {width} {height} 255\n").into_bytes();
    out.reserve(width * height * 3);
    for row in &map.magnitudes {
        for &v in row {
            out.extend_from_slice(&heat_color(v, min, max));
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()
}

pub fn emit_asc(map: &CorrelationMap, path: impl AsRef<Path>) -> Result<(), WaveletError> {
    Ok(write_file(path.as_ref(), &asc_bytes(map))?)
}

pub fn emit_ppm(map: &CorrelationMap, path: impl AsRef<Path>) -> Result<(), WaveletError> {
    Ok(write_file(path.as_ref(), &ppm_bytes(map))?)
}
