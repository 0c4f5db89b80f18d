//! Reference implementations used as test oracles. They follow the defining
//! formulas literally with plain `(re, im)` pairs and share no code with the
//! library.

#![allow(dead_code)]

use std::f64::consts::PI;

pub type C = (f64, f64);

fn mul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn conj(a: C) -> C {
    (a.0, -a.1)
}

fn abs2(a: C) -> f64 {
    a.0 * a.0 + a.1 * a.1
}

/// psi(u) = pi^(-1/4) exp(i w0 u) exp(-u^2/2)
pub fn morlet(omega0: f64, u: f64) -> C {
    let g = PI.powf(-0.25) * (-u * u / 2.0).exp();
    (g * (omega0 * u).cos(), g * (omega0 * u).sin())
}

pub fn scales(s0: f64, voices: usize, octaves: usize) -> Vec<f64> {
    (0..voices * octaves)
        .map(|k| s0 * 2f64.powf(k as f64 / voices as f64))
        .collect()
}

/// W[k][tau] = sum_t x[t] s^(-1/2) conj(psi((t - tau)/s))
pub fn naive_cwt(x: &[f64], omega0: f64, scales: &[f64]) -> Vec<Vec<C>> {
    scales
        .iter()
        .map(|&s| {
            (0..x.len())
                .map(|tau| {
                    let mut acc = (0.0, 0.0);
                    for (t, &v) in x.iter().enumerate() {
                        let w = conj(morlet(omega0, (t as f64 - tau as f64) / s));
                        acc.0 += v * w.0 / s.sqrt();
                        acc.1 += v * w.1 / s.sqrt();
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// |sum A(tau) conj(B(tau+l))| / sqrt(sum|A|^2 sum|B|^2) over the overlap.
pub fn naive_wcc(a: &[Vec<C>], b: &[Vec<C>], lag_max: usize) -> Vec<Vec<f64>> {
    let n = a[0].len() as i64;
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            (-(lag_max as i64)..=lag_max as i64)
                .map(|l| {
                    let mut num = (0.0, 0.0);
                    let (mut ea, mut eb) = (0.0, 0.0);
                    for tau in 0..n {
                        let j = tau + l;
                        if j < 0 || j >= n {
                            continue;
                        }
                        let p = mul(ra[tau as usize], conj(rb[j as usize]));
                        num.0 += p.0;
                        num.1 += p.1;
                        ea += abs2(ra[tau as usize]);
                        eb += abs2(rb[j as usize]);
                    }
                    if ea * eb > 0.0 {
                        abs2(num).sqrt() / (ea * eb).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Index of the scale whose Morlet center frequency w0*rate/(2 pi s) is
/// nearest `freq`.
pub fn nearest_scale(freq: f64, omega0: f64, rate: f64, scales: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scales.iter().enumerate() {
        let fk = omega0 * rate / (2.0 * PI * s);
        let fb = omega0 * rate / (2.0 * PI * scales[best]);
        if (fk - freq).abs() < (fb - freq).abs() {
            best = k;
        }
    }
    best
}

pub fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| (2.0 * PI * freq * t as f64 / rate).sin())
        .collect()
}

/// Binomial coefficient C(n, 2) by counting.
pub fn pairs_by_counting(n: usize) -> u64 {
    let mut c = 0;
    for a in 0..n {
        for b in 0..n {
            if a < b {
                c += 1;
            }
        }
    }
    c
}
