//! MFCC extraction: pre-emphasis, Hann window, 256-point FFT, 40-filter HTK
//! mel bank over 0–8000 Hz, log with floor 1e-10, orthonormal DCT-II, first
//! 28 coefficients.

use super::Waveform;

/// Coefficients kept per hop.
pub const MFCC_COEFFS: usize = 28;
/// Window and hop length in samples (10 ms at 16 kHz).
pub const HOP_SAMPLES: usize = 160;
/// Zero-padded DFT size.
pub const FFT_SIZE: usize = 256;
/// Mel filterbank size.
pub const MEL_FILTERS: usize = 40;
/// Log floor applied to mel energies.
pub const LOG_FLOOR: f64 = 1e-10;
/// Pre-emphasis coefficient.
pub const PRE_EMPHASIS: f64 = 0.97;

/// Hop-level coefficient matrix: one 28-vector per 10 ms hop.
#[derive(Clone, Debug, PartialEq)]
pub struct HopMatrix {
    rows: Vec<Vec<f64>>,
}

impl HopMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == MFCC_COEFFS));
        HopMatrix { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn hop(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }
}

/// Symmetric Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// HTK mel scale.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank evaluated at the FFT bin centers.
/// Returns `MEL_FILTERS` rows of `FFT_SIZE/2 + 1` weights.
fn mel_filterbank(sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = FFT_SIZE / 2 + 1;
    let f_max = 8000.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    let bin_hz = sample_rate / FFT_SIZE as f64;
    let mut bank = vec![vec![0.0; bins]; MEL_FILTERS];
    for m in 0..MEL_FILTERS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, w) in bank[m].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if f == mid {
                *w = 1.0;
            } else if f > mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
    }
    bank
}

/// In-place iterative radix-2 FFT over interleaved (re, im) pairs.
fn fft_radix2(buf: &mut [(f64, f64)]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_re, mut cur_im) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (a_re, a_im) = buf[i + k];
                let (b_re, b_im) = buf[i + k + len / 2];
                let t_re = b_re * cur_re - b_im * cur_im;
                let t_im = b_re * cur_im + b_im * cur_re;
                buf[i + k] = (a_re + t_re, a_im + t_im);
                buf[i + k + len / 2] = (a_re - t_re, a_im - t_im);
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Orthonormal DCT-II basis: `basis[i][m] = s(i) cos(pi i (2m+1) / (2 M))`.
fn dct_basis() -> Vec<Vec<f64>> {
    let m_count = MEL_FILTERS as f64;
    (0..MFCC_COEFFS)
        .map(|i| {
            let scale = if i == 0 {
                (1.0 / m_count).sqrt()
            } else {
                (2.0 / m_count).sqrt()
            };
            (0..MEL_FILTERS)
                .map(|m| {
                    scale
                        * (std::f64::consts::PI * i as f64 * (2.0 * m as f64 + 1.0)
                            / (2.0 * m_count))
                            .cos()
                })
                .collect()
        })
        .collect()
}

/// MFCC pipeline over a waveform. Audio shorter than one window yields an
/// empty matrix.
pub fn mfcc(w: &Waveform) -> HopMatrix {
    let samples = w.samples();
    if samples.len() < HOP_SAMPLES {
        return HopMatrix { rows: Vec::new() };
    }
    // Whole-signal pre-emphasis; the first sample passes through.
    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for i in 1..samples.len() {
        emphasized.push(samples[i] - PRE_EMPHASIS * samples[i - 1]);
    }

    let window = hann(HOP_SAMPLES);
    let bank = mel_filterbank(w.sample_rate() as f64);
    let basis = dct_basis();
    let n_hops = samples.len() / HOP_SAMPLES;
    let mut rows = Vec::with_capacity(n_hops);
    for h in 0..n_hops {
        let start = h * HOP_SAMPLES;
        let mut buf = vec![(0.0, 0.0); FFT_SIZE];
        for i in 0..HOP_SAMPLES {
            buf[i].0 = emphasized[start + i] * window[i];
        }
        fft_radix2(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1]
            .iter()
            .map(|(re, im)| re * re + im * im)
            .collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let coeffs: Vec<f64> = basis
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(b, v)| b * v).sum())
            .collect();
        rows.push(coeffs);
    }
    HopMatrix { rows }
}

/// Mel energies (pre-log) for one hop, used by tests probing the filterbank.
pub fn mel_energies_for_hop(w: &Waveform, hop: usize) -> Vec<f64> {
    let samples = w.samples();
    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for i in 1..samples.len() {
        emphasized.push(samples[i] - PRE_EMPHASIS * samples[i - 1]);
    }
    let window = hann(HOP_SAMPLES);
    let bank = mel_filterbank(w.sample_rate() as f64);
    let start = hop * HOP_SAMPLES;
    let mut buf = vec![(0.0, 0.0); FFT_SIZE];
    for i in 0..HOP_SAMPLES {
        buf[i].0 = emphasized[start + i] * window[i];
    }
    fft_radix2(&mut buf);
    let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1]
        .iter()
        .map(|(re, im)| re * re + im * im)
        .collect();
    bank.iter()
        .map(|filt| filt.iter().zip(&power).map(|(w, p)| w * p).sum())
        .collect()
}

/// Index of the mel filter whose center frequency is nearest `hz`.
pub fn filter_nearest_hz(hz: f64) -> usize {
    let mel_max = hz_to_mel(8000.0);
    let centers: Vec<f64> = (1..=MEL_FILTERS)
        .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    centers
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - hz).abs().partial_cmp(&(*b - hz).abs()).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap()
}
