//! Signal-processing front end: resampling, log-Mel spectrograms and F0.
//!
//! All analysis is frame-synchronous. Frame `t` is centred on sample
//! `t * hop`, samples outside the signal are obtained by reflection, and a
//! signal of `n` samples yields `ceil(n / hop)` frames for both the Mel
//! spectrogram and the F0 track.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

/// Front-end parameters. The fingerprint of this struct is stored in every
/// feature and model file and must match exactly for files to be combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Magnitudes below this are clamped before the natural log.
    pub mel_floor: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
    /// Frames with RMS below this are unvoiced regardless of periodicity.
    pub energy_gate: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            n_fft: 2048,
            win_length: 1200,
            hop_length: 300,
            n_mels: 80,
            fmin: 0.0,
            fmax: 12_000.0,
            mel_floor: 1e-5,
            f0_min: 50.0,
            f0_max: 600.0,
            voicing_threshold: 0.45,
            energy_gate: 1e-3,
        }
    }
}

impl DspConfig {
    pub fn fingerprint(&self) -> String {
        format!(
            "sr={};n_fft={};win={}:hann;hop={};center=reflect;mels={}:slaney;fmin={};fmax={};mag;ln;floor={:e};f0=nacf:{}-{}:thr={}:gate={:e}",
            self.sample_rate,
            self.n_fft,
            self.win_length,
            self.hop_length,
            self.n_mels,
            self.fmin,
            self.fmax,
            self.mel_floor,
            self.f0_min,
            self.f0_max,
            self.voicing_threshold,
            self.energy_gate,
        )
    }

    pub fn log_floor(&self) -> f32 {
        self.mel_floor.ln() as f32
    }

    pub fn frame_count(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.hop_length)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("dsp config: {m}")));
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("sample_rate, hop_length and n_mels must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length must be in 1..=n_fft");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= f64::from(self.sample_rate) / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.mel_floor > 0.0) {
            return bad("mel_floor must be positive");
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max) {
            return bad("need 0 < f0_min < f0_max");
        }
        Ok(())
    }

    fn check_rate(&self, pcm: &Pcm) -> Result<()> {
        if pcm.sample_rate != self.sample_rate {
            return Err(Error::SampleRate {
                expected_khz: f64::from(self.sample_rate) / 1000.0,
                actual: pcm.sample_rate,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pcm {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Pcm {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Per-frame pitch track. Unvoiced frames carry `f0 = 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct F0Track {
    pub f0_hz: Vec<f32>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn new(f0_hz: Vec<f32>, voiced: Vec<bool>) -> Result<Self> {
        if f0_hz.len() != voiced.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} f0 values vs {} voicing flags",
                f0_hz.len(),
                voiced.len()
            )));
        }
        for (i, (&f, &v)) in f0_hz.iter().zip(&voiced).enumerate() {
            if !f.is_finite() || f < 0.0 || (!v && f != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "frame {i}: f0 {f} inconsistent with voiced={v}"
                )));
            }
        }
        Ok(Self { f0_hz, voiced })
    }

    pub fn len(&self) -> usize {
        self.voiced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voiced.is_empty()
    }

    /// Two columns per frame: f0 in Hz and the voicing flag as 0/1.
    pub fn to_features(&self) -> FeatureSequence {
        let data = self
            .f0_hz
            .iter()
            .zip(&self.voiced)
            .flat_map(|(&f, &v)| [f, if v { 1.0 } else { 0.0 }])
            .collect();
        FeatureSequence::new(self.len(), 2, data).expect("two columns per frame")
    }

    pub fn from_features(seq: &FeatureSequence) -> Result<Self> {
        if seq.cols() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: seq.cols(),
            });
        }
        let (f0, voiced) = seq.iter_rows().map(|r| (r[0], r[1] > 0.5)).unzip();
        Self::new(f0, voiced)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;

/// Band-limited rational resampling with a Kaiser-windowed sinc filter.
/// The cutoff sits at the Nyquist frequency of the lower of the two rates.
pub fn resample(pcm: &Pcm, target_rate: u32) -> Result<Pcm> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if pcm.is_empty() {
        return Err(Error::EmptySignal);
    }
    if pcm.sample_rate == target_rate {
        return Ok(pcm.clone());
    }
    let src = u64::from(pcm.sample_rate);
    let dst = u64::from(target_rate);
    let g = gcd(src, dst);
    let up = dst / g;
    let down = src / g;

    // cutoff in cycles per input sample
    let fc = 0.5 * (dst as f64 / src as f64).min(1.0);
    let width = RESAMPLE_ZERO_CROSSINGS / (2.0 * fc);
    let half_taps = width.ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |tau: f64| -> f64 {
        if tau.abs() > width {
            return 0.0;
        }
        let r = tau / width;
        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
        2.0 * fc * sinc(2.0 * fc * tau) * w
    };

    // One row of taps per fractional phase.
    let n_taps = (2 * half_taps) as usize;
    let table: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..n_taps)
                .map(|j| {
                    let k = j as i64 - (half_taps - 1);
                    kernel(frac - k as f64)
                })
                .collect()
        })
        .collect();

    let x = &pcm.samples;
    let n = x.len() as u64;
    let n_out = (n * up).div_ceil(down) as usize;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out as u64 {
        let pos = m * down;
        let base = (pos / up) as i64;
        let taps = &table[(pos % up) as usize];
        let mut acc = 0.0f64;
        for (j, &h) in taps.iter().enumerate() {
            let i = base + j as i64 - (half_taps - 1);
            if i >= 0 && (i as u64) < n {
                acc += h * f64::from(x[i as usize]);
            }
        }
        out.push(acc as f32);
    }
    Pcm::new(out, target_rate)
}

/// Mirror-reflects an index into `0..len` without repeating the edge sample.
fn reflect(idx: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = idx.rem_euclid(period);
    if m >= len as i64 {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Copies the `win`-sample analysis segment centred on `center` into `buf`.
fn fill_segment(x: &[f32], center: i64, buf: &mut [f64]) {
    let win = buf.len() as i64;
    let start = center - win / 2;
    let contiguous = start >= 0 && start + win <= x.len() as i64;
    for (j, b) in buf.iter_mut().enumerate() {
        let i = start + j as i64;
        let idx = if contiguous { i as usize } else { reflect(i, x.len()) };
        *b = f64::from(x[idx]);
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-style triangular filterbank with area normalisation.
/// Returns `n_mels` rows over `n_fft / 2 + 1` bins and the channel centres.
pub fn mel_filterbank(cfg: &DspConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_bins = cfg.n_fft / 2 + 1;
    let sr = f64::from(cfg.sample_rate);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / cfg.n_fft as f64).collect();
    let bank = (0..cfg.n_mels)
        .map(|m| {
            let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let rising = (f - lo) / (c - lo);
                    let falling = (hi - f) / (hi - c);
                    rising.min(falling).max(0.0) * norm
                })
                .collect()
        })
        .collect();
    (bank, points[1..=cfg.n_mels].to_vec())
}

/// Log-Mel analyser. Construction precomputes the FFT plan, window and
/// filterbank; [`MelExtractor::compute`] is then pure and thread-safe.
pub struct MelExtractor {
    cfg: DspConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // sparse filterbank: (first bin, weights)
    filters: Vec<(usize, Vec<f64>)>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: DspConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // periodic Hann
        let window = (0..cfg.win_length)
            .map(|j| 0.5 - 0.5 * (2.0 * PI * j as f64 / cfg.win_length as f64).cos())
            .collect();
        let (bank, _) = mel_filterbank(&cfg);
        let filters = bank
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last.max(first)].to_vec())
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn compute(&self, pcm: &Pcm) -> Result<FeatureSequence> {
        let cfg = &self.cfg;
        cfg.check_rate(pcm)?;
        if pcm.len() < cfg.hop_length {
            return Err(Error::TooShort {
                len: pcm.len(),
                hop: cfg.hop_length,
            });
        }
        let n_frames = cfg.frame_count(pcm.len());
        let floor = cfg.mel_floor;
        let mut seg = vec![0.0; cfg.win_length];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; cfg.n_fft / 2 + 1];
        let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
        for t in 0..n_frames {
            fill_segment(pcm.samples(), (t * cfg.hop_length) as i64, &mut seg);
            // |DFT| is invariant to circular shifts, so the windowed segment
            // is placed at the start of the zero-padded buffer.
            for (b, (s, w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            for b in &mut buf[cfg.win_length..] {
                *b = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&mag[*first..]).map(|(w, m)| w * m).sum();
                out.push(e.max(floor).ln() as f32);
            }
        }
        FeatureSequence::new(n_frames, cfg.n_mels, out)
    }
}

/// Log-Mel spectrogram with the default front-end configuration.
pub fn mel_spectrogram(pcm: &Pcm) -> Result<FeatureSequence> {
    MelExtractor::new(DspConfig::default())?.compute(pcm)
}

/// Normalised autocorrelation of a zero-mean segment at `lag`.
fn nacf(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (a, b) = (&x[..n], &x[lag..]);
    let mut xy = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for (&p, &q) in a.iter().zip(b) {
        xy += p * q;
        xx += p * p;
        yy += q * q;
    }
    let den = (xx * yy).sqrt();
    if den > 0.0 {
        xy / den
    } else {
        0.0
    }
}

/// Frame-synchronous F0 by normalised autocorrelation over the configured
/// pitch range, with a peak-clarity threshold and an RMS energy gate.
pub fn extract_f0_with(pcm: &Pcm, cfg: &DspConfig) -> Result<F0Track> {
    cfg.validate()?;
    cfg.check_rate(pcm)?;
    let n_frames = cfg.frame_count(pcm.len());
    let sr = f64::from(cfg.sample_rate);
    let min_lag = ((sr / cfg.f0_max).floor() as usize).max(1);
    let max_lag = ((sr / cfg.f0_min).ceil() as usize).min(cfg.win_length.saturating_sub(2));
    let mut f0 = vec![0.0f32; n_frames];
    let mut voiced = vec![false; n_frames];
    if min_lag >= max_lag {
        return F0Track::new(f0, voiced);
    }
    let mut seg = vec![0.0; cfg.win_length];
    let mut r = vec![0.0; max_lag + 2];
    for t in 0..n_frames {
        fill_segment(pcm.samples(), (t * cfg.hop_length) as i64, &mut seg);
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        seg.iter_mut().for_each(|v| *v -= mean);
        let rms = (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt();
        if rms < cfg.energy_gate {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for lag in min_lag..=max_lag {
            r[lag] = nacf(&seg, lag);
            best = best.max(r[lag]);
        }
        if best < cfg.voicing_threshold {
            continue;
        }
        // First local maximum that comes close to the global one; guards
        // against picking a multiple of the true period.
        let at = |lag: usize| {
            if lag < min_lag || lag > max_lag {
                f64::NEG_INFINITY
            } else {
                r[lag]
            }
        };
        let Some(lag) = (min_lag..=max_lag).find(|&l| {
            r[l] >= 0.9 * best && r[l] >= at(l - 1) && r[l] >= at(l + 1)
        }) else {
            continue;
        };
        if r[lag] < cfg.voicing_threshold {
            continue;
        }
        let mut period = lag as f64;
        if lag > min_lag && lag < max_lag {
            let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
            let den = a - 2.0 * b + c;
            if den < 0.0 {
                period += (0.5 * (a - c) / den).clamp(-0.5, 0.5);
            }
        }
        f0[t] = (sr / period).clamp(cfg.f0_min, cfg.f0_max) as f32;
        voiced[t] = true;
    }
    F0Track::new(f0, voiced)
}

pub fn extract_f0(pcm: &Pcm) -> Result<F0Track> {
    extract_f0_with(pcm, &DspConfig::default())
}
