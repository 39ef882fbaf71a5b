//! Objective reconstruction metrics.
//!
//! MCD here is computed on frame-aligned log-Mel spectrograms: each frame is
//! turned into cepstra with an orthonormal DCT-II, coefficients 1..=24 are
//! compared, and `10 / ln 10 * sqrt(2 * sum (c_i - c'_i)^2)` is averaged
//! over frames. No time warping is applied.

use serde::{Deserialize, Serialize};

use crate::dsp::F0Track;
use crate::error::{Error, Result};
use crate::features::{mse, FeatureSequence};

pub const MCD_ORDER: usize = 24;
pub const MCD_RECIPE: &str = "log-mel -> orthonormal DCT-II, c1..c24 (c0 excluded), frame-aligned, no DTW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcd_db: f64,
    /// `None` when no F0 tracks were supplied.
    pub f0_rmse_hz: Option<f64>,
    pub f0_vuv_pct: Option<f64>,
    pub frame_mse: f64,
    pub n_utterances: usize,
    pub n_frames_compared: usize,
}

/// Orthonormal DCT-II basis, `order + 1` rows over `n` inputs.
pub fn dct_basis(n: usize, order: usize) -> Vec<Vec<f64>> {
    (0..=order)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .collect()
        })
        .collect()
}

fn cepstrum(row: &[f32], basis: &[Vec<f64>]) -> Vec<f64> {
    basis
        .iter()
        .map(|b| b.iter().zip(row).map(|(w, &x)| w * f64::from(x)).sum())
        .collect()
}

fn same_shape(a: &FeatureSequence, b: &FeatureSequence) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Mean Mel cepstral distortion in dB.
pub fn mcd(reference: &FeatureSequence, hypothesis: &FeatureSequence) -> Result<f64> {
    same_shape(reference, hypothesis)?;
    if reference.rows() == 0 {
        return Ok(0.0);
    }
    let order = MCD_ORDER.min(reference.cols().saturating_sub(1));
    let basis = dct_basis(reference.cols(), order);
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = reference
        .iter_rows()
        .zip(hypothesis.iter_rows())
        .map(|(r, h)| {
            let (cr, ch) = (cepstrum(r, &basis), cepstrum(h, &basis));
            let d2: f64 = cr[1..].iter().zip(&ch[1..]).map(|(a, b)| (a - b) * (a - b)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / reference.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Rmse {
    pub rmse_hz: f64,
    /// Frames voiced in both tracks. Zero means the RMSE is a placeholder 0.
    pub both_voiced: usize,
}

fn same_len(a: &F0Track, b: &F0Track) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} F0 frames", a.len(), b.len())));
    }
    Ok(())
}

pub fn f0_rmse(reference: &F0Track, hypothesis: &F0Track) -> Result<F0Rmse> {
    same_len(reference, hypothesis)?;
    let mut sum = 0.0;
    let mut n = 0;
    for t in 0..reference.len() {
        if reference.voiced[t] && hypothesis.voiced[t] {
            let d = f64::from(reference.f0_hz[t]) - f64::from(hypothesis.f0_hz[t]);
            sum += d * d;
            n += 1;
        }
    }
    Ok(F0Rmse {
        rmse_hz: if n > 0 { (sum / n as f64).sqrt() } else { 0.0 },
        both_voiced: n,
    })
}

/// Percentage of frames whose voicing decisions disagree.
pub fn f0_vuv(reference: &F0Track, hypothesis: &F0Track) -> Result<f64> {
    same_len(reference, hypothesis)?;
    if reference.is_empty() {
        return Ok(0.0);
    }
    let mismatches = reference
        .voiced
        .iter()
        .zip(&hypothesis.voiced)
        .filter(|(a, b)| a != b)
        .count();
    Ok(100.0 * mismatches as f64 / reference.len() as f64)
}

/// Metrics for one reference/reconstruction pair.
pub fn utterance_metrics(
    reference: &FeatureSequence,
    hypothesis: &FeatureSequence,
    f0: Option<(&F0Track, &F0Track)>,
) -> Result<MetricsReport> {
    let (f0_rmse_hz, f0_vuv_pct) = match f0 {
        Some((r, h)) => (Some(f0_rmse(r, h)?.rmse_hz), Some(f0_vuv(r, h)?)),
        None => (None, None),
    };
    Ok(MetricsReport {
        mcd_db: mcd(reference, hypothesis)?,
        f0_rmse_hz,
        f0_vuv_pct,
        frame_mse: mse(reference, hypothesis)?,
        n_utterances: 1,
        n_frames_compared: reference.rows(),
    })
}

/// Frame-count-weighted means; counts are summed. F0 fields are averaged
/// over the reports that carry them.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Empty("metrics report list"));
    }
    if let [only] = reports {
        return Ok(only.clone());
    }
    let frames: usize = reports.iter().map(|r| r.n_frames_compared).sum();
    let weighted = |get: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        let mut any = false;
        for r in reports {
            if let Some(v) = get(r) {
                num += v * r.n_frames_compared as f64;
                den += r.n_frames_compared;
                any = true;
            }
        }
        any.then(|| if den > 0 { num / den as f64 } else { 0.0 })
    };
    Ok(MetricsReport {
        mcd_db: weighted(&|r| Some(r.mcd_db)).unwrap_or(0.0),
        f0_rmse_hz: weighted(&|r| r.f0_rmse_hz),
        f0_vuv_pct: weighted(&|r| r.f0_vuv_pct),
        frame_mse: weighted(&|r| Some(r.frame_mse)).unwrap_or(0.0),
        n_utterances: reports.iter().map(|r| r.n_utterances).sum(),
        n_frames_compared: frames,
    })
}
