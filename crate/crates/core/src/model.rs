//! Multi-stage multi-codebook (MSMC) representation.
//!
//! Stage `s` works at `1 / rate_s` of the frame rate. Encoding builds a
//! mean-pooled pyramid of the input, then quantises from the coarsest stage
//! downwards. Each coarser stage's quantised sequence, repeated back to the
//! finer resolution, is the prediction `ẑ` for the stage below. In
//! [`Coupling::Direct`] mode every stage quantises its own pyramid level; in
//! [`Coupling::Residual`] mode a stage quantises what the prediction misses
//! and adds the prediction back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mse, FeatureSequence};
use crate::vq::Codebook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Direct,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub rate: usize,
    pub heads: usize,
    pub codewords: usize,
}

impl StageConfig {
    /// Two stages at rates 1 and 4, four heads of 64 codewords each.
    pub fn default_stages() -> Vec<StageConfig> {
        vec![
            StageConfig { rate: 1, heads: 4, codewords: 64 },
            StageConfig { rate: 4, heads: 4, codewords: 64 },
        ]
    }
}

pub fn validate_stages(stages: &[StageConfig], feature_dim: usize) -> Result<()> {
    let Some(first) = stages.first() else {
        return Err(Error::InvalidArgument("at least one stage is required".into()));
    };
    if first.rate != 1 {
        return Err(Error::InvalidArgument(format!(
            "first stage must have rate 1, got {}",
            first.rate
        )));
    }
    for pair in stages.windows(2) {
        let (lo, hi) = (pair[0].rate, pair[1].rate);
        if hi <= lo || hi % lo != 0 {
            return Err(Error::InvalidArgument(format!(
                "stage rates must strictly increase by integer factors ({lo} -> {hi})"
            )));
        }
    }
    for s in stages {
        if s.heads == 0 || s.codewords == 0 {
            return Err(Error::InvalidArgument("heads and codewords must be positive".into()));
        }
        if !feature_dim.is_multiple_of(s.heads) {
            return Err(Error::InvalidArgument(format!(
                "feature dim {feature_dim} is not divisible by {} heads",
                s.heads
            )));
        }
    }
    Ok(())
}

/// Weights of the loss terms. The waveform term is recorded for
/// completeness and is always zero here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub lambda_w: f64,
    pub lambda_f: f64,
    pub lambda_q: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_w: 0.0,
            lambda_f: 1.0,
            lambda_q: 1.0,
            lambda_e: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_w != 0.0 {
            return Err(Error::InvalidArgument("lambda_w must be 0 (no waveform loss)".into()));
        }
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_q", self.lambda_q), ("lambda_e", self.lambda_e)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub iterations: u64,
    pub corpus_hash: String,
    pub seed: u64,
    /// Corpus hash of the model this one was fine-tuned from, if any.
    #[serde(default)]
    pub finetuned_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub rate: usize,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmcModel {
    pub feature_dim: usize,
    pub coupling: Coupling,
    pub loss_weights: LossWeights,
    pub dsp_fingerprint: String,
    pub stages: Vec<Stage>,
    pub meta: TrainingMeta,
}

/// Tokens and (optionally) quantised vectors of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCodes {
    pub rate: usize,
    /// One row of `heads` codeword indices per stage frame.
    pub tokens: Vec<Vec<usize>>,
    #[serde(skip)]
    pub quantized: Option<FeatureSequence>,
}

/// The compact representation of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Msmcr {
    pub frames: usize,
    pub stages: Vec<StageCodes>,
}

impl Msmcr {
    /// Copy without the quantised vectors.
    pub fn tokens_only(&self) -> Msmcr {
        Msmcr {
            frames: self.frames,
            stages: self
                .stages
                .iter()
                .map(|s| StageCodes {
                    rate: s.rate,
                    tokens: s.tokens.clone(),
                    quantized: None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_f: f64,
    pub l_q_per_stage: Vec<f64>,
    pub l_q: f64,
    /// One entry per adjacent stage pair `(s, s + 1)`.
    pub l_e_per_pair: Vec<f64>,
    pub l_e: f64,
    pub weighted_total: f64,
}

/// Mean pooling over windows of `rate` frames; the last window may be short.
pub fn downsample(seq: &FeatureSequence, rate: usize) -> Result<FeatureSequence> {
    if rate < 1 {
        return Err(Error::InvalidArgument("downsample rate must be >= 1".into()));
    }
    if rate == 1 {
        return Ok(seq.clone());
    }
    let out_len = seq.rows().div_ceil(rate);
    let cols = seq.cols();
    let mut out = Vec::with_capacity(out_len * cols);
    let mut acc = vec![0.0f64; cols];
    for w in 0..out_len {
        let lo = w * rate;
        let hi = (lo + rate).min(seq.rows());
        acc.iter_mut().for_each(|a| *a = 0.0);
        for t in lo..hi {
            for (a, &v) in acc.iter_mut().zip(seq.row(t)) {
                *a += f64::from(v);
            }
        }
        let n = (hi - lo) as f64;
        out.extend(acc.iter().map(|a| (a / n) as f32));
    }
    FeatureSequence::new(out_len, cols, out)
}

/// Repeats every frame `rate` times and truncates to `target_len`.
pub fn upsample(seq: &FeatureSequence, rate: usize, target_len: usize) -> Result<FeatureSequence> {
    if rate < 1 {
        return Err(Error::InvalidArgument("upsample rate must be >= 1".into()));
    }
    if target_len.div_ceil(rate) != seq.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames at rate {rate} cannot cover {target_len} frames",
            seq.rows()
        )));
    }
    let mut out = Vec::with_capacity(target_len * seq.cols());
    for t in 0..target_len {
        out.extend_from_slice(seq.row(t / rate));
    }
    FeatureSequence::new(target_len, seq.cols(), out)
}

fn add(a: &FeatureSequence, b: &FeatureSequence) -> FeatureSequence {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
    FeatureSequence::new(a.rows(), a.cols(), data).expect("same shape")
}

fn sub(a: &FeatureSequence, b: &FeatureSequence) -> FeatureSequence {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    FeatureSequence::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Quantises every row; returns tokens and the quantised sequence.
pub(crate) fn quantize_rows(cb: &Codebook, input: &FeatureSequence) -> Result<(Vec<Vec<usize>>, FeatureSequence)> {
    let mut tokens = Vec::with_capacity(input.rows());
    let mut out = Vec::with_capacity(input.rows() * input.cols());
    for row in input.iter_rows() {
        let q = cb.quantize(row)?;
        out.extend_from_slice(&q.quantized);
        tokens.push(q.indices);
    }
    Ok((tokens, FeatureSequence::new(input.rows(), input.cols(), out)?))
}

/// Intermediate sequences of one encoder pass, finest stage first.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub q_in: Vec<FeatureSequence>,
    pub q_out: Vec<FeatureSequence>,
    pub z: Vec<FeatureSequence>,
    pub z_hat: Vec<Option<FeatureSequence>>,
    pub tokens: Vec<Vec<Vec<usize>>>,
}

impl MsmcModel {
    pub fn new(
        feature_dim: usize,
        coupling: Coupling,
        loss_weights: LossWeights,
        dsp_fingerprint: String,
        stages: Vec<Stage>,
    ) -> Result<Self> {
        let m = Self {
            feature_dim,
            coupling,
            loss_weights,
            dsp_fingerprint,
            stages,
            meta: TrainingMeta::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn stage_configs(&self) -> Vec<StageConfig> {
        self.stages
            .iter()
            .map(|s| StageConfig {
                rate: s.rate,
                heads: s.codebook.heads(),
                codewords: s.codebook.codewords(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stage_configs(), self.feature_dim).map_err(|e| Error::InvalidModel(e.to_string()))?;
        self.loss_weights
            .validate()
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        for (i, s) in self.stages.iter().enumerate() {
            s.codebook.validate()?;
            if s.codebook.dim() != self.feature_dim {
                return Err(Error::InvalidModel(format!(
                    "stage {} codebook dim {} != feature dim {}",
                    i + 1,
                    s.codebook.dim(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if fingerprint != self.dsp_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.dsp_fingerprint.clone(),
                actual: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Rate of stage `s` relative to stage `s - 1` (1 for the first stage).
    pub fn ratio(&self, s: usize) -> usize {
        if s == 0 {
            self.stages[0].rate
        } else {
            self.stages[s].rate / self.stages[s - 1].rate
        }
    }

    pub fn stage_len(&self, s: usize, frames: usize) -> usize {
        frames.div_ceil(self.stages[s].rate)
    }

    fn check_input(&self, mel: &FeatureSequence) -> Result<()> {
        if mel.cols() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: mel.cols(),
            });
        }
        Ok(())
    }

    /// Pooled input at every stage resolution, finest first.
    pub(crate) fn pyramid(&self, mel: &FeatureSequence) -> Result<Vec<FeatureSequence>> {
        self.check_input(mel)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        levels.push(mel.clone());
        for s in 1..self.stages.len() {
            let next = downsample(&levels[s - 1], self.ratio(s))?;
            levels.push(next);
        }
        Ok(levels)
    }

    /// Prediction for stage `s` from the quantised sequence of stage `s + 1`.
    pub(crate) fn predict_from_above(&self, s: usize, z_above: &FeatureSequence, len: usize) -> Result<FeatureSequence> {
        upsample(z_above, self.ratio(s + 1), len)
    }

    /// Input to stage `s`'s quantiser given its pyramid level and prediction.
    pub(crate) fn stage_input(&self, level: &FeatureSequence, z_hat: Option<&FeatureSequence>) -> FeatureSequence {
        match (self.coupling, z_hat) {
            (Coupling::Residual, Some(p)) => sub(level, p),
            _ => level.clone(),
        }
    }

    /// Composes the stage output from its quantiser output and prediction.
    pub(crate) fn stage_output(&self, q_out: FeatureSequence, z_hat: Option<&FeatureSequence>) -> FeatureSequence {
        match (self.coupling, z_hat) {
            (Coupling::Residual, Some(p)) => add(p, &q_out),
            _ => q_out,
        }
    }

    pub(crate) fn forward(&self, mel: &FeatureSequence) -> Result<Forward> {
        let levels = self.pyramid(mel)?;
        let n = self.stages.len();
        let mut q_in = vec![None; n];
        let mut q_out = vec![None; n];
        let mut z: Vec<Option<FeatureSequence>> = vec![None; n];
        let mut z_hat = vec![None; n];
        let mut tokens = vec![Vec::new(); n];
        for s in (0..n).rev() {
            let pred = match z.get(s + 1).and_then(|v| v.as_ref()) {
                Some(above) => Some(self.predict_from_above(s, above, levels[s].rows())?),
                None => None,
            };
            let input = self.stage_input(&levels[s], pred.as_ref());
            let (tok, out) = quantize_rows(&self.stages[s].codebook, &input)?;
            z[s] = Some(self.stage_output(out.clone(), pred.as_ref()));
            q_in[s] = Some(input);
            q_out[s] = Some(out);
            z_hat[s] = pred;
            tokens[s] = tok;
        }
        let unwrap = |v: Vec<Option<FeatureSequence>>| v.into_iter().map(|x| x.expect("every stage visited")).collect();
        Ok(Forward {
            q_in: unwrap(q_in),
            q_out: unwrap(q_out),
            z: unwrap(z),
            z_hat,
            tokens,
        })
    }

    pub fn encode(&self, mel: &FeatureSequence) -> Result<Msmcr> {
        let fwd = self.forward(mel)?;
        Ok(Msmcr {
            frames: mel.rows(),
            stages: fwd
                .tokens
                .into_iter()
                .zip(fwd.z)
                .zip(&self.stages)
                .map(|((tokens, z), st)| StageCodes {
                    rate: st.rate,
                    tokens,
                    quantized: Some(z),
                })
                .collect(),
        })
    }

    /// Reconstructs the finest-stage sequence from tokens alone. If the
    /// representation carries quantised vectors they must agree.
    pub fn decode(&self, repr: &Msmcr) -> Result<FeatureSequence> {
        let n = self.stages.len();
        if repr.stages.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "representation has {} stages, model has {n}",
                repr.stages.len()
            )));
        }
        for (s, (codes, st)) in repr.stages.iter().zip(&self.stages).enumerate() {
            if codes.rate != st.rate {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} rate {} != model rate {}",
                    s + 1,
                    codes.rate,
                    st.rate
                )));
            }
            let want = self.stage_len(s, repr.frames);
            if codes.tokens.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} has {} token rows, expected {want}",
                    s + 1,
                    codes.tokens.len()
                )));
            }
        }
        let lookup = |s: usize| -> Result<FeatureSequence> {
            let cb = &self.stages[s].codebook;
            let mut data = Vec::with_capacity(repr.stages[s].tokens.len() * self.feature_dim);
            for row in &repr.stages[s].tokens {
                data.extend(cb.lookup(row)?);
            }
            FeatureSequence::new(repr.stages[s].tokens.len(), self.feature_dim, data)
        };
        let mut zs: Vec<Option<FeatureSequence>> = vec![None; n];
        for s in (0..n).rev() {
            let q = lookup(s)?;
            let z = match (self.coupling, zs.get(s + 1).and_then(|v| v.as_ref())) {
                (Coupling::Residual, Some(above)) => {
                    let pred = self.predict_from_above(s, above, q.rows())?;
                    add(&pred, &q)
                }
                _ => q,
            };
            if let Some(v) = &repr.stages[s].quantized {
                if *v != z {
                    return Err(Error::ShapeMismatch(format!(
                        "stage {} vectors disagree with its tokens",
                        s + 1
                    )));
                }
            }
            zs[s] = Some(z);
        }
        Ok(zs.swap_remove(0).expect("stage 1 decoded"))
    }

    pub fn compute_losses(&self, mel: &FeatureSequence) -> Result<LossReport> {
        let fwd = self.forward(mel)?;
        self.losses_from(mel, &fwd)
    }

    pub(crate) fn losses_from(&self, mel: &FeatureSequence, fwd: &Forward) -> Result<LossReport> {
        let l_f = mse(mel, &fwd.z[0])?;
        let l_q_per_stage = fwd
            .q_in
            .iter()
            .zip(&fwd.q_out)
            .map(|(a, b)| mse(a, b))
            .collect::<Result<Vec<_>>>()?;
        let l_e_per_pair = (0..self.stages.len().saturating_sub(1))
            .map(|s| mse(&fwd.z[s], fwd.z_hat[s].as_ref().expect("prediction below top stage")))
            .collect::<Result<Vec<_>>>()?;
        let l_q: f64 = l_q_per_stage.iter().sum();
        let l_e: f64 = l_e_per_pair.iter().sum();
        let w = &self.loss_weights;
        Ok(LossReport {
            l_f,
            l_q_per_stage,
            l_q,
            l_e_per_pair,
            l_e,
            weighted_total: w.lambda_f * l_f + w.lambda_q * l_q + w.lambda_e * l_e,
        })
    }
}
