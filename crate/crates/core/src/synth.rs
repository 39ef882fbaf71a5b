//! Seeded synthetic corpora standing in for real multi-speaker datasets.
//!
//! Each "speaker" is a Gaussian mixture over log-Mel frames: a language owns
//! a set of phone templates (smooth spectral envelopes), a speaker adds a
//! smooth spectral offset, and an utterance is a run of phones with random
//! durations plus per-frame noise. Candidates are split evenly into speakers
//! *matched* to the target (same language, nearby offset, embedding close to
//! the target direction) and *mismatched* ones (other language, unrelated
//! offset and embedding).
//!
//! In audio mode the same structure is rendered as 24 kHz harmonic signals
//! with language-specific formants and speaker-specific pitch and formant
//! scaling, so the feature front-end can be exercised end to end.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::dsp::{DspConfig, Pcm};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::io::{write_atomic, write_features, write_wav, Manifest, ManifestEntry};
use crate::selection::{format_embeddings, EmbeddingRecord};

pub const TARGET_LANGUAGE: &str = "L0";
pub const OTHER_LANGUAGE: &str = "L1";
pub const TARGET_SPEAKER: &str = "target";

const EMBEDDING_DIM: usize = 32;
const PHONES: usize = 12;
const BASE_LEVEL: f64 = -5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub target_train: usize,
    pub target_heldout: usize,
    /// Half of these (rounded up) are matched to the target.
    pub candidate_speakers: usize,
    pub utterances_per_candidate: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of the per-frame log-Mel noise.
    pub frame_noise: f64,
    /// Render waveforms instead of feature files.
    pub audio: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target_train: 4,
            target_heldout: 4,
            candidate_speakers: 4,
            utterances_per_candidate: 3,
            min_frames: 40,
            max_frames: 80,
            frame_noise: 0.5,
            audio: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_train == 0 || self.target_heldout == 0 {
            return Err(Error::InvalidArgument("target_train and target_heldout must be >= 1".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidArgument("need 1 <= min_frames <= max_frames".into()));
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return Err(Error::InvalidArgument("frame_noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Features(FeatureSequence),
    Audio(Pcm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker_id: String,
    pub language: String,
    pub matched: bool,
    /// Unit norm.
    pub embedding: Vec<f64>,
    pub payload: Payload,
}

impl SynthUtterance {
    pub fn embedding_record(&self) -> EmbeddingRecord {
        EmbeddingRecord {
            utterance_id: self.id.clone(),
            speaker_id: self.speaker_id.clone(),
            language: self.language.clone(),
            embedding: self.embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub target: Vec<SynthUtterance>,
    pub heldout: Vec<SynthUtterance>,
    pub candidates: Vec<SynthUtterance>,
}

/// Paths written by [`SynthCorpus::write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub target_manifest: PathBuf,
    pub heldout_manifest: PathBuf,
    pub candidate_manifest: PathBuf,
    pub target_embeddings: PathBuf,
    pub candidate_embeddings: PathBuf,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Component of `v` orthogonal to the unit vector `u`, normalised.
fn orthogonal_to(v: Vec<f64>, u: &[f64]) -> Vec<f64> {
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    unit(v.iter().zip(u).map(|(a, b)| a - dot * b).collect())
}

/// Random smooth curve over `n` channels: a sum of a few Gaussian bumps.
fn smooth_curve(rng: &mut ChaCha8Rng, n: usize, bumps: usize, amp: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for _ in 0..bumps {
        let centre = rng.random_range(0.0..n as f64);
        let width = rng.random_range(2.0..8.0);
        let a = rng.random_range(-amp..amp);
        for (i, o) in out.iter_mut().enumerate() {
            let x = (i as f64 - centre) / width;
            *o += a * (-0.5 * x * x).exp();
        }
    }
    out
}

struct Language {
    name: &'static str,
    /// Log-Mel templates (feature mode).
    templates: Vec<Vec<f64>>,
    /// Formant frequencies in Hz (audio mode).
    formants: Vec<[f64; 3]>,
}

impl Language {
    fn new(name: &'static str, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let templates = (0..PHONES).map(|_| smooth_curve(rng, dim, 4, 3.0)).collect();
        let formants = (0..PHONES)
            .map(|_| {
                [
                    rng.random_range(300.0..900.0),
                    rng.random_range(900.0..2500.0),
                    rng.random_range(2500.0..4000.0),
                ]
            })
            .collect();
        Self { name, templates, formants }
    }
}

struct Speaker {
    id: String,
    matched: bool,
    offset: Vec<f64>,
    embedding: Vec<f64>,
    f0_hz: f64,
    formant_scale: f64,
}

struct Generator {
    cfg: SynthConfig,
    dsp: DspConfig,
    rng: ChaCha8Rng,
}

impl Generator {
    fn utterance_embedding(&mut self, speaker: &Speaker) -> Vec<f64> {
        let noise = gaussian_vec(&mut self.rng, EMBEDDING_DIM);
        unit(speaker.embedding.iter().zip(noise).map(|(s, n)| s + 0.03 * n).collect())
    }

    fn phone_plan(&mut self, frames: usize) -> Vec<(usize, usize)> {
        let mut plan = Vec::new();
        let mut left = frames;
        while left > 0 {
            let d = self.rng.random_range(4..=12).min(left);
            plan.push((self.rng.random_range(0..PHONES), d));
            left -= d;
        }
        plan
    }

    fn features(&mut self, lang: &Language, speaker: &Speaker, frames: usize) -> FeatureSequence {
        let dim = self.dsp.n_mels;
        let noise = Normal::new(0.0, self.cfg.frame_noise.max(f64::MIN_POSITIVE)).unwrap();
        let mut data = Vec::with_capacity(frames * dim);
        for (p, d) in self.phone_plan(frames) {
            for _ in 0..d {
                for c in 0..dim {
                    let n = if self.cfg.frame_noise > 0.0 { noise.sample(&mut self.rng) } else { 0.0 };
                    data.push((BASE_LEVEL + lang.templates[p][c] + speaker.offset[c] + n) as f32);
                }
            }
        }
        FeatureSequence::new(frames, dim, data).expect("generator shape")
    }

    fn audio(&mut self, lang: &Language, speaker: &Speaker, frames: usize) -> Pcm {
        let sr = self.dsp.sample_rate as f64;
        let hop = self.dsp.hop_length;
        let mut samples = Vec::with_capacity(frames * hop);
        let mut phase = 0.0f64;
        for (p, d) in self.phone_plan(frames) {
            let n = d * hop;
            if self.rng.random_bool(0.15) {
                // unvoiced gap: faint noise
                for _ in 0..n {
                    samples.push(self.rng.random_range(-0.01..0.01) as f32);
                }
                continue;
            }
            let formants = lang.formants[p].map(|f| f * speaker.formant_scale);
            let glide = self.rng.random_range(-0.05..0.05);
            let start = samples.len();
            for i in 0..n {
                let t = i as f64 / n as f64;
                let f0 = speaker.f0_hz * (1.0 + glide * (t - 0.5));
                phase += 2.0 * PI * f0 / sr;
                let mut x = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 0.45 * sr {
                    let fh = h as f64 * f0;
                    let env: f64 = formants
                        .iter()
                        .map(|&fm| {
                            let z = (fh - fm) / 150.0;
                            (-0.5 * z * z).exp()
                        })
                        .sum::<f64>()
                        + 0.02;
                    x += env * (h as f64 * phase).sin() / h as f64;
                    h += 1;
                }
                samples.push(x as f32);
            }
            let seg = &mut samples[start..];
            let peak = seg.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-9);
            let gain = 0.4 / peak;
            for v in seg {
                *v *= gain;
            }
        }
        Pcm::new(samples, self.dsp.sample_rate).expect("generator audio")
    }

    fn utterance(&mut self, id: String, lang: &Language, speaker: &Speaker) -> SynthUtterance {
        let frames = self.rng.random_range(self.cfg.min_frames..=self.cfg.max_frames);
        let embedding = self.utterance_embedding(speaker);
        let payload = if self.cfg.audio {
            Payload::Audio(self.audio(lang, speaker, frames))
        } else {
            Payload::Features(self.features(lang, speaker, frames))
        };
        SynthUtterance {
            id,
            speaker_id: speaker.id.clone(),
            language: lang.name.to_string(),
            matched: speaker.matched,
            embedding,
            payload,
        }
    }
}

/// Generates a corpus; identical configs give identical corpora.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let dsp = DspConfig::default();
    let dim = dsp.n_mels;
    let mut g = Generator {
        cfg: cfg.clone(),
        dsp,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let rng = &mut g.rng;
    let own = Language::new(TARGET_LANGUAGE, rng, dim);
    let other = Language::new(OTHER_LANGUAGE, rng, dim);
    let target_dir = unit(gaussian_vec(rng, EMBEDDING_DIM));
    let target_offset = smooth_curve(rng, dim, 3, 1.5);
    let target = Speaker {
        id: TARGET_SPEAKER.into(),
        matched: true,
        offset: target_offset.clone(),
        embedding: target_dir.clone(),
        f0_hz: 160.0,
        formant_scale: 1.0,
    };
    let n_matched = cfg.candidate_speakers.div_ceil(2);
    let mut speakers = Vec::new();
    for s in 0..cfg.candidate_speakers {
        let rng = &mut g.rng;
        let matched = s < n_matched;
        let side = orthogonal_to(gaussian_vec(rng, EMBEDDING_DIM), &target_dir);
        // matched: cos ~0.95 to the target; mismatched: cos ~0.05
        let cos: f64 = if matched { rng.random_range(0.92..0.98) } else { rng.random_range(0.0..0.1) };
        let sin = (1.0 - cos * cos).sqrt();
        let embedding = target_dir.iter().zip(&side).map(|(t, o)| cos * t + sin * o).collect();
        let offset = if matched {
            let jitter = smooth_curve(rng, dim, 2, 0.3);
            target_offset.iter().zip(jitter).map(|(a, b)| a + b).collect()
        } else {
            smooth_curve(rng, dim, 3, 1.5)
        };
        speakers.push(Speaker {
            id: format!("{}{s:02}", if matched { "m" } else { "x" }),
            matched,
            offset,
            embedding,
            f0_hz: if matched { rng.random_range(145.0..175.0) } else { rng.random_range(90.0..260.0) },
            formant_scale: if matched { rng.random_range(0.97..1.03) } else { rng.random_range(0.8..1.25) },
        });
    }
    let target_utts = (0..cfg.target_train)
        .map(|i| g.utterance(format!("tgt_{i:03}"), &own, &target))
        .collect();
    let heldout = (0..cfg.target_heldout)
        .map(|i| g.utterance(format!("dev_{i:03}"), &own, &target))
        .collect();
    let mut candidates = Vec::new();
    for sp in &speakers {
        let lang = if sp.matched { &own } else { &other };
        for i in 0..cfg.utterances_per_candidate {
            candidates.push(g.utterance(format!("{}_{i:03}", sp.id), lang, sp));
        }
    }
    Ok(SynthCorpus {
        target: target_utts,
        heldout,
        candidates,
    })
}

/// In-memory corpus of feature-mode utterances.
pub fn to_corpus(utts: &[&SynthUtterance]) -> Result<Corpus> {
    let utterances = utts
        .iter()
        .map(|u| match &u.payload {
            Payload::Features(f) => Ok(Utterance {
                id: u.id.clone(),
                speaker_id: u.speaker_id.clone(),
                language: u.language.clone(),
                features: f.clone(),
                f0: None,
            }),
            Payload::Audio(_) => Err(Error::InvalidArgument(format!("{}: audio utterance has no features", u.id))),
        })
        .collect::<Result<_>>()?;
    Corpus::new(DspConfig::default().fingerprint(), utterances)
}

impl SynthCorpus {
    pub fn all(&self) -> impl Iterator<Item = &SynthUtterance> {
        self.target.iter().chain(&self.heldout).chain(&self.candidates)
    }

    /// Writes data files under `out_dir/data`, one manifest per split and
    /// embedding files for the target and candidate splits.
    pub fn write(&self, out_dir: &Path) -> Result<SynthFiles> {
        let data = out_dir.join("data");
        std::fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
        let fingerprint = DspConfig::default().fingerprint();
        let write_split = |utts: &[SynthUtterance], name: &str| -> Result<PathBuf> {
            let mut entries = Vec::with_capacity(utts.len());
            for u in utts {
                let path = match &u.payload {
                    Payload::Features(f) => {
                        let p = data.join(format!("{}.feat", u.id));
                        write_features(&p, f, &fingerprint)?;
                        p
                    }
                    Payload::Audio(pcm) => {
                        let p = data.join(format!("{}.wav", u.id));
                        write_wav(&p, pcm)?;
                        p
                    }
                };
                entries.push(ManifestEntry {
                    utterance_id: u.id.clone(),
                    path,
                    speaker_id: u.speaker_id.clone(),
                    language: u.language.clone(),
                });
            }
            let path = out_dir.join(format!("{name}.tsv"));
            Manifest::new(entries)?.write(&path)?;
            Ok(path)
        };
        let write_emb = |utts: &[SynthUtterance], name: &str| -> Result<PathBuf> {
            let recs: Vec<EmbeddingRecord> = utts.iter().map(|u| u.embedding_record()).collect();
            let path = out_dir.join(format!("{name}.emb"));
            write_atomic(&path, format_embeddings(&recs).as_bytes())?;
            Ok(path)
        };
        Ok(SynthFiles {
            target_manifest: write_split(&self.target, "target")?,
            heldout_manifest: write_split(&self.heldout, "heldout")?,
            candidate_manifest: write_split(&self.candidates, "candidates")?,
            target_embeddings: write_emb(&self.target, "target")?,
            candidate_embeddings: write_emb(&self.candidates, "candidates")?,
        })
    }
}
