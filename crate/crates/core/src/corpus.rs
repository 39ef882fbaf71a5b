//! In-memory corpus of feature sequences loaded through a manifest.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dsp::{extract_f0_with, resample, DspConfig, F0Track, MelExtractor};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::io::{read_features, read_wav, write_features, Manifest, ManifestEntry};
use crate::par::Executor;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub language: String,
    pub features: FeatureSequence,
    pub f0: Option<F0Track>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    fingerprint: String,
    dim: usize,
    utterances: Vec<Utterance>,
}

/// Location of the F0 track stored next to a feature file.
pub fn f0_path(feature_path: &Path) -> PathBuf {
    feature_path.with_extension("f0")
}

/// Extracts log-Mel features and F0 for every WAV listed in `manifest`,
/// writing `<id>.feat` and `<id>.f0` under `out_dir`. Audio at other rates
/// is resampled first. Returns the manifest of the feature files.
pub fn extract_features(manifest: &Manifest, out_dir: &Path, dsp: &DspConfig, exec: &Executor) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mel = MelExtractor::new(dsp.clone())?;
    let fingerprint = dsp.fingerprint();
    let written = exec.map(&manifest.entries, |e| -> Result<ManifestEntry> {
        let mut pcm = read_wav(&e.path)?;
        if pcm.sample_rate() != dsp.sample_rate {
            pcm = resample(&pcm, dsp.sample_rate)?;
        }
        let features = mel.compute(&pcm)?;
        let f0 = extract_f0_with(&pcm, dsp)?;
        let path = out_dir.join(format!("{}.feat", e.utterance_id));
        write_features(&path, &features, &fingerprint)?;
        write_features(&f0_path(&path), &f0.to_features(), &fingerprint)?;
        Ok(ManifestEntry { path, ..e.clone() })
    });
    Manifest::new(written.into_iter().collect::<Result<_>>()?)
}

impl Corpus {
    pub fn new(fingerprint: String, utterances: Vec<Utterance>) -> Result<Self> {
        let dim = utterances.first().map_or(0, |u| u.features.cols());
        let mut seen = std::collections::HashSet::new();
        for u in &utterances {
            if u.features.cols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: u.features.cols(),
                });
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::DuplicateId(u.id.clone()));
            }
            if let Some(f0) = &u.f0 {
                if f0.len() != u.features.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: {} F0 frames vs {} feature frames",
                        u.id,
                        f0.len(),
                        u.features.rows()
                    )));
                }
            }
        }
        Ok(Self {
            fingerprint,
            dim,
            utterances,
        })
    }

    /// Loads every feature file (and its `.f0` sibling, if present). All
    /// files must share one fingerprint and feature dimension.
    pub fn load(manifest: &Manifest, exec: &Executor) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let loaded = exec.map(&manifest.entries, |e| -> Result<_> {
            let file = read_features(&e.path)?;
            let f0_file = f0_path(&e.path);
            let f0 = if f0_file.exists() {
                let f = read_features(&f0_file)?;
                Some(F0Track::from_features(&f.features)?)
            } else {
                None
            };
            Ok((file, f0))
        });
        let mut fingerprint: Option<String> = None;
        let mut utterances = Vec::with_capacity(manifest.len());
        for (entry, res) in manifest.entries.iter().zip(loaded) {
            let (file, f0) = res?;
            match &fingerprint {
                None => fingerprint = Some(file.fingerprint.clone()),
                Some(fp) if *fp != file.fingerprint => {
                    return Err(Error::FingerprintMismatch {
                        expected: fp.clone(),
                        actual: file.fingerprint,
                    })
                }
                _ => {}
            }
            utterances.push(Utterance {
                id: entry.utterance_id.clone(),
                speaker_id: entry.speaker_id.clone(),
                language: entry.language.clone(),
                features: file.features,
                f0,
            });
        }
        Self::new(fingerprint.unwrap_or_default(), utterances)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.rows()).sum()
    }

    /// SHA-256 over ids, fingerprint and raw feature bits, in corpus order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update([0u8]);
        for u in &self.utterances {
            h.update(u.id.as_bytes());
            h.update([0u8]);
            h.update((u.features.rows() as u64).to_le_bytes());
            h.update((u.features.cols() as u64).to_le_bytes());
            for v in u.features.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
