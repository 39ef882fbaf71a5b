//! File formats: WAV input, TSV manifests, binary feature files, JSON model
//! and token files.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "MSMCFEAT"  u32 version=1  u32 rows  u32 cols
//! u32 fingerprint_len  fingerprint (UTF-8)
//! rows * cols f32, row-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::Pcm;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::{Coupling, LossWeights, Msmcr, MsmcModel, Stage, StageCodes, TrainingMeta};

pub const FEATURE_MAGIC: &[u8; 8] = b"MSMCFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const MODEL_FORMAT: &str = "msmc-model";
pub const MODEL_VERSION: u32 = 1;
pub const TOKENS_FORMAT: &str = "msmc-tokens";
pub const TOKENS_VERSION: u32 = 1;

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- WAV

pub fn read_wav(path: &Path) -> Result<Pcm> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels (mono required)",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?} (16-bit PCM or 32-bit float required)",
                path.display()
            )))
        }
    };
    Pcm::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedAudio(format!("{}: unsupported WAV variant", path.display())),
        other => Error::Malformed(format!("{}: {other}", path.display())),
    }
}

/// 16-bit PCM mono; samples are clamped to the representable range.
pub fn write_wav(path: &Path, pcm: &Pcm) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: pcm.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| wav_error(path, e))?;
        for &s in pcm.samples() {
            let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(|e| wav_error(path, e))?;
        }
        w.finalize().map_err(|e| wav_error(path, e))?;
    }
    write_atomic(path, &buf.into_inner())
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub speaker_id: String,
    pub language: String,
}

/// Utterance list. Relative paths are resolved against the manifest's
/// directory on read and written relative to the output directory when
/// possible.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::DuplicateId(e.utterance_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == id)
    }

    /// Parses TSV text. `base` is joined onto relative paths.
    pub fn parse(text: &str, source: &str, base: Option<&Path>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(err("empty field".into()));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(err(format!("duplicate utterance id `{}`", fields[0])));
            }
            let raw = PathBuf::from(fields[1]);
            let path = match base {
                Some(b) if raw.is_relative() => b.join(raw),
                _ => raw,
            };
            entries.push(ManifestEntry {
                utterance_id: fields[0].to_string(),
                path,
                speaker_id: fields[2].to_string(),
                language: fields[3].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Malformed(format!("{}: manifest is not UTF-8", path.display())))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    /// Serialises with paths made relative to `out_dir` where possible.
    pub fn to_tsv(&self, out_dir: Option<&Path>) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let p = match out_dir {
                Some(d) if !d.as_os_str().is_empty() => e.path.strip_prefix(d).unwrap_or(&e.path),
                _ => &e.path,
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.utterance_id,
                p.display(),
                e.speaker_id,
                e.language
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv(path.parent()).as_bytes())
    }
}

// ---------------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub fingerprint: String,
    pub features: FeatureSequence,
}

pub fn encode_features(seq: &FeatureSequence, fingerprint: &str) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::InvalidArgument(format!("{what} exceeds u32 range"));
    let rows = u32::try_from(seq.rows()).map_err(|_| too_big("rows"))?;
    let cols = u32::try_from(seq.cols()).map_err(|_| too_big("cols"))?;
    let fp_len = u32::try_from(fingerprint.len()).map_err(|_| too_big("fingerprint"))?;
    let mut out = Vec::with_capacity(24 + fingerprint.len() + 4 * seq.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&fp_len.to_le_bytes());
    out.extend_from_slice(fingerprint.as_bytes());
    for v in seq.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Malformed(format!("truncated feature file ({} bytes)", bytes.len())))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let magic = take(8).map_err(|_| Error::BadMagic)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic);
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let version = u32_at(take(4)?);
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let rows = u32_at(take(4)?) as usize;
    let cols = u32_at(take(4)?) as usize;
    let fp_len = u32_at(take(4)?) as usize;
    let fingerprint = std::str::from_utf8(take(fp_len)?)
        .map_err(|_| Error::Malformed("fingerprint is not UTF-8".into()))?
        .to_string();
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed("feature size overflows".into()))?;
    let body = take(n)?;
    if pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {rows}x{cols} features",
            bytes.len() - pos
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureFile {
        fingerprint,
        features: FeatureSequence::new(rows, cols, data)?,
    })
}

pub fn write_features(path: &Path, seq: &FeatureSequence, fingerprint: &str) -> Result<()> {
    write_atomic(path, &encode_features(seq, fingerprint)?)
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&read_bytes(path)?).map_err(|e| match e {
        Error::Malformed(m) => Error::Malformed(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------- models

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    feature_dim: usize,
    coupling: Coupling,
    loss_weights: LossWeights,
    dsp_fingerprint: String,
    training: TrainingMeta,
    stages: Vec<Stage>,
}

pub fn model_to_json(model: &MsmcModel) -> Result<String> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        feature_dim: model.feature_dim,
        coupling: model.coupling,
        loss_weights: model.loss_weights,
        dsp_fingerprint: model.dsp_fingerprint.clone(),
        training: model.meta.clone(),
        stages: model.stages.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_json(text: &str) -> Result<MsmcModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.format != MODEL_FORMAT {
        return Err(Error::InvalidModel(format!("format `{}` is not `{MODEL_FORMAT}`", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: MODEL_VERSION,
        });
    }
    let model = MsmcModel {
        feature_dim: file.feature_dim,
        coupling: file.coupling,
        loss_weights: file.loss_weights,
        dsp_fingerprint: file.dsp_fingerprint,
        stages: file.stages,
        meta: file.training,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &MsmcModel) -> Result<()> {
    write_atomic(path, model_to_json(model)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<MsmcModel> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Malformed(format!("{}: not UTF-8", path.display())))?;
    model_from_json(&text)
}

// ---------------------------------------------------------------- tokens

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenFile {
    format: String,
    version: u32,
    dsp_fingerprint: String,
    frames: usize,
    stages: Vec<StageCodes>,
}

pub fn save_tokens(path: &Path, repr: &Msmcr, fingerprint: &str) -> Result<()> {
    let file = TokenFile {
        format: TOKENS_FORMAT.to_string(),
        version: TOKENS_VERSION,
        dsp_fingerprint: fingerprint.to_string(),
        frames: repr.frames,
        stages: repr.tokens_only().stages,
    };
    let mut s = serde_json::to_string(&file)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Returns the token-only representation and its DSP fingerprint.
pub fn load_tokens(path: &Path) -> Result<(Msmcr, String)> {
    let bytes = read_bytes(path)?;
    let file: TokenFile = serde_json::from_slice(&bytes)?;
    if file.format != TOKENS_FORMAT {
        return Err(Error::Malformed(format!("{}: not a token file", path.display())));
    }
    if file.version != TOKENS_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: TOKENS_VERSION,
        });
    }
    Ok((
        Msmcr {
            frames: file.frames,
            stages: file.stages,
        },
        file.dsp_fingerprint,
    ))
}
