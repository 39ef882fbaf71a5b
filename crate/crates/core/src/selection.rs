//! Speaker-similarity data selection.
//!
//! Candidate utterances are ranked by cosine similarity between their
//! speaker embedding and the target speaker's centroid embedding; the top
//! `k` are added to the target training set. The averaged cosine distance
//! (ACD) of a selection is the mean of `1 - similarity` over its members.
//!
//! Embedding files are UTF-8 TSV, one record per line:
//! `utterance_id<TAB>speaker_id<TAB>language<TAB>v1,v2,...,vD`.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::Manifest;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language: String,
    /// Unit L2 norm.
    pub embedding: Vec<f64>,
}

fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Some(v.iter().map(|x| x / norm).collect())
    } else {
        None
    }
}

pub fn parse_embeddings(text: &str, source: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let raw = fields[3]
            .split(',')
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err("embedding values must be finite decimal numbers".into()))?;
        match dim {
            None => dim = Some(raw.len()),
            Some(d) if d != raw.len() => {
                return Err(err(format!("ragged embedding: {} dims, expected {d}", raw.len())));
            }
            _ => {}
        }
        if !ids.insert(fields[0].to_string()) {
            return Err(err(format!("duplicate utterance id `{}`", fields[0])));
        }
        let embedding = l2_normalize(&raw).ok_or_else(|| err("zero-norm embedding".into()))?;
        out.push(EmbeddingRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            language: fields[2].to_string(),
            embedding,
        });
    }
    Ok(out)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Malformed(format!("{}: not UTF-8", path.display())))?;
    parse_embeddings(&text, &path.display().to_string())
}

/// One line per record; values use the shortest round-trip decimal form.
pub fn format_embeddings(records: &[EmbeddingRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let vals: Vec<String> = r.embedding.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&format!("{}\t{}\t{}\t{}\n", r.utterance_id, r.speaker_id, r.language, vals.join(",")));
    }
    s
}

/// Normalised mean of the target speaker's utterance embeddings.
pub fn target_centroid(records: &[EmbeddingRecord]) -> Result<Vec<f64>> {
    let first = records.first().ok_or(Error::Empty("target embedding set"))?;
    let dim = first.embedding.len();
    let mut mean = vec![0.0; dim];
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: r.embedding.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&r.embedding) {
            *m += v;
        }
    }
    let n = records.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    // relative to the unit-norm inputs, anything this small is cancellation
    if norm <= 1e-12 {
        return Err(Error::ZeroNormMean);
    }
    Ok(mean.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub utterance_id: String,
    pub cosine_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    /// Non-increasing similarity; ties ordered by utterance id.
    pub ranked: Vec<RankedCandidate>,
    /// ACD of every prefix: `acd_prefix[k - 1]` is the ACD of the top `k`.
    pub acd_prefix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub utterance_ids: Vec<String>,
    /// Absent for an empty selection.
    pub acd: Option<f64>,
}

/// Running mean of a non-decreasing sequence. The exact mean of a prefix
/// lies between the previous mean and the newest value, so each step is
/// clamped to that interval to keep rounding from breaking monotonicity.
fn prefix_means(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut mean = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        let next = mean + (v - mean) / (i + 1) as f64;
        mean = if i == 0 { v } else { next.clamp(mean, v.max(mean)) };
        out.push(mean);
    }
    out
}

pub fn rank_candidates(candidates: &[EmbeddingRecord], centroid: &[f64]) -> Result<SelectionReport> {
    let mut ranked = candidates
        .iter()
        .map(|c| {
            if c.embedding.len() != centroid.len() {
                return Err(Error::DimensionMismatch {
                    expected: centroid.len(),
                    actual: c.embedding.len(),
                });
            }
            let sim: f64 = c.embedding.iter().zip(centroid).map(|(a, b)| a * b).sum();
            Ok(RankedCandidate {
                utterance_id: c.utterance_id.clone(),
                cosine_similarity: sim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.cosine_similarity
            .total_cmp(&a.cosine_similarity)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    let distances: Vec<f64> = ranked.iter().map(|r| 1.0 - r.cosine_similarity).collect();
    Ok(SelectionReport {
        acd_prefix: prefix_means(&distances),
        ranked,
    })
}

impl SelectionReport {
    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn acd_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.acd_prefix.get(i).copied())
    }

    pub fn select_top_k(&self, k: usize) -> Result<Selection> {
        if k > self.ranked.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds {} candidates",
                self.ranked.len()
            )));
        }
        Ok(Selection {
            utterance_ids: self.ranked[..k].iter().map(|r| r.utterance_id.clone()).collect(),
            acd: self.acd_at(k),
        })
    }
}

/// ACD of an arbitrary subset of the ranked candidates.
pub fn acd_of(report: &SelectionReport, ids: &[String]) -> Result<Option<f64>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for id in ids {
        let r = report
            .ranked
            .iter()
            .find(|r| &r.utterance_id == id)
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        sum += 1.0 - r.cosine_similarity;
    }
    Ok(Some(sum / ids.len() as f64))
}

/// Target entries first, then the selected candidates in candidate-manifest
/// order. Ids already present in the target manifest are not repeated.
pub fn emit_augmented_manifest(target: &Manifest, candidates: &Manifest, selected: &[String]) -> Result<Manifest> {
    let wanted: HashSet<&str> = selected.iter().map(String::as_str).collect();
    for id in &wanted {
        if candidates.get(id).is_none() {
            return Err(Error::UnknownId((*id).to_string()));
        }
    }
    let mut seen: HashSet<&str> = target.entries.iter().map(|e| e.utterance_id.as_str()).collect();
    let mut entries = target.entries.clone();
    for e in &candidates.entries {
        if wanted.contains(e.utterance_id.as_str()) && seen.insert(e.utterance_id.as_str()) {
            entries.push(e.clone());
        }
    }
    Manifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            language: "l".into(),
            embedding: l2_normalize(v).unwrap(),
        }
    }

    fn random_records(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                rec(&format!("u{i:03}"), &v)
            })
            .collect()
    }

    #[test]
    fn parse_normalises_and_rejects_ragged() {
        let r = parse_embeddings("a\ts\ten\t3,4\nb\ts\ten\t0,2\n", "e").unwrap();
        assert_eq!(r[0].embedding, vec![0.6, 0.8]);
        assert!(parse_embeddings("a\ts\ten\t3,4\nb\ts\ten\t1,2,3\n", "e").is_err());
        assert!(parse_embeddings("a\ts\ten\t0,0\n", "e").is_err());
        assert!(parse_embeddings("a\ts\ten\t1,x\n", "e").is_err());
        assert!(parse_embeddings("a\ts\ten\t1\na\ts\ten\t1\n", "e").is_err());
        let text = format_embeddings(&r);
        assert_eq!(parse_embeddings(&text, "e").unwrap(), r);
    }

    #[test]
    fn centroid_cases() {
        let one = rec("a", &[1.0, 2.0, 2.0]);
        assert_eq!(target_centroid(std::slice::from_ref(&one)).unwrap(), one.embedding);
        let anti = [rec("a", &[1.0, 0.0]), rec("b", &[-1.0, 0.0])];
        assert_eq!(target_centroid(&anti).unwrap_err().to_string(), "zero-norm mean");
        assert!(target_centroid(&[]).is_err());

        let recs = random_records(10, 16, 4);
        let mut mean = vec![0.0; 16];
        for r in &recs {
            for j in 0..16 {
                mean[j] += r.embedding[j] / 10.0;
            }
        }
        let norm = mean.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        for (a, b) in target_centroid(&recs).unwrap().iter().zip(&mean) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_equal_to_centroid_ranks_first() {
        let c = l2_normalize(&[1.0, 1.0, 0.0]).unwrap();
        let mut cands = random_records(20, 3, 1);
        cands.push(rec("zz", &[2.0, 2.0, 0.0]));
        let rep = rank_candidates(&cands, &c).unwrap();
        assert_eq!(rep.ranked[0].utterance_id, "zz");
        assert!((rep.ranked[0].cosine_similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let cands = random_records(100, 8, 2);
        let c = target_centroid(&random_records(3, 8, 3)).unwrap();
        let rep = rank_candidates(&cands, &c).unwrap();
        let mut oracle: Vec<(f64, String)> = cands
            .iter()
            .map(|r| (r.embedding.iter().zip(&c).map(|(a, b)| a * b).sum(), r.utterance_id.clone()))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<&str> = rep.ranked.iter().map(|r| r.utterance_id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().map(|o| o.1.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ties_break_by_id() {
        let c = vec![1.0, 0.0];
        let rep = rank_candidates(&[rec("b", &[1.0, 0.0]), rec("a", &[1.0, 0.0])], &c).unwrap();
        assert_eq!(rep.ranked[0].utterance_id, "a");
    }

    #[test]
    fn planted_near_set_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 16;
        let centroid = l2_normalize(&(0..dim).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>()).unwrap();
        let mut cands = Vec::new();
        let mut near = HashSet::new();
        for i in 0..100 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();
            if i % 2 == 0 {
                v[0] = 1.0;
                near.insert(format!("c{i:03}"));
            } else {
                v[0] = 0.0;
                v[1 + i % (dim - 1)] = 1.0;
            }
            cands.push(rec(&format!("c{i:03}"), &v));
        }
        let rep = rank_candidates(&cands, &centroid).unwrap();
        let top: HashSet<String> = rep.select_top_k(50).unwrap().utterance_ids.into_iter().collect();
        assert_eq!(top, near);
        assert!(rep.ranked[49].cosine_similarity > 0.8);
        assert!(rep.ranked[50].cosine_similarity < 0.2);
    }

    #[test]
    fn select_top_k_edges() {
        let cands = random_records(5, 4, 5);
        let rep = rank_candidates(&cands, &cands[0].embedding).unwrap();
        let none = rep.select_top_k(0).unwrap();
        assert!(none.utterance_ids.is_empty() && none.acd.is_none());
        assert!(rep.select_top_k(6).is_err());

        let same: Vec<_> = (0..4).map(|i| rec(&format!("s{i}"), &[0.3, 0.4])).collect();
        let rep = rank_candidates(&same, &l2_normalize(&[3.0, 4.0]).unwrap()).unwrap();
        for k in 1..=4 {
            assert!(rep.select_top_k(k).unwrap().acd.unwrap().abs() < 1e-12);
        }
    }

    fn manifest(ids: &[&str], dir: &str) -> Manifest {
        let text: String = ids.iter().map(|id| format!("{id}\t{dir}/{id}.feat\tspk_{id}\tlang\n")).collect();
        Manifest::parse(&text, "m", None).unwrap()
    }

    #[test]
    fn augmented_manifest_rules() {
        let target = manifest(&["t1", "t2"], "tgt");
        let cands = manifest(&["c1", "c2", "c3", "c4", "c5"], "cand");
        assert_eq!(emit_augmented_manifest(&target, &cands, &[]).unwrap(), target);
        let all: Vec<String> = cands.entries.iter().map(|e| e.utterance_id.clone()).collect();
        assert_eq!(emit_augmented_manifest(&target, &cands, &all).unwrap().len(), 7);
        assert!(emit_augmented_manifest(&target, &cands, &["nope".into()]).is_err());

        let sel = ["c4".to_string(), "c1".into(), "c3".into()];
        let out = emit_augmented_manifest(&target, &cands, &sel).unwrap();
        let expected = "t1\ttgt/t1.feat\tspk_t1\tlang\n\
                        t2\ttgt/t2.feat\tspk_t2\tlang\n\
                        c1\tcand/c1.feat\tspk_c1\tlang\n\
                        c3\tcand/c3.feat\tspk_c3\tlang\n\
                        c4\tcand/c4.feat\tspk_c4\tlang\n";
        assert_eq!(out.to_tsv(None), expected);
    }

    proptest! {
        #[test]
        fn acd_is_monotone(seed in any::<u64>(), n in 1usize..60) {
            let cands = random_records(n, 6, seed);
            let c = target_centroid(&random_records(2, 6, seed ^ 1)).unwrap_or_else(|_| cands[0].embedding.clone());
            let rep = rank_candidates(&cands, &c).unwrap();
            for k in 1..n {
                prop_assert!(rep.acd_at(k).unwrap() <= rep.acd_at(k + 1).unwrap());
            }
            for w in rep.ranked.windows(2) {
                prop_assert!(w[0].cosine_similarity >= w[1].cosine_similarity);
            }
        }

        #[test]
        fn top_k_prefixes_nest(seed in any::<u64>(), k1 in 0usize..20, extra in 0usize..20) {
            let cands = random_records(40, 5, seed);
            let rep = rank_candidates(&cands, &cands[0].embedding).unwrap();
            let a = rep.select_top_k(k1).unwrap().utterance_ids;
            let b = rep.select_top_k(k1 + extra).unwrap().utterance_ids;
            prop_assert_eq!(&b[..k1], &a[..]);
        }

        #[test]
        fn permutation_and_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let base: Vec<_> = raw.iter().enumerate().map(|(i, v)| rec(&format!("u{i:02}"), v)).collect();
            let scaled: Vec<_> = raw.iter().enumerate().map(|(i, v)| {
                let s: Vec<f64> = v.iter().map(|x| x * scale).collect();
                rec(&format!("u{i:02}"), &s)
            }).collect();
            let mut shuffled = scaled.clone();
            shuffled.reverse();
            shuffled.rotate_left((seed % 30) as usize);
            let c = target_centroid(&base[..3]).unwrap();
            let a = rank_candidates(&base, &c).unwrap();
            let b = rank_candidates(&shuffled, &c).unwrap();
            let ids = |r: &SelectionReport| r.ranked.iter().map(|x| x.utterance_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
            for k in 1..=30 {
                prop_assert!((a.acd_at(k).unwrap() - b.acd_at(k).unwrap()).abs() <= 1e-12);
            }
        }
    }
}
