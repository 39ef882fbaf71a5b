//! Codebook training over a corpus, from scratch or from a pretrained model.
//!
//! From scratch, each stage's codebook is first seeded by k-means++ over a
//! pool of up to [`TrainConfig::init_pool`] frames (top stage first, so
//! residual stages see the seeded predictions of the stages above). Every
//! iteration then draws a batch of whole utterances with replacement and
//! updates the stages top-down: quantise the batch at that stage, merge the
//! assignment statistics in utterance order, apply one EMA step, and reseed
//! dead codewords. Fine-tuning skips the seeding and continues the EMA
//! updates from the loaded codebooks.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::metrics::{self, MetricsReport};
use crate::model::{quantize_rows, validate_stages, Coupling, LossReport, LossWeights, MsmcModel, Stage, StageConfig, TrainingMeta};
use crate::par::Executor;
use crate::vq::{init_codebook, AssignStats, EmaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_utterances: usize,
    pub seed: u64,
    pub ema: EmaConfig,
    pub loss_weights: LossWeights,
    /// Ignored (must match, if given) when fine-tuning.
    pub stages: Option<Vec<StageConfig>>,
    pub coupling: Coupling,
    pub log_interval: u64,
    /// Maximum number of frames sampled for codebook seeding.
    pub init_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_utterances: 16,
            seed: 0,
            ema: EmaConfig::default(),
            loss_weights: LossWeights::default(),
            stages: None,
            coupling: Coupling::Direct,
            log_interval: 10,
            init_pool: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn stages_or_default(&self) -> Vec<StageConfig> {
        self.stages.clone().unwrap_or_else(StageConfig::default_stages)
    }

    pub fn validate(&self, fine_tuning: bool) -> Result<()> {
        if self.iterations == 0 && !fine_tuning {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.batch_utterances == 0 {
            return Err(Error::InvalidArgument("batch_utterances must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidArgument("log_interval must be >= 1".into()));
        }
        if self.init_pool == 0 {
            return Err(Error::InvalidArgument("init_pool must be >= 1".into()));
        }
        self.ema.validate()?;
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub l_f: f64,
    pub l_q: f64,
    pub l_e: f64,
    /// Mean over heads, one value per stage (finest first).
    pub perplexity: Vec<f64>,
}

impl HistoryEntry {
    /// `iter=<n> l_f=<x> l_q=<x> l_e=<x> ppl=<csv>`
    pub fn progress_line(&self) -> String {
        let ppl: Vec<String> = self.perplexity.iter().map(|p| format!("{p:.3}")).collect();
        format!(
            "iter={} l_f={:.6} l_q={:.6} l_e={:.6} ppl={}",
            self.iteration,
            self.l_f,
            self.l_q,
            self.l_e,
            ppl.join(",")
        )
    }
}

pub type TrainHistory = Vec<HistoryEntry>;

/// Frame-weighted mean of the loss terms over `utterances`.
pub fn mean_losses(model: &MsmcModel, utterances: &[&FeatureSequence], exec: &Executor) -> Result<LossReport> {
    if utterances.is_empty() {
        return Err(Error::Empty("utterance list"));
    }
    let reports = exec
        .map(utterances, |mel| model.compute_losses(mel))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = utterances.iter().map(|u| u.rows() as f64).sum();
    let weight = |i: usize| {
        if total > 0.0 {
            utterances[i].rows() as f64 / total
        } else {
            1.0 / utterances.len() as f64
        }
    };
    let n_stages = model.stages.len();
    let mut out = LossReport {
        l_f: 0.0,
        l_q_per_stage: vec![0.0; n_stages],
        l_q: 0.0,
        l_e_per_pair: vec![0.0; n_stages.saturating_sub(1)],
        l_e: 0.0,
        weighted_total: 0.0,
    };
    for (i, r) in reports.iter().enumerate() {
        let w = weight(i);
        out.l_f += w * r.l_f;
        out.l_q += w * r.l_q;
        out.l_e += w * r.l_e;
        out.weighted_total += w * r.weighted_total;
        for (a, b) in out.l_q_per_stage.iter_mut().zip(&r.l_q_per_stage) {
            *a += w * b;
        }
        for (a, b) in out.l_e_per_pair.iter_mut().zip(&r.l_e_per_pair) {
            *a += w * b;
        }
    }
    Ok(out)
}

fn check_corpus(corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if corpus.total_frames() == 0 {
        return Err(Error::Empty("corpus (no frames)"));
    }
    Ok(())
}

/// Per-utterance state while walking the stages of one batch.
struct Walk {
    levels: Vec<FeatureSequence>,
    z_above: Option<FeatureSequence>,
}

fn stage_inputs(model: &MsmcModel, s: usize, walks: &[Walk]) -> Result<Vec<(FeatureSequence, Option<FeatureSequence>)>> {
    walks
        .iter()
        .map(|w| {
            let pred = match &w.z_above {
                Some(above) => Some(model.predict_from_above(s, above, w.levels[s].rows())?),
                None => None,
            };
            Ok((model.stage_input(&w.levels[s], pred.as_ref()), pred))
        })
        .collect()
}

/// Seeds every stage's codebook from a sampled frame pool, coarsest first.
fn seed_model(corpus: &Corpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng, exec: &Executor) -> Result<MsmcModel> {
    let stage_cfgs = cfg.stages_or_default();
    validate_stages(&stage_cfgs, corpus.dim())?;
    // placeholder codebooks give the model its shape; each is replaced below
    let placeholder = |c: &StageConfig| -> Result<Stage> {
        let d = corpus.dim() / c.heads;
        Ok(Stage {
            rate: c.rate,
            codebook: crate::vq::Codebook::from_tables(c.heads, c.codewords, d, vec![0.0; c.heads * c.codewords * d])?,
        })
    };
    let mut model = MsmcModel::new(
        corpus.dim(),
        cfg.coupling,
        cfg.loss_weights,
        corpus.fingerprint().to_string(),
        stage_cfgs.iter().map(placeholder).collect::<Result<_>>()?,
    )?;
    let mels: Vec<&FeatureSequence> = corpus.utterances().iter().map(|u| &u.features).collect();
    let mut walks: Vec<Walk> = exec
        .map(&mels, |m| model.pyramid(m))
        .into_iter()
        .map(|l| l.map(|levels| Walk { levels, z_above: None }))
        .collect::<Result<_>>()?;
    for s in (0..stage_cfgs.len()).rev() {
        let inputs = stage_inputs(&model, s, &walks)?;
        let all: Vec<&FeatureSequence> = inputs.iter().map(|(q, _)| q).collect();
        let frames = FeatureSequence::concat(&all)?;
        let pool = if frames.rows() > cfg.init_pool {
            let mut picked = index::sample(rng, frames.rows(), cfg.init_pool).into_vec();
            picked.sort_unstable();
            let rows: Vec<&[f32]> = picked.iter().map(|&i| frames.row(i)).collect();
            FeatureSequence::from_rows(&rows)?
        } else {
            frames
        };
        let c = &stage_cfgs[s];
        model.stages[s].codebook = init_codebook(&pool, c.heads, c.codewords, rng.next_u64())?;
        if s > 0 && model.coupling == Coupling::Residual {
            let cb = &model.stages[s].codebook;
            let outs = exec.map(&inputs, |(q_in, pred)| -> Result<FeatureSequence> {
                let (_, q_out) = quantize_rows(cb, q_in)?;
                Ok(model.stage_output(q_out, pred.as_ref()))
            });
            for (w, z) in walks.iter_mut().zip(outs) {
                w.z_above = Some(z?);
            }
        } else if s > 0 {
            // direct mode: lower stages do not depend on this one
            for w in walks.iter_mut() {
                w.z_above = None;
            }
        }
    }
    Ok(model)
}

fn check_init(corpus: &Corpus, cfg: &TrainConfig, init: &MsmcModel) -> Result<()> {
    init.validate()?;
    init.check_fingerprint(corpus.fingerprint())?;
    if init.feature_dim != corpus.dim() {
        return Err(Error::InvalidModel(format!(
            "initial model has feature dim {}, corpus has {}",
            init.feature_dim,
            corpus.dim()
        )));
    }
    if let Some(stages) = &cfg.stages {
        if *stages != init.stage_configs() {
            return Err(Error::InvalidModel(
                "configured stages differ from the initial model's stages".into(),
            ));
        }
    }
    Ok(())
}

/// Trains (or fine-tunes, when `init` is given) a model on `corpus`.
/// `on_log` receives each history entry as it is produced.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<&MsmcModel>,
    exec: &Executor,
    mut on_log: impl FnMut(&HistoryEntry),
) -> Result<(MsmcModel, TrainHistory)> {
    check_corpus(corpus)?;
    cfg.validate(init.is_some())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match init {
        Some(m) => {
            check_init(corpus, cfg, m)?;
            let mut m = m.clone();
            m.loss_weights = cfg.loss_weights;
            m
        }
        None => seed_model(corpus, cfg, &mut rng, exec)?,
    };
    let n_stages = model.stages.len();
    let mut history = Vec::new();
    for it in 1..=cfg.iterations {
        let batch: Vec<&FeatureSequence> = (0..cfg.batch_utterances)
            .map(|_| &corpus.utterances()[rng.random_range(0..corpus.len())].features)
            .collect();
        let mut walks: Vec<Walk> = exec
            .map(&batch, |m| model.pyramid(m))
            .into_iter()
            .map(|l| l.map(|levels| Walk { levels, z_above: None }))
            .collect::<Result<_>>()?;
        let mut ppl = vec![0.0; n_stages];
        for s in (0..n_stages).rev() {
            let inputs = stage_inputs(&model, s, &walks)?;
            let cb = &model.stages[s].codebook;
            let assigned = exec.map(&inputs, |(q_in, _)| quantize_rows(cb, q_in));
            let mut stats = AssignStats::for_codebook(cb);
            for ((q_in, _), a) in inputs.iter().zip(assigned) {
                let (tokens, _) = a?;
                for (t, idx) in tokens.iter().enumerate() {
                    stats.record(q_in.row(t), idx);
                }
            }
            let heads_ppl = stats.perplexity()?;
            ppl[s] = heads_ppl.iter().sum::<f64>() / heads_ppl.len() as f64;
            let cb = &mut model.stages[s].codebook;
            cb.ema_update(&stats, &cfg.ema)?;
            let batch_inputs: Vec<&FeatureSequence> = inputs.iter().map(|(q, _)| q).collect();
            cb.reseed_dead(&FeatureSequence::concat(&batch_inputs)?, &mut rng)?;

            if s > 0 && model.coupling == Coupling::Residual {
                let cb = &model.stages[s].codebook;
                let outs = exec.map(&inputs, |(q_in, pred)| -> Result<FeatureSequence> {
                    let (_, q_out) = quantize_rows(cb, q_in)?;
                    Ok(model.stage_output(q_out, pred.as_ref()))
                });
                for (w, z) in walks.iter_mut().zip(outs) {
                    w.z_above = Some(z?);
                }
            }
        }
        if it % cfg.log_interval == 0 || it == cfg.iterations {
            let l = mean_losses(&model, &batch, exec)?;
            let entry = HistoryEntry {
                iteration: it,
                l_f: l.l_f,
                l_q: l.l_q,
                l_e: l.l_e,
                perplexity: ppl,
            };
            on_log(&entry);
            history.push(entry);
        }
    }
    model.meta = TrainingMeta {
        iterations: cfg.iterations,
        corpus_hash: corpus.content_hash(),
        seed: cfg.seed,
        finetuned_from: init.map(|m| m.meta.corpus_hash.clone()),
    };
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub mean: MetricsReport,
    pub mcd_recipe: String,
    pub per_utterance: Vec<UtteranceMetrics>,
}

/// Mel-domain analysis-by-synthesis: encode and decode every utterance and
/// score the reconstruction against the input. `hyp_f0` supplies F0 tracks
/// measured on externally resynthesised audio; F0 metrics are reported for
/// utterances that have both a reference and a hypothesis track.
pub fn evaluate_reconstruction(
    corpus: &Corpus,
    model: &MsmcModel,
    exec: &Executor,
    hyp_f0: Option<&std::collections::HashMap<String, crate::dsp::F0Track>>,
) -> Result<EvalReport> {
    check_corpus(corpus)?;
    model.check_fingerprint(corpus.fingerprint())?;
    if model.feature_dim != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim,
            actual: corpus.dim(),
        });
    }
    let per = exec
        .map(corpus.utterances(), |u| -> Result<UtteranceMetrics> {
            let recon = model.decode(&model.encode(&u.features)?)?;
            let f0 = match (&u.f0, hyp_f0.and_then(|m| m.get(&u.id))) {
                (Some(r), Some(h)) => Some((r, h)),
                _ => None,
            };
            Ok(UtteranceMetrics {
                utterance_id: u.id.clone(),
                metrics: metrics::utterance_metrics(&u.features, &recon, f0)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = per.iter().map(|p| p.metrics.clone()).collect();
    Ok(EvalReport {
        mean: metrics::aggregate(&reports)?,
        mcd_recipe: metrics::MCD_RECIPE.to_string(),
        per_utterance: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::vq::Codebook;
    use rand_distr::{Distribution, Normal};

    fn utt(id: &str, features: FeatureSequence) -> Utterance {
        Utterance {
            id: id.into(),
            speaker_id: "s".into(),
            language: "l".into(),
            features,
            f0: None,
        }
    }

    fn random_corpus(n: usize, frames: usize, dim: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utts = (0..n)
            .map(|i| {
                let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                utt(&format!("u{i}"), FeatureSequence::new(frames, dim, data).unwrap())
            })
            .collect();
        Corpus::new("fp".into(), utts).unwrap()
    }

    fn small_cfg(stages: Vec<StageConfig>, iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_utterances: 4,
            seed: 5,
            stages: Some(stages),
            log_interval: 3,
            ..TrainConfig::default()
        }
    }

    fn two_stage(heads: usize, k: usize) -> Vec<StageConfig> {
        vec![StageConfig { rate: 1, heads, codewords: k }, StageConfig { rate: 2, heads, codewords: k }]
    }

    #[test]
    fn constant_corpus_is_captured() {
        let rows: Vec<[f32; 4]> = (0..40).map(|_| [0.3, -1.2, 2.0, 0.0]).collect();
        let corpus = Corpus::new("fp".into(), vec![utt("a", FeatureSequence::from_rows(&rows).unwrap())]).unwrap();
        let (model, _) = train(&corpus, &small_cfg(two_stage(2, 4), 10), None, &Executor::sequential(), |_| {}).unwrap();
        let l = model.compute_losses(&corpus.utterances()[0].features).unwrap();
        assert!(l.l_q < 1e-6, "{}", l.l_q);
    }

    #[test]
    fn planted_clusters_reach_generator_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let dim = 4;
        let sigma = 0.05f64;
        let centers: Vec<Vec<f64>> = (0..64).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let noise = Normal::new(0.0, sigma).unwrap();
        let utts = (0..32)
            .map(|u| {
                let rows: Vec<Vec<f32>> = (0..64)
                    .map(|t| centers[(u * 7 + t) % 64].iter().map(|c| (c + noise.sample(&mut rng)) as f32).collect())
                    .collect();
                utt(&format!("u{u}"), FeatureSequence::from_rows(&rows).unwrap())
            })
            .collect();
        let corpus = Corpus::new("fp".into(), utts).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            batch_utterances: 16,
            seed: 1,
            stages: Some(vec![StageConfig { rate: 1, heads: 1, codewords: 64 }]),
            log_interval: 50,
            ..TrainConfig::default()
        };
        let (model, _) = train(&corpus, &cfg, None, &Executor::new(0), |_| {}).unwrap();
        let mels: Vec<&FeatureSequence> = corpus.utterances().iter().map(|u| &u.features).collect();
        let l = mean_losses(&model, &mels, &Executor::sequential()).unwrap();
        // per-element MSE of a perfect clustering equals sigma^2
        assert!(l.l_q <= 2.0 * sigma * sigma, "l_q {} vs {}", l.l_q, sigma * sigma);
    }

    #[test]
    fn training_is_reproducible_and_worker_independent() {
        let corpus = random_corpus(6, 13, 4, 1);
        for coupling in [Coupling::Direct, Coupling::Residual] {
            let cfg = TrainConfig { coupling, ..small_cfg(two_stage(2, 4), 7) };
            let (a, ha) = train(&corpus, &cfg, None, &Executor::sequential(), |_| {}).unwrap();
            let (b, hb) = train(&corpus, &cfg, None, &Executor::new(4), |_| {}).unwrap();
            assert_eq!(a, b);
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn history_has_ceil_entries() {
        let corpus = random_corpus(3, 8, 4, 2);
        for (iters, every) in [(7u64, 3u64), (6, 3), (1, 5), (10, 1)] {
            let cfg = TrainConfig { log_interval: every, ..small_cfg(two_stage(2, 2), iters) };
            let mut lines = 0;
            let (_, h) = train(&corpus, &cfg, None, &Executor::sequential(), |_| lines += 1).unwrap();
            assert_eq!(h.len() as u64, iters.div_ceil(every));
            assert_eq!(lines, h.len());
            assert!(h.windows(2).all(|w| w[0].iteration < w[1].iteration));
        }
    }

    #[test]
    fn training_improves_fit() {
        for seed in 0..3 {
            let corpus = random_corpus(8, 20, 4, 10 + seed);
            let mels: Vec<&FeatureSequence> = corpus.utterances().iter().map(|u| &u.features).collect();
            let exec = Executor::sequential();
            let cfg1 = TrainConfig { seed, ..small_cfg(two_stage(2, 4), 1) };
            let (m1, _) = train(&corpus, &cfg1, None, &exec, |_| {}).unwrap();
            let cfg = TrainConfig { iterations: 60, ..cfg1 };
            let (m, _) = train(&corpus, &cfg, None, &exec, |_| {}).unwrap();
            let first = mean_losses(&m1, &mels, &exec).unwrap().l_q;
            let last = mean_losses(&m, &mels, &exec).unwrap().l_q;
            assert!(last < first, "seed {seed}: {last} >= {first}");
        }
    }

    #[test]
    fn zero_iteration_finetune_keeps_model() {
        let corpus = random_corpus(4, 10, 4, 3);
        let (base, _) = train(&corpus, &small_cfg(two_stage(2, 4), 5), None, &Executor::sequential(), |_| {}).unwrap();
        let cfg = TrainConfig { iterations: 0, stages: None, ..small_cfg(two_stage(2, 4), 0) };
        let (tuned, hist) = train(&corpus, &cfg, Some(&base), &Executor::sequential(), |_| {}).unwrap();
        assert!(hist.is_empty());
        for u in corpus.utterances() {
            assert_eq!(tuned.encode(&u.features).unwrap(), base.encode(&u.features).unwrap());
        }
        assert_eq!(tuned.meta.finetuned_from.as_deref(), Some(base.meta.corpus_hash.as_str()));
        assert!(train(&corpus, &cfg, None, &Executor::sequential(), |_| {}).is_err());
    }

    #[test]
    fn finetune_rejects_incompatible_models() {
        let corpus = random_corpus(4, 10, 4, 3);
        let (base, _) = train(&corpus, &small_cfg(two_stage(2, 4), 2), None, &Executor::sequential(), |_| {}).unwrap();
        let wide = random_corpus(4, 10, 6, 3);
        assert!(train(&wide, &small_cfg(two_stage(2, 4), 2), Some(&base), &Executor::sequential(), |_| {}).is_err());
        let other_fp = Corpus::new("other".into(), corpus.utterances().to_vec()).unwrap();
        let cfg = TrainConfig { stages: None, ..small_cfg(two_stage(2, 4), 2) };
        assert!(matches!(
            train(&other_fp, &cfg, Some(&base), &Executor::sequential(), |_| {}),
            Err(Error::FingerprintMismatch { .. })
        ));
        let mismatched = small_cfg(two_stage(1, 4), 2);
        assert!(train(&corpus, &mismatched, Some(&base), &Executor::sequential(), |_| {}).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty = Corpus::new("fp".into(), vec![]).unwrap();
        assert!(train(&empty, &TrainConfig::default(), None, &Executor::sequential(), |_| {}).is_err());
    }

    #[test]
    fn perfect_model_scores_zero_mcd() {
        let corpus = random_corpus(2, 3, 4, 7);
        let all: Vec<f32> = corpus.utterances().iter().flat_map(|u| u.features.as_slice().to_vec()).collect();
        let model = MsmcModel::new(
            4,
            Coupling::Direct,
            LossWeights::default(),
            "fp".into(),
            vec![Stage { rate: 1, codebook: Codebook::from_tables(1, 6, 4, all).unwrap() }],
        )
        .unwrap();
        let report = evaluate_reconstruction(&corpus, &model, &Executor::sequential(), None).unwrap();
        assert_eq!(report.mean.mcd_db, 0.0);
        assert_eq!(report.mean.n_utterances, 2);
        assert!(report.mean.f0_rmse_hz.is_none());
    }

    #[test]
    fn refined_codebook_is_no_worse() {
        let corpus = random_corpus(5, 12, 4, 9);
        let mels: Vec<&FeatureSequence> = corpus.utterances().iter().map(|u| &u.features).collect();
        let (coarse, _) = train(&corpus, &small_cfg(vec![StageConfig { rate: 1, heads: 2, codewords: 4 }], 5), None, &Executor::sequential(), |_| {}).unwrap();
        // superset: the coarse codewords plus four extra per head
        let cb = &coarse.stages[0].codebook;
        let extra = crate::vq::init_codebook(&FeatureSequence::concat(&mels).unwrap(), 2, 4, 99).unwrap();
        let mut tables = Vec::new();
        for h in 0..2 {
            for k in 0..4 {
                tables.extend_from_slice(cb.codeword(h, k));
            }
            for k in 0..4 {
                tables.extend_from_slice(extra.codeword(h, k));
            }
        }
        let mut refined = coarse.clone();
        refined.stages[0].codebook = Codebook::from_tables(2, 8, 2, tables).unwrap();
        let exec = Executor::sequential();
        let a = evaluate_reconstruction(&corpus, &coarse, &exec, None).unwrap();
        let b = evaluate_reconstruction(&corpus, &refined, &exec, None).unwrap();
        assert!(b.mean.frame_mse <= a.mean.frame_mse);
        assert!(mean_losses(&refined, &mels, &exec).unwrap().l_f <= mean_losses(&coarse, &mels, &exec).unwrap().l_f);
    }

    #[test]
    fn progress_line_format() {
        let e = HistoryEntry { iteration: 3, l_f: 0.5, l_q: 0.25, l_e: 0.125, perplexity: vec![3.0, 2.5] };
        assert_eq!(e.progress_line(), "iter=3 l_f=0.500000 l_q=0.250000 l_e=0.125000 ppl=3.000,2.500");
    }
}
