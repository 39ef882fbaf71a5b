//! `msmc` — feature extraction, training, encoding, selection and evaluation.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 data error.
//! Diagnostics go to stderr; progress lines and tables go to stdout.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msmc::corpus::{extract_features, Corpus};
use msmc::io::{load_model, load_tokens, read_features, save_model, save_tokens, write_atomic, write_features, Manifest};
use msmc::selection::{emit_augmented_manifest, rank_candidates, read_embeddings, target_centroid};
use msmc::synth::{self, SynthConfig};
use msmc::trainer::evaluate_reconstruction;
use msmc::{train, DspConfig, Executor, F0Track, TrainConfig};
use serde::Deserialize;

/// Run configuration file. Every section is optional; unknown keys are
/// rejected. Command-line flags override values given here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    dsp: DspConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

#[derive(Parser)]
#[command(name = "msmc", version, about = "Multi-stage multi-codebook speech representations")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores, 1 = sequential). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log-Mel features and F0 tracks for every WAV in a manifest.
    Features { manifest: PathBuf, out_dir: PathBuf },
    /// Train a model, or fine-tune one with --init-from.
    Train {
        manifest: PathBuf,
        out_model: PathBuf,
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        log_interval: Option<u64>,
    },
    /// Encode a feature file into a token file.
    Encode { model: PathBuf, features_in: PathBuf, tokens_out: PathBuf },
    /// Decode a token file into a feature file.
    Decode { model: PathBuf, tokens_in: PathBuf, features_out: PathBuf },
    /// Rank candidates by speaker similarity and write target + top-k manifest.
    Select {
        target_embeddings: PathBuf,
        candidate_embeddings: PathBuf,
        out_manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        target_manifest: PathBuf,
        #[arg(long)]
        candidate_manifest: PathBuf,
        /// Also write the full ranking and ACD curve as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruct every utterance and write a metrics report.
    Eval {
        model: PathBuf,
        manifest: PathBuf,
        report_out: PathBuf,
        /// Directory of `<utterance_id>.f0` tracks measured on resynthesised audio.
        #[arg(long)]
        hyp_f0_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus (manifests, embeddings, data files).
    SynthCorpus {
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Render WAV audio instead of feature files.
        #[arg(long)]
        audio: bool,
    },
}

enum Failure {
    Usage(String),
    Data(msmc::Error),
}

impl From<msmc::Error> for Failure {
    fn from(e: msmc::Error) -> Self {
        Failure::Data(e)
    }
}

type Res<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> Res<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Res {
    let cfg = load_config(cli.config.as_deref())?;
    let exec = Executor::new(cli.workers.or(cfg.workers).unwrap_or(0));
    match cli.command {
        Command::Features { manifest, out_dir } => {
            cfg.dsp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let m = Manifest::read(&manifest)?;
            let out = extract_features(&m, &out_dir, &cfg.dsp, &exec)?;
            let path = out_dir.join("features.tsv");
            out.write(&path)?;
            eprintln!("wrote {} feature files; manifest {}", out.len(), path.display());
        }
        Command::Train { manifest, out_model, init_from, seed, iterations, log_interval } => {
            let mut tc = cfg.train;
            if let Some(s) = seed.or(cfg.seed) {
                tc.seed = s;
            }
            if let Some(i) = iterations {
                tc.iterations = i;
            }
            if let Some(l) = log_interval {
                tc.log_interval = l;
            }
            tc.validate(init_from.is_some()).map_err(|e| Failure::Usage(e.to_string()))?;
            let corpus = Corpus::load(&Manifest::read(&manifest)?, &exec)?;
            let init = init_from.as_deref().map(load_model).transpose()?;
            let (model, _) = train(&corpus, &tc, init.as_ref(), &exec, |e| println!("{}", e.progress_line()))?;
            save_model(&out_model, &model)?;
        }
        Command::Encode { model, features_in, tokens_out } => {
            let model = load_model(&model)?;
            let f = read_features(&features_in)?;
            model.check_fingerprint(&f.fingerprint)?;
            save_tokens(&tokens_out, &model.encode(&f.features)?, &f.fingerprint)?;
        }
        Command::Decode { model, tokens_in, features_out } => {
            let model = load_model(&model)?;
            let (repr, fp) = load_tokens(&tokens_in)?;
            model.check_fingerprint(&fp)?;
            write_features(&features_out, &model.decode(&repr)?, &fp)?;
        }
        Command::Select { target_embeddings, candidate_embeddings, out_manifest, k, target_manifest, candidate_manifest, report } => {
            let target = read_embeddings(&target_embeddings)?;
            let candidates = read_embeddings(&candidate_embeddings)?;
            let ranked = rank_candidates(&candidates, &target_centroid(&target)?)?;
            if k > ranked.len() {
                return Err(Failure::Usage(format!("--k {k} exceeds the {} candidates", ranked.len())));
            }
            let selection = ranked.select_top_k(k)?;
            let out = emit_augmented_manifest(
                &Manifest::read(&target_manifest)?,
                &Manifest::read(&candidate_manifest)?,
                &selection.utterance_ids,
            )?;
            out.write(&out_manifest)?;
            println!("k\tACD");
            for (i, acd) in ranked.acd_prefix.iter().enumerate() {
                println!("{}\t{acd:.6}", i + 1);
            }
            if let Some(path) = report {
                let body = serde_json::json!({ "k": k, "selected": selection, "ranking": ranked });
                write_atomic(&path, format!("{}\n", serde_json::to_string_pretty(&body).expect("json")).as_bytes())?;
            }
        }
        Command::Eval { model, manifest, report_out, hyp_f0_dir } => {
            let model = load_model(&model)?;
            let corpus = Corpus::load(&Manifest::read(&manifest)?, &exec)?;
            let hyp = hyp_f0_dir.as_deref().map(|d| hyp_tracks(&corpus, d)).transpose()?;
            let report = evaluate_reconstruction(&corpus, &model, &exec, hyp.as_ref())?;
            let text = format!("{}\n", serde_json::to_string_pretty(&report).expect("json"));
            write_atomic(&report_out, text.as_bytes())?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            println!("MCD (dB)\tF0-RMSE (Hz)\tF0-VUV (%)");
            println!("{:.3}\t{}\t{}", report.mean.mcd_db, fmt(report.mean.f0_rmse_hz), fmt(report.mean.f0_vuv_pct));
        }
        Command::SynthCorpus { out_dir, seed, audio } => {
            let mut sc = cfg.synth;
            if let Some(s) = seed.or(cfg.seed) {
                sc.seed = s;
            }
            sc.audio |= audio;
            sc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let corpus = synth::generate(&sc)?;
            let files = corpus.write(&out_dir)?;
            eprintln!(
                "wrote {} utterances; manifests {}, {}, {}",
                corpus.all().count(),
                files.target_manifest.display(),
                files.heldout_manifest.display(),
                files.candidate_manifest.display()
            );
        }
    }
    Ok(())
}

fn hyp_tracks(corpus: &Corpus, dir: &Path) -> Res<HashMap<String, F0Track>> {
    let mut out = HashMap::new();
    for u in corpus.utterances() {
        let path = dir.join(format!("{}.f0", u.id));
        if path.exists() {
            out.insert(u.id.clone(), F0Track::from_features(&read_features(&path)?.features)?);
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
