//! `langid`: command-line front end for the spoken language identification
//! toolkit. Every subcommand is a thin shell over the library; results go
//! to stdout, diagnostics to stderr. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use langid::audio::{self, SynthCorpusSpec};
use langid::curate::{self, VadConfig};
use langid::ensemble::{EnsemblePool, FuseRule, MemberScores, SubsetChoice};
use langid::error::Error;
use langid::frontend;
use langid::manifest::Manifest;
use langid::metrics::{self, ScoreLine};
use langid::nn::{checkpoint, ModelConfig};
use langid::stream::{Stream, StreamNorm};
use langid::train::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "langid",
    version,
    about = "Spoken language identification: synthesis, training, inference, scoring",
    propagate_version = true
)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Emit machine-readable JSON lines instead of plain text.
    #[arg(long, global = true)]
    json_lines: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the seeded synthetic two-language (or many-speaker) corpus.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune from a checkpoint, optionally re-initializing the head.
    Finetune(FinetuneArgs),
    /// Classify audio offline or in streaming chunks.
    Predict(PredictArgs),
    /// Score a file of per-utterance probabilities (EER / BAC / micro).
    Eval(EvalArgs),
    /// Exhaustive ensemble subset search over score files.
    EnsembleSearch(EnsembleArgs),
    /// Energy-VAD segmentation of WAV files into a manifest.
    VadSegment(VadArgs),
    /// Keep only the records a model misclassifies.
    MineErrors(MineArgs),
    /// Recording-disjoint stratified train/val split.
    MakeSplit(SplitArgs),
    /// Class weights w = N / N_x from a manifest.
    ClassWeights(WeightArgs),
    /// Parameter count of a model preset or config file.
    CountParams(CountArgs),
    /// Dump normalized log-mel features as binary for oracle comparison.
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Utterances per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    duration_min: f64,
    #[arg(long, default_value_t = 1.0)]
    duration_max: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Generate an n-speaker corpus instead of the two-language one.
    #[arg(long)]
    speakers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model preset name (tiny, large) or JSON config path.
    #[arg(long, default_value = "tiny")]
    model: String,
    /// TOML training configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    val_manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    init_checkpoint: PathBuf,
    /// Replace the final classification layer (for class-count changes).
    #[arg(long)]
    reinit_head: bool,
    #[arg(long, default_value_t = 0)]
    head_seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, default_value = "tiny")]
    model: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of utterances to classify (offline mode).
    #[arg(long, conflicts_with = "wav")]
    manifest: Option<PathBuf>,
    /// Single WAV file to classify.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Write scores here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Streaming mode (single WAV): print interim probabilities per chunk.
    #[arg(long, requires = "wav")]
    stream: bool,
    /// Chunk size for streaming mode.
    #[arg(long, default_value_t = 500)]
    chunk_ms: usize,
    /// JSON file {"mean": [...], "std": [...]} with per-bin normalization
    /// statistics; exact streaming equivalence needs this.
    #[arg(long)]
    norm_stats: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// JSONL id/label file; otherwise labels must be embedded in scores.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Two or more score files, one per member.
    #[arg(long, num_args = 1.., required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Write the fused scores of the chosen subset here.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "sum_softmax")]
    rule: String,
}

#[derive(Args)]
struct VadArgs {
    /// Input WAV files.
    #[arg(long, num_args = 1.., required = true)]
    wav: Vec<PathBuf>,
    #[arg(long)]
    label: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    max_segment: f64,
    #[arg(long, default_value_t = 30.0)]
    threshold_percentile: f64,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long, default_value = "tiny")]
    model: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    val_out: PathBuf,
    /// Try this many candidate seeds and keep the split whose validation
    /// EER is closest to the full-set EER (requires --checkpoint).
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long, default_value = "tiny")]
    model: String,
    #[arg(long, requires = "candidates")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct WeightArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, default_value = "large")]
    model: String,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Skip per-bin normalization.
    #[arg(long)]
    raw: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LANGID_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        langid::par::configure_threads(jobs);
    }
    match run(cli.cmd, cli.json_lines) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd, json: bool) -> Result<(), Error> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a, json),
        Cmd::Train(a) => cmd_train(a, None, json),
        Cmd::Finetune(a) => {
            let cfg = ModelConfig::resolve(&a.train.model)?;
            let params =
                train::load_for_finetune(&a.init_checkpoint, &cfg, a.reinit_head, a.head_seed)?;
            cmd_train(a.train, Some(params), json)
        }
        Cmd::Predict(a) => cmd_predict(a, json),
        Cmd::Eval(a) => cmd_eval(a, json),
        Cmd::EnsembleSearch(a) => cmd_ensemble(a, json),
        Cmd::VadSegment(a) => cmd_vad(a, json),
        Cmd::MineErrors(a) => cmd_mine(a, json),
        Cmd::MakeSplit(a) => cmd_split(a, json),
        Cmd::ClassWeights(a) => cmd_weights(a, json),
        Cmd::CountParams(a) => cmd_count(a, json),
        Cmd::DumpFeatures(a) => cmd_dump(a, json),
    }
}

fn cmd_synth(a: SynthArgs, json: bool) -> Result<(), Error> {
    let range = (a.duration_min, a.duration_max);
    let spec = match a.speakers {
        Some(n) => SynthCorpusSpec::speakers(n, a.per_class, range, a.seed),
        None => SynthCorpusSpec::two_language(a.per_class, range, a.seed),
    };
    let manifest = audio::synth_corpus(&spec, &a.out_dir)?;
    let path = a.out_dir.join("manifest.jsonl");
    if json {
        println!(
            "{}",
            serde_json::json!({
                "manifest": path,
                "records": manifest.len(),
                "labels": manifest.label_counts(),
            })
        );
    } else {
        println!("manifest {}", path.display());
        for (label, count) in manifest.label_counts() {
            println!("label {label} {count}");
        }
    }
    Ok(())
}

fn cmd_train(
    a: TrainArgs,
    init: Option<langid::nn::ParameterSet<f32>>,
    json: bool,
) -> Result<(), Error> {
    let model_cfg = ModelConfig::resolve(&a.model)?;
    let mut train_cfg = TrainConfig::from_toml_file(&a.config)?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    let train_m = Manifest::read(&a.train_manifest)?;
    let val_m = Manifest::read(&a.val_manifest)?;
    let report = train::fit(&model_cfg, &train_cfg, &train_m, &val_m, &a.out_dir, init)?;
    let last = report.history.last().expect("at least one epoch");
    if json {
        println!(
            "{}",
            serde_json::json!({
                "final_checkpoint": report.final_checkpoint,
                "epochs_run": report.epochs_run,
                "val_micro_acc": last.val_micro_acc,
                "val_eer": last.val_eer,
                "retained": report.checkpoints.iter().map(|c| c.epoch).collect::<Vec<_>>(),
            })
        );
    } else {
        println!("final_checkpoint {}", report.final_checkpoint.display());
        println!("epochs_run {}", report.epochs_run);
        println!("val_micro_acc {:.4}", last.val_micro_acc);
        if let Some(e) = last.val_eer {
            println!("val_eer {e:.4}");
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct NormStatsFile {
    mean: Vec<f32>,
    std: Vec<f32>,
}

fn cmd_predict(a: PredictArgs, json: bool) -> Result<(), Error> {
    let cfg = ModelConfig::resolve(&a.model)?;
    let params = checkpoint::load_params(&a.checkpoint, &cfg)?;
    if a.stream {
        let wav = a.wav.as_ref().expect("clap enforces --wav with --stream");
        let buf = audio::read_wav(wav)?;
        let buf = audio::resample(&buf, frontend::SAMPLE_RATE)?;
        let norm = match &a.norm_stats {
            None => StreamNorm::Running,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let stats: NormStatsFile = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                StreamNorm::Precomputed {
                    mean: stats.mean,
                    std: stats.std,
                }
            }
        };
        let mut stream = Stream::new(&cfg, &params, norm)?;
        let chunk = (frontend::SAMPLE_RATE as usize * a.chunk_ms / 1000).max(1);
        for (i, piece) in buf.samples.chunks(chunk).enumerate() {
            let interim = stream.push(piece)?;
            if let Some(p) = interim {
                if json {
                    println!(
                        "{}",
                        serde_json::json!({"chunk": i, "p_en": p[0], "p_zh": p[1]})
                    );
                } else {
                    println!("chunk {i} p_en {:.6} p_zh {:.6}", p[0], p[1]);
                }
            }
        }
        let p = stream.finalize()?;
        if json {
            println!("{}", serde_json::json!({"final": true, "p_en": p[0], "p_zh": p[1]}));
        } else {
            println!("final p_en {:.6} p_zh {:.6}", p[0], p[1]);
        }
        return Ok(());
    }
    if cfg.n_classes != 2 {
        return Err(Error::Config(
            "score output is two-class; model has a different head".into(),
        ));
    }
    let manifest = match (&a.manifest, &a.wav) {
        (Some(m), None) => Manifest::read(m)?,
        (None, Some(w)) => {
            let buf = audio::read_wav(w)?;
            Manifest::new(vec![langid::manifest::UtteranceRecord {
                audio_filepath: w.to_string_lossy().into_owned(),
                offset: 0.0,
                duration: buf.duration(),
                label: "en".into(), // placeholder; not written for bare WAVs
                recording_id: None,
            }])
        }
        _ => {
            return Err(Error::Config(
                "predict needs exactly one of --manifest or --wav".into(),
            ))
        }
    };
    let bare_wav = a.manifest.is_none();
    let probs = train::predict_manifest(&cfg, &params, &manifest, a.batch_size)?;
    let lines: Vec<ScoreLine> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| ScoreLine {
            id: train::record_id(i),
            p_en: p[0],
            p_zh: p[1],
            label: if bare_wav {
                None
            } else {
                Some(manifest.records[i].label.clone())
            },
        })
        .collect();
    match &a.output {
        Some(path) => metrics::write_scores(path, &lines)?,
        None => {
            for line in &lines {
                println!(
                    "{}",
                    serde_json::to_string(line).map_err(|e| Error::Metrics(e.to_string()))?
                );
            }
        }
    }
    Ok(())
}

fn read_label_map(path: &PathBuf) -> Result<BTreeMap<String, String>, Error> {
    #[derive(Deserialize)]
    struct LabelLine {
        id: String,
        label: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: LabelLine = serde_json::from_str(line)
            .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
        map.insert(parsed.id, parsed.label);
    }
    Ok(map)
}

fn cmd_eval(a: EvalArgs, json: bool) -> Result<(), Error> {
    let lines = metrics::read_scores(&a.scores)?;
    let label_map = a.labels.as_ref().map(read_label_map).transpose()?;
    let trials = metrics::trials_from_scores(&lines, label_map.as_ref())?;
    let eer = metrics::eer(&trials, 0)?;
    let bac = metrics::bac(&trials)?;
    let micro = metrics::micro_acc(&trials)?;
    if json {
        println!(
            "{}",
            serde_json::json!({"eer": eer, "bac": bac, "micro_acc": micro})
        );
    } else {
        println!("eer {eer:.4}");
        println!("bac {bac:.4}");
        println!("micro_acc {micro:.4}");
    }
    Ok(())
}

fn cmd_ensemble(a: EnsembleArgs, json: bool) -> Result<(), Error> {
    let rule = match a.rule.as_str() {
        "sum_softmax" => FuseRule::SumSoftmax,
        "mean_prob" => FuseRule::MeanProb,
        other => {
            return Err(Error::Config(format!(
                "unknown fuse rule {other} (sum_softmax | mean_prob)"
            )))
        }
    };
    let label_map = a.labels.as_ref().map(read_label_map).transpose()?;
    let mut members = Vec::new();
    let mut labels_by_id: BTreeMap<String, String> = label_map.unwrap_or_default();
    for path in &a.scores {
        let lines = metrics::read_scores(path)?;
        for l in &lines {
            if let Some(lbl) = &l.label {
                labels_by_id.entry(l.id.clone()).or_insert_with(|| lbl.clone());
            }
        }
        members.push(MemberScores {
            member_id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            utterances: lines
                .into_iter()
                .map(|l| (l.id, vec![l.p_en, l.p_zh]))
                .collect(),
        });
    }
    let pool = EnsemblePool::new(members)?;
    let ids = pool.utterance_ids();
    let labels: Vec<usize> = ids
        .iter()
        .map(|id| {
            let lbl = labels_by_id
                .get(id)
                .ok_or_else(|| Error::Ensemble(format!("no label for utterance {id}")))?;
            match lbl.as_str() {
                "en" => Ok(0),
                "zh" => Ok(1),
                other => Err(Error::Ensemble(format!("unknown label {other}"))),
            }
        })
        .collect::<Result<_, Error>>()?;
    let SubsetChoice { member_ids, eer } =
        langid::ensemble::subset_search(&pool, &labels, 0, rule)?;
    // Fused scores of the chosen subset.
    let chosen: Vec<&MemberScores> = pool
        .members
        .iter()
        .filter(|m| member_ids.contains(&m.member_id))
        .collect();
    let member_probs: Vec<Vec<Vec<f64>>> = chosen
        .iter()
        .map(|m| m.utterances.iter().map(|(_, p)| p.clone()).collect())
        .collect();
    let refs: Vec<&[Vec<f64>]> = member_probs.iter().map(|m| m.as_slice()).collect();
    let fused = langid::ensemble::ensemble_probs(&refs, rule)?;
    let fused_lines: Vec<ScoreLine> = ids
        .iter()
        .zip(&fused)
        .map(|(id, p)| ScoreLine {
            id: id.clone(),
            p_en: p[0],
            p_zh: p[1],
            label: labels_by_id.get(id).cloned(),
        })
        .collect();
    let fused_trials = metrics::trials_from_scores(&fused_lines, None)?;
    let bac = metrics::bac(&fused_trials)?;
    if let Some(out) = &a.output {
        metrics::write_scores(out, &fused_lines)?;
    }
    if json {
        println!(
            "{}",
            serde_json::json!({"members": member_ids, "eer": eer, "bac": bac})
        );
    } else {
        println!("members {}", member_ids.join(","));
        println!("eer {eer:.4}");
        println!("bac {bac:.4}");
    }
    Ok(())
}

fn cmd_vad(a: VadArgs, json: bool) -> Result<(), Error> {
    let cfg = VadConfig {
        max_segment: a.max_segment,
        threshold_percentile: a.threshold_percentile,
        ..VadConfig::default()
    };
    let per_file: Vec<Result<Vec<langid::manifest::UtteranceRecord>, Error>> =
        langid::par::map_collect(&a.wav, |path| {
            let buf = audio::read_wav(path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            Ok(curate::vad_segment_file(
                &buf,
                &cfg,
                &path.to_string_lossy(),
                &a.label,
                &stem,
            ))
        });
    let mut records = Vec::new();
    for r in per_file {
        records.extend(r?);
    }
    let manifest = Manifest::new(records);
    manifest.write(&a.output)?;
    if json {
        println!(
            "{}",
            serde_json::json!({"manifest": a.output, "segments": manifest.len()})
        );
    } else {
        println!("manifest {}", a.output.display());
        println!("segments {}", manifest.len());
    }
    Ok(())
}

fn cmd_mine(a: MineArgs, json: bool) -> Result<(), Error> {
    let cfg = ModelConfig::resolve(&a.model)?;
    let params = checkpoint::load_params(&a.checkpoint, &cfg)?;
    let manifest = Manifest::read(&a.manifest)?;
    let labels = manifest.labels();
    let (errors, skipped) = curate::mine_errors(&cfg, &params, &manifest, &labels, a.batch_size)?;
    errors.write(&a.output)?;
    if json {
        println!(
            "{}",
            serde_json::json!({"manifest": a.output, "errors": errors.len(), "skipped": skipped})
        );
    } else {
        println!("manifest {}", a.output.display());
        println!("errors {}", errors.len());
        println!("skipped {skipped}");
    }
    Ok(())
}

fn cmd_split(a: SplitArgs, json: bool) -> Result<(), Error> {
    let manifest = Manifest::read(&a.manifest)?;
    let (train_m, val_m, chosen_seed, gap) = match (a.candidates, &a.checkpoint) {
        (Some(n), Some(ckpt)) => {
            let cfg = ModelConfig::resolve(&a.model)?;
            let params = checkpoint::load_params(ckpt, &cfg)?;
            let labels = manifest.labels();
            let seeds: Vec<u64> = (0..n as u64).map(|i| a.seed.wrapping_add(i)).collect();
            let report = curate::make_split_eer_matched(
                &manifest,
                a.val_fraction,
                &seeds,
                &cfg,
                &params,
                &labels,
                32,
            )?;
            (
                report.train,
                report.val,
                report.chosen.seed,
                Some(report.chosen.gap),
            )
        }
        (None, _) => {
            let (t, v) = curate::make_split(&manifest, a.val_fraction, a.seed)?;
            (t, v, a.seed, None)
        }
        (Some(_), None) => {
            return Err(Error::Config(
                "--candidates needs --checkpoint for the reference model".into(),
            ))
        }
    };
    train_m.write(&a.train_out)?;
    val_m.write(&a.val_out)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "train": a.train_out, "val": a.val_out,
                "train_labels": train_m.label_counts(),
                "val_labels": val_m.label_counts(),
                "seed": chosen_seed,
                "eer_gap": gap,
            })
        );
    } else {
        println!("train {} ({} records)", a.train_out.display(), train_m.len());
        println!("val {} ({} records)", a.val_out.display(), val_m.len());
        for (label, count) in val_m.label_counts() {
            println!("val_label {label} {count}");
        }
        println!("seed {chosen_seed}");
        if let Some(g) = gap {
            println!("eer_gap {g:.4}");
        }
    }
    Ok(())
}

fn cmd_weights(a: WeightArgs, json: bool) -> Result<(), Error> {
    let manifest = Manifest::read(&a.manifest)?;
    let labels = manifest.labels();
    let weights = langid::loss::compute_class_weights(&manifest, &labels)?;
    if json {
        let map: BTreeMap<&String, f64> = weights
            .labels
            .iter()
            .zip(weights.weights.iter().cloned())
            .collect();
        println!("{}", serde_json::json!(map));
    } else {
        for (label, w) in weights.labels.iter().zip(&weights.weights) {
            println!("weight {label} {w:.6}");
        }
    }
    Ok(())
}

fn cmd_count(a: CountArgs, json: bool) -> Result<(), Error> {
    let cfg = ModelConfig::resolve(&a.model)?;
    cfg.validate()?;
    let n = cfg.count_params();
    if json {
        println!(
            "{}",
            serde_json::json!({"model": a.model, "params": n, "pooled_dim": cfg.pooled_dim()})
        );
    } else {
        println!("params {n}");
        println!("pooled_dim {}", cfg.pooled_dim());
    }
    Ok(())
}

fn cmd_dump(a: DumpArgs, json: bool) -> Result<(), Error> {
    let buf = audio::read_wav(&a.wav)?;
    let buf = audio::resample(&buf, frontend::SAMPLE_RATE)?;
    let logmel = frontend::compute_logmel(&buf)?;
    let feat = if a.raw {
        logmel
    } else {
        frontend::normalize_features(&logmel, frontend::NormAxis::PerBin)
    };
    frontend::write_feature_dump(&a.output, &feat)?;
    if json {
        println!(
            "{}",
            serde_json::json!({"output": a.output, "frames": feat.cols()})
        );
    } else {
        println!("output {}", a.output.display());
        println!("frames {}", feat.cols());
    }
    Ok(())
}
