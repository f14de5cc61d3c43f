use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sctts_core::audio;
use sctts_core::corpus::{self, Dataset, SynthConfig};
use sctts_core::dsp;
use sctts_core::eval::{self, EvalOptions};
use sctts_core::model::ModelConfig;
use sctts_core::synth::{self, ReferenceInput, SynthesisRequest};
use sctts_core::text::Vocabulary;
use sctts_core::train::{self, Checkpoint, FitOutput, TrainConfig};

use crate::config::CliConfig;
use crate::{
    CorpusSynthArgs, F0srArgs, FeaturesArgs, InferenceArgs, LengthArgs, ScatterArgs, SynthArgs,
    TrainArgs,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &CliConfig) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| cfg.paths.manifest.clone())
        .context("no manifest given: pass --manifest or set paths.manifest in the config")?;
    fs::canonicalize(&path).with_context(|| format!("manifest {} not found", path.display()))
}

fn load_dataset(flag: &Option<PathBuf>, cfg: &CliConfig) -> Result<Dataset> {
    let path = manifest_path(flag, cfg)?;
    corpus::load_manifest(&path, cfg.feature.sample_rate)
        .with_context(|| format!("loading manifest {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn corpus_synth(cfg: &CliConfig, args: &CorpusSynthArgs) -> Result<()> {
    let mut sc: SynthConfig = match &args.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(n) = args.size {
        sc.num_utterances = n;
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(c) = args.correlation {
        sc.pitch_speed_correlation = c;
    }
    let generated = corpus::generate_synthetic_corpus(&sc, &cfg.feature)?;
    create_dir(&args.out)?;
    let ds = generated.write(&args.out)?;
    write_json(&args.out.join("synth_config.json"), &sc)?;
    println!("wrote {} utterances to {}", ds.len(), args.out.display());
    Ok(())
}

pub fn features(cfg: &CliConfig, args: &FeaturesArgs) -> Result<()> {
    let ds = load_dataset(&args.manifest, cfg)?;
    let vocab = Vocabulary::from_texts(ds.utterances.iter().map(|u| u.text.as_str()));
    let feats = train::compute_features(&ds, &vocab, &cfg.feature, cfg.rate.lambda)?;
    let mel_dir = args.out.join("mels");
    create_dir(&mel_dir)?;
    let mut csv = String::from("utt_id,phonemes,voiced_frames,sr\n");
    for f in &feats {
        dsp::write_mel(&mel_dir.join(format!("{}.mel", f.id)), &f.mel)?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            f.id, f.rate.num_phonemes, f.rate.voiced_frames, f.rate.r
        ));
    }
    let csv_path = args.out.join("features.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let stats = train::rate_stats(&feats)?;
    write_json(&args.out.join("rate_stats.json"), &stats)?;
    write_json(&args.out.join("vocab.json"), &vocab)?;
    println!(
        "{} utterances, mean rate {:.3}, std {:.3}",
        feats.len(),
        stats.mean_r,
        stats.std_r
    );
    Ok(())
}

pub fn train(cfg: &CliConfig, args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.manifest, cfg)?;
    let work_dir = args
        .work_dir
        .clone()
        .or_else(|| cfg.paths.work_dir.clone())
        .context("no work directory given: pass --work-dir or set paths.work_dir in the config")?;
    create_dir(&work_dir)?;
    let mut tc: TrainConfig = cfg.train.clone();
    if let Some(s) = args.steps {
        tc.max_steps = s;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if args.proportional_schedule {
        tc.scale = tc.max_steps as f64 / TrainConfig::default().alpha_zero_step as f64;
    }
    tc.validate()?;
    let mut mc: ModelConfig = if args.tiny {
        ModelConfig::tiny(0)
    } else {
        cfg.model.clone()
    };
    mc.use_gst |= args.gst;
    let train_set = match args.test_fraction {
        Some(f) => {
            let (train_set, test_set) = corpus::split_dataset(&ds, f, tc.seed)?;
            corpus::write_manifest(&train_set, &work_dir.join("train_manifest.jsonl"))?;
            corpus::write_manifest(&test_set, &work_dir.join("test_manifest.jsonl"))?;
            train_set
        }
        None => ds,
    };
    let out = FitOutput {
        work_dir: Some(work_dir.clone()),
    };
    let result = train::fit(&train_set, &cfg.feature, mc, &tc, cfg.rate.lambda, &out)?;
    if let Some(last) = result.losses.last() {
        println!(
            "trained {} steps, final loss {:.4}, checkpoint {}",
            tc.max_steps,
            last.total,
            work_dir.join("ckpt_final").display()
        );
    }
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn reference(args: &InferenceArgs) -> Option<ReferenceInput> {
    args.reference.clone().map(ReferenceInput::Wav)
}

fn eval_options(args: &InferenceArgs) -> EvalOptions {
    EvalOptions {
        max_frames_margin: args.margin,
        monotonic_attention: args.monotonic,
    }
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        bail!("{} holds no texts", path.display());
    }
    Ok(lines)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.inference.ckpt)?;
    let req = SynthesisRequest {
        sr: args.sr,
        length_scale: args.length_scale,
        reference: reference(&args.inference),
        max_frames_margin: args.inference.margin,
        monotonic_attention: args.inference.monotonic,
        ..SynthesisRequest::new(args.text.clone())
    };
    let out = synth::synthesize(&req, &ckpt)?;
    audio::write_wav(&args.out, &out.wave, ckpt.features.sample_rate)?;
    if let Some(p) = &args.mel_out {
        dsp::write_mel(p, out.mel.values())?;
    }
    println!(
        "rate {:.3}, {} mel frames{}, wrote {}",
        out.r,
        out.mel.frames(),
        if out.hit_cap {
            " (frame cap reached)"
        } else {
            ""
        },
        args.out.display()
    );
    Ok(())
}

pub fn analyze_scatter(cfg: &CliConfig, args: &ScatterArgs) -> Result<()> {
    let ds = load_dataset(&args.manifest, cfg)?;
    let rows = eval::corpus_f0_sr_scatter(&ds, &cfg.feature, cfg.rate.lambda)?;
    eval::write_scatter_csv(&args.out, &rows)?;
    println!(
        "{} utterances, pearson {:.4}",
        rows.len(),
        eval::scatter_pearson(&rows)
    );
    Ok(())
}

pub fn analyze_f0sr(args: &F0srArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.inference.ckpt)?;
    let texts = read_texts(&args.texts)?;
    let grid = args
        .grid
        .clone()
        .unwrap_or_else(|| eval::default_sr_grid(&ckpt.rate_stats));
    let rows = eval::f0_sr_curve(
        &ckpt,
        &texts,
        &grid,
        reference(&args.inference).as_ref(),
        &eval_options(&args.inference),
    )?;
    eval::write_f0_sr_csv(&args.out, &rows)?;
    println!("slope {:.4} Hz per rate unit", eval::f0_sr_slope(&rows));
    Ok(())
}

pub fn analyze_length(args: &LengthArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.inference.ckpt)?;
    let texts: Vec<(String, String)> = read_texts(&args.texts)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("text{i:03}"), t))
        .collect();
    let report = eval::length_control_report(
        &ckpt,
        &texts,
        &args.scales,
        reference(&args.inference).as_ref(),
        &eval_options(&args.inference),
    )?;
    eval::write_length_csv(&args.out, &report.rows)?;
    println!(
        "monotone {:.3}, median relative error {:.4}",
        report.monotone_fraction(),
        report.median_rel_error()
    );
    Ok(())
}
