//! Command implementations shared by the thin clap front end.

use crate::config::{resolve_relative, RunConfig};
use anyhow::Context;
use fusionnet_core::data::{read_chip, BandId, Chip, LoadedDataset, Preset, SynthConfig};
use fusionnet_core::gradcheck::{run_modules, CheckModule};
use fusionnet_core::model::Model;
use fusionnet_core::train::cam::{branch_attention_map, compute_cam, f32_raw_bytes, pgm16_bytes, CamResult};
use fusionnet_core::train::checkpoint::{load_checkpoint, save_checkpoint};
use fusionnet_core::train::{
    evaluate_split, mean_std, train_one_rep, Metrics, SplitKind, TrainConfig, TrainOutcome,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

fn usage_error(msg: &str) -> anyhow::Result<ExitCode> {
    eprintln!("error: {msg}");
    Ok(ExitCode::from(EXIT_USAGE))
}

/// Relative paths of everything a command wrote, recorded next to the
/// artifacts themselves.
#[derive(Default, Serialize)]
struct FileManifest {
    files: Vec<String>,
}

impl FileManifest {
    fn push(&mut self, rel: impl Into<String>) {
        self.files.push(rel.into());
    }

    fn write(mut self, dir: &Path) -> anyhow::Result<()> {
        self.files.sort();
        self.files.push("files.json".to_string());
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(dir.join("files.json"), json)?;
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    cement: usize,
    landcover: usize,
    band: &str,
    size: &str,
    seed: u64,
    out: &Path,
    preset: &str,
    reps: usize,
    threads: usize,
) -> anyhow::Result<ExitCode> {
    if cement == 0 || landcover == 0 {
        return usage_error("--cement and --landcover must be at least 1");
    }
    let bands = if band == "all" {
        BandId::ALL.to_vec()
    } else {
        match BandId::parse(band) {
            Ok(b) => vec![b],
            Err(e) => return usage_error(&e.to_string()),
        }
    };
    let preset = match preset {
        "separable" => Preset::Separable,
        "hard" => Preset::Hard,
        other => return usage_error(&format!("unknown preset `{other}`")),
    };
    let size: usize = size.parse().expect("validated by clap");
    std::fs::create_dir_all(out)?;
    let mut cfg = SynthConfig::new(cement, landcover, bands, size, seed, preset);
    cfg.repetitions = reps;
    let manifest = fusionnet_core::data::generate_to_dir(&cfg, out, threads)?;
    let mut files = FileManifest::default();
    files.push("manifest.json");
    for site in &manifest.sites {
        for rel in site.chips.values() {
            files.push(rel.clone());
        }
    }
    let n_chips = manifest.sites.len() * manifest.bands.len();
    files.write(out)?;
    println!(
        "wrote {n_chips} chips ({} sites x {} bands) and manifest to {}",
        manifest.sites.len(),
        manifest.bands.len(),
        out.display()
    );
    Ok(ExitCode::from(EXIT_OK))
}

/// Test-split metrics document emitted per repetition. Contains no
/// timestamps so reruns are byte-identical.
#[derive(Serialize)]
struct MetricsDoc<'a> {
    split: &'a str,
    rep: usize,
    seed: u64,
    band: String,
    model: String,
    #[serde(flatten)]
    metrics: &'a Metrics,
    /// Hyperparameters whose defaults are artifact choices, not part of
    /// the reference protocol.
    non_protocol_defaults: &'static [&'static str],
    config: &'a TrainConfig,
}

fn write_rep_artifacts(
    out_dir: &Path,
    files: &mut FileManifest,
    outcome: &TrainOutcome,
    metrics: &Metrics,
    cfg: &TrainConfig,
) -> anyhow::Result<()> {
    let rep_dir = out_dir.join(format!("rep{}", outcome.rep));
    std::fs::create_dir_all(&rep_dir)?;
    let ckpt = rep_dir.join("checkpoint.fckp");
    save_checkpoint(&ckpt, &outcome.model.spec(), Some(outcome.band), &outcome.store)?;
    files.push(format!("rep{}/checkpoint.fckp", outcome.rep));

    let mut history = String::new();
    for rec in &outcome.history {
        history.push_str(&serde_json::to_string(rec)?);
        history.push('\n');
    }
    std::fs::write(rep_dir.join("history.jsonl"), history)?;
    files.push(format!("rep{}/history.jsonl", outcome.rep));

    let doc = MetricsDoc {
        split: "test",
        rep: outcome.rep,
        seed: outcome.seed,
        band: String::from(outcome.band),
        model: outcome.model.spec().describe(),
        metrics,
        non_protocol_defaults: TrainConfig::non_protocol_defaults(),
        config: cfg,
    };
    std::fs::write(rep_dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
    files.push(format!("rep{}/metrics.json", outcome.rep));
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    reps: usize,
    accuracy_mean: f64,
    accuracy_sd: f64,
    cement_recall_mean: f64,
    cement_recall_sd: f64,
    per_rep_accuracy: Vec<f64>,
}

pub fn train(config_path: &Path, out_override: Option<&Path>, threads: usize) -> anyhow::Result<ExitCode> {
    if !config_path.exists() {
        return usage_error(&format!("config file {} does not exist", config_path.display()));
    }
    let cfg = RunConfig::load(config_path).context("loading run config")?;
    let out_dir = match out_override.or(cfg.out.as_deref()) {
        Some(d) => d.to_path_buf(),
        None => return usage_error("no output directory (set `out` in the config or pass --out)"),
    };
    std::fs::create_dir_all(&out_dir)?;
    let manifest_path = resolve_relative(config_path, &cfg.data.manifest);
    if !manifest_path.exists() {
        return usage_error(&format!("manifest {} does not exist", manifest_path.display()));
    }
    let data = LoadedDataset::load(&manifest_path)?;
    let mut files = FileManifest::default();
    std::fs::write(out_dir.join("config_echo.json"), serde_json::to_string_pretty(&cfg)?)?;
    files.push("config_echo.json");

    let reps = cfg.reps();
    let mut accuracies = Vec::new();
    let mut recalls = Vec::new();
    for (&rep, &seed) in reps.iter().zip(&cfg.train.seeds) {
        let mut outcome = train_one_rep(&cfg.model, cfg.data.band, &data, rep, seed, &cfg.train)?;
        let split = data.manifest.split(rep)?.clone();
        let (metrics, _) = evaluate_split(
            &outcome.model,
            &mut outcome.store,
            &data,
            &split.test,
            &outcome.band,
            None,
            cfg.train.batch_size,
            threads,
        )?;
        println!(
            "rep {rep} (seed {seed}): test accuracy {:.4}, cement recall {:.4}",
            metrics.accuracy, metrics.recall[0]
        );
        write_rep_artifacts(&out_dir, &mut files, &outcome, &metrics, &cfg.train)?;
        accuracies.push(metrics.accuracy);
        recalls.push(metrics.recall[0]);
    }
    if accuracies.len() > 1 {
        let (am, asd) = mean_std(&accuracies);
        let (rm, rsd) = mean_std(&recalls);
        let summary = Summary {
            reps: accuracies.len(),
            accuracy_mean: am,
            accuracy_sd: asd,
            cement_recall_mean: rm,
            cement_recall_sd: rsd,
            per_rep_accuracy: accuracies.clone(),
        };
        std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        files.push("summary.json");
        println!("mean accuracy over {} splits: {:.4} (sd {:.4})", summary.reps, am, asd);
    }
    files.write(&out_dir)?;
    Ok(ExitCode::from(EXIT_OK))
}

pub fn eval(
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    split: &str,
    rep: usize,
    from_counts: Option<&str>,
    out: Option<&Path>,
    threads: usize,
) -> anyhow::Result<ExitCode> {
    let metrics = if let Some(counts) = from_counts {
        let parts: Vec<usize> = counts
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .context("parsing --from-counts (expected cc,cl,lc,ll)")?;
        if parts.len() != 4 {
            return usage_error("--from-counts expects exactly four comma-separated integers");
        }
        Metrics::from_confusion([[parts[0], parts[1]], [parts[2], parts[3]]])
    } else {
        let ckpt_path = checkpoint.expect("clap enforces presence");
        let manifest_path = manifest.expect("clap enforces presence");
        if !ckpt_path.exists() {
            return usage_error(&format!("checkpoint {} does not exist", ckpt_path.display()));
        }
        if !manifest_path.exists() {
            return usage_error(&format!("manifest {} does not exist", manifest_path.display()));
        }
        let split: SplitKind = match split.parse() {
            Ok(s) => s,
            Err(e) => return usage_error(&e.to_string()),
        };
        let mut ckpt = load_checkpoint(ckpt_path)?;
        let band = ckpt
            .band
            .ok_or_else(|| anyhow::anyhow!("checkpoint does not record a band selection"))?;
        let data = LoadedDataset::load(manifest_path)?;
        let assignment = data.manifest.split(rep)?.clone();
        let sites = match split {
            SplitKind::Train => &assignment.train,
            SplitKind::Val => &assignment.val,
            SplitKind::Test => &assignment.test,
        };
        let (metrics, _) = evaluate_split(&ckpt.model, &mut ckpt.store, &data, sites, &band, None, 32, threads)?;
        metrics
    };
    let json = serde_json::to_string_pretty(&metrics)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(ExitCode::from(EXIT_OK))
}

#[derive(Serialize)]
struct CamDoc {
    predicted: String,
    degenerate: bool,
    outputs: Vec<String>,
}

fn write_cam_outputs(out_dir: &Path, stem: &str, cam: &CamResult) -> anyhow::Result<CamDoc> {
    std::fs::create_dir_all(out_dir)?;
    let pgm = format!("{stem}_cam.pgm");
    let raw = format!("{stem}_cam.f32");
    std::fs::write(out_dir.join(&pgm), pgm16_bytes(&cam.heatmap, cam.h, cam.w))?;
    std::fs::write(out_dir.join(&raw), f32_raw_bytes(&cam.heatmap))?;
    let mut files = FileManifest::default();
    files.push(pgm.clone());
    files.push(raw.clone());
    files.write(out_dir)?;
    Ok(CamDoc {
        predicted: format!("{:?}", cam.predicted).to_lowercase(),
        degenerate: cam.degenerate,
        outputs: vec![pgm, raw],
    })
}

pub fn cam(checkpoint: &Path, chips: &[PathBuf], out: &Path, branch: Option<usize>) -> anyhow::Result<ExitCode> {
    if !checkpoint.exists() {
        return usage_error(&format!("checkpoint {} does not exist", checkpoint.display()));
    }
    for c in chips {
        if !c.exists() {
            return usage_error(&format!("chip {} does not exist", c.display()));
        }
    }
    let mut ckpt = load_checkpoint(checkpoint)?;
    let result = match (&ckpt.model, branch) {
        (Model::Fusion(_), Some(idx)) => {
            if chips.len() != 5 {
                return usage_error("fusion branch maps need five chips (band order b11,b10,b7,b6,b76)");
            }
            let loaded: Vec<Chip> = chips.iter().map(|p| read_chip(p)).collect::<Result<_, _>>()?;
            let arr: [Chip; 5] = loaded.try_into().expect("length checked");
            branch_attention_map(&ckpt.model, &mut ckpt.store, &arr, idx)?
        }
        (Model::Fusion(_), None) => {
            // the fused head is not linear over GAP features
            return Err(fusionnet_core::Error::CamUndefinedForFusionHead.into());
        }
        (Model::Backbone(_), _) => {
            if chips.len() != 1 {
                return usage_error("backbone CAM takes exactly one chip");
            }
            let chip = read_chip(&chips[0])?;
            compute_cam(&ckpt.model, &mut ckpt.store, &chip)?
        }
    };
    let stem = chips[0]
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("chip")
        .to_string();
    let doc = write_cam_outputs(out, &stem, &result)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(ExitCode::from(EXIT_OK))
}

pub fn gradcheck(module: &str) -> anyhow::Result<ExitCode> {
    let modules = match CheckModule::parse(module) {
        Ok(m) => m,
        Err(e) => return usage_error(&e.to_string()),
    };
    let report = run_modules(&modules)?;
    print!("{}", report.render());
    if report.all_passed() {
        println!("gradcheck: all {} checks passed", report.entries.len());
        Ok(ExitCode::from(EXIT_OK))
    } else {
        let failed = report.entries.iter().filter(|e| !e.passed()).count();
        println!("gradcheck: {failed} of {} checks FAILED", report.entries.len());
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}
