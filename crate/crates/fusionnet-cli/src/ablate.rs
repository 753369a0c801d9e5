//! Ablation runner: trains every (variant, band, seed) cell and emits
//! the variant-by-band table of mean test accuracies.

use crate::commands::{EXIT_OK, EXIT_USAGE};
use crate::config::{resolve_relative, AblateSuite};
use anyhow::Context;
use fusionnet_core::data::{BandId, LoadedDataset};
use fusionnet_core::model::ModelSpec;
use fusionnet_core::train::{evaluate_split, mean_std, train_one_rep, BandSelection};
use serde::Serialize;
use std::path::Path;
use std::process::ExitCode;

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub band: String,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub bands: Vec<String>,
    pub variants: Vec<String>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn mean_of(&self, variant: &str, band: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.band == band)
            .map(|c| c.mean_accuracy)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "model"));
        for b in &self.bands {
            out.push_str(&format!(" {:>8}", b));
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("{v:<8}"));
            for b in &self.bands {
                match self.mean_of(v, b) {
                    Some(acc) => out.push_str(&format!(" {:>8.1}", acc * 100.0)),
                    None => out.push_str(&format!(" {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the suite cells in fixed (variant, band) order, repetitions in
/// seed order inside each cell.
pub fn run_table(suite: &AblateSuite, suite_path: &Path, threads: usize) -> anyhow::Result<AblationTable> {
    let mut datasets = Vec::new();
    for (key, path) in &suite.manifests {
        let band = BandId::parse(key)?;
        let resolved = resolve_relative(suite_path, path);
        let data = LoadedDataset::load(&resolved)
            .with_context(|| format!("loading manifest for band {key} from {}", resolved.display()))?;
        datasets.push((band, data));
    }
    let mut table = AblationTable {
        bands: datasets.iter().map(|(b, _)| b.key().to_string()).collect(),
        variants: suite.variants.iter().map(|v| v.name().to_string()).collect(),
        cells: Vec::new(),
    };
    for &variant in &suite.variants {
        let spec = ModelSpec::Backbone(suite.variant_spec(variant)?);
        for (band, data) in &datasets {
            let mut accs = Vec::new();
            for (i, &seed) in suite.seeds.iter().enumerate() {
                let rep = i + 1;
                let mut outcome = train_one_rep(&spec, BandSelection::Band(*band), data, rep, seed, &suite.train)?;
                let split = data.manifest.split(rep)?.clone();
                let (metrics, _) = evaluate_split(
                    &outcome.model,
                    &mut outcome.store,
                    data,
                    &split.test,
                    &outcome.band,
                    None,
                    suite.train.batch_size,
                    threads,
                )?;
                accs.push(metrics.accuracy);
            }
            let (mean, sd) = mean_std(&accs);
            println!(
                "{:<8} {}  accs {:?}  mean {:.4}",
                variant.name(),
                band.key(),
                accs.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
                mean
            );
            table.cells.push(AblationCell {
                variant: variant.name().to_string(),
                band: band.key().to_string(),
                per_seed_accuracy: accs,
                mean_accuracy: mean,
                sd_accuracy: sd,
            });
        }
    }
    Ok(table)
}

pub fn run(suite_path: &Path, out_override: Option<&Path>, threads: usize) -> anyhow::Result<ExitCode> {
    if !suite_path.exists() {
        eprintln!("error: suite file {} does not exist", suite_path.display());
        return Ok(ExitCode::from(EXIT_USAGE));
    }
    let suite = AblateSuite::load(suite_path)?;
    let table = run_table(&suite, suite_path, threads)?;
    println!("\nmean test accuracy (%) over {} seeds\n{}", suite.seeds.len(), table.render());
    if let Some(out_dir) = out_override.or(suite.out.as_deref()) {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
        std::fs::write(out_dir.join("ablation.txt"), table.render())?;
        println!("table written to {}", out_dir.display());
    }
    Ok(ExitCode::from(EXIT_OK))
}
