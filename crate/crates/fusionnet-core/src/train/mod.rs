//! Training protocol: seeded shuffling, per-sample geometric
//! augmentation, weighted cross entropy, Adam, per-epoch validation and
//! repeated runs over independent stratified splits.

pub mod cam;
pub mod checkpoint;
pub mod metrics;

pub use metrics::{mean_std, Metrics};

use crate::data::{
    apply_to_planes, class_weights, derive_seed, sample_augment, AugmentDraw, BandId, ClassWeightMode, LoadedDataset,
};
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::model::{Model, ModelSpec};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::{Tape, VarId};
use crate::util::run_indexed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TAG_INIT: u64 = 11;
const TAG_SHUFFLE: u64 = 12;
const TAG_AUGMENT: u64 = 13;

/// Which spectral input a run trains on: one band for a standalone
/// backbone, or all five for the fusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BandSelection {
    Band(BandId),
    All,
}

impl TryFrom<String> for BandSelection {
    type Error = Error;
    fn try_from(s: String) -> Result<BandSelection> {
        if s == "all" {
            Ok(BandSelection::All)
        } else {
            Ok(BandSelection::Band(BandId::parse(&s)?))
        }
    }
}

impl From<BandSelection> for String {
    fn from(b: BandSelection) -> String {
        match b {
            BandSelection::All => "all".to_string(),
            BandSelection::Band(b) => b.key().to_string(),
        }
    }
}

fn default_epochs() -> usize {
    150
}

fn default_batch() -> usize {
    32
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

/// Training hyperparameters. Defaults follow the reference protocol
/// (150 epochs, Adam, [3,1] class weights, five repetitions); learning
/// rate and batch size have no protocol-pinned value and their defaults
/// are flagged in the emitted metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub class_weights: ClassWeightMode,
    /// One seed per repetition; repetition `i` trains on split rep `i+1`.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Keep the parameters from the best-validation-accuracy epoch
    /// instead of the final epoch.
    #[serde(default)]
    pub best_val: bool,
    /// Stop when validation loss has not improved for this many epochs.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            class_weights: ClassWeightMode::default(),
            seeds: default_seeds(),
            augment: true,
            shuffle: true,
            best_val: false,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn repetitions(&self) -> usize {
        self.seeds.len()
    }

    /// Hyperparameters that have no protocol-pinned value.
    pub fn non_protocol_defaults() -> &'static [&'static str] {
        &["adam.lr", "batch_size"]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub band: BandSelection,
    pub rep: usize,
    pub seed: u64,
    pub class_weights: [f64; 2],
}

enum BatchInputs {
    Single(VarId),
    Fused([VarId; 5]),
}

fn bands_for(selection: &BandSelection) -> Vec<BandId> {
    match selection {
        BandSelection::Band(b) => vec![*b],
        BandSelection::All => FusionSpec::bands().to_vec(),
    }
}

/// Widens chip pixels to f64, applying an optional augmentation draw.
fn chip_plane_f64(chip: &crate::data::Chip, draw: Option<&AugmentDraw>) -> Vec<f64> {
    match draw {
        None => chip.pixels.iter().map(|&p| p as f64).collect(),
        Some(d) => {
            let mut px = chip.pixels.clone();
            apply_to_planes(&mut px, chip.h, d);
            px.iter().map(|&p| p as f64).collect()
        }
    }
}

fn assemble_batch(
    data: &LoadedDataset,
    sites: &[usize],
    selection: &BandSelection,
    draws: Option<&[AugmentDraw]>,
    tape: &mut Tape,
) -> Result<(BatchInputs, Vec<usize>)> {
    let n = data.manifest.size;
    let plane = 3 * n * n;
    let b = sites.len();
    let bands = bands_for(selection);
    let mut per_band: Vec<Vec<f64>> = bands.iter().map(|_| Vec::with_capacity(b * plane)).collect();
    let mut targets = Vec::with_capacity(b);
    for (i, &site) in sites.iter().enumerate() {
        let draw = draws.map(|d| &d[i]);
        for (bi, band) in bands.iter().enumerate() {
            let chip = data.chip(site, *band)?;
            per_band[bi].extend(chip_plane_f64(chip, draw));
        }
        targets.push(data.site(site).label.index());
    }
    let mut ids = Vec::with_capacity(bands.len());
    for buf in per_band {
        ids.push(tape.constant(vec![b, 3, n, n], buf)?);
    }
    let inputs = match selection {
        BandSelection::Band(_) => BatchInputs::Single(ids[0]),
        BandSelection::All => BatchInputs::Fused(ids.try_into().expect("five band tensors")),
    };
    Ok((inputs, targets))
}

fn forward_logits(model: &Model, tape: &mut Tape, store: &mut ParamStore, inputs: &BatchInputs, mode: Mode) -> Result<VarId> {
    match (model, inputs) {
        (Model::Backbone(b), BatchInputs::Single(x)) => {
            let out = b.forward(tape, store, *x, mode)?;
            out.logits.ok_or_else(|| Error::invalid("backbone has no classifier head"))
        }
        (Model::Fusion(f), BatchInputs::Fused(xs)) => Ok(f.forward(tape, store, xs, mode)?.logits),
        (Model::Backbone(_), BatchInputs::Fused(_)) => {
            Err(Error::invalid("single-band backbone fed fused five-band inputs"))
        }
        (Model::Fusion(_), BatchInputs::Single(_)) => {
            Err(Error::invalid("fusion model needs all five band inputs per site"))
        }
    }
}

fn argmax2(logits: &[f64], i: usize) -> usize {
    usize::from(logits[2 * i + 1] > logits[2 * i])
}

fn validate_selection(spec: &ModelSpec, selection: &BandSelection, data: &LoadedDataset) -> Result<()> {
    match (spec, selection) {
        (ModelSpec::Fusion(_), BandSelection::All) => {
            for band in FusionSpec::bands() {
                if !data.manifest.bands.contains(&band) {
                    return Err(Error::invalid(format!(
                        "fusion training needs band {} in the dataset",
                        band.key()
                    )));
                }
            }
            Ok(())
        }
        (ModelSpec::Backbone(_), BandSelection::Band(b)) => {
            if !data.manifest.bands.contains(b) {
                return Err(Error::invalid(format!("dataset does not provide band {}", b.key())));
            }
            Ok(())
        }
        (ModelSpec::Fusion(_), BandSelection::Band(_)) => {
            Err(Error::invalid("fusion model requires band selection `all`"))
        }
        (ModelSpec::Backbone(_), BandSelection::All) => {
            Err(Error::invalid("backbone model requires a single band selection"))
        }
    }
}

/// Trains one repetition: fresh parameters, the manifest's stratified
/// split for `rep`, seeded shuffling and augmentation, weighted cross
/// entropy with Adam updates per batch. Fully deterministic per seed.
pub fn train_one_rep(
    spec: &ModelSpec,
    selection: BandSelection,
    data: &LoadedDataset,
    rep: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    spec.validate()?;
    validate_selection(spec, &selection, data)?;
    if spec.input_size() != data.manifest.size {
        return Err(Error::invalid(format!(
            "model expects {0}x{0} inputs, dataset provides {1}x{1}",
            spec.input_size(),
            data.manifest.size
        )));
    }
    let split = data.manifest.split(rep)?.clone();
    let counts = data.manifest.class_counts;
    let weights = class_weights(counts.cement, counts.landcover, cfg.class_weights)?;

    let mut store = ParamStore::new();
    let model = Model::build(spec, &mut store, derive_seed(seed, &[TAG_INIT]))?;
    let mut adam = AdamState::new(cfg.adam);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale_epochs = 0usize;
    let mut best_val_loss = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        let mut order = split.train.clone();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_AUGMENT, epoch as u64]));

        let mut weighted_loss_sum = 0.0;
        let mut weight_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let draws: Option<Vec<AugmentDraw>> = if cfg.augment {
                Some(batch.iter().map(|_| sample_augment(&mut aug_rng)).collect())
            } else {
                None
            };
            let mut tape = Tape::new();
            let (inputs, targets) = assemble_batch(data, batch, &selection, draws.as_deref(), &mut tape)?;
            let logits = forward_logits(&model, &mut tape, &mut store, &inputs, Mode::Train)?;
            let loss = tape.weighted_cross_entropy(logits, &targets, weights)?;
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                let (node, op) = tape.first_non_finite().unwrap_or((loss, "weighted_cross_entropy"));
                return Err(Error::NonFinite { op, node });
            }
            let batch_weight: f64 = targets.iter().map(|&t| weights[t]).sum();
            weighted_loss_sum += loss_value * batch_weight;
            weight_sum += batch_weight;
            let ld = tape.data(logits);
            correct += targets.iter().enumerate().filter(|(i, &t)| argmax2(ld, *i) == t).count();

            tape.backward(loss)?;
            tape.write_param_grads(&mut store);
            adam.step(&mut store)?;
        }

        let (val_metrics, val_loss) =
            evaluate_split(&model, &mut store, data, &split.val, &selection, Some(weights), cfg.batch_size, 1)?;
        let record = EpochRecord {
            epoch,
            train_loss: weighted_loss_sum / weight_sum.max(f64::MIN_POSITIVE),
            train_accuracy: correct as f64 / split.train.len().max(1) as f64,
            val_loss: val_loss.unwrap_or(f64::NAN),
            val_accuracy: val_metrics.accuracy,
        };
        if cfg.best_val {
            let is_better = best.as_ref().map(|(acc, _)| record.val_accuracy > *acc).unwrap_or(true);
            if is_better {
                best = Some((record.val_accuracy, store.snapshot()));
            }
        }
        let improved = record.val_loss < best_val_loss - 1e-12;
        if improved {
            best_val_loss = record.val_loss;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        history.push(record);
        if let Some(patience) = cfg.early_stop_patience {
            if stale_epochs >= patience {
                break;
            }
        }
    }

    if let Some((_, snapshot)) = best {
        store.restore(&snapshot)?;
    }
    Ok(TrainOutcome {
        model,
        store,
        history,
        band: selection,
        rep,
        seed,
        class_weights: weights,
    })
}

/// Eval-mode metrics (and optionally the weighted loss) over a list of
/// sites. Batches are processed in site order; with `threads > 1` they
/// are distributed over workers, each with its own store clone, and the
/// per-batch results are reduced in batch order, so the outcome is
/// independent of the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    store: &mut ParamStore,
    data: &LoadedDataset,
    sites: &[usize],
    selection: &BandSelection,
    loss_weights: Option<[f64; 2]>,
    batch_size: usize,
    threads: usize,
) -> Result<(Metrics, Option<f64>)> {
    if sites.is_empty() {
        return Ok((Metrics::from_confusion([[0, 0], [0, 0]]), None));
    }
    let batches: Vec<&[usize]> = sites.chunks(batch_size.max(1)).collect();

    struct BatchResult {
        confusion: [[usize; 2]; 2],
        weighted_loss: f64,
        weight: f64,
    }

    let eval_batch = |batch: &[usize], store: &mut ParamStore| -> Result<BatchResult> {
        let mut tape = Tape::new();
        let (inputs, targets) = assemble_batch(data, batch, selection, None, &mut tape)?;
        let logits = forward_logits(model, &mut tape, store, &inputs, Mode::Eval)?;
        let mut confusion = [[0usize; 2]; 2];
        let ld = tape.data(logits);
        for (i, &t) in targets.iter().enumerate() {
            confusion[t][argmax2(ld, i)] += 1;
        }
        let (weighted_loss, weight) = match loss_weights {
            Some(w) => {
                let loss = tape.weighted_cross_entropy(logits, &targets, w)?;
                let bw: f64 = targets.iter().map(|&t| w[t]).sum();
                (tape.data(loss)[0] * bw, bw)
            }
            None => (0.0, 0.0),
        };
        Ok(BatchResult {
            confusion,
            weighted_loss,
            weight,
        })
    };

    let results: Vec<Result<BatchResult>> = if threads <= 1 {
        batches.iter().map(|b| eval_batch(b, store)).collect()
    } else {
        run_indexed(batches.len(), threads, |i| {
            let mut local = store.clone();
            eval_batch(batches[i], &mut local)
        })
    };

    let mut confusion = [[0usize; 2]; 2];
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for r in results {
        let r = r?;
        for t in 0..2 {
            for p in 0..2 {
                confusion[t][p] += r.confusion[t][p];
            }
        }
        loss_sum += r.weighted_loss;
        weight_sum += r.weight;
    }
    let loss = loss_weights.map(|_| loss_sum / weight_sum.max(f64::MIN_POSITIVE));
    Ok((Metrics::from_confusion(confusion), loss))
}

/// Convenience: evaluate a named manifest split of a trained outcome.
pub fn evaluate_outcome(
    outcome: &mut TrainOutcome,
    data: &LoadedDataset,
    which: SplitKind,
    batch_size: usize,
    threads: usize,
) -> Result<Metrics> {
    let split = data.manifest.split(outcome.rep)?.clone();
    let sites = match which {
        SplitKind::Train => &split.train,
        SplitKind::Val => &split.val,
        SplitKind::Test => &split.test,
    };
    let band = outcome.band;
    let (metrics, _) = evaluate_split(
        &outcome.model,
        &mut outcome.store,
        data,
        sites,
        &band,
        None,
        batch_size,
        threads,
    )?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<SplitKind> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}
