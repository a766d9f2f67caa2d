//! The pretrain → transfer → verify pipeline behind each subcommand.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fedxfer::bounds::{self, BoundReport, HistoryMeta, Theorem2Form};
use fedxfer::domains::{apply_shift, generate_gaussian_mixture, partition_dirichlet, partition_label_subset, save_csv};
use fedxfer::federation::{Algorithm, Federation, PretrainOutcome, RoundRecord};
use fedxfer::models::{self, init_weights};
use fedxfer::transfer::{self, AscentOptions, DiscrepancyEstimate, DiscrepancyKind};
use fedxfer::{Dataset, ModelSpec, PartitionPlan, WeightVector};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SchemeName, Seeds};
use crate::error::CliError;
use crate::model_file::{read_model, write_model};

type Result<T> = std::result::Result<T, CliError>;

/// Source data, its partition and the shifted target domain.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub source: Dataset,
    pub target: Dataset,
    pub plan: PartitionPlan,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let seeds = cfg.seeds();
        let d = &cfg.data;
        let source = generate_gaussian_mixture(d.num_classes, d.dim, d.samples_per_class, d.separation, seeds.data)?;
        let target = apply_shift(&source, &cfg.shift_spec())?;
        let p = &cfg.partition;
        let plan = match p.scheme {
            SchemeName::LabelSubset => {
                partition_label_subset(&source, p.clients, p.classes_per_client.unwrap_or(1), seeds.partition)?
            }
            SchemeName::Dirichlet => {
                partition_dirichlet(&source, p.clients, p.concentration.unwrap_or(1.0), seeds.partition)?
            }
        };
        Ok(Self {
            spec: cfg.model_spec()?,
            source,
            target,
            plan,
        })
    }

    /// Deterministic `(train, test)` split of the target domain.
    pub fn target_split(&self, cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
        Ok(self.target.split(cfg.data.target_test_fraction, cfg.seeds().split)?)
    }

    pub fn client_data(&self) -> Result<Vec<Dataset>> {
        let mut out = Vec::new();
        for k in 0..self.plan.num_clients() {
            if let Some(d) = self.plan.client_data(&self.source, k)? {
                out.push(d);
            }
        }
        Ok(out)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

fn core_io(path: &Path) -> impl Fn(fedxfer::Error) -> CliError + '_ {
    move |e| match e {
        fedxfer::Error::Io(io) => CliError::io(path, io),
        e => CliError::Core(e),
    }
}

/// Writes `source.csv`, `target.csv` and `partition.json`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let prep = Prepared::new(cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let source = out.join("source.csv");
    let target = out.join("target.csv");
    let partition = out.join("partition.json");
    save_csv(&prep.source, &source).map_err(core_io(&source))?;
    save_csv(&prep.target, &target).map_err(core_io(&target))?;
    write_json(&partition, &prep.plan)?;
    Ok(vec![source, target, partition])
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub round: usize,
    /// Source loss after the round's aggregation.
    pub source_loss: f64,
    pub avg_jacobian_norm: f64,
    pub jacobian_variance: f64,
    pub guide_norm: f64,
    pub learning_rate: f64,
    pub comm_scalars: u64,
    pub comm_vector_entries: u64,
}

impl From<&RoundRecord> for MetricsLine {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            source_loss: r.post_loss,
            avg_jacobian_norm: r.stats.avg_norm,
            jacobian_variance: r.stats.variance,
            guide_norm: r.guide_norm,
            learning_rate: r.learning_rate,
            comm_scalars: r.comm.scalars,
            comm_vector_entries: r.comm.vector_entries,
        }
    }
}

#[derive(Debug)]
pub struct PretrainRun {
    pub meta: HistoryMeta,
    pub outcome: PretrainOutcome,
}

pub fn run_pretraining(cfg: &ExperimentConfig, prep: &Prepared, seeds: Seeds, threads: usize) -> Result<PretrainRun> {
    let mut fed = Federation::new(prep.spec.clone(), &prep.source, &prep.plan)?.with_threads(threads)?;
    let smoothness = fed.smoothness()?;
    let config = cfg.round_config(smoothness.alpha)?;
    let initial = init_weights(&prep.spec, seeds.init, cfg.model.init_scale);
    let outcome = fed.run_pretraining(initial, &config, cfg.rounds, cfg.patience, seeds.federation)?;
    Ok(PretrainRun {
        meta: HistoryMeta {
            spec: prep.spec.clone(),
            config,
            num_clients: fed.num_clients(),
            smoothness,
            initial_loss: outcome.initial_loss,
            seed: seeds.federation,
        },
        outcome,
    })
}

pub fn write_metrics<W: Write>(mut out: W, history: &[RoundRecord]) -> std::io::Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, &MetricsLine::from(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `metrics.jsonl`, `history.jsonl` and `model.txt`.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<PretrainRun> {
    let prep = Prepared::new(cfg)?;
    let run = run_pretraining(cfg, &prep, cfg.seeds(), threads)?;
    let metrics = out.join("metrics.jsonl");
    let mut w = create(&metrics)?;
    write_metrics(&mut w, &run.outcome.history).map_err(|e| CliError::io(&metrics, e))?;
    finish(w, &metrics)?;
    let history = out.join("history.jsonl");
    let mut w = create(&history)?;
    bounds::write_history(&mut w, &run.meta, &run.outcome.history).map_err(core_io(&history))?;
    finish(w, &history)?;
    let model = out.join("model.txt");
    let mut w = create(&model)?;
    write_model(&mut w, &prep.spec, &run.outcome.weights).map_err(core_io(&model))?;
    finish(w, &model)?;
    Ok(run)
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, WeightVector)> {
    read_model(open(path)?).map_err(|e| CliError::input(path, e))
}

/// Contents of `transfer.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub target_loss: f64,
    pub target_accuracy: Option<f64>,
    pub epochs_used: usize,
    pub converged: bool,
    pub frozen_split_index: usize,
    /// The frozen block is bitwise identical before and after finetuning.
    pub frozen_block_unchanged: bool,
    /// The pretrained model on the full source data.
    pub source_loss: f64,
    pub source_accuracy: Option<f64>,
}

pub fn run_transfer(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    w: &WeightVector,
) -> Result<(WeightVector, TransferReport)> {
    let spec = &prep.spec;
    let (train, test) = prep.target_split(cfg)?;
    let (tuned, outcome) = transfer::finetune_classifier(spec, w, &train, cfg.transfer.lr, cfg.transfer.epochs)?;
    let result = transfer::evaluate_target(spec, &tuned, &test)?;
    let unchanged = tuned
        .feature_block(spec)
        .iter()
        .zip(w.feature_block(spec))
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let report = TransferReport {
        target_loss: result.target_loss,
        target_accuracy: result.target_accuracy,
        epochs_used: outcome.epochs_used,
        converged: outcome.converged,
        frozen_split_index: spec.split_index,
        frozen_block_unchanged: unchanged,
        source_loss: models::loss(spec, w, &prep.source)?,
        source_accuracy: if spec.is_classifier() {
            Some(models::accuracy(spec, w, &prep.source)?)
        } else {
            None
        },
    };
    Ok((tuned, report))
}

fn check_spec(cfg_spec: &ModelSpec, file_spec: &ModelSpec, path: &Path) -> Result<()> {
    if cfg_spec != file_spec {
        return Err(CliError::Config(format!(
            "{}: model spec does not match the config's model section",
            path.display()
        )));
    }
    Ok(())
}

/// Finetunes the model in `model_path` on the target domain; writes
/// `transfer.json`.
pub fn transfer(cfg: &ExperimentConfig, model_path: &Path, out: &Path) -> Result<TransferReport> {
    let prep = Prepared::new(cfg)?;
    let (spec, w) = load_model(model_path)?;
    check_spec(&prep.spec, &spec, model_path)?;
    let (_, report) = run_transfer(cfg, &prep, &w)?;
    write_json(&out.join("transfer.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub bound_id: String,
    pub entries: usize,
    pub violations: usize,
    pub min_slack: Option<f64>,
    pub certified: bool,
    pub tolerance: f64,
    pub notes: Vec<String>,
}

impl From<&BoundReport> for BoundSummary {
    fn from(r: &BoundReport) -> Self {
        Self {
            bound_id: r.bound_id.name().to_string(),
            entries: r.entries.len(),
            violations: r.violations(),
            min_slack: r.min_slack(),
            certified: r.certified,
            tolerance: r.tolerance,
            notes: r.notes.clone(),
        }
    }
}

fn zero_discrepancy(kind: DiscrepancyKind) -> DiscrepancyEstimate {
    DiscrepancyEstimate {
        value: 0.0,
        kind,
        restarts: 0,
        certified: false,
        budget_exhausted: false,
    }
}

/// Bound reports for a recorded history. Target-side checks need the final
/// model and run the discrepancy estimators.
pub fn bound_reports(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    meta: &HistoryMeta,
    history: &[RoundRecord],
    model: Option<&WeightVector>,
) -> Result<Vec<BoundReport>> {
    let alpha = meta.smoothness;
    let mut reports = Vec::new();
    if cfg.bounds.round_ub {
        reports.push(bounds::verify_round_bound(meta, history, alpha)?);
    }
    if cfg.bounds.telescoped {
        reports.push(bounds::verify_telescoped_source(
            meta,
            history,
            alpha,
            meta.initial_loss,
        )?);
    }
    if !cfg.bounds.target {
        return Ok(reports);
    }
    let w = model.ok_or_else(|| CliError::Config("target-side bound checks need the final model".into()))?;
    let spec = &meta.spec;
    let b = &cfg.bounds;
    let (train, _) = prep.target_split(cfg)?;
    let clients = prep.client_data()?;
    let (_, target) = run_transfer(cfg, prep, w)?;
    let init = init_weights(spec, cfg.seeds().init, cfg.model.init_scale);
    let features = transfer::feature_samples(spec, &[init, w.clone()], 8, cfg.model.init_scale.max(0.1), cfg.seed);
    let gf = transfer::estimate_federated_gf_discrepancy(spec, &clients, &train, &features, b.head_budget)?;
    reports.push(bounds::verify_lemma1_full(
        meta,
        history,
        alpha,
        meta.initial_loss,
        &gf,
        target.target_loss,
    )?);
    if matches!(
        meta.config.lr_schedule,
        fedxfer::federation::LrSchedule::OptimalFromStats { .. }
    ) {
        for form in [Theorem2Form::Appendix, Theorem2Form::Maintext] {
            reports.push(bounds::verify_theorem2(
                meta,
                history,
                alpha,
                meta.initial_loss,
                &gf,
                target.target_loss,
                form,
            )?);
        }
    }
    let zeros = vec![0.0; spec.total_dim()];
    let mut optima = Vec::with_capacity(clients.len());
    for c in &clients {
        optima.push(transfer::fit_block(spec, &zeros, c, 0, b.head_budget)?);
    }
    let opts = AscentOptions {
        restarts: b.restarts,
        ascent_steps: b.ascent_steps,
        radius: b.radius,
        seed: cfg.seed,
    };
    let cross = if clients.len() >= 2 {
        transfer::estimate_cross_client_divergence(spec, &clients, &opts)?
    } else {
        zero_discrepancy(DiscrepancyKind::CrossClient)
    };
    let best_target = transfer::fit_block(spec, &zeros, &train, 0, b.head_budget)?;
    reports.push(bounds::verify_theorem1(&optima, &cross, &gf, best_target.loss)?);
    Ok(reports)
}

/// Checks the bounds on a recorded history; writes one JSONL file per bound
/// under `out/bounds/` and a `bounds_summary.json`.
pub fn verify_bounds(
    cfg: &ExperimentConfig,
    history_path: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<Vec<BoundSummary>> {
    let (meta, history) = bounds::read_history(open(history_path)?).map_err(|e| CliError::input(history_path, e))?;
    let prep = Prepared::new(cfg)?;
    if prep.spec != meta.spec {
        return Err(CliError::Config(format!(
            "{}: model spec does not match the config's model section",
            history_path.display()
        )));
    }
    let model = if cfg.bounds.target {
        let (spec, w) = load_model(model_path)?;
        check_spec(&prep.spec, &spec, model_path)?;
        Some(w)
    } else {
        None
    };
    let reports = bound_reports(cfg, &prep, &meta, &history, model.as_ref())?;
    let dir = out.join("bounds");
    let mut summaries = Vec::new();
    for r in &reports {
        let path = dir.join(format!("{}.jsonl", r.bound_id.name()));
        let mut w = create(&path)?;
        r.write_jsonl(&mut w).map_err(core_io(&path))?;
        finish(w, &path)?;
        summaries.push(BoundSummary::from(r));
    }
    write_json(&out.join("bounds_summary.json"), &summaries)?;
    Ok(summaries)
}

/// One (algorithm, seed) cell of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: usize,
    pub target_loss: f64,
    pub target_accuracy: Option<f64>,
    /// Means over the configured round window.
    pub mean_jacobian_variance: f64,
    pub mean_avg_jacobian_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub algorithm: String,
    pub runs: usize,
    pub target_accuracy_mean: Option<f64>,
    pub target_accuracy_std: Option<f64>,
    pub jacobian_variance_mean: f64,
    pub jacobian_variance_std: f64,
    pub avg_jacobian_norm_mean: f64,
    pub avg_jacobian_norm_std: f64,
}

fn window_mean(history: &[RoundRecord], [lo, hi]: [usize; 2], f: impl Fn(&RoundRecord) -> f64) -> f64 {
    let vals: Vec<f64> = history.iter().filter(|r| (lo..=hi).contains(&r.round)).map(f).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn compare_cell(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    algorithm: Algorithm,
    seed: u64,
    threads: usize,
) -> Result<CompareRun> {
    let mut cfg = cfg.clone();
    cfg.training.algorithm = algorithm;
    let run = run_pretraining(&cfg, prep, Seeds::new(cfg.seed, seed), threads)?;
    let (_, t) = run_transfer(&cfg, prep, &run.outcome.weights)?;
    let h = &run.outcome.history;
    Ok(CompareRun {
        algorithm: algorithm.name().to_string(),
        seed,
        rounds: h.len(),
        target_loss: t.target_loss,
        target_accuracy: t.target_accuracy,
        mean_jacobian_variance: window_mean(h, cfg.compare.window, |r| r.stats.variance),
        mean_avg_jacobian_norm: window_mean(h, cfg.compare.window, |r| r.stats.avg_norm),
    })
}

pub fn summarize(algorithm: Algorithm, runs: &[CompareRun]) -> CompareSummary {
    let acc: Option<Vec<f64>> = runs.iter().map(|r| r.target_accuracy).collect();
    let acc = acc.filter(|a| !a.is_empty()).map(|a| mean_std(&a));
    let var = mean_std(&runs.iter().map(|r| r.mean_jacobian_variance).collect::<Vec<_>>());
    let norm = mean_std(&runs.iter().map(|r| r.mean_avg_jacobian_norm).collect::<Vec<_>>());
    CompareSummary {
        algorithm: algorithm.name().to_string(),
        runs: runs.len(),
        target_accuracy_mean: acc.map(|a| a.0),
        target_accuracy_std: acc.map(|a| a.1),
        jacobian_variance_mean: var.0,
        jacobian_variance_std: var.1,
        avg_jacobian_norm_mean: norm.0,
        avg_jacobian_norm_std: norm.1,
    }
}

/// Runs every configured algorithm over the seed list on shared data and
/// partition; writes `runs.csv` and `summary.csv`.
pub fn compare(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    threads: usize,
) -> Result<(Vec<CompareSummary>, Vec<CompareRun>)> {
    let prep = Prepared::new(cfg)?;
    let mut all_runs = Vec::new();
    let mut summaries = Vec::new();
    for &alg in &cfg.compare.algorithms {
        let runs = seeds
            .iter()
            .map(|&s| compare_cell(cfg, &prep, alg, s, threads))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(summarize(alg, &runs));
        all_runs.extend(runs);
    }
    write_csv(&out.join("runs.csv"), &all_runs)?;
    write_csv(&out.join("summary.csv"), &summaries)?;
    Ok((summaries, all_runs))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let w = create(path)?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(|e| CliError::io(path, e.into()))?;
    }
    csv.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
