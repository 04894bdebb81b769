use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tnet::dgp::{generate, GeneratedDataset};
use tnet::estimation::{bootstrap_ci, estimate_effect, BootstrapConfig, EffectEstimate, EstimandSpec};
use tnet::eval::{
    compare_on_units, compute_metrics, convergence_sweep, dr_stress, sweep_series, within_out_split, write_rows,
    write_series, MetricReport, Split,
};
use tnet::training::{fit, HistoryRow, LossWeights, TrainOptions, TrainStatus};
use tnet::{NetworkDataset, TNetModel, TnetError};

use crate::config::{RunConfig, ECHO_FILE};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METRICS_SERIES_FILE: &str = "metrics_series.csv";
pub const DR_FILE: &str = "dr_check.csv";
pub const DR_RECORDS_FILE: &str = "dr_check.jsonl";
pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const SWEEP_SERIES_FILE: &str = "sweep_series.csv";

/// Training and held-out unit indices.
type UnitSplit = (Vec<usize>, Vec<usize>);

#[derive(Debug, Parser)]
#[command(name = "tnet", version, about = "Targeted estimation of network causal effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for bootstrap replicates, corruption arms and sweep runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Exit with status 5 when any estimate carries an overlap warning.
    #[arg(long, global = true)]
    pub fail_on_overlap: bool,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset with its ground-truth sidecar.
    Generate(ConfigArg),
    /// Train a model and write its checkpoint and loss history.
    Train(ConfigArg),
    /// Estimate effects from a checkpoint, with bootstrap intervals if configured.
    Estimate(ConfigArg),
    /// Score a checkpoint against the ground truth.
    Evaluate(ConfigArg),
    /// Train under the four corruption arms and compare both estimators.
    DrCheck(ConfigArg),
    /// Estimation error across sample sizes.
    Sweep(ConfigArg),
    /// Seed-bootstrap intervals, retraining from the dataset.
    Bootstrap(ConfigArg),
}

impl Command {
    fn config_path(&self) -> &Path {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::Estimate(a)
            | Command::Evaluate(a)
            | Command::DrCheck(a)
            | Command::Sweep(a)
            | Command::Bootstrap(a) => &a.config,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Estimate(_) => "estimate",
            Command::Evaluate(_) => "evaluate",
            Command::DrCheck(_) => "dr-check",
            Command::Sweep(_) => "sweep",
            Command::Bootstrap(_) => "bootstrap",
        }
    }
}

/// Shared context of one invocation.
struct Run<'a> {
    cli: &'a Cli,
    config: RunConfig,
    hash: String,
    out: PathBuf,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.workers == 0 {
        return Err(TnetError::config("workers", "must be positive").into());
    }
    let config = RunConfig::load(cli.command.config_path())?;
    config.validate()?;
    let hash = config.hash();
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_text(&out.join(ECHO_FILE), &(config.echo() + "\n"))?;
    let ctx = Run { cli, config, hash, out };
    log::info!("{} with config hash {}", cli.command.name(), ctx.hash);
    match &cli.command {
        Command::Generate(_) => ctx.generate(),
        Command::Train(_) => ctx.train(),
        Command::Estimate(_) => ctx.estimate(),
        Command::Evaluate(_) => ctx.evaluate(),
        Command::DrCheck(_) => ctx.dr_check(),
        Command::Sweep(_) => ctx.sweep(),
        Command::Bootstrap(_) => ctx.bootstrap(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        text += &serde_json::to_string(r).map_err(|e| TnetError::Serde(e.to_string()))?;
        text.push('\n');
    }
    write_text(path, &text)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    status: TrainStatus,
    iterations_run: usize,
    best_iteration: Option<usize>,
    lr_halvings: usize,
    weights: LossWeights,
    fit_units: usize,
    validation_units: usize,
    final_row: Option<&'a HistoryRow>,
}

#[derive(Serialize)]
struct EstimateRecord<'a> {
    command: &'a str,
    config_hash: &'a str,
    n: usize,
    seed: u64,
    #[serde(flatten)]
    estimate: &'a EffectEstimate,
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    config_hash: &'a str,
    method: tnet::Method,
    #[serde(flatten)]
    report: &'a MetricReport,
}

#[derive(Serialize)]
struct MetricSeriesRow {
    split: Split,
    method: tnet::Method,
    estimand: String,
    mae_average: f64,
    pehe_individual: Option<f64>,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

impl Run<'_> {
    fn dataset_dir(&self) -> Result<&Path, CliError> {
        RunConfig::require(&self.config.dataset_dir, "dataset_dir").map(PathBuf::as_path)
    }

    fn load_dataset(&self) -> Result<NetworkDataset, CliError> {
        Ok(NetworkDataset::import(self.dataset_dir()?)?)
    }

    fn load_model(&self, data: &NetworkDataset) -> Result<TNetModel, CliError> {
        let path = RunConfig::require(&self.config.checkpoint, "checkpoint")?;
        let (model, trained_with) = TNetModel::load(path)?;
        if model.covariate_dim != data.covariate_dim() {
            return Err(TnetError::config(
                "checkpoint",
                format!(
                    "model expects {} covariates, dataset has {}",
                    model.covariate_dim,
                    data.covariate_dim()
                ),
            )
            .into());
        }
        log::info!("loaded checkpoint trained under config {trained_with}");
        Ok(model)
    }

    fn specs(&self, data: &NetworkDataset) -> Result<Vec<EstimandSpec>, CliError> {
        if self.config.estimands.is_empty() {
            return Err(TnetError::config("estimands", "at least one estimand is required").into());
        }
        let z_bar = data.mean_exposure();
        Ok(self
            .config
            .estimands
            .iter()
            .map(|e| e.resolve(z_bar))
            .collect::<tnet::Result<_>>()?)
    }

    fn train_units(&self, n: usize) -> Result<Option<UnitSplit>, CliError> {
        match &self.config.split {
            None => Ok(None),
            Some(s) => Ok(Some(within_out_split(
                n,
                s.train_fraction,
                s.held_out_fraction,
                s.seed,
            )?)),
        }
    }

    fn check_overlap(&self, estimates: &[EffectEstimate]) -> Result<(), CliError> {
        for e in estimates {
            for w in &e.warnings {
                log::warn!("{} ({:?}): {w}", e.spec.kind.name(), e.method);
            }
        }
        if self.cli.fail_on_overlap {
            if let Some(e) = estimates
                .iter()
                .find(|e| e.warnings.iter().any(|w| w.contains("overlap")))
            {
                return Err(CliError::Overlap(format!(
                    "{} estimate: {}",
                    e.spec.kind.name(),
                    e.warnings.join("; ")
                )));
            }
        }
        Ok(())
    }

    fn generate(&self) -> Result<(), CliError> {
        let spec = RunConfig::require(&self.config.dgp, "dgp")?;
        let graph = RunConfig::require(&self.config.graph, "graph")?;
        let n = *RunConfig::require(&self.config.n, "n")?;
        let graph_seed = self.config.graph_seed.unwrap_or(spec.seed);
        let generated = generate(graph, n, graph_seed, spec)?;
        generated.export(&self.out)?;
        log::info!(
            "generated {n} units, {} treated, mean exposure {:.4}",
            generated.dataset.treatments().iter().filter(|&&t| t == 1).count(),
            generated.dataset.mean_exposure()
        );
        Ok(())
    }

    fn train(&self) -> Result<(), CliError> {
        let data = self.load_dataset()?;
        let split = self.train_units(data.n())?;
        let options = TrainOptions {
            train_units: split.map(|(train, _)| train),
            ..TrainOptions::default()
        };
        let out = fit(&data, &self.config.model, &self.config.train, options)?;
        out.model.save(&self.out.join(CHECKPOINT_FILE), &self.hash)?;
        write_rows(&self.out.join(HISTORY_FILE), &out.history)?;
        let summary = TrainSummary {
            config_hash: &self.hash,
            status: out.status,
            iterations_run: out.history.len(),
            best_iteration: out.best_iteration,
            lr_halvings: out.lr_halvings,
            weights: out.weights,
            fit_units: out.fit_units.len(),
            validation_units: out.validation_units.len(),
            final_row: out.history.last(),
        };
        let text = serde_json::to_string_pretty(&summary).map_err(|e| TnetError::Serde(e.to_string()))?;
        write_text(&self.out.join(TRAIN_SUMMARY_FILE), &(text + "\n"))?;
        if out.diverged() {
            return Err(TnetError::Divergence(format!(
                "gave up after {} learning-rate halvings; the last good checkpoint was written",
                out.lr_halvings
            ))
            .into());
        }
        Ok(())
    }

    fn write_estimates(&self, command: &str, n: usize, estimates: &[EffectEstimate]) -> Result<(), CliError> {
        let records: Vec<EstimateRecord> = estimates
            .iter()
            .map(|estimate| EstimateRecord {
                command,
                config_hash: &self.hash,
                n,
                seed: self.config.train.seed,
                estimate,
            })
            .collect();
        write_jsonl(&self.out.join(RESULTS_FILE), &records)?;
        self.check_overlap(estimates)
    }

    fn bootstrap_estimates(
        &self,
        data: &NetworkDataset,
        boot: &BootstrapConfig,
    ) -> Result<Vec<EffectEstimate>, CliError> {
        let boot = BootstrapConfig {
            workers: self.cli.workers,
            ..boot.clone()
        };
        let split = self.train_units(data.n())?;
        let units = split.as_ref().map(|(train, _)| train.as_slice());
        let mut estimates = Vec::new();
        for spec in self.specs(data)? {
            for &method in &self.config.methods {
                estimates.push(bootstrap_ci(
                    data,
                    &spec,
                    method,
                    &self.config.model,
                    &self.config.train,
                    &boot,
                    units,
                )?);
            }
        }
        Ok(estimates)
    }

    fn estimate(&self) -> Result<(), CliError> {
        let data = self.load_dataset()?;
        let estimates = match &self.config.bootstrap {
            Some(boot) => self.bootstrap_estimates(&data, boot)?,
            None => {
                let model = self.load_model(&data)?;
                let mut v = Vec::new();
                for spec in self.specs(&data)? {
                    for &method in &self.config.methods {
                        v.push(estimate_effect(&model, &data, &spec, method)?);
                    }
                }
                v
            }
        };
        self.write_estimates("estimate", data.n(), &estimates)
    }

    fn bootstrap(&self) -> Result<(), CliError> {
        let data = self.load_dataset()?;
        let boot = self.config.bootstrap.clone().unwrap_or_default();
        let estimates = self.bootstrap_estimates(&data, &boot)?;
        self.write_estimates("bootstrap", data.n(), &estimates)
    }

    fn evaluate(&self) -> Result<(), CliError> {
        let generated = GeneratedDataset::import(self.dataset_dir()?)?;
        let data = &generated.dataset;
        let model = self.load_model(data)?;
        let specs = self.specs(data)?;
        let splits: Vec<(Split, Vec<usize>)> = match self.train_units(data.n())? {
            None => vec![(Split::WithinSample, (0..data.n()).collect())],
            Some((train, held)) => {
                let mut v = vec![(Split::WithinSample, train)];
                if !held.is_empty() {
                    v.push((Split::OutOfSample, held));
                }
                v
            }
        };
        let mut reports = Vec::new();
        for &method in &self.config.methods {
            for (split, units) in &splits {
                let comparisons = specs
                    .iter()
                    .map(|s| compare_on_units(&model, data, &generated.truth, s, method, units))
                    .collect::<tnet::Result<Vec<_>>>()?;
                reports.push((method, compute_metrics(&comparisons, *split)?));
            }
        }
        let records: Vec<MetricRecord> = reports
            .iter()
            .map(|(method, report)| MetricRecord {
                config_hash: &self.hash,
                method: *method,
                report,
            })
            .collect();
        write_jsonl(&self.out.join(METRICS_FILE), &records)?;
        let series: Vec<MetricSeriesRow> = reports
            .iter()
            .flat_map(|(method, report)| {
                report.entries.iter().map(move |e| MetricSeriesRow {
                    split: report.split,
                    method: *method,
                    estimand: e.estimand.clone(),
                    mae_average: e.mae_average,
                    pehe_individual: e.pehe_individual,
                })
            })
            .collect();
        write_rows(&self.out.join(METRICS_SERIES_FILE), &series)?;
        Ok(())
    }

    fn dr_check(&self) -> Result<(), CliError> {
        let spec = RunConfig::require(&self.config.dgp, "dgp")?;
        let graph = RunConfig::require(&self.config.graph, "graph")?;
        let n = *RunConfig::require(&self.config.n, "n")?;
        let dr = RunConfig::require(&self.config.dr, "dr")?;
        let generated = generate(graph, n, self.config.graph_seed.unwrap_or(spec.seed), spec)?;
        let estimand = dr.estimand.resolve(generated.dataset.mean_exposure())?;
        let rows = dr_stress(
            &generated,
            dr.mode,
            &estimand,
            &self.config.model,
            &self.config.train,
            self.cli.workers,
        )?;
        write_rows(&self.out.join(DR_FILE), &rows)?;
        let tagged: Vec<Tagged<_>> = rows
            .iter()
            .map(|r| Tagged {
                config_hash: &self.hash,
                body: r,
            })
            .collect();
        write_jsonl(&self.out.join(DR_RECORDS_FILE), &tagged)
    }

    fn sweep(&self) -> Result<(), CliError> {
        let sweep = RunConfig::require(&self.config.sweep, "sweep")?;
        let report = convergence_sweep(sweep, &self.config.model, &self.config.train, self.cli.workers)?;
        write_series(&self.out.join(SWEEP_SERIES_FILE), &sweep_series(&report))?;
        let tagged: Vec<Tagged<_>> = report
            .rows
            .iter()
            .map(|r| Tagged {
                config_hash: &self.hash,
                body: r,
            })
            .collect();
        write_jsonl(&self.out.join(SWEEP_FILE), &tagged)?;
        log::info!(
            "sweep slope {:?}, strictly decreasing {}",
            report.slope,
            report.strictly_decreasing
        );
        Ok(())
    }
}
