use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use afmvc::bound::{sweep as bound_sweep, write_bound_report, SweepRow};
use afmvc::cluster::{read_assignments_csv, write_assignments_csv};
use afmvc::data::{load_dataset, write_dataset, DatasetManifest, MultiViewDataset};
use afmvc::metrics::{balance, MetricsReport};
use afmvc::synth::{biased_testbed, two_view_blobs, BiasedSpec, BlobSpec};
use afmvc::trainer::{write_trace_csv, TrainConfig, TrainedModel, Variant};
use serde::{Deserialize, Serialize};

use crate::{BoundArgs, CliError, EvaluateArgs, RunArgs, SweepArgs, SynthArgs, SynthKind};

pub const DEFAULT_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::output(path, e))
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, MultiViewDataset), CliError> {
    let manifest = DatasetManifest::from_path(path).map_err(CliError::config)?;
    let data = load_dataset(&manifest).map_err(CliError::config)?;
    Ok((manifest, data))
}

/// Defaults, then the config file, then flags; `clusters` comes from the manifest.
pub fn resolve_config(args: &RunArgs, k: usize) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut config);
    config.clusters = k;
    config.validate().map_err(CliError::config)?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub trace: PathBuf,
    pub assignments: PathBuf,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub bal: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub acc: Option<Stat>,
    pub nmi: Option<Stat>,
    pub bal: Stat,
}

impl Aggregate {
    fn from_reports(dataset: &str, seeds: Vec<u64>, reports: &[MetricsReport]) -> Self {
        let collect = |f: fn(&MetricsReport) -> Option<f64>| -> Option<Stat> {
            reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
        };
        Self {
            dataset: dataset.to_string(),
            seeds,
            acc: collect(|r| r.acc),
            nmi: collect(|r| r.nmi),
            bal: Stat::of(&reports.iter().map(|r| r.bal).collect::<Vec<_>>()),
        }
    }

    fn row(&self, label: &str) -> String {
        let fmt = |s: Option<Stat>| s.map_or_else(|| "-".to_string(), |s| format!("{:.3}±{:.3}", s.mean, s.std));
        format!(
            "{label:<8} ACC {:>12}  NMI {:>12}  BAL {:>12}",
            fmt(self.acc),
            fmt(self.nmi),
            fmt(Some(self.bal))
        )
    }
}

fn fit(
    data: &MultiViewDataset,
    config: &TrainConfig,
    variant: Variant,
) -> Result<(TrainedModel, MetricsReport, f64), CliError> {
    let start = Instant::now();
    let model = afmvc::trainer::ablate(data, config, variant).map_err(CliError::Training)?;
    let report = model.metrics(data).map_err(CliError::Training)?;
    Ok((model, report, start.elapsed().as_secs_f64()))
}

/// `train`: R runs, per-seed `results.json`, `trace.csv` and
/// `assignments.csv`, plus `aggregate.json`.
pub fn train(args: &RunArgs, out: &Path) -> Result<Aggregate, CliError> {
    let (manifest, data) = load_manifest(&args.manifest)?;
    let base = resolve_config(args, manifest.k)?;
    create_dir(out)?;
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for r in 0..args.repeats {
        let config = TrainConfig {
            seed: base.seed + r,
            ..base.clone()
        };
        let (model, report, seconds) = fit(&data, &config, Variant::D)?;
        let dir = out.join(format!("seed-{}", config.seed));
        create_dir(&dir)?;
        let trace = dir.join("trace.csv");
        write_trace_csv(&trace, &model.trace).map_err(|e| CliError::output(&trace, e))?;
        let assignments = dir.join("assignments.csv");
        write_assignments_csv(&assignments, &model.assignments).map_err(|e| CliError::output(&assignments, e))?;
        let result = RunResult {
            dataset: data.name.clone(),
            seed: config.seed,
            config: config.clone(),
            trace: PathBuf::from("trace.csv"),
            assignments: PathBuf::from("assignments.csv"),
            acc: report.acc,
            nmi: report.nmi,
            bal: report.bal,
            wall_clock_seconds: seconds,
        };
        write_json(&dir.join("results.json"), &result)?;
        println!("{}", report.table_row(&format!("seed {}", config.seed)));
        seeds.push(config.seed);
        reports.push(report);
    }
    let aggregate = Aggregate::from_reports(&data.name, seeds, &reports);
    write_json(&out.join("aggregate.json"), &aggregate)?;
    println!("{}", aggregate.row("mean"));
    Ok(aggregate)
}

/// `evaluate`: metrics of an existing assignment file.
pub fn evaluate(args: &EvaluateArgs, out: &Path) -> Result<MetricsReport, CliError> {
    let (_, data) = load_manifest(&args.manifest)?;
    let labels = read_assignments_csv(&args.assignments).map_err(CliError::config)?;
    if labels.len() != data.n_samples() {
        return Err(CliError::Config(format!(
            "{} assignments for {} instances",
            labels.len(),
            data.n_samples()
        )));
    }
    let report = MetricsReport::compute(&labels, data.labels.as_deref(), &data.sensitive).map_err(CliError::config)?;
    create_dir(out)?;
    write_json(&out.join("evaluation.json"), &report)?;
    println!("{}", report.table_row(&data.name));
    Ok(report)
}

pub const ABLATION_HEADER: [&str; 7] = ["variant", "ACC", "NMI", "BAL", "ACC_std", "NMI_std", "BAL_std"];

/// `ablate`: variants A–D with shared seeds; writes `ablation.csv`.
pub fn ablate(args: &RunArgs, out: &Path) -> Result<Vec<(Variant, Aggregate)>, CliError> {
    let (manifest, data) = load_manifest(&args.manifest)?;
    let base = resolve_config(args, manifest.k)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut reports = Vec::new();
        let mut seeds = Vec::new();
        for r in 0..args.repeats {
            let config = TrainConfig {
                seed: base.seed + r,
                ..base.clone()
            };
            reports.push(fit(&data, &config, variant)?.1);
            seeds.push(config.seed);
        }
        let aggregate = Aggregate::from_reports(&data.name, seeds, &reports);
        println!("{}", aggregate.row(variant.label()));
        rows.push((variant, aggregate));
    }
    let path = out.join("ablation.csv");
    write_ablation_csv(&path, &rows).map_err(|e| CliError::output(&path, e))?;
    Ok(rows)
}

fn write_ablation_csv(path: &Path, rows: &[(Variant, Aggregate)]) -> std::io::Result<()> {
    let mut text = String::from("# loss components per variant: L_R,L_F,L_C\n");
    for (variant, _) in rows {
        let (r, f, c) = variant.components();
        let mark = |on: bool| if on { "✓" } else { "" };
        text.push_str(&format!("# {},{},{},{}\n", variant.label(), mark(r), mark(f), mark(c)));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(ABLATION_HEADER)?;
    let cell = |s: Option<Stat>, f: fn(Stat) -> f64| s.map_or_else(String::new, |s| f(s).to_string());
    for (variant, a) in rows {
        writer.write_record([
            variant.label().to_string(),
            cell(a.acc, |s| s.mean),
            cell(a.nmi, |s| s.mean),
            a.bal.mean.to_string(),
            cell(a.acc, |s| s.std),
            cell(a.nmi, |s| s.std),
            a.bal.std.to_string(),
        ])?;
    }
    text.push_str(&String::from_utf8(writer.into_inner().map_err(|e| e.into_error())?).expect("utf-8"));
    fs::write(path, text)
}

/// Variant with its ACC, NMI and BAL means.
pub type AblationRow = (Variant, Option<f64>, Option<f64>, f64);

/// Reads `ablation.csv` back.
pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(CliError::config)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(CliError::config)?;
        let num = |i: usize| record.get(i).filter(|s| !s.is_empty()).map(|s| s.parse::<f64>());
        let variant = record.get(0).unwrap_or_default().parse::<Variant>().map_err(CliError::config)?;
        let acc = num(1).transpose().map_err(CliError::config)?;
        let nmi = num(2).transpose().map_err(CliError::config)?;
        let bal = num(3)
            .ok_or_else(|| CliError::Config("missing BAL".into()))?
            .map_err(CliError::config)?;
        rows.push((variant, acc, nmi, bal));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda_c_grid: Vec<f64>,
    pub lambda_f_grid: Vec<f64>,
    /// `[i][j]` is the cell for `lambda_c_grid[i]`, `lambda_f_grid[j]`.
    pub acc: Option<Vec<Vec<f64>>>,
    pub nmi: Option<Vec<Vec<f64>>>,
    pub bal: Vec<Vec<f64>>,
    /// Population variance of the BAL cells.
    pub bal_variance: f64,
}

/// `sweep`: λ_C × λ_F grid; writes `sweep_{acc,nmi,bal}.csv` and `sweep_summary.json`.
pub fn sweep(args: &SweepArgs, out: &Path) -> Result<SweepSummary, CliError> {
    let (manifest, data) = load_manifest(&args.run.manifest)?;
    let base = resolve_config(&args.run, manifest.k)?;
    let grid = |g: &[f64]| if g.is_empty() { DEFAULT_GRID.to_vec() } else { g.to_vec() };
    let (cs, fs_) = (grid(&args.lambda_c_grid), grid(&args.lambda_f_grid));
    create_dir(out)?;
    let mut acc = vec![vec![0.0; fs_.len()]; cs.len()];
    let mut nmi = acc.clone();
    let mut bal = acc.clone();
    let mut has_truth = true;
    for (i, &lc) in cs.iter().enumerate() {
        for (j, &lf) in fs_.iter().enumerate() {
            let mut reports = Vec::new();
            for r in 0..args.run.repeats {
                let config = TrainConfig {
                    lambda_c: lc,
                    lambda_f: lf,
                    seed: base.seed + r,
                    ..base.clone()
                };
                config.validate().map_err(CliError::config)?;
                reports.push(fit(&data, &config, Variant::D)?.1);
            }
            let a = Aggregate::from_reports(&data.name, Vec::new(), &reports);
            has_truth &= a.acc.is_some();
            acc[i][j] = a.acc.map_or(f64::NAN, |s| s.mean);
            nmi[i][j] = a.nmi.map_or(f64::NAN, |s| s.mean);
            bal[i][j] = a.bal.mean;
            println!("{}", a.row(&format!("λC={lc:e} λF={lf:e}")));
        }
    }
    let cells: Vec<f64> = bal.iter().flatten().copied().collect();
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let bal_variance = cells.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / cells.len() as f64;
    let mut matrices = vec![("bal", &bal)];
    if has_truth {
        matrices.push(("acc", &acc));
        matrices.push(("nmi", &nmi));
    }
    for (name, m) in matrices {
        let path = out.join(format!("sweep_{name}.csv"));
        write_matrix(&path, &cs, &fs_, m).map_err(|e| CliError::output(&path, e))?;
    }
    let summary = SweepSummary {
        lambda_c_grid: cs,
        lambda_f_grid: fs_,
        acc: has_truth.then_some(acc),
        nmi: has_truth.then_some(nmi),
        bal,
        bal_variance,
    };
    write_json(&out.join("sweep_summary.json"), &summary)?;
    println!("BAL variance across the grid: {bal_variance:.6}");
    Ok(summary)
}

/// Rows are λ_C values, columns λ_F values.
fn write_matrix(path: &Path, rows: &[f64], cols: &[f64], m: &[Vec<f64>]) -> csv::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["lambda_c\\lambda_f".to_string()];
    header.extend(cols.iter().map(|c| c.to_string()));
    writer.write_record(&header)?;
    for (r, row) in rows.iter().zip(m) {
        let mut record = vec![r.to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// `bound-check`: writes `bound_report.csv`.
pub fn bound_check(args: &BoundArgs, out: &Path) -> Result<Vec<SweepRow>, CliError> {
    let rows = bound_sweep(args.clusters, args.groups, &args.epsilons, args.trials, args.seed).map_err(CliError::Bound)?;
    create_dir(out)?;
    let path = out.join("bound_report.csv");
    write_bound_report(&path, &rows).map_err(|e| CliError::output(&path, e))?;
    println!("epsilon    max I      mean I     pinsker  leading   sqrt(eps/2)");
    for r in &rows {
        println!(
            "{:<10} {:<10.6} {:<10.6} {:<8.4} {:<9.6} {:.6}",
            r.epsilon, r.max_i, r.mean_i, r.pinsker_pass_rate, r.leading_term, r.sqrt_eps_scale
        );
    }
    if let Some(r) = rows.iter().find(|r| r.epsilon == 0.1) {
        println!(
            "at epsilon = 0.1 the leading term is {:.4} (about 0.167); the largest sampled I(Q;G) is {:.6}",
            r.leading_term, r.max_i
        );
    }
    Ok(rows)
}

/// `synth-data`: dataset CSVs plus `manifest.toml` in the output directory.
pub fn synth_data(args: &SynthArgs, out: &Path) -> Result<DatasetManifest, CliError> {
    let data = match args.kind {
        SynthKind::Blobs => {
            let d = BlobSpec::default();
            let spec = BlobSpec {
                n: args.n.unwrap_or(d.n),
                k: args.k.unwrap_or(d.k),
                dim: args.dim.unwrap_or(d.dim),
                separation: args.separation.unwrap_or(d.separation),
                spread: args.spread,
                seed: args.seed,
            };
            two_view_blobs(&spec).map_err(CliError::config)?
        }
        SynthKind::Biased => {
            let d = BiasedSpec::default();
            let spec = BiasedSpec {
                blobs: BlobSpec {
                    n: args.n.unwrap_or(d.blobs.n),
                    k: args.k.unwrap_or(d.blobs.k),
                    dim: args.dim.unwrap_or(d.blobs.dim),
                    separation: args.separation.unwrap_or(d.blobs.separation),
                    spread: args.spread,
                    seed: args.seed,
                },
                rho: args.rho,
                sensitive_feature: !args.no_sensitive_feature,
            };
            biased_testbed(&spec).map_err(CliError::config)?
        }
    };
    let k = data.labels.as_ref().map_or(2, |l| l.iter().max().map_or(1, |m| m + 1));
    let manifest = write_dataset(&data, out, k).map_err(|e| CliError::output(out, e))?;
    if let Some(labels) = &data.labels {
        let bal = balance(labels, &data.sensitive).map_err(CliError::config)?;
        println!(
            "wrote {} instances, {} views, K = {k}; BAL of the true clusters {bal:.3}",
            data.n_samples(),
            data.n_views()
        );
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn matrix_rows_are_lambda_c() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_matrix(&path, &[0.1, 1.0], &[0.01, 10.0, 2.0], &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "lambda_c\\lambda_f,0.01,10,2\n0.1,1,2,3\n1,4,5,6\n");
    }
}
