use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use genb::eval::SplitMetrics;
use genb::trainer::{TrainConfig, TrainState};
use serde::Deserialize;

use crate::failure::{io_failure, CmdResult, Failure};
use crate::gen::load_splits;
use crate::svg::{bar_chart, Bar};
use crate::train::run_in_dir;

pub const TABLE_FILE: &str = "ablation.csv";
pub const PLOT_FILE: &str = "ablation.svg";

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// TOML experiment manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Built-in rows.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Bias-model loss switches: BCE alone, BCE with GAN, BCE with
    /// distillation, all three, plus the plain baseline.
    BiasLosses,
    /// Bias-model variant crossed with target loss.
    TargetLosses,
}

impl Grid {
    fn rows(self) -> &'static [(&'static str, &'static str)] {
        const PLAIN: &str = "debias_loss = \"plain\"\nbias_model = \"vanilla\"";
        match self {
            Grid::BiasLosses => &[
                ("plain", PLAIN),
                ("genb_bce", "use_gan = false\nuse_distill = false"),
                ("genb_bce_gan", "use_distill = false"),
                ("genb_bce_distill", "use_gan = false"),
                ("genb_full", ""),
            ],
            Grid::TargetLosses => &[
                ("plain", PLAIN),
                ("pseudo_label_vanilla_bias", "bias_model = \"vanilla\""),
                ("suppressed_generative_bias", "debias_loss = \"suppressed\""),
                ("pseudo_label_generative_bias", ""),
            ],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    /// Directory with train.tar and test.tar.
    data: Option<PathBuf>,
    /// Root for per-run directories and the aggregated table.
    out: Option<PathBuf>,
    /// Seeds for every row that does not list its own.
    #[serde(default)]
    seeds: Vec<u64>,
    grid: Option<Grid>,
    /// Config file every row starts from.
    base_config: Option<PathBuf>,
    #[serde(default, rename = "run")]
    runs: Vec<RunEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunEntry {
    name: String,
    config: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    #[serde(default)]
    set: toml::Table,
}

#[derive(Debug)]
struct Variant {
    name: String,
    config: TrainConfig,
    seeds: Vec<u64>,
    dir: PathBuf,
}

fn with_overrides(base: &TrainConfig, overrides: &toml::Table) -> CmdResult<TrainConfig> {
    let mut table = toml::Table::try_from(base).expect("config serializes to a table");
    table.extend(overrides.clone());
    Ok(TrainConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))?)
}

fn read_config(path: &Path) -> CmdResult<TrainConfig> {
    Ok(TrainConfig::from_file(path)?)
}

fn expand(manifest: Manifest, root: &Path) -> CmdResult<(PathBuf, PathBuf, Vec<Variant>)> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    let data = manifest
        .data
        .as_deref()
        .map(resolve)
        .ok_or_else(|| Failure::Usage("manifest has no `data` directory".into()))?;
    let out = resolve(manifest.out.as_deref().unwrap_or(Path::new("ablation")));
    let base = match &manifest.base_config {
        Some(p) => read_config(&resolve(p))?,
        None => TrainConfig::default(),
    };

    let mut variants = Vec::new();
    if let Some(grid) = manifest.grid {
        for (name, overrides) in grid.rows() {
            let table: toml::Table = overrides.parse().expect("built-in rows are valid TOML");
            variants.push(Variant {
                name: name.to_string(),
                config: with_overrides(&base, &table)?,
                seeds: manifest.seeds.clone(),
                dir: out.join(name),
            });
        }
    }
    for run in manifest.runs {
        let start = match &run.config {
            Some(p) => read_config(&resolve(p))?,
            None => base.clone(),
        };
        variants.push(Variant {
            config: with_overrides(&start, &run.set)?,
            seeds: run.seeds.unwrap_or_else(|| manifest.seeds.clone()),
            dir: out.join(run.out.as_deref().unwrap_or(Path::new(&run.name))),
            name: run.name,
        });
    }

    if variants.is_empty() {
        return Err(Failure::Usage("manifest defines no runs: set `grid` or add [[run]] tables".into()));
    }
    let mut names = BTreeSet::new();
    let mut dirs = BTreeSet::new();
    for v in &variants {
        if v.seeds.is_empty() {
            return Err(Failure::Usage(format!("row {:?} has no seeds", v.name)));
        }
        if v.seeds.iter().collect::<BTreeSet<_>>().len() != v.seeds.len() {
            return Err(Failure::Usage(format!("row {:?} repeats a seed", v.name)));
        }
        if !names.insert(v.name.clone()) {
            return Err(Failure::Usage(format!("row name {:?} appears twice", v.name)));
        }
        if !dirs.insert(v.dir.clone()) {
            return Err(Failure::Usage(format!("output directory {} is shared by two rows", v.dir.display())));
        }
    }
    Ok((data, out, variants))
}

struct RowResult {
    name: String,
    metrics: Vec<SplitMetrics>,
    errors: Vec<String>,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

fn write_table(path: &Path, rows: &[RowResult], num_qtypes: usize) -> CmdResult {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_failure(path, e))?;
    let mut header = vec!["variant".to_string(), "runs".into(), "failed".into(), "all_mean".into(), "all_sd".into()];
    for t in 0..num_qtypes {
        header.push(format!("q{t}_mean"));
        header.push(format!("q{t}_sd"));
    }
    header.push("errors".into());
    w.write_record(&header).map_err(|e| io_failure(path, e))?;

    let cell = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => [format!("{m:.6}"), format!("{s:.6}")],
        None => [String::new(), String::new()],
    };
    for row in rows {
        let mut rec = vec![
            row.name.clone(),
            (row.metrics.len() + row.errors.len()).to_string(),
            row.errors.len().to_string(),
        ];
        rec.extend(cell(mean_sd(&row.metrics.iter().map(|m| m.overall).collect::<Vec<_>>())));
        for t in 0..num_qtypes {
            let values: Vec<f64> = row.metrics.iter().filter_map(|m| m.per_qtype[t]).collect();
            rec.extend(cell(mean_sd(&values)));
        }
        rec.push(row.errors.join(" | "));
        w.write_record(&rec).map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

pub fn run(args: &AblateArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| io_failure(&args.manifest, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", args.manifest.display())))?;
    let root = args.manifest.parent().unwrap_or(Path::new("."));
    let (data, out, variants) = expand(manifest, root)?;
    let (train, test) = load_splits(&data)?;
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;

    let mut rows = Vec::new();
    let mut non_finite = false;
    for v in &variants {
        let mut row = RowResult {
            name: v.name.clone(),
            metrics: Vec::new(),
            errors: Vec::new(),
        };
        for &seed in &v.seeds {
            let config = TrainConfig { seed, ..v.config.clone() };
            let dir = v.dir.join(format!("seed{seed}"));
            let result = TrainState::new(config, &train.spec)
                .map_err(Failure::from)
                .and_then(|state| run_in_dir(state, &train, &test, &dir));
            match result {
                Ok(report) => {
                    let test_metrics = report.final_metrics.map(|f| f.test);
                    match test_metrics {
                        Some(m) => {
                            println!("{:<20} seed {seed:<4} test {:.4}", v.name, m.overall);
                            row.metrics.push(m);
                        }
                        None => row.errors.push(format!("seed {seed}: no training epochs")),
                    }
                }
                Err(e) => {
                    non_finite |= matches!(e, Failure::NonFinite(_));
                    eprintln!("{:<20} seed {seed:<4} failed: {e}", v.name);
                    row.errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        rows.push(row);
    }

    write_table(&out.join(TABLE_FILE), &rows, train.spec.num_qtypes)?;
    let bars: Vec<Bar> = rows
        .iter()
        .map(|r| {
            let (value, spread) = mean_sd(&r.metrics.iter().map(|m| m.overall).collect::<Vec<_>>()).unwrap_or((0.0, 0.0));
            Bar { label: r.name.clone(), value, spread }
        })
        .collect();
    let plot = out.join(PLOT_FILE);
    std::fs::write(&plot, bar_chart("Test-split accuracy by variant (mean ± sd over seeds)", "accuracy", &bars))
        .map_err(|e| io_failure(&plot, e))?;
    println!("wrote {} and {}", out.join(TABLE_FILE).display(), plot.display());

    let failed: usize = rows.iter().map(|r| r.errors.len()).sum();
    if non_finite {
        Err(Failure::NonFinite(format!("{failed} run(s) failed, at least one on a non-finite loss")))
    } else if failed > 0 {
        Err(Failure::Runtime(format!("{failed} run(s) failed; see {}", out.join(TABLE_FILE).display())))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_deviation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_sd(&[4.0]), Some((4.0, 0.0)));
        assert_eq!(mean_sd(&[]), None);
    }

    #[test]
    fn grids_expand_to_their_rows() {
        let manifest: Manifest = toml::from_str("data = \"d\"\nseeds = [0, 1]\ngrid = \"target_losses\"").unwrap();
        let (_, out, variants) = expand(manifest, Path::new("/m")).unwrap();
        assert_eq!(out, Path::new("/m/ablation"));
        let names: Vec<_> = variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["plain", "pseudo_label_vanilla_bias", "suppressed_generative_bias", "pseudo_label_generative_bias"]);
        assert_eq!(variants[1].config.bias_model, genb::trainer::BiasVariant::Vanilla);
        assert_eq!(variants[2].config.debias_loss, genb::losses::DebiasLoss::Suppressed);
    }

    #[test]
    fn invalid_manifests_are_usage_errors() {
        for text in [
            "",
            "data = \"d\"",
            "data = \"d\"\ngrid = \"bias_losses\"",
            "data = \"d\"\nseeds = [1, 1]\ngrid = \"bias_losses\"",
            "data = \"d\"\nseeds = [1]\n[[run]]\nname = \"a\"\n[[run]]\nname = \"a\"",
            "data = \"d\"\nseeds = [1]\n[[run]]\nname = \"a\"\n[run.set]\nnot_a_key = 1",
        ] {
            let manifest: Manifest = toml::from_str(text).unwrap();
            assert!(matches!(expand(manifest, Path::new(".")), Err(Failure::Usage(_))), "{text:?}");
        }
    }
}
