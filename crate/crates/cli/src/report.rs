use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use genb::eval::RunReport;

use crate::failure::{io_failure, CmdResult};
use crate::svg::{bar_chart, Bar};
use crate::train::{ATTENTION_FILE, REPORT_FILE};

pub const MARKDOWN_FILE: &str = "report.md";
pub const GAP_PLOT_FILE: &str = "ood_gap.svg";
pub const GALLERY_FILE: &str = "attention_gallery.csv";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for report.md, ood_gap.svg and attention_gallery.csv.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

struct Run {
    label: String,
    dir: PathBuf,
    report: RunReport,
}

fn labels(dirs: &[PathBuf]) -> Vec<String> {
    let short: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()))
        .collect();
    let unique = short.iter().collect::<std::collections::BTreeSet<_>>().len() == short.len();
    if unique {
        short
    } else {
        dirs.iter().map(|d| d.display().to_string()).collect()
    }
}

fn config_str(report: &RunReport, key: &str) -> String {
    match report.config.get(key) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => "-".into(),
    }
}

fn table(runs: &[Run]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut add = |name: &str, f: &dyn Fn(&RunReport) -> String| {
        rows.push((name.to_string(), runs.iter().map(|r| f(&r.report)).collect()));
    };
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    add("seed", &|r| r.seed.to_string());
    add("target loss", &|r| config_str(r, "debias_loss"));
    add("bias model", &|r| config_str(r, "bias_model"));
    add("epochs", &|r| config_str(r, "epochs"));
    add("prior baseline, test (%)", &|r| pct(r.split_statistics.prior_baseline_test));
    add("train accuracy (%)", &|r| r.final_metrics.as_ref().map_or("-".into(), |f| pct(f.train.overall)));
    add("test accuracy (%)", &|r| r.final_metrics.as_ref().map_or("-".into(), |f| pct(f.test.overall)));
    add("OOD gap (points)", &|r| r.final_metrics.as_ref().map_or("-".into(), |f| pct(f.ood_gap)));
    let qtypes = runs.iter().map(|r| r.report.dataset.num_qtypes).max().unwrap_or(0);
    for t in 0..qtypes {
        add(&format!("test q{t} (%)"), &|r| {
            r.final_metrics
                .as_ref()
                .and_then(|f| f.test.per_qtype.get(t).copied().flatten())
                .map_or("-".into(), pct)
        });
    }
    add("bias prior TV", &|r| {
        r.final_metrics.as_ref().map_or("-".into(), |f| format!("{:.4}", f.bias.prior_divergence.mean_tv))
    });
    add("bias accuracy from noise, test (%)", &|r| {
        r.final_metrics.as_ref().map_or("-".into(), |f| pct(f.bias.noise_test_accuracy))
    });
    add("attention dispersion", &|r| {
        r.final_metrics.as_ref().map_or("-".into(), |f| format!("{:.4}", f.bias.mean_attention_dispersion))
    });
    add("answer change rate", &|r| {
        r.final_metrics.as_ref().map_or("-".into(), |f| format!("{:.4}", f.bias.mean_answer_change_rate))
    });
    add("wall clock (s)", &|r| format!("{:.1}", r.wall_clock_secs));

    let mut s = String::new();
    let header: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
    writeln!(s, "| metric | {} |", header.join(" | ")).unwrap();
    writeln!(s, "|---|{}", "---|".repeat(runs.len())).unwrap();
    for (name, cells) in rows {
        writeln!(s, "| {name} | {} |", cells.join(" | ")).unwrap();
    }
    s
}

/// Concatenates every run's attention dump with a leading `run` column.
fn write_gallery(runs: &[Run], path: &Path) -> CmdResult<usize> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| io_failure(path, e))?;
    let mut rows = 0;
    let mut header_written = false;
    for run in runs {
        let source = run.dir.join(ATTENTION_FILE);
        if !source.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&source).map_err(|e| io_failure(&source, e))?;
        if !header_written {
            let header = r.headers().map_err(|e| io_failure(&source, e))?.clone();
            let mut rec = vec!["run".to_string()];
            rec.extend(header.iter().map(str::to_string));
            w.write_record(&rec).map_err(|e| io_failure(path, e))?;
            header_written = true;
        }
        for record in r.records() {
            let record = record.map_err(|e| io_failure(&source, e))?;
            let mut rec = vec![run.label.clone()];
            rec.extend(record.iter().map(str::to_string));
            w.write_record(&rec).map_err(|e| io_failure(path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| io_failure(path, e))?;
    Ok(rows)
}

pub fn run(args: &ReportArgs) -> CmdResult {
    let mut runs = Vec::new();
    for (dir, label) in args.runs.iter().zip(labels(&args.runs)) {
        let report = RunReport::load(&dir.join(REPORT_FILE))?;
        runs.push(Run {
            label,
            dir: dir.clone(),
            report,
        });
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;

    let bars: Vec<Bar> = runs
        .iter()
        .filter_map(|r| {
            r.report.final_metrics.as_ref().map(|f| Bar {
                label: r.label.clone(),
                value: f.ood_gap,
                spread: 0.0,
            })
        })
        .collect();
    let plot = args.out.join(GAP_PLOT_FILE);
    std::fs::write(&plot, bar_chart("OOD gap (train minus test accuracy)", "gap", &bars))
        .map_err(|e| io_failure(&plot, e))?;
    let gallery_rows = write_gallery(&runs, &args.out.join(GALLERY_FILE))?;

    let mut md = String::new();
    writeln!(md, "# Run comparison\n").unwrap();
    writeln!(md, "{}\n", table(&runs)).unwrap();
    if let Some(note) = runs.first().map(|r| r.report.qtype_note.as_str()) {
        writeln!(md, "Question types: {note}.\n").unwrap();
    }
    writeln!(md, "![OOD gap]({GAP_PLOT_FILE})\n").unwrap();
    writeln!(
        md,
        "Attention draws of the bias model ({gallery_rows} rows, draw_id -1 is the real image): [{GALLERY_FILE}]({GALLERY_FILE})"
    )
    .unwrap();
    let md_path = args.out.join(MARKDOWN_FILE);
    std::fs::write(&md_path, md).map_err(|e| io_failure(&md_path, e))?;
    println!("wrote {}", md_path.display());
    if runs.iter().all(|r| r.report.final_metrics.is_none()) {
        eprintln!("note: no run has final metrics");
    }
    Ok(())
}
