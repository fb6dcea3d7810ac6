use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Deserialize;
use storyforge_core::gate::{HumanLabel, LabeledPair, ThresholdRow, evaluate_thresholds};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with header `keyword,score,label`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.8, 0.7, 0.6])]
    thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Debug, Deserialize)]
struct Row {
    keyword: String,
    score: f64,
    label: String,
}

pub fn read_pairs(path: &PathBuf) -> Result<Vec<LabeledPair>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::usage("InvalidInput", format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| CliError::usage("InvalidInput", format!("row {}: {e}", i + 1)))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(CliError::usage(
                "InvalidInput",
                format!("row {}: score {} outside [0, 1]", i + 1, row.score),
            ));
        }
        let human_label: HumanLabel = row
            .label
            .parse()
            .map_err(|e| CliError::usage("InvalidInput", format!("row {}: {e}", i + 1)))?;
        pairs.push(LabeledPair {
            keyword: row.keyword,
            score: row.score,
            human_label,
        });
    }
    if pairs.is_empty() {
        return Err(CliError::usage(
            "InvalidInput",
            format!("{} holds no pairs", path.display()),
        ));
    }
    Ok(pairs)
}

fn percent(p: Option<f64>) -> String {
    match p {
        Some(p) => {
            let pct = p * 100.0;
            if (pct - pct.round()).abs() < 1e-9 {
                format!("{pct:.0}%")
            } else {
                format!("{pct:.1}%")
            }
        }
        None => "n/a".into(),
    }
}

pub fn render(rows: &[ThresholdRow], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Table => {
            out.push_str("threshold  proportion  count\n");
            for r in rows {
                out.push_str(&format!(
                    "{:<9}  {:>10}  {:>5}\n",
                    r.threshold,
                    percent(r.proportion),
                    r.count
                ));
            }
        }
        Format::Csv => {
            out.push_str("threshold,proportion,count,plausible\n");
            for r in rows {
                let p = r.proportion.map(|p| format!("{p:.4}")).unwrap_or_default();
                out.push_str(&format!("{},{p},{},{}\n", r.threshold, r.count, r.plausible));
            }
        }
    }
    out
}

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    if let Some(bad) = args.thresholds.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CliError::usage("InvalidInput", format!("threshold {bad} outside [0, 1]")));
    }
    let pairs = read_pairs(&args.pairs)?;
    let rows = evaluate_thresholds(&pairs, &args.thresholds);
    std::io::stdout()
        .write_all(render(&rows, args.format).as_bytes())
        .map_err(|e| CliError::runtime("Io", e))
}
