use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Run directory holding rounds.csv
    #[arg(long)]
    run: PathBuf,

    /// Second run directory to compare against, typically a --baseline run
    #[arg(long)]
    baseline: Option<PathBuf>,

    /// Output directory [default: report]
    #[arg(long, env = crate::OUT_ENV)]
    out: Option<PathBuf>,
}

const COLUMNS: [&str; 5] = ["accuracy", "precision", "recall", "f1", "mean_val_loss"];

struct Rounds {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Rounds {
    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("rounds.csv");
        if !path.is_file() {
            bail!("rounds file not found: {}", path.display());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_owned).collect();
        for c in ["round"].iter().chain(&COLUMNS) {
            if !header.iter().any(|h| h == c) {
                bail!("{}: missing column `{c}`", path.display());
            }
        }
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("{}: line {}", path.display(), i + 2))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            bail!("{}: no rounds", path.display());
        }
        if rows.iter().any(|r| r.len() != header.len()) {
            bail!("{}: ragged rows", path.display());
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("checked on read")
    }

    fn summary(&self) -> Value {
        let last = self.rows.last().expect("checked on read");
        let f1 = self.col("f1");
        let best = self.rows.iter().max_by(|a, b| a[f1].total_cmp(&b[f1])).expect("checked on read");
        let mut finals = serde_json::Map::new();
        for c in COLUMNS {
            finals.insert(c.into(), json!(last[self.col(c)]));
        }
        json!({
            "rounds": self.rows.len(),
            "final": finals,
            "best_f1": best[f1],
            "best_f1_round": best[self.col("round")] as usize,
        })
    }

    fn final_value(&self, name: &str) -> f64 {
        self.rows.last().expect("checked on read")[self.col(name)]
    }
}

pub fn run(a: Args) -> Result<()> {
    let run = Rounds::read(&a.run)?;
    let base = a.baseline.as_deref().map(Rounds::read).transpose()?;
    let out = crate::out_dir(&a.out, "report");

    let mut report = json!({ "run": run.summary() });
    println!("| metric | {} |{}", a.run.display(), if base.is_some() { " baseline | gap |" } else { "" });
    println!("|---|---|{}", if base.is_some() { "---|---|" } else { "" });
    for c in COLUMNS {
        let v = run.final_value(c);
        match &base {
            Some(b) => {
                let bv = b.final_value(c);
                println!("| {c} | {v:.4} | {bv:.4} | {:+.4} |", v - bv);
            }
            None => println!("| {c} | {v:.4} |"),
        }
    }
    if let Some(b) = &base {
        report["baseline"] = b.summary();
        report["accuracy_gap_points"] = json!(100.0 * (run.final_value("accuracy") - b.final_value("accuracy")));
    }

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
