use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fedfdi_core::dataset::{apply_scaler, load_val_sets};
use fedfdi_core::metrics::{confusion, confusion_per_location, f1, macro_average, precision, recall, ConfusionCounts, MetricReport};
use fedfdi_core::neural::{load_checkpoint, predict, TrainConfig};
use serde_json::json;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint written by train
    #[arg(long)]
    checkpoint: PathBuf,

    /// Directory holding val_01.csv, val_02.csv, ...
    #[arg(long, default_value = "data")]
    data: PathBuf,

    /// Decision threshold on the detector outputs
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,

    /// Also write per_location.csv with one row per meter
    #[arg(long)]
    per_location: bool,

    /// Include macro averages over meters in the report
    #[arg(long)]
    macro_avg: bool,

    /// Output directory [default: eval]
    #[arg(long, env = crate::OUT_ENV)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    if !(0.0..1.0).contains(&a.threshold) {
        bail!("threshold must lie in [0, 1), got {}", a.threshold);
    }
    if !a.checkpoint.is_file() {
        bail!("checkpoint not found: {}", a.checkpoint.display());
    }
    if !a.data.is_dir() {
        bail!("validation directory not found: {}", a.data.display());
    }
    let out = crate::out_dir(&a.out, "eval");

    let ckpt = load_checkpoint(&a.checkpoint)?;
    let val = load_val_sets(&a.data)?;
    let arch = ckpt.params.architecture();
    let fwd = TrainConfig::default().forward_config();

    let mut reports = Vec::with_capacity(val.len());
    let mut total = ConfusionCounts::default();
    let mut per_location = vec![ConfusionCounts::default(); arch.output];
    let mut samples = 0;
    for v in &val {
        let v = match (&ckpt.scaler, v.standardized) {
            (Some(s), false) => apply_scaler(v, s)?,
            (None, true) => v.clone(),
            (Some(_), true) => bail!("validation data is already standardized; the checkpoint carries its own scaler"),
            (None, false) => bail!("checkpoint has no scaler and the validation data is raw"),
        };
        if v.n_features() != arch.input {
            bail!("validation data has {} features, checkpoint expects {}", v.n_features(), arch.input);
        }
        let (x, y) = (v.feature_matrix(), v.label_matrix());
        let probs = predict(&ckpt.params, x.view(), &fwd)?;
        reports.push(MetricReport::evaluate(probs.view(), y.view(), a.threshold)?);
        total += confusion(probs.view(), y.view(), a.threshold)?;
        for (acc, c) in per_location.iter_mut().zip(confusion_per_location(probs.view(), y.view(), a.threshold)?) {
            *acc += c;
        }
        samples += v.len();
    }
    let avg = MetricReport::average(&reports)?;

    let mut report = json!({
        "checkpoint": ckpt.params.digest(),
        "threshold": a.threshold,
        "subsets": val.len(),
        "samples": samples,
        "metrics": avg,
        "counts": total,
    });
    if a.macro_avg {
        let (p, r, f) = macro_average(&per_location);
        report["macro"] = json!({ "precision": p, "recall": r, "f1": f });
    }

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    if a.per_location {
        let mut csv = String::from("meter,tp,fp,tn,fn,precision,recall,f1\n");
        for (i, c) in per_location.iter().enumerate() {
            writeln!(csv, "{},{},{},{},{},{},{},{}", i + 1, c.tp, c.fp, c.tn, c.fn_, precision(c), recall(c), f1(c))?;
        }
        let path = out.join("per_location.csv");
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }

    println!("{} subsets, {samples} samples, threshold {}", val.len(), a.threshold);
    println!("accuracy         {:.4}", avg.accuracy);
    println!("precision        {:.4}", avg.precision);
    println!("recall           {:.4}", avg.recall);
    println!("f1               {:.4}", avg.f1);
    println!("subset accuracy  {:.4}", avg.subset_accuracy);
    println!("counts           tp {} fp {} tn {} fn {}", total.tp, total.fp, total.tn, total.fn_);
    Ok(())
}
