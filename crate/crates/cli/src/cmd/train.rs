use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fedfdi_core::config::Overrides;
use fedfdi_core::dataset::{apply_scaler, fit_scaler, load_corpus};
use fedfdi_core::federated::{run_baseline, run_training, write_ledger_csv, write_rounds_csv};
use fedfdi_core::neural::save_checkpoint;

use crate::setup::ProfileArgs;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    profile: ProfileArgs,

    /// Corpus directory written by gen-data
    #[arg(long, default_value = "data")]
    data: PathBuf,

    /// Seed for initialization, partitioning and dropout [default: 7]
    #[arg(long)]
    seed: Option<u64>,

    /// Number of edge servers [default: 5]
    #[arg(long)]
    clients: Option<usize>,

    /// Communication rounds [default: profile]
    #[arg(long)]
    rounds: Option<usize>,

    /// Local passes over each shard per round [default: 5]
    #[arg(long)]
    local_epochs: Option<usize>,

    /// Mini-batch size [default: 64]
    #[arg(long)]
    batch: Option<usize>,

    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,

    /// L2 penalty on weight matrices [default: 0.01]
    #[arg(long)]
    l2: Option<f64>,

    /// Dropout rate after each hidden layer [default: 0.4]
    #[arg(long)]
    dropout: Option<f64>,

    /// Hidden layer widths, comma separated [default: 128,64]
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,

    /// Server update rule: fedavg or delta [default: fedavg]
    #[arg(long)]
    server_update: Option<String>,

    /// Shard assignment: iid or label-skew [default: iid]
    #[arg(long)]
    partition: Option<String>,

    /// Probability an attacked sample goes to its location's client under label-skew [default: 0.8]
    #[arg(long)]
    label_skew: Option<f64>,

    /// Decision threshold on the detector outputs [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,

    /// Stop once mean validation F1 reaches this value [default: off]
    #[arg(long)]
    stop_f1: Option<f64>,

    /// Stop after this many rounds without validation-loss improvement [default: off]
    #[arg(long)]
    stop_patience: Option<usize>,

    /// Fresh optimizer moments at the start of every round
    #[arg(long)]
    reset_optimizer: bool,

    /// Train one client alone instead of federating
    #[arg(long)]
    baseline: bool,

    /// Client shard used by --baseline
    #[arg(long, default_value_t = 0)]
    shard_index: usize,

    /// Run clients one after another in id order
    #[arg(long)]
    deterministic: bool,

    /// Output directory [default: run]
    #[arg(long, env = crate::OUT_ENV)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let flags = Overrides {
        seed: a.seed,
        clients: a.clients,
        rounds: a.rounds,
        local_epochs: a.local_epochs,
        batch: a.batch,
        lr: a.lr,
        l2: a.l2,
        dropout: a.dropout,
        hidden: a.hidden.clone(),
        server_update: a.server_update.clone(),
        partition: a.partition.clone(),
        label_skew: a.label_skew,
        threshold: a.threshold,
        stop_f1: a.stop_f1,
        stop_patience: a.stop_patience,
        reset_optimizer: a.reset_optimizer.then_some(true),
        ..Overrides::default()
    };
    let mut cfg = a.profile.resolve(&flags)?;
    cfg.fl.sequential = a.deterministic;
    if a.baseline && a.shard_index >= cfg.fl.clients {
        bail!("--shard-index {} out of range for {} clients", a.shard_index, cfg.fl.clients);
    }
    if !a.data.is_dir() {
        bail!("corpus directory not found: {}", a.data.display());
    }
    let out = crate::out_dir(&a.out, "run");

    let corpus = load_corpus(&a.data).with_context(|| format!("loading corpus from {}", a.data.display()))?;
    let scaler = fit_scaler(&corpus.train)?;
    let train = apply_scaler(&corpus.train, &scaler)?;
    let val = corpus.val.iter().map(|v| apply_scaler(v, &scaler)).collect::<fedfdi_core::Result<Vec<_>>>()?;

    let run = if a.baseline {
        run_baseline(cfg.seed, &train, &val, &cfg.train, &cfg.fl, a.shard_index)?
    } else {
        run_training(cfg.seed, &train, &val, &cfg.train, &cfg.fl)?
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_rounds_csv(&run.rounds, out.join("rounds.csv"))?;
    write_ledger_csv(&run.ledger, out.join("ledger.csv"))?;
    save_checkpoint(out.join("model.ckpt"), &run.params, Some(&scaler), run.rounds.len())?;

    let mode = if a.baseline {
        format!("baseline on shard {} ({} samples)", a.shard_index, run.shard_sizes[0])
    } else {
        format!("{} clients, shards {:?}", cfg.fl.clients, run.shard_sizes)
    };
    println!("{mode}, {} rounds", run.rounds.len());
    if let Some(m) = run.final_metrics() {
        println!(
            "final  accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  subset accuracy {:.4}  val loss {:.4}",
            m.accuracy, m.precision, m.recall, m.f1, m.subset_accuracy, m.mean_val_loss
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
