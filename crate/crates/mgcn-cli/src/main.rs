mod config;
mod plot;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mgcn_core::data::{atomic_write, fmt_f64};
use mgcn_core::train::curve_to_csv;
use mgcn_core::{
    grad_ram, load_dataset, mask_beta_sweep, module_allegiance, split_dataset,
    synth_generate_to_dir, ModelParams, ModelSpec, PreparedDataset, Tensor,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mgcn",
    about = "Multi-modal GCN regression: simulation, training, evaluation, interpretability",
    version
)]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel repeats and grid runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration ([synth] and [train] sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted signal.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Single training run; emits a checkpoint and a training-curve CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model to train (mgcn, mgcn-noreg, gcn:<modality>, mlp, mvgcn).
        #[arg(long, default_value = "mgcn")]
        model: String,
    },
    /// Bootstrap model comparison with paired t-tests.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated model specs; first is the reference.
        #[arg(long, default_value = "mgcn,mgcn-noreg,mlp,mvgcn")]
        models: String,
        #[arg(long)]
        repeats: Option<usize>,
        /// Output prefix; writes <out>.csv and <out>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-ROI attribution maps from a trained checkpoint.
    Gradram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fraction of top ROIs to select.
        #[arg(long, default_value_t = 0.05)]
        top: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge-mask workflow: beta sweep, consensus masks, allegiance matrices.
    Mask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1,5,10")]
        beta_grid: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0.5)]
        freq_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a CSV artifact (curve, sparsity sweep, or matrix) to PNG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            std::process::exit(1);
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config::load_run_config(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::Simulate { out } => {
            let manifest = synth_generate_to_dir(&cfg.synth, out)?;
            println!(
                "simulated {} subjects x {} modalities (Q={}) -> {}",
                manifest.n,
                manifest.modalities.len(),
                manifest.q,
                out.join("manifest.json").display()
            );
        }
        Command::Train { data, out, model } => {
            let prepared = load_prepared(data, &cfg)?;
            let spec = ModelSpec::parse(model, &prepared.modality_names())?;
            let split = split_dataset(prepared.n(), cfg.train.split, cfg.train.seed)?;
            let outcome = mgcn_core::train(
                &prepared,
                spec.kind,
                &spec.modalities,
                &cfg.train,
                &split.train,
                &split.val,
                None,
                cfg.train.seed,
            )?;
            outcome.params.save(out)?;
            let curve_path = out.with_extension("curve.csv");
            atomic_write(&curve_path, curve_to_csv(&outcome.curve).as_bytes())?;
            println!(
                "trained {} for {} epochs (best val RMSE {:.4} at epoch {}) -> {}",
                spec.name,
                outcome.curve.len(),
                outcome.best_val_metric,
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Evaluate {
            data,
            models,
            repeats,
            out,
        } => {
            let prepared = load_prepared(data, &cfg)?;
            let names = prepared.modality_names();
            let specs: Vec<ModelSpec> = models
                .split(',')
                .map(|s| ModelSpec::parse(s.trim(), &names))
                .collect::<mgcn_core::Result<_>>()?;
            let mut train_cfg = cfg.train.clone();
            if let Some(&r) = repeats.as_ref() {
                train_cfg.repeats = r;
            }
            if train_cfg.repeats < 2 {
                eprintln!("warning: a single repeat makes std columns zero and t-tests undefined");
            }
            let report = mgcn_core::bootstrap_evaluate(&prepared, &train_cfg, &specs)?;
            let csv_path = out.with_extension("csv");
            atomic_write(&csv_path, report.to_csv().as_bytes())?;
            let json_path = out.with_extension("json");
            atomic_write(&json_path, serde_json::to_vec_pretty(&report)?.as_slice())?;
            for m in &report.models {
                println!(
                    "{:<16} RMSE {:.4} +/- {:.4}  MAE {:.4} +/- {:.4}  p(RMSE) {}",
                    m.name,
                    m.rmse_mean,
                    m.rmse_std,
                    m.mae_mean,
                    m.mae_std,
                    m.p_rmse_vs_first
                        .map(|p| format!("{p:.4}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
            println!("report -> {} / {}", csv_path.display(), json_path.display());
        }
        Command::Gradram {
            ckpt,
            data,
            top,
            out,
        } => {
            let prepared = load_prepared(data, &cfg)?;
            let params = ModelParams::load(ckpt)?;
            let all: Vec<usize> = (0..prepared.n()).collect();
            let maps = grad_ram(&params, &prepared, &all, *top)?;
            std::fs::create_dir_all(out)
                .with_context(|| format!("create {}", out.display()))?;
            let mut meta = Vec::new();
            for map in &maps {
                let mut csv = String::from("roi,raw,zscore,selected\n");
                for roi in 0..map.raw.len() {
                    let sel = map.top_idx.contains(&roi) as u8;
                    csv.push_str(&format!(
                        "{roi},{},{},{sel}\n",
                        fmt_f64(map.raw[roi]),
                        fmt_f64(map.zscored[roi])
                    ));
                }
                let path = out.join(format!("gradram_{}.csv", map.modality));
                atomic_write(&path, csv.as_bytes())?;
                meta.push(serde_json::json!({
                    "modality": map.modality,
                    "top_fraction": map.top_fraction,
                    "top_rois": map.top_idx,
                    "file": path.file_name().unwrap().to_string_lossy(),
                }));
                println!("gradram[{}]: top ROIs {:?}", map.modality, map.top_idx);
            }
            atomic_write(
                &out.join("gradram.json"),
                serde_json::to_vec_pretty(&meta)?.as_slice(),
            )?;
        }
        Command::Mask {
            data,
            beta_grid,
            runs,
            freq_threshold,
            out,
        } => {
            if beta_grid.is_empty() {
                bail!("empty beta grid");
            }
            let prepared = load_prepared(data, &cfg)?;
            let sweep =
                mask_beta_sweep(&prepared, &cfg.train, beta_grid, *runs, *freq_threshold)?;
            std::fs::create_dir_all(out)
                .with_context(|| format!("create {}", out.display()))?;
            let mut sparsity_csv = String::from("beta,consensus_sparsity,mean_run_sparsity\n");
            for entry in &sweep {
                let mean_run = entry.runs.iter().map(|r| r.sparsity).sum::<f64>()
                    / entry.runs.len() as f64;
                sparsity_csv.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f64(entry.beta),
                    fmt_f64(entry.consensus_sparsity),
                    fmt_f64(mean_run)
                ));
                let tag = beta_tag(entry.beta);
                write_matrix(&out.join(format!("consensus_{tag}.csv")), &entry.consensus)?;
                write_matrix(&out.join(format!("frequency_{tag}.csv")), &entry.frequency)?;
                if let Some(labels) = &prepared.fn_labels {
                    let alleg = module_allegiance(&entry.consensus, labels)?;
                    let mut csv = String::from("fn");
                    for n in &alleg.names {
                        csv.push(',');
                        csv.push_str(n);
                    }
                    csv.push('\n');
                    for (i, n) in alleg.names.iter().enumerate() {
                        csv.push_str(n);
                        for j in 0..alleg.names.len() {
                            csv.push_str(&format!(",{}", alleg.counts.get(i, j)));
                        }
                        csv.push('\n');
                    }
                    atomic_write(&out.join(format!("allegiance_{tag}.csv")), csv.as_bytes())?;
                }
                println!(
                    "beta {:<8} consensus sparsity {:.4} (runs {:.4})",
                    entry.beta, entry.consensus_sparsity, mean_run
                );
            }
            atomic_write(&out.join("sparsity.csv"), sparsity_csv.as_bytes())?;
        }
        Command::Plot { input, out } => plot_artifact(input, out)?,
    }
    Ok(())
}

fn load_prepared(manifest: &Path, cfg: &config::RunConfig) -> Result<PreparedDataset> {
    let dataset = load_dataset(manifest)?;
    Ok(dataset.prepare(cfg.train.knn_k, cfg.train.knn_mode, cfg.train.lenient_fc)?)
}

fn beta_tag(beta: f64) -> String {
    format!("{beta}").replace('.', "p")
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    mgcn_core::data::write_matrix_csv(path, t)?;
    Ok(())
}

/// Sniff the CSV flavor: known curve headers plot as lines, numeric grids as
/// heatmaps. Matrices with a label row+column (allegiance) are trimmed.
fn plot_artifact(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("read {}", input.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().context("empty input file")?;
    let header: Vec<&str> = first.split(',').map(str::trim).collect();
    let body: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();

    let is_numeric_row = |cells: &[&str]| cells.iter().all(|c| c.trim().parse::<f64>().is_ok());

    if header.first() == Some(&"beta") || header.first() == Some(&"epoch") {
        let ycol = header
            .iter()
            .position(|h| *h == "consensus_sparsity" || *h == "val_metric")
            .unwrap_or(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in &body {
            xs.push(row[0].trim().parse::<f64>()?);
            ys.push(row[ycol].trim().parse::<f64>()?);
        }
        plot::line_plot(&xs, &ys, header[0] == "beta", out)?;
    } else {
        let mut matrix = Vec::new();
        let all_rows = std::iter::once(&header)
            .chain(body.iter())
            .collect::<Vec<_>>();
        for row in all_rows {
            if is_numeric_row(row) {
                matrix.push(
                    row.iter()
                        .map(|c| c.trim().parse::<f64>().unwrap())
                        .collect(),
                );
            } else if row.len() > 1 && is_numeric_row(&row[1..]) {
                matrix.push(row[1..].iter().map(|c| c.trim().parse().unwrap()).collect());
            }
        }
        if matrix.is_empty() {
            bail!("{} contains no numeric rows to plot", input.display());
        }
        plot::heatmap(&matrix, out)?;
    }
    println!("plotted {} -> {}", input.display(), out.display());
    Ok(())
}
