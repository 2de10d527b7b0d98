use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fairvit::data::{export_dataset, generate};
use fairvit::harness::output::{
    ablation_report, output_root, run_report, scan_report, sweep_report, write_results, write_run,
};
use fairvit::harness::{
    ablation_matrix, bias_scan, predict, prepare_data, sweep, train, DataSource, Method, RunConfig,
    RunRecord, DEFAULT_BA_TOLERANCE, DEFAULT_GRID,
};
use fairvit::inspect::{attribute_gap, build_atlas, export_atlas, Matrix};
use fairvit::metrics::{weighted_average_precision, FairnessReport};
use fairvit::vit::VitModel;
use fairvit_autodiff::checkpoint;

/// Vision transformer training with fairness metrics and query-activation
/// debiasing.
#[derive(Parser)]
#[command(name = "fairvit", version)]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file; `preset = desk|paper` on its first line
    /// selects the base.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set debias.alpha=0.1`. Repeatable,
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output root (default: $FAIRVIT_OUT, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write its run directory.
    Train,
    /// Grid over the loss weights, then apply the selection rule.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
        /// Ignored for baselines, which sweep one weight.
        #[arg(long, value_delimiter = ',')]
        beta_grid: Option<Vec<f64>>,
        /// Allowed validation BA drop below the baseline, in points.
        #[arg(long, default_value_t = DEFAULT_BA_TOLERANCE)]
        tolerance: f64,
    },
    /// The nine adversary / query-loss configurations.
    Ablate {
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
    },
    /// Rank candidate protected attributes by the EO of a plain model.
    Scan {
        /// Defaults to every attribute except the task.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<String>>,
    },
    /// Average Q/K activation maps per (y, a) cell of a trained run.
    Inspect {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the debiasing target layer, else the last layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Recompute metrics of a trained run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a synthetic dataset as PNGs plus an attribute list.
    GenData {
        /// Sample count (default: data.n of the config).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::desk(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    if cfg.preset == "paper" {
        log::warn!("paper preset: 224x224 inputs and 12 layers; expect days of CPU time per run");
    }
    Ok(cfg)
}

fn run_dir(root: &Path, r: &RunRecord) -> PathBuf {
    root.join(format!("{}-{}", r.config.method.tag(), r.config_hash))
}

fn save_run(root: &Path, r: &RunRecord) -> Result<PathBuf> {
    let dir = run_dir(root, r);
    write_run(r, &dir)?;
    Ok(dir)
}

fn load_run(dir: &Path) -> Result<(RunConfig, VitModel, fairvit_autodiff::ParamStore)> {
    let cfg = RunConfig::from_file(&dir.join("config.txt"))
        .with_context(|| format!("reading {}", dir.join("config.txt").display()))?;
    let params = checkpoint::load(dir.join("checkpoint.bin"))?;
    let aux_path = dir.join("aux_heads.bin");
    let aux = if aux_path.exists() {
        checkpoint::load(aux_path)?
    } else {
        Default::default()
    };
    let model = VitModel {
        cfg: cfg.vit.clone(),
        params,
    };
    Ok((cfg, model, aux))
}

fn split_indices(p: &fairvit::harness::Prepared, split: &str) -> Result<Vec<usize>> {
    Ok(match split {
        "train" => p.split.train.clone(),
        "val" => p.split.val.clone(),
        "test" => p.split.test.clone(),
        "all" => (0..p.data.len()).collect(),
        other => bail!("unknown split {other:?} (train, val, test, all)"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train => {
            let cfg = load_config(&cli.cfg)?;
            let root = output_root(&cfg);
            let r = train(&cfg)?;
            let dir = save_run(&root, &r)?;
            print!("{}", run_report(&r));
            println!("wrote {}", dir.display());
        }
        Cmd::Sweep {
            alpha_grid,
            beta_grid,
            tolerance,
        } => {
            let cfg = load_config(&cli.cfg)?;
            let root = output_root(&cfg);
            let alphas = alpha_grid.unwrap_or(DEFAULT_GRID.to_vec());
            let betas = match (&cfg.method, beta_grid) {
                (Method::Baseline(_), _) => vec![0.0],
                (_, Some(b)) => b,
                (_, None) => DEFAULT_GRID.to_vec(),
            };
            let res = sweep(&cfg, &alphas, &betas, tolerance)?;
            let dir = root.join(format!("sweep-{}", cfg.hash()));
            fs::create_dir_all(&dir)?;
            let mut rows = Vec::new();
            for p in &res.points {
                save_run(&dir, &p.record)?;
                rows.push((format!("a{}_b{}", p.alpha, p.beta), &p.record));
            }
            if !res.points.iter().any(|p| p.alpha == 0.0 && p.beta == 0.0) {
                save_run(&dir, &res.baseline)?;
                rows.push(("baseline".to_string(), &res.baseline));
            }
            write_results(&dir.join("results.csv"), &rows)?;
            let report = sweep_report(&res);
            fs::write(dir.join("sweep.txt"), &report)?;
            print!("{report}");
            println!("wrote {}", dir.display());
        }
        Cmd::Ablate { alpha, beta } => {
            let cfg = load_config(&cli.cfg)?;
            let root = output_root(&cfg);
            let rows = ablation_matrix(&cfg, alpha, beta)?;
            let dir = root.join(format!("ablate-{}", cfg.hash()));
            fs::create_dir_all(&dir)?;
            let mut res = Vec::new();
            for r in &rows {
                save_run(&dir, &r.record)?;
                res.push((format!("row{}", r.index), &r.record));
            }
            write_results(&dir.join("results.csv"), &res)?;
            let report = ablation_report(&rows);
            fs::write(dir.join("ablation.txt"), &report)?;
            print!("{report}");
            println!("wrote {}", dir.display());
        }
        Cmd::Scan { candidates } => {
            let cfg = load_config(&cli.cfg)?;
            let root = output_root(&cfg);
            let candidates = match candidates {
                Some(c) => c,
                None => {
                    let d = prepare_data(&cfg)?.data;
                    d.attributes
                        .names
                        .iter()
                        .filter(|n| **n != d.task)
                        .cloned()
                        .collect()
                }
            };
            let (entries, record) = bias_scan(&cfg, &candidates)?;
            let dir = save_run(&root, &record)?;
            let task = match &cfg.data {
                DataSource::Synthetic { spec, .. } => spec.task_name.clone(),
                DataSource::Files { task, .. } => task.clone(),
            };
            let report = scan_report(&task, &entries);
            fs::write(dir.join("scan.txt"), &report)?;
            print!("{report}");
        }
        Cmd::Inspect { run, layer, split } => {
            let (cfg, model, _) = load_run(&run)?;
            let layer = layer.unwrap_or_else(|| match cfg.method.adversary() {
                Some(d) => d.layer(&cfg.vit),
                None => cfg.vit.num_layers - 1,
            });
            let p = prepare_data(&cfg)?;
            let data = p.data.subset(&split_indices(&p, &split)?);
            let atlas = build_atlas(&model, &data, layer, 64)?;
            let dir = cli
                .cfg
                .out
                .clone()
                .unwrap_or_else(|| run.join(format!("atlas-{split}-layer{layer}")));
            let s = export_atlas(&atlas, &dir)?;
            for y in 0..2u8 {
                for m in [Matrix::Query, Matrix::Key] {
                    match attribute_gap(&atlas, y, m) {
                        Ok(g) => println!("y={y} {:<5} pooled gap {:.4}", m.name(), g.pooled),
                        Err(e) => println!("y={y} {:<5} {e}", m.name()),
                    }
                }
            }
            println!(
                "wrote {} panels, {} images to {}",
                s.panels,
                s.images,
                dir.display()
            );
        }
        Cmd::Eval { run, split } => {
            let (cfg, model, aux) = load_run(&run)?;
            let p = prepare_data(&cfg)?;
            let idx = split_indices(&p, &split)?;
            let probs = predict(&model, &aux, &cfg.method, &p.data, &idx)?;
            let y: Vec<u8> = idx.iter().map(|&i| p.data.y()[i]).collect();
            let a: Vec<u8> = idx.iter().map(|&i| p.data.a()[i]).collect();
            let rep = FairnessReport::from_probs(&probs, &y, &a, cfg.threshold)?;
            println!("{split} split, {} samples", idx.len());
            println!("weighted AP {:.2}", weighted_average_precision(&probs, &y)?);
            print!("{rep}");
        }
        Cmd::GenData { n, dir } => {
            let cfg = load_config(&cli.cfg)?;
            let DataSource::Synthetic { spec, n: n_cfg } = &cfg.data else {
                bail!("gen-data needs data.source = synthetic");
            };
            let d = generate(spec, n.unwrap_or(*n_cfg))?;
            export_dataset(&d, &dir)?;
            let c = d.cell_counts();
            println!(
                "wrote {} samples to {} (y,a counts: 00={} 01={} 10={} 11={})",
                d.len(),
                dir.display(),
                c[0][0],
                c[0][1],
                c[1][0],
                c[1][1]
            );
        }
    }
    Ok(())
}
