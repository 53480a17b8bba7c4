//! Subcommand dispatch: resolve the config, run the experiment, collect the
//! output files.

use std::fs;
use std::path::PathBuf;

use bict::models::{Checkpoint, ModelGeneration};
use bict::par::{with_jobs, Exec};
use bict::retrieval::EmbeddingStore;
use bict::training::{epoch_log_csv, SequenceVariant};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{CliError, CliResult};
use crate::experiments::{self as ex, median};
use crate::output::{fmt_metric, Outputs, SNAPSHOT_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "bict",
    version,
    about = "Bidirectional compatible training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Config file with `section.key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for seeds and sweep points
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (default: results/<command>)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and evaluation sets
    GenData,
    /// Train old and new models for one upgrade occasion and report all settings
    Run,
    /// Sweep the backward-compatibility weight λ
    SweepLambda,
    /// Sweep the hidden width of the upgrade module
    SweepDim,
    /// Multi-generation upgrades: BCT-only, BiCT, BiCT with momentum
    Sequential,
    /// Deployment timeline with progressive gallery backfill
    HotRefresh,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Run => "run",
            Command::SweepLambda => "sweep-lambda",
            Command::SweepDim => "sweep-dim",
            Command::Sequential => "sequential",
            Command::HotRefresh => "hot-refresh",
        }
    }

    fn default_scenario(self) -> Scenario {
        match self {
            Command::GenData | Command::Run => Scenario::ExtendedData,
            Command::SweepLambda => Scenario::LambdaSweep,
            Command::SweepDim => Scenario::DimSweep,
            Command::Sequential => Scenario::Sequential,
            Command::HotRefresh => Scenario::HotRefresh,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub status: &'static str,
    pub command: &'static str,
    pub out: String,
    pub files: Vec<String>,
}

pub fn resolve_config(command: Command, common: &CommonArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::parse(&text, command.default_scenario())?
        }
        None => ExperimentConfig::preset(command.default_scenario()),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if command == Command::Run && !cfg.scenario.is_single_upgrade() {
        return Err(CliError::Config(format!(
            "`run` needs one of extended-data, extended-class, improved-arch, improved-loss; got {}",
            cfg.scenario
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds every output file of `command` in memory.
pub fn build_outputs(command: Command, cfg: &ExperimentConfig, exec: Exec) -> CliResult<Outputs> {
    let mut out = Outputs::new();
    out.add(SNAPSHOT_FILE, cfg.snapshot().into_bytes());
    match command {
        Command::GenData => gen_data(cfg, &mut out)?,
        Command::Run => run(cfg, exec, &mut out)?,
        Command::SweepLambda => sweep_lambda(cfg, exec, &mut out)?,
        Command::SweepDim => sweep_dim(cfg, exec, &mut out)?,
        Command::Sequential => sequential(cfg, exec, &mut out)?,
        Command::HotRefresh => hot_refresh(cfg, exec, &mut out)?,
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> CliResult<Summary> {
    let cfg = resolve_config(cli.command, &cli.common)?;
    let dir = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(cli.command.name()));
    if dir.exists()
        && !cli.common.force
        && fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .next()
            .is_some()
    {
        return Err(CliError::Exists(dir.display().to_string()));
    }
    let outputs = with_jobs(cli.common.jobs, || {
        build_outputs(cli.command, &cfg, Exec::default())
    })?;
    let written = outputs.write(&dir, cli.common.force)?;
    Ok(Summary {
        status: "ok",
        command: cli.command.name(),
        out: dir.display().to_string(),
        files: written.iter().map(|p| p.display().to_string()).collect(),
    })
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
            0
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}

fn store_bytes(store: &EmbeddingStore) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    store.write_to(&mut buf)?;
    Ok(buf)
}

fn add_checkpoint(
    out: &mut Outputs,
    name: &str,
    generation: &ModelGeneration,
    seed: u64,
) -> CliResult<()> {
    let ckpt = Checkpoint::from_generation(generation, seed);
    out.add_json(&format!("{name}.json"), &ckpt.manifest)?;
    out.add(format!("{name}.bin"), ckpt.blob_bytes());
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let mut datasets = Vec::new();
    for &seed in &cfg.seeds {
        let prep = ex::prepare(cfg, seed)?;
        let (d, e) = (&prep.data, &prep.eval);
        let files = [
            (
                "train.bin",
                EmbeddingStore::from_usize_labels(0, d.ids.clone(), &d.labels, d.inputs.clone())?,
            ),
            (
                "queries.bin",
                EmbeddingStore::from_usize_labels(
                    0,
                    e.query_ids.clone(),
                    &e.query_labels,
                    e.queries.clone(),
                )?,
            ),
            (
                "gallery.bin",
                EmbeddingStore::from_usize_labels(
                    0,
                    e.gallery_ids.clone(),
                    &e.gallery_labels,
                    e.gallery.clone(),
                )?,
            ),
        ];
        let mut hashes = serde_json::Map::new();
        for (name, store) in files {
            let bytes = store_bytes(&store)?;
            let path = format!("seed{seed}/{name}");
            hashes.insert(path.clone(), json!(crate::output::sha256_hex(&bytes)));
            out.add(path, bytes);
        }
        datasets.push(json!({
            "dataset": d.manifest(),
            "num_queries": e.query_labels.len(),
            "gallery_size": e.gallery_labels.len(),
            "files": hashes,
        }));
    }
    out.add_json("manifest.json", &json!({ "datasets": datasets }))
}

const REPORT_HEADER: [&str; 5] = ["seed", "M_o2o", "M_BCT", "M_FCT", "M_n2n_oracle"];

fn run(cfg: &ExperimentConfig, exec: Exec, out: &mut Outputs) -> CliResult<()> {
    let runs = ex::run_upgrade(cfg, exec)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for r in &runs {
        let n = &r.notations;
        rows.push(vec![
            r.prep.seed.to_string(),
            fmt_metric(Some(n.o2o)),
            fmt_metric(Some(n.bct)),
            fmt_metric(n.fct),
            fmt_metric(Some(n.n2n)),
        ]);
        let report = ex::metric_report(cfg, r);
        report.validate()?;
        reports.push(json!({ "report": report, "held_out_alignment": r.alignment }));
        let s = r.prep.seed;
        out.add(
            format!("logs/seed{s}_old.csv"),
            epoch_log_csv(&r.old.log).into_bytes(),
        );
        out.add(
            format!("logs/seed{s}_new.csv"),
            epoch_log_csv(&r.new.log).into_bytes(),
        );
        out.add(
            format!("logs/seed{s}_psi.csv"),
            epoch_log_csv(&r.psi.log).into_bytes(),
        );
        let g0 = ModelGeneration::new(0, r.old.encoder.clone(), r.old.head.clone(), None)?;
        let g1 = ModelGeneration::new(
            1,
            r.new.encoder.clone(),
            r.new.head.clone(),
            Some(r.psi.psi.clone()),
        )?;
        add_checkpoint(out, &format!("checkpoints/seed{s}_gen0"), &g0, s)?;
        add_checkpoint(out, &format!("checkpoints/seed{s}_gen1"), &g1, s)?;
    }
    let med = ex::notation_medians(&runs.iter().map(|r| &r.notations).collect::<Vec<_>>());
    rows.push(vec![
        "median".into(),
        fmt_metric(Some(med.m_o2o)),
        fmt_metric(Some(med.m_bct)),
        fmt_metric(Some(med.m_fct)),
        fmt_metric(Some(med.m_n2n)),
    ]);
    out.add_csv("report.csv", &REPORT_HEADER, &rows)?;
    out.add_json(
        "report.json",
        &json!({ "scenario": cfg.scenario, "k": cfg.k, "seeds": cfg.seeds, "median": med, "runs": reports }),
    )
}

fn sweep_lambda(cfg: &ExperimentConfig, exec: Exec, out: &mut Outputs) -> CliResult<()> {
    let rows = ex::sweep_lambda(cfg, exec)?;
    let summary = ex::summarize_lambda(&rows);
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.lambda.to_string(),
                r.seed.to_string(),
                r.psi_dim.to_string(),
                fmt_metric(Some(r.m_o2o)),
                fmt_metric(Some(r.m_bct)),
                fmt_metric(Some(r.m_fct)),
                fmt_metric(Some(r.m_n2n)),
            ]
        })
        .collect();
    out.add_csv(
        "lambda_sweep.csv",
        &[
            "lambda",
            "seed",
            "psi_dim",
            "M_o2o",
            "M_BCT",
            "M_FCT",
            "M_n2n_oracle",
        ],
        &csv_rows,
    )?;
    let sum_rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.lambda.to_string(),
                s.psi_dim.to_string(),
                fmt_metric(Some(s.median_m_o2o)),
                fmt_metric(Some(s.median_m_bct)),
                fmt_metric(Some(s.median_m_fct)),
                fmt_metric(Some(s.median_m_n2n)),
            ]
        })
        .collect();
    out.add_csv(
        "lambda_summary.csv",
        &[
            "lambda",
            "psi_dim",
            "median_M_o2o",
            "median_M_BCT",
            "median_M_FCT",
            "median_M_n2n_oracle",
        ],
        &sum_rows,
    )?;
    out.add_json(
        "lambda_summary.json",
        &json!({ "peak_lambda": ex::lambda_peak(&summary), "summary": summary, "rows": rows }),
    )
}

fn sweep_dim(cfg: &ExperimentConfig, exec: Exec, out: &mut Outputs) -> CliResult<()> {
    let rows = ex::sweep_dim(cfg, exec)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dim.to_string(),
                r.seed.to_string(),
                fmt_metric(Some(r.m_bct)),
                fmt_metric(Some(r.m_fct)),
                fmt_metric(Some(r.gain)),
                fmt_metric(Some(r.psi_loss)),
            ]
        })
        .collect();
    out.add_csv(
        "dim_sweep.csv",
        &["psi_hidden", "seed", "M_BCT", "M_FCT", "gain", "psi_loss"],
        &csv_rows,
    )?;
    let mut summary = Vec::new();
    for &dim in &cfg.sweep.dims {
        let sel: Vec<_> = rows.iter().filter(|r| r.dim == dim).collect();
        let bct = median(&sel.iter().map(|r| r.m_bct).collect::<Vec<_>>());
        let fct = median(&sel.iter().map(|r| r.m_fct).collect::<Vec<_>>());
        let loss = median(&sel.iter().map(|r| r.psi_loss).collect::<Vec<_>>());
        summary.push((dim, bct, fct, loss));
    }
    let sum_rows: Vec<Vec<String>> = summary
        .iter()
        .map(|&(d, b, f, l)| {
            vec![
                d.to_string(),
                fmt_metric(Some(b)),
                fmt_metric(Some(f)),
                fmt_metric(Some(f - b)),
                fmt_metric(Some(l)),
            ]
        })
        .collect();
    out.add_csv(
        "dim_summary.csv",
        &[
            "psi_hidden",
            "median_M_BCT",
            "median_M_FCT",
            "gain",
            "median_psi_loss",
        ],
        &sum_rows,
    )?;
    let summary_json: Vec<_> = summary
        .iter()
        .map(|&(d, b, f, l)| {
            json!({ "psi_hidden": d, "median_M_BCT": b, "median_M_FCT": f, "gain": f - b, "median_psi_loss": l })
        })
        .collect();
    out.add_json(
        "dim_summary.json",
        &json!({ "summary": summary_json, "rows": rows }),
    )
}

fn sequential(cfg: &ExperimentConfig, exec: Exec, out: &mut Outputs) -> CliResult<()> {
    let runs = ex::sequential(cfg, exec)?;
    let gens = cfg.sequential.fractions.len() - 1;
    let mut header = vec!["variant".to_string(), "seed".into(), "M_o2o".into()];
    for g in 1..=gens {
        header.push(format!("gen{g}_M_BCT"));
        header.push(format!("gen{g}_M_FCT"));
    }
    let mut rows = Vec::new();
    for (seed, o) in &runs {
        let mut row = vec![
            o.report.variant.name().to_string(),
            seed.to_string(),
            fmt_metric(Some(o.report.m_o2o)),
        ];
        for g in &o.report.generations {
            row.push(fmt_metric(Some(g.m_bct)));
            row.push(fmt_metric(g.m_fct));
        }
        rows.push(row);
    }
    for variant in SequenceVariant::ALL {
        let sel: Vec<_> = runs
            .iter()
            .filter(|(_, o)| o.report.variant == variant)
            .collect();
        let med = |f: &dyn Fn(&bict::training::SequenceReport) -> Option<f64>| {
            let vals: Vec<f64> = sel.iter().filter_map(|(_, o)| f(&o.report)).collect();
            (!vals.is_empty()).then(|| median(&vals))
        };
        let mut row = vec![
            variant.name().to_string(),
            "median".into(),
            fmt_metric(med(&|r| Some(r.m_o2o))),
        ];
        for g in 0..gens {
            row.push(fmt_metric(med(&|r| Some(r.generations[g].m_bct))));
            row.push(fmt_metric(med(&|r| r.generations[g].m_fct)));
        }
        rows.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.add_csv("sequential.csv", &header_refs, &rows)?;
    let reports: Vec<_> = runs
        .iter()
        .map(|(seed, o)| json!({ "seed": seed, "report": o.report }))
        .collect();
    out.add_json(
        "sequential.json",
        &json!({ "fractions": cfg.sequential.fractions, "runs": reports }),
    )
}

fn hot_refresh(cfg: &ExperimentConfig, exec: Exec, out: &mut Outputs) -> CliResult<()> {
    let runs = ex::refresh(cfg, exec)?;
    let mut rows = Vec::new();
    for r in &runs {
        rows.push(vec![
            r.seed.to_string(),
            r.order_seed.to_string(),
            "-1".into(),
            "0".into(),
            fmt_metric(Some(r.m_o2o)),
        ]);
        for p in &r.curve {
            rows.push(vec![
                r.seed.to_string(),
                r.order_seed.to_string(),
                p.fraction.to_string(),
                p.backfilled.to_string(),
                fmt_metric(Some(p.map)),
            ]);
        }
    }
    out.add_csv(
        "refresh.csv",
        &["seed", "order_seed", "fraction", "backfilled", "mAP"],
        &rows,
    )?;
    out.add_json("refresh.json", &json!({ "k": cfg.k, "runs": runs }))
}
