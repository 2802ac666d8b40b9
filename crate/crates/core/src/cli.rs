//! The `ndeepc` command line: `generate | train | simulate | certify --config <path> [--out <dir>]`.
//!
//! Every command writes under the output directory and records its artifacts in
//! `manifest.json` together with the configuration hash and sample time.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::controllers::NeuralDeepc;
use crate::error::{Error, Result};
use crate::experiment::{
    build_context, generate_data, hankel_from_data, train_network, ControlMode, ExperimentConfig,
};
use crate::hankel::{HankelSet, TrajectoryData};
use crate::harness::{
    compare_formulations, compute_metrics, run_closed_loop, scalar_weights, ClosedLoopLog, Experiment, MetricsReport,
};
use crate::mlp::MlpNetwork;
use crate::plant::{Pendulum, Plant, PlantState};
use crate::predictors::{equivalence_certificate, CertificateReport, DeepcContext};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "ndeepc", version, about = "Neural DeePC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the identification experiment and write the trajectory CSV.
    Generate(CommonArgs),
    /// Train the network, refit its output layer and report the certificate.
    Train(CommonArgs),
    /// Run the closed-loop experiment (or the formulation comparison).
    Simulate(CommonArgs),
    /// Recompute the equivalence certificate for saved weights.
    Certify(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory.
    pub path: String,
    pub kind: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Sample time in seconds, for plotting on a physical time axis.
    pub ts: f64,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            format: "neural-deepc-manifest".into(),
            version: 1,
            config_hash: cfg.hash(),
            ts: cfg.plant.params.ts,
            artifacts: Vec::new(),
        }
    }

    /// Loads the manifest in `dir` if it belongs to the same configuration,
    /// else starts a fresh one.
    pub fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let existing: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if existing.config_hash == cfg.hash() {
                return Ok(existing);
            }
        }
        Ok(Self::new(cfg))
    }

    pub fn record(&mut self, path: &str, kind: &str, command: &str) {
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(ArtifactEntry {
            path: path.into(),
            kind: kind.into(),
            command: command.into(),
        });
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    command: &'static str,
}

impl Session {
    fn open(args: &CommonArgs, command: &'static str) -> Result<Self> {
        let cfg = ExperimentConfig::load(&args.config)?;
        let out = args
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        let manifest = Manifest::open(&out, &cfg)?;
        Ok(Self {
            cfg,
            out,
            manifest,
            command,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str, kind: &str) {
        let command = self.command;
        self.manifest.record(name, kind, command);
    }

    fn write_json<T: Serialize>(&mut self, name: &str, kind: &str, value: &T) -> Result<()> {
        std::fs::write(self.path(name), serde_json::to_string_pretty(value)?)?;
        self.record(name, kind);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.save(&self.out)
    }

    fn data_path(&self) -> PathBuf {
        self.cfg.data.path.clone().unwrap_or_else(|| self.path("data.csv"))
    }

    fn weights_path(&self) -> PathBuf {
        self.cfg.network.weights.clone().unwrap_or_else(|| self.path("weights.json"))
    }

    fn load_hankel(&self) -> Result<HankelSet> {
        let path = self.data_path();
        let data = TrajectoryData::read_csv(&require(&path, "trajectory data", "generate")?)?;
        hankel_from_data(&self.cfg, &data)
    }

    fn load_context(&self) -> Result<std::sync::Arc<DeepcContext>> {
        let hankel = self.load_hankel()?;
        let net = MlpNetwork::load(&require(&self.weights_path(), "weights", "train")?)?;
        build_context(&self.cfg, &net, &hankel)
    }
}

fn require(path: &Path, what: &str, producer: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} file {} not found (run `{producer}` first)", path.display()),
        )))
    }
}

#[derive(Debug, Serialize)]
struct GenerateSummary {
    config_hash: String,
    samples: usize,
    u_range: [f64; 2],
    y_range: [f64; 2],
}

#[derive(Debug, Serialize)]
struct CertificateFile {
    config_hash: String,
    phi_bar_shape: [usize; 2],
    hankel_shape: [usize; 2],
    #[serde(flatten)]
    report: CertificateReport,
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    config_hash: &'a str,
    label: &'a str,
    lambda: f64,
    #[serde(flatten)]
    metrics: MetricsReport,
}

fn range(v: impl Iterator<Item = f64>) -> [f64; 2] {
    v.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], x| [lo.min(x), hi.max(x)])
}

pub fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args, "generate")?;
    let data = generate_data(&s.cfg)?;
    data.write_csv(&s.path("data.csv"))?;
    s.record("data.csv", "trajectory");
    let summary = GenerateSummary {
        config_hash: s.cfg.hash(),
        samples: data.len(),
        u_range: range(data.u.iter().copied()),
        y_range: range(data.y.iter().copied()),
    };
    println!("samples: {}", summary.samples);
    println!("u range: [{:.6}, {:.6}]", summary.u_range[0], summary.u_range[1]);
    println!("y range: [{:.6}, {:.6}]", summary.y_range[0], summary.y_range[1]);
    s.write_json("generate_summary.json", "summary", &summary)?;
    s.finish()
}

fn certificate_file(cfg: &ExperimentConfig, ctx: &DeepcContext) -> Result<CertificateFile> {
    let cert = equivalence_certificate(ctx, &ctx.residual(), cfg.certify.tolerance)?;
    Ok(CertificateFile {
        config_hash: cfg.hash(),
        phi_bar_shape: [ctx.phi_bar.nrows(), ctx.phi_bar.ncols()],
        hankel_shape: [ctx.h.nrows(), ctx.h.ncols()],
        report: cert.report(ctx),
    })
}

fn print_certificate(c: &CertificateFile) {
    let r = &c.report;
    println!("H: {}x{}", c.hankel_shape[0], c.hankel_shape[1]);
    println!("Phi_bar: {}x{}", c.phi_bar_shape[0], c.phi_bar_shape[1]);
    println!("min singular value of [Phi_bar; 1^T]: {:.6e}", r.min_singular_value);
    println!("residual Frobenius norm: {:.6e}", r.residual_frobenius);
    println!(
        "certificate: {:.6e} (tolerance {:.1e}, {})",
        r.certificate,
        r.tolerance,
        if r.equivalent { "equivalent" } else { "not equivalent" }
    );
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args, "train")?;
    let hankel = s.load_hankel()?;
    let outcome = train_network(&s.cfg, &hankel)?;
    if !outcome.history.is_empty() {
        outcome.write_loss_csv(&s.path("loss.csv"))?;
        s.record("loss.csv", "training-loss");
    }
    let ctx = build_context(&s.cfg, &outcome.net, &hankel)?;
    ctx.net.save(&s.path("weights.json"))?;
    s.record("weights.json", "weights");
    println!(
        "fit cost: trained {:.6e} -> refit {:.6e}",
        ctx.refit.cost_before, ctx.refit.cost_after
    );
    match certificate_file(&s.cfg, &ctx) {
        Ok(c) => {
            print_certificate(&c);
            s.write_json("certificate.json", "certificate", &c)?;
        }
        Err(e @ Error::RankHypothesis(_)) => {
            eprintln!("warning: certificate skipped: {e}");
        }
        Err(e) => return Err(e),
    }
    s.finish()
}

pub fn cmd_certify(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args, "certify")?;
    let ctx = s.load_context()?;
    let c = certificate_file(&s.cfg, &ctx)?;
    print_certificate(&c);
    s.write_json("certificate.json", "certificate", &c)?;
    s.finish()
}

fn save_run(s: &mut Session, log: &ClosedLoopLog, metrics: &MetricsReport) -> Result<()> {
    let csv = format!("closed_loop_{}.csv", log.meta.label);
    log.write_csv(&s.path(&csv))?;
    s.record(&csv, "closed-loop-log");
    let file = MetricsFile {
        config_hash: &log.meta.config_hash,
        label: &log.meta.label,
        lambda: log.meta.lambda,
        metrics: *metrics,
    };
    s.write_json(&format!("metrics_{}.json", log.meta.label), "metrics", &file)
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args, "simulate")?;
    let ctx = s.load_context()?;
    let cfg = s.cfg.clone();
    let hash = cfg.hash();
    let reference = cfg.reference_signal()?;
    let params = cfg.plant.params;
    let make_plant = move || Box::new(Pendulum::new(params, PlantState::default())) as Box<dyn Plant>;
    let base = cfg.control_config(cfg.control_formulation())?;
    let (q, r) = scalar_weights(&base)?;

    if cfg.control.formulation == ControlMode::Compare {
        let experiment = Experiment {
            make_plant: &make_plant,
            reference: &reference,
            opts: cfg.closed_loop_options(),
        };
        let (report, logs) = compare_formulations(ctx, &base, &cfg.control.compare, &experiment)?;
        for mut log in logs {
            log.meta.config_hash = hash.clone();
            let metrics = compute_metrics(&log, q, r);
            save_run(&mut s, &log, &metrics)?;
        }
        let table = report.to_table();
        print!("{table}");
        std::fs::File::create(s.path("comparison.txt"))?.write_all(table.as_bytes())?;
        s.record("comparison.txt", "comparison-table");
        #[derive(Serialize)]
        struct ComparisonFile<'a> {
            config_hash: &'a str,
            #[serde(flatten)]
            report: &'a crate::harness::ComparisonReport,
        }
        let file = ComparisonFile {
            config_hash: &hash,
            report: &report,
        };
        s.write_json("comparison.json", "comparison", &file)?;
    } else {
        let mut ctrl = NeuralDeepc::new(ctx, base.clone())?;
        let mut plant = make_plant();
        let mut log = run_closed_loop(plant.as_mut(), &mut ctrl, &reference, &cfg.closed_loop_options())?;
        log.meta.label = match cfg.control.formulation {
            ControlMode::Linear => "linear".into(),
            _ => base.formulation.name().into(),
        };
        log.meta.lambda = base.lambda;
        log.meta.config_hash = hash.clone();
        let metrics = compute_metrics(&log, q, r);
        println!(
            "{}: J_ISE {:.4} J_IAE {:.4} J_u {:.4} J_track {:.4} mean solve {:.6} s converged {:.1}%",
            log.meta.label,
            metrics.j_ise,
            metrics.j_iae,
            metrics.j_u,
            metrics.j_track,
            metrics.mean_solve_s,
            100.0 * metrics.convergence_rate
        );
        save_run(&mut s, &log, &metrics)?;
    }
    s.finish()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Certify(a) => cmd_certify(a),
    }
}

/// One-line, machine-parsable error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: category={} message={msg}", e.category())
}
