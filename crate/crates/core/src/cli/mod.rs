//! The `gridmath` command line: verification, benchmarks, the training demo,
//! pipeline tuning and simulated scaling studies. Every report is CSV.

pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::dataload::{modeled_latency, tune, CostTable, Placement, StageCost};
use crate::dnn::{self, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::precision::Precision;
use crate::session::{Session, SessionConfig};
use crate::sim;
use crate::transport::{Backend, Fabric, MessageKind};

pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "gridmath", version, about = "Distributed matrix runtime: verification and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set workers=1,2,4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub workers: Option<String>,
    /// Fixed reduction orders.
    #[arg(long)]
    pub deterministic: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::defaults()?,
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(w) = &self.workers {
            c.set("workers", w)?;
        }
        if self.deterministic {
            c.set("deterministic", "true")?;
        }
        Ok(c)
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(File::create(p)?),
            None => Box::new(io::stdout()),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run oracle and invariant suites; exits nonzero on any failure.
    Verify {
        /// Only these suites (repeatable).
        #[arg(long)]
        suite: Vec<String>,
        /// Feed an overlapping layout to the layout suite.
        #[arg(long)]
        inject_layout_overlap: bool,
    },
    /// Time distributed GEMM over `sizes` x `workers`.
    BenchGemm(ConfigArgs),
    /// Train the MLP demo and emit the CSV training log.
    TrainDemo(ConfigArgs),
    /// Pick thread count and stage placements for a cost table file.
    TunePipeline {
        cost_table: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_threads: usize,
    },
    /// Strong-scaling curves of the GEMM and training analogs on the cost model.
    SimulateScaling(ConfigArgs),
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Verify { suite, inject_layout_overlap } => {
            cmd_verify(&suite, &verify::Options { inject_layout_overlap }, &mut io::stdout())
        }
        Command::BenchGemm(a) => {
            let c = a.resolve()?;
            bench_gemm(&c, &mut a.writer()?)?;
            Ok(0)
        }
        Command::TrainDemo(a) => {
            let c = a.resolve()?;
            let rows = train_demo(&c)?;
            dnn::write_log(&mut a.writer()?, &rows)?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                eprintln!("config {} loss {:.6} -> {:.6}", c.hash(), first.loss, last.loss);
            }
            Ok(0)
        }
        Command::TunePipeline { cost_table, max_threads } => {
            let table = read_cost_table(&std::fs::read_to_string(cost_table)?)?;
            tune_report(&table, max_threads, &mut io::stdout())?;
            Ok(0)
        }
        Command::SimulateScaling(a) => {
            let c = a.resolve()?;
            let ok = simulate_scaling(&c, &mut a.writer()?)?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

pub fn cmd_verify(suites: &[String], opts: &verify::Options, out: &mut impl Write) -> Result<i32> {
    let chosen: Vec<String> = if suites.is_empty() { verify::SUITES.iter().map(|s| s.to_string()).collect() } else { suites.to_vec() };
    writeln!(out, "suite,status,detail")?;
    let mut failed = 0;
    for name in &chosen {
        let r = verify::run_suite(name, opts);
        let (status, detail) = match r {
            Ok(d) => ("pass", d),
            Err(d) => {
                failed += 1;
                ("fail", d)
            }
        };
        writeln!(out, "{name},{status},{}", detail.replace(',', ";"))?;
    }
    Ok(i32::from(failed > 0))
}

pub const BENCH_HEADER: &str = "experiment,workers,size,backend,seconds,throughput,control_bytes,data_bytes,pool_allocations,status,config";

fn backend_name(b: &Backend) -> &'static str {
    match b {
        Backend::InProcess => "inprocess",
        Backend::Simulated(_) => "simulated",
    }
}

/// One GEMM per (size, workers) pair on near-square grids. Errors such as
/// OutOfMemory are reported in the row's status and the run continues.
pub fn bench_gemm(c: &Config, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    let backend = c.backend()?;
    let hash = c.hash();
    for &n in &c.sizes()? {
        if n < 64 {
            return Err(Error::Config(format!("bench sizes must be at least 64, got {n}")));
        }
        for &p in &c.workers_list()? {
            let row = bench_one(c, n, p, backend);
            match row {
                Ok((secs, ctl, data, allocs)) => writeln!(
                    out,
                    "gemm,{p},{n},{},{secs:.6},{:.6e},{ctl},{data},{allocs},ok,{hash}",
                    backend_name(&backend),
                    2.0 * (n as f64).powi(3) / secs.max(1e-12)
                )?,
                Err(e) => writeln!(out, "gemm,{p},{n},{},,,,,,{},{hash}", backend_name(&backend), e.to_string().replace(',', ";"))?,
            }
        }
    }
    Ok(())
}

fn session_config(c: &Config) -> Result<SessionConfig> {
    let limit = c.usize("memory-limit")?;
    Ok(SessionConfig {
        deterministic: c.flag("deterministic")?,
        chunk_bytes: c.usize("chunk-size")?.max(1),
        memory_limit: (limit > 0).then_some(limit),
    })
}

fn bench_one(c: &Config, n: usize, p: usize, backend: Backend) -> Result<(f64, u64, u64, u64)> {
    let mut s = Session::with_config(Fabric::new(p, backend)?, session_config(c)?)?;
    let (pr, pc) = sim::grid_shape(p);
    let ws = s.worker_ids().to_vec();
    let seed = c.uint("seed")?;
    let mut ms = Vec::new();
    for i in 0..3 {
        let m = s.create_matrix(n, n, Precision::Single, Layout::grid(n, n, pr, pc, &ws)?)?;
        if i < 2 {
            s.fill_uniform(m, seed.wrapping_add(i), -1.0, 1.0)?;
        }
        ms.push(m);
    }
    s.fabric().reset_clock();
    let before = s.fabric().stats();
    let start = Instant::now();
    s.gemm(ms[0], ms[1], ms[2], 1.0, 0.0, false, false)?;
    let wall = start.elapsed().as_secs_f64();
    let d = s.fabric().stats().since(&before);
    let secs = match backend {
        Backend::Simulated(_) => s.fabric().simulated_elapsed()?,
        Backend::InProcess => wall,
    };
    let allocs = s.pool_stats()?.iter().map(|w| w.pool.allocations_from_os).sum();
    Ok((secs, d.total(MessageKind::Control).bytes, d.total(MessageKind::Data).bytes, allocs))
}

/// Trains the demo network described by the config and returns the log.
pub fn train_demo(c: &Config) -> Result<Vec<dnn::LogRow>> {
    let seed = c.uint("seed")?;
    let data = match c.get("dataset") {
        "" => Dataset::synthetic(c.usize("samples")?, c.usize("features")?, c.usize("classes")?, 0.3, seed),
        path => Dataset::read(path)?,
    };
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut sizes = vec![data.dim];
    sizes.extend(c.hidden()?);
    sizes.push(data.classes);
    let mut s = Session::with_config(Fabric::new(c.workers()?, c.backend()?)?, session_config(c)?)?;
    let cfg = TrainConfig { batch: c.usize("batch")?, learning_rate: c.float("learning-rate")?, precision: c.precision()?, seed };
    let mut st = dnn::build_network(&mut s, &dnn::mlp(&sizes), &cfg)?;
    dnn::train(&mut s, &mut st, &data, c.usize("steps")?)
}

/// Cost table text: `transfer=`, `thread-overhead=` and one
/// `stage=name,host,device` line per stage, in pipeline order.
pub fn read_cost_table(text: &str) -> Result<CostTable> {
    let mut table = CostTable { stages: Vec::new(), transfer: 0.0, thread_overhead: 0.0 };
    let num = |k: &str, v: &str| -> Result<f64> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite() && *x >= 0.0)
            .ok_or_else(|| Error::Config(format!("{k}: expected a non-negative number, got {v:?}")))
    };
    for (k, v) in config::parse_pairs(text)? {
        match k.as_str() {
            "transfer" => table.transfer = num(&k, &v)?,
            "thread-overhead" => table.thread_overhead = num(&k, &v)?,
            "stage" => {
                let parts: Vec<&str> = v.split(',').collect();
                let [_, host, device] = parts.as_slice() else {
                    return Err(Error::Config(format!("stage: expected name,host,device, got {v:?}")));
                };
                table.stages.push(StageCost { host: num("host", host)?, device: num("device", device)? });
            }
            _ => return Err(Error::Config(format!("unknown cost table key {k:?}"))),
        }
    }
    if table.stages.is_empty() {
        return Err(Error::Config("cost table has no stages".into()));
    }
    Ok(table)
}

pub fn tune_report(table: &CostTable, max_threads: usize, out: &mut impl Write) -> Result<()> {
    let choice = tune(table, max_threads);
    let places: Vec<&str> = choice
        .placements
        .iter()
        .map(|p| match p {
            Placement::Host => "host",
            Placement::Device => "device",
        })
        .collect();
    writeln!(out, "threads,placements,modeled_seconds")?;
    writeln!(out, "{},{},{:.6e}", choice.threads, places.join(";"), modeled_latency(table, &choice))?;
    Ok(())
}

/// Prints both analog curves; returns whether both have the expected shape.
pub fn simulate_scaling(c: &Config, out: &mut impl Write) -> Result<bool> {
    let cost = c.cost()?;
    let hash = c.hash();
    let n = c.usize("gemm-size")?;
    let analog = sim::TrainingAnalog { chunk_bytes: c.usize("chunk-size")?.max(1), ..sim::TrainingAnalog::default() };
    let ps = sim::doubling(c.usize("max-workers")?.max(1));
    writeln!(out, "experiment,workers,seconds,throughput,marginal_gain,config")?;
    let mut ok = true;
    for (name, f) in [
        ("gemm", &(|p| sim::simulate_gemm(n, p, &cost)) as &dyn Fn(usize) -> Result<sim::SimPoint>),
        ("training", &|p| sim::simulate_training(&analog, p, &cost)),
    ] {
        let pts = ps.iter().map(|&p| f(p)).collect::<Result<Vec<_>>>()?;
        let shape = sim::shape(&pts);
        ok &= shape.monotone && shape.diminishing;
        for (i, pt) in pts.iter().enumerate() {
            let gain = if i == 0 { String::new() } else { format!("{:.6e}", shape.marginal[i - 1]) };
            writeln!(out, "{name},{},{:.6e},{:.6e},{gain},{hash}", pt.workers, pt.seconds, pt.throughput)?;
        }
    }
    Ok(ok)
}
