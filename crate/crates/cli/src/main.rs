use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use binfer_core::model::{build_topology, generate_random_model, load_model, save_model, Model, Padding, Scale, Topology};
use binfer_core::pipeline::{count_ops, run_batch_timed, verify_random_models};
use binfer_core::resources::{bram_estimate, kfps_table, latency_estimate, roofline, DeviceModel, NetworkSpec};
use binfer_core::scheduler::{rate_balance_check, schedule, FoldingConfig, ScheduleReport};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "binfer", version, about = "Binarized network engine and accelerator explorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random model file.
    Gen {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Classify raw 32x32x3 frames, one JSON line per frame.
    Run {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        images: PathBuf,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
        /// Print measured frames per second to stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Compare random models against the reference implementation.
    Verify {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the given matrix layer (0-based) to exercise the harness.
        #[arg(long, value_name = "LAYER")]
        inject_fault: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Fold a topology to a target frame rate.
    Schedule {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        json: bool,
    },
    /// Throughput table, memory allocation and latency at a target frame rate.
    Report {
        /// Scale factors to tabulate.
        #[arg(long, value_delimiter = ',', default_value = "1,1/2,1/4")]
        sigma: Vec<Scale>,
        #[arg(long, value_enum, default_value_t = PadArg::Neg1)]
        padding: PadArg,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        json: bool,
    },
    /// Synaptic operations per frame.
    Opcount {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        json: bool,
    },
    /// Peak throughput per datatype for a device.
    Roofline {
        /// Device file path or shipped device name.
        #[arg(long, default_value = "vx690t")]
        device: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PadArg {
    Neg1,
    None,
    Zero,
}

impl From<PadArg> for Padding {
    fn from(p: PadArg) -> Self {
        match p {
            PadArg::Neg1 => Padding::NegOne,
            PadArg::None => Padding::None,
            PadArg::Zero => Padding::ZeroOracleOnly,
        }
    }
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value = "1")]
    sigma: Scale,
    #[arg(long, value_enum, default_value_t = PadArg::Neg1)]
    padding: PadArg,
}

impl NetArgs {
    fn topology(&self) -> Result<Topology> {
        Ok(build_topology(self.sigma, self.padding.into())?)
    }
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long, default_value_t = 12_000.0)]
    fps: f64,
    #[arg(long, default_value_t = 125_000_000)]
    clock: u64,
    /// Disable multi-vector execution.
    #[arg(long)]
    no_mmv: bool,
    /// Upper bound on vectors per weight fetch; defaults to unbounded.
    #[arg(long)]
    mmv_max: Option<usize>,
}

impl FoldArgs {
    fn run(&self, t: &Topology) -> Result<(FoldingConfig, ScheduleReport)> {
        Ok(schedule(t, self.fps, self.clock, !self.no_mmv, self.mmv_max.unwrap_or(usize::MAX))?)
    }
}

/// Bad input from the user; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use binfer_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Stream(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn resolve_device(spec: &str) -> Result<DeviceModel> {
    let direct = Path::new(spec);
    if direct.is_file() {
        return DeviceModel::load(direct).with_context(|| format!("loading device file {spec}"));
    }
    let stem = spec.strip_suffix(".json").unwrap_or(spec);
    if let Ok(dir) = std::env::var("BINFER_DEVICE_DIR") {
        let p = Path::new(&dir).join(format!("{stem}.json"));
        if p.is_file() {
            return DeviceModel::load(&p).with_context(|| format!("loading device file {}", p.display()));
        }
    }
    DeviceModel::builtin(stem).map_err(|_| {
        let names: Vec<_> = DeviceModel::builtin_names().collect();
        usage(format!("no device file `{spec}` (shipped devices: {})", names.join(", ")))
    })
}

fn read_frames(path: &Path, frame_bytes: usize) -> Result<Vec<Vec<u8>>> {
    let data = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if data.len() % frame_bytes != 0 {
        return Err(usage(format!(
            "image file {} has {} bytes, not a multiple of the {frame_bytes}-byte frame size ({} trailing bytes)",
            path.display(),
            data.len(),
            data.len() % frame_bytes
        )));
    }
    Ok(data.chunks(frame_bytes).map(<[u8]>::to_vec).collect())
}

#[derive(Serialize)]
struct FrameLine<'a> {
    frame: usize,
    label: usize,
    scores: &'a [i32],
}

fn cmd_gen(net: &NetArgs, seed: u64, out: &Path) -> Result<()> {
    if matches!(net.padding, PadArg::Zero) {
        return Err(usage("zero padding cannot be compiled for the binary engine; use neg1 or none"));
    }
    let t = net.topology()?;
    let model = Model::new(t.clone(), generate_random_model(&t, seed)?)?;
    save_model(&model, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} ({} matrix layers)", out.display(), model.layers.len());
    Ok(())
}

fn cmd_run(model: &Path, images: &Path, workers: usize, timing: bool) -> Result<()> {
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    if !model.is_file() {
        return Err(usage(format!("model file {} does not exist", model.display())));
    }
    let model = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let frames = read_frames(images, model.topology.input.frame_bytes())?;
    let (results, fps) = run_batch_timed(&model, &frames, workers)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for (frame, r) in results.iter().enumerate() {
        let line = FrameLine {
            frame,
            label: r.label,
            scores: &r.scores,
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    out.flush()?;
    if timing {
        eprintln!("{} frames, {fps:.1} frames/s on {workers} workers", results.len());
    }
    Ok(())
}

fn cmd_verify(net: &NetArgs, trials: usize, frames: usize, seed: u64, fault: Option<usize>, json: bool) -> Result<bool> {
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let t = net.topology()?;
    if let Some(f) = fault {
        if f >= t.mvu_count() {
            return Err(usage(format!("--inject-fault {f}: model has {} matrix layers", t.mvu_count())));
        }
    }
    let report = verify_random_models(&t, trials, frames, seed, fault)?;
    if json {
        print_json(&report)?;
    } else if report.passed() {
        println!("all {} cases bit-exact", report.cases);
    } else {
        let first = &report.failures[0];
        println!(
            "{} of {} cases differ; first mismatch at layer {} (trial {}, frame {}): {}",
            report.failures.len(),
            report.cases,
            first.mismatch.layer,
            first.trial,
            first.frame,
            first.mismatch.detail
        );
    }
    Ok(report.passed())
}

#[derive(Serialize)]
struct ScheduleSummary {
    ii_max: u64,
    achieved_fps: f64,
    gops: f64,
    budget: u64,
}

#[derive(Serialize)]
struct ScheduleJson<'a> {
    network: &'a str,
    layers: &'a FoldingConfig,
    summary: ScheduleSummary,
}

fn cmd_schedule(net: &NetArgs, fold: &FoldArgs, json: bool) -> Result<()> {
    let t = net.topology()?;
    let (cfg, rep) = fold.run(&t)?;
    if json {
        return print_json(&ScheduleJson {
            network: &t.name,
            layers: &cfg,
            summary: ScheduleSummary {
                ii_max: rep.ii_max,
                achieved_fps: rep.achieved_fps,
                gops: rep.gops,
                budget: rep.budget,
            },
        });
    }
    println!("{} at {} fps, {} Hz: budget {} cycles", t.name, rep.target_fps, rep.clock_hz, rep.budget);
    println!("{:>5} {:>6} {:>6} {:>5} {:>6} {:>6} {:>6} {:>8}", "layer", "P", "S", "M", "Fn", "Fs", "Fm", "II");
    for l in &cfg.layers {
        println!(
            "{:>5} {:>6} {:>6} {:>5} {:>6} {:>6} {:>6} {:>8}",
            l.layer, l.p, l.s, l.m, l.f_n, l.f_s, l.f_m, l.ii
        );
    }
    let bal = rate_balance_check(&cfg);
    println!(
        "ii_max {}  achieved {:.1} fps  {:.1} GOps/s  balance ratio {:.2}",
        rep.ii_max, rep.achieved_fps, rep.gops, bal.ratio
    );
    if !bal.over_provisioned.is_empty() {
        println!("over-provisioned layers: {:?}", bal.over_provisioned);
    }
    if !rep.infeasible.is_empty() {
        println!("infeasible layers: {:?}", rep.infeasible);
    }
    Ok(())
}

#[derive(Serialize)]
struct NetworkReport {
    network: String,
    schedule: ScheduleReport,
    latency_us: f64,
    bram: binfer_core::resources::BramReport,
}

#[derive(Serialize)]
struct ReportJson {
    table: binfer_core::resources::KfpsTable,
    networks: Vec<NetworkReport>,
}

fn cmd_report(sigmas: &[Scale], padding: PadArg, fold: &FoldArgs, json: bool) -> Result<()> {
    if sigmas.is_empty() {
        return Err(usage("--sigma needs at least one value"));
    }
    let mut runs = Vec::new();
    for &s in sigmas {
        let t = build_topology(s, padding.into())?;
        let (cfg, rep) = fold.run(&t)?;
        runs.push((t, cfg, rep));
    }
    let rows: Vec<_> = runs.iter().map(|(t, _, r)| (t, r)).collect();
    let table = kfps_table(&rows);
    let mut networks = Vec::new();
    for (t, cfg, rep) in &runs {
        networks.push(NetworkReport {
            network: t.name.clone(),
            schedule: rep.clone(),
            latency_us: latency_estimate(cfg, fold.clock) * 1e6,
            bram: bram_estimate(t, cfg)?,
        });
    }
    if json {
        return print_json(&ReportJson { table, networks });
    }
    print!("{}", table.render_text());
    for n in &networks {
        println!("\n{}: latency estimate {:.1} us", n.network, n.latency_us);
        print!("{}", n.bram.render_text());
    }
    Ok(())
}

fn cmd_opcount(net: &NetArgs, json: bool) -> Result<()> {
    let t = net.topology()?;
    let r = count_ops(&t);
    if json {
        return print_json(&r);
    }
    println!("{:>5} {:>14} {:>14}", "layer", "macs", "ops");
    for l in &r.per_layer {
        println!("{:>5} {:>14} {:>14}", l.layer, l.macs, l.ops);
    }
    println!("{}: {:.1} Mops", t.name, r.total_ops as f64 / 1e6);
    Ok(())
}

fn cmd_roofline(device: &str, json: bool) -> Result<()> {
    let d = resolve_device(device)?;
    let mut nets = Vec::new();
    for s in ["1", "1/2", "1/4"] {
        let t = build_topology(s.parse()?, Padding::NegOne)?;
        let ops = count_ops(&t).total_ops;
        let weight_bits: usize = t.mvu_layers().map(|(_, g)| g.neurons() * g.synapses_per_neuron).sum();
        let (_, rep) = schedule(&t, 12_000.0, 125_000_000, true, usize::MAX)?;
        nets.push(NetworkSpec {
            name: t.name.clone(),
            total_ops: ops,
            model_bytes: weight_bits.div_ceil(8) as u64,
            frame_bytes: t.input.frame_bytes() as u64,
            attained_ops: Some(rep.gops * 1e9),
        });
    }
    let r = roofline(&d, &nets)?;
    if json {
        print_json(&r)
    } else {
        print!("{}", r.render_text());
        Ok(())
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { net, seed, out } => cmd_gen(net, *seed, out)?,
        Command::Run {
            model,
            images,
            workers,
            timing,
        } => cmd_run(model, images, *workers, *timing)?,
        Command::Verify {
            net,
            trials,
            frames,
            seed,
            inject_fault,
            json,
        } => return cmd_verify(net, *trials, *frames, *seed, *inject_fault, *json),
        Command::Schedule { net, fold, json } => cmd_schedule(net, fold, *json)?,
        Command::Report {
            sigma,
            padding,
            fold,
            json,
        } => cmd_report(sigma, *padding, fold, *json)?,
        Command::Opcount { net, json } => cmd_opcount(net, *json)?,
        Command::Roofline { device, json } => cmd_roofline(device, *json)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

