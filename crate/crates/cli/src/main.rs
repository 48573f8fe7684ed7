use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hileak::combiner::{analyze_file, analyze_set, write_leaks_json, Analysis, AnalysisConfig, HeatmapData, Order};
use hileak::corpus;
use hileak::emulator::{parse_program, run_experiment_with, ExperimentSpec, LeakageModel, Program, Recording};
use hileak::pipeline::{desk_schedule, full_schedule, root_causes, run_loop, write_report, LoopConfig, Report};
use hileak::rewriter::{apply_fixes, overhead, overhead_table, plan_fixes, CycleTable};
use hileak::rootcause::{RootCause, RootCauseConfig};
use hileak::tracestore::{write_component_matrix, write_traceset, DatasetManifest, NoiseConfig};

/// Higher-order power leakage detection and hardening for masked assembly.
#[derive(Parser, Debug)]
#[command(name = "hileak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Leakage model JSON; the built-in synthetic model when omitted.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Analysis order, 2 or 3. Defaults to the bundled kernel's order, else 2.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=3))]
    order: Option<u8>,
    #[arg(long, global = true, default_value_t = 50)]
    window: usize,
    #[arg(long, global = true, default_value_t = 1e-5)]
    alpha: f64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "HILEAK_THREADS")]
    threads: Option<usize>,
    /// Splits of the sample axis for the combiner work units.
    #[arg(long, global = true, default_value_t = 4)]
    splits: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise, percent of the clean trace amplitude.
    #[arg(long, global = true, default_value_t = 0.25)]
    noise_sigma_pct: f64,
    #[arg(long, global = true, default_value = "hileak-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Emulate fixed-vs-random traces of a kernel.
    Emulate {
        #[command(flatten)]
        kernel: KernelArg,
        #[arg(long, default_value_t = 20_000)]
        traces: usize,
        /// Also store every component value.
        #[arg(long)]
        components: bool,
    },
    /// Multivariate t-test of a stored trace file.
    Analyze {
        /// Trace file written by `emulate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Emulate, test and attribute every leak to model components.
    Rootcause {
        #[command(flatten)]
        kernel: KernelArg,
        #[arg(long, default_value_t = 20_000)]
        traces: usize,
    },
    /// One detect, root-cause, rewrite round.
    Fix {
        #[command(flatten)]
        kernel: KernelArg,
        #[arg(long, default_value_t = 20_000)]
        traces: usize,
    },
    /// The iterative loop over a trace schedule.
    Run {
        #[command(flatten)]
        kernel: KernelArg,
        /// `full`, `desk` or a comma-separated increasing list.
        #[arg(long, default_value = "full")]
        schedule: String,
    },
    /// Summarise a `report.json`.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args, Debug)]
struct KernelArg {
    /// Assembly file, or the name of a bundled kernel.
    #[arg(long)]
    kernel: String,
}

struct Kernel {
    name: String,
    program: Program,
    order: Option<u8>,
}

fn load_kernel(arg: &str) -> Result<Kernel> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        let program = parse_program(&text).with_context(|| format!("parsing {arg}"))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.into());
        let order = corpus::kernel(&name).ok().filter(|k| k.source == text).map(|k| k.order);
        return Ok(Kernel { name, program, order });
    }
    let name = arg.strip_suffix(".s").unwrap_or(arg);
    let k = corpus::kernel(name).with_context(|| format!("{arg} is neither a file nor a bundled kernel"))?;
    Ok(Kernel { name: name.into(), program: parse_program(k.source)?, order: Some(k.order) })
}

impl Common {
    fn model(&self) -> Result<LeakageModel> {
        match &self.model {
            Some(p) => LeakageModel::load(p).with_context(|| format!("loading model {}", p.display())),
            None => Ok(LeakageModel::default()),
        }
    }

    fn analysis(&self, kernel_order: Option<u8>) -> Result<AnalysisConfig> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("--alpha must lie in (0, 1)");
        }
        let order = Order::try_from(self.order.or(kernel_order).unwrap_or(2))?;
        Ok(AnalysisConfig { order, window: self.window, alpha: self.alpha, splits: self.splits, ..AnalysisConfig::default() })
    }

    fn spec(&self, program: &Program, n: usize) -> ExperimentSpec {
        ExperimentSpec { noise_sigma_pct: self.noise_sigma_pct, ..ExperimentSpec::new(program.clone(), n, self.seed) }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    match s {
        "full" => Ok(full_schedule()),
        "desk" => Ok(desk_schedule()),
        list => list
            .split(',')
            .map(|x| x.trim().replace('_', "").parse::<usize>().with_context(|| format!("bad schedule entry '{x}'")))
            .collect(),
    }
}

fn write_analysis(a: &Analysis, dir: &Path) -> Result<()> {
    write_leaks_json(&a.leaks, dir.join("leaks.json"))?;
    let mut csv = Vec::new();
    a.heatmap.write_csv(&mut csv)?;
    fs::write(dir.join("heatmap.csv"), csv)?;
    if matches!(a.heatmap.data, HeatmapData::Dense(_)) {
        let mut pgm = Vec::new();
        a.heatmap.write_pgm(&mut pgm)?;
        fs::write(dir.join("heatmap.pgm"), pgm)?;
    }
    println!(
        "{} indices, threshold {:.3}, max |t| {:.3}, {} leaks",
        a.n_indices,
        a.threshold,
        a.max_abs_t,
        a.leaks.len()
    );
    for l in a.leaks.iter().take(10) {
        println!("  leak ({}) t = {:.2}", l.index, l.t_value);
    }
    Ok(())
}

/// Emulates, tests, and root-causes every leak of one kernel revision.
fn detect_and_attribute(common: &Common, kernel: &Kernel, n: usize) -> Result<(Analysis, Vec<RootCause>)> {
    let model = common.model()?;
    let spec = common.spec(&kernel.program, n);
    let (set, _) = run_experiment_with(&spec, &model, Recording::PowerOnly)?;
    let analysis = analyze_set(&set, &common.analysis(kernel.order)?)?;
    let cfg = RootCauseConfig { threshold: analysis.threshold, seed: common.seed, ..RootCauseConfig::default() };
    let causes = root_causes(&spec, &model, &analysis, &cfg, 8)?;
    Ok((analysis, causes))
}

fn print_causes(causes: &[RootCause]) {
    for c in causes {
        let names: Vec<String> = c.culprits.iter().map(|k| format!("{}@{}", k.name, k.sample)).collect();
        println!("  leak ({}) {:?}: {}", c.leak.index, c.method, names.join(" "));
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    if let Some(t) = common.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match &cli.command {
        Command::Emulate { kernel, traces, components } => {
            let k = load_kernel(&kernel.kernel)?;
            let model = common.model()?;
            let spec = common.spec(&k.program, *traces);
            let rec = if *components { Recording::Full } else { Recording::PowerOnly };
            let (set, cm) = run_experiment_with(&spec, &model, rec)?;
            let dir = common.out_dir()?;
            write_traceset(&set, dir.join("traces.bin"))?;
            if let Some(cm) = &cm {
                write_component_matrix(cm, dir.join("components.bin"))?;
            }
            let manifest = DatasetManifest {
                kernel: k.name.clone(),
                order: common.analysis(k.order)?.order.arity() as u8,
                fixed_input: spec.fixed_secret.iter().map(|b| format!("{b:02x}")).collect(),
                mask_width: k.program.layout.width as u32 * 8,
                n_traces: set.n_traces as u64,
                n_samples: set.n_samples as u64,
                noise: NoiseConfig { sigma_pct: common.noise_sigma_pct, seed: common.seed },
                seed: common.seed,
                traces_file: "traces.bin".into(),
                components_file: cm.is_some().then(|| "components.bin".into()),
                model: common.model.as_ref().map(|p| p.display().to_string()),
            };
            manifest.write(dir.join("manifest.json"))?;
            println!("{} traces x {} samples written to {}", set.n_traces, set.n_samples, dir.display());
        }
        Command::Analyze { input } => {
            let analysis = analyze_file(input, &common.analysis(None)?)?;
            write_analysis(&analysis, common.out_dir()?)?;
        }
        Command::Rootcause { kernel, traces } => {
            let k = load_kernel(&kernel.kernel)?;
            let (analysis, causes) = detect_and_attribute(common, &k, *traces)?;
            let dir = common.out_dir()?;
            write_analysis(&analysis, dir)?;
            let reports: Vec<_> = causes.iter().map(RootCause::report).collect();
            fs::write(dir.join("causes.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
            print_causes(&causes);
        }
        Command::Fix { kernel, traces } => {
            let k = load_kernel(&kernel.kernel)?;
            let (analysis, causes) = detect_and_attribute(common, &k, *traces)?;
            let model = common.model()?;
            let plan = plan_fixes(&k.program, &model, &causes)?;
            let fixed = apply_fixes(&k.program, &plan)?;
            let dir = common.out_dir()?;
            write_analysis(&analysis, dir)?;
            print_causes(&causes);
            fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan)? + "\n")?;
            fs::write(dir.join("fixed.s"), fixed.emit())?;
            let o = overhead(&k.program, &fixed, &CycleTable::default());
            print!("{}", overhead_table(&[(k.name.clone(), o)]));
        }
        Command::Run { kernel, schedule } => {
            let k = load_kernel(&kernel.kernel)?;
            let model = common.model()?;
            let cfg = LoopConfig {
                schedule: parse_schedule(schedule)?,
                analysis: common.analysis(k.order)?,
                noise_sigma_pct: common.noise_sigma_pct,
                seed: common.seed,
                ..LoopConfig::default()
            };
            let outcome = run_loop(&k.program, &model, &cfg)?;
            let report = Report::from_outcome(&k.name, &cfg, &outcome, &CycleTable::default());
            write_report(&report, Some(&outcome), common.out_dir()?)?;
            print_summary(&report);
            if !report.clean {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { input } => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let report: Report = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
            print_summary(&report);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(r: &Report) {
    println!("kernel {} (order {})", r.kernel, r.order);
    println!("iter  traces  samples  threshold  max|t|  found  fixed  left");
    for it in &r.iterations {
        println!(
            "{:>4} {:>7} {:>8} {:>10.3} {:>7.2} {:>6} {:>6} {:>5}",
            it.iteration, it.n_traces, it.n_samples, it.threshold, it.max_abs_t, it.discovered, it.fixed, it.remaining
        );
    }
    if let Some(o) = r.overhead {
        print!("{}", overhead_table(&[(r.kernel.clone(), o)]));
    }
    if r.clean {
        println!("clean");
    } else {
        println!("{} residual leaks", r.residual.len().max(1));
        for c in &r.residual {
            let names: Vec<String> = c.culprits.iter().map(|k| format!("{}@{}", k.name, k.sample)).collect();
            println!("  leak ({:?}) {:?}: {}", c.leak, c.method, names.join(" "));
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
