use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nnleak::arith::CostProfile;
use nnleak::attack::float::relative_weight_errors;
use nnleak::attack::input::{
    recover_input_div255, recover_input_float, recover_sparsity_mask, InputEstimate, InputValue,
};
use nnleak::attack::{recover_model, RecoveredModel};
use nnleak::hardened::{self, Kernel, ProbeSet};
use nnleak::network::{
    self, equivalent_argmax, random_model, NetworkModel, Normalization, Precision, RandomSpec,
};
use nnleak::oracle::{JitterConfig, Oracle};
use nnleak::{report, Error};

#[derive(Parser, Debug)]
#[command(
    name = "nnleak",
    version,
    about = "Timing side-channel workbench for embedded neural-network inference"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Built-in profile name, profile file, or name under NNLEAK_PROFILE_DIR.
    #[arg(long, global = true, default_value = "atmega-like")]
    profile: String,
    #[arg(
        long,
        global = true,
        env = "NNLEAK_PROFILE_DIR",
        hide_env_values = true
    )]
    profile_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Standard deviation of the per-event timing jitter, in cycles.
    #[arg(long, global = true, default_value_t = 0.0)]
    sigma: f64,
    /// Measurements averaged per query.
    #[arg(long, global = true, default_value_t = 1)]
    repeats: u32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded random model or one of the worked examples.
    Gen {
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        #[arg(long, value_delimiter = ',', default_value = "16,8,4")]
        dims: Vec<usize>,
        #[arg(long, value_enum, conflicts_with_all = ["precision", "div255", "zero_skip"])]
        example: Option<Example>,
        /// Normalize inputs by a leaky /255 division.
        #[arg(long)]
        div255: bool,
        #[arg(long)]
        zero_skip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one inference and write its timing trace as CSV.
    Capture {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated input bytes; a seeded random input when omitted.
        #[arg(long, value_delimiter = ',')]
        input: Option<Vec<u8>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the model behind the timing oracle.
    AttackModel {
        #[arg(long)]
        model: PathBuf,
        /// Arithmetic the attacker assumes; must match the device.
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover an input from its inference trace.
    AttackInput {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        input: Option<Vec<u8>>,
        /// Defaults to div255 or sparsity when the model has that feature, else float.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Traces voted over by the div255 path.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        traces: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attacks against the hardened executor and write the overhead table.
    Harden {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count the cycle classes of a kernel over its operand domain.
    VerifyCt {
        /// Kernel name, a generic name (mul, add, mac, relu, cmp) or `all`.
        #[arg(long, default_value = "all")]
        kernel: String,
        /// Select the constant-time version of a generic kernel name.
        #[arg(long)]
        hardened: bool,
        /// Sample this many operands instead of the automatic domain.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worked-example tables, the overhead table and plot data.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Float,
    Fixed,
    Binary,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Float => Precision::Float,
            PrecisionArg::Fixed => Precision::Fixed,
            PrecisionArg::Binary => Precision::Binary,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Example {
    FloatNeuron,
    FixedNeuron,
    BinaryNeuron,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum MethodArg {
    Float,
    Div255,
    Sparsity,
}

/// Everything that determines a run. Equal configs give identical files.
#[derive(Debug)]
struct ExperimentConfig {
    profile: CostProfile,
    seed: u64,
    jitter: JitterConfig,
}

impl ExperimentConfig {
    fn from_opts(g: &GlobalOpts) -> Result<Self, Failure> {
        if !(g.sigma >= 0.0 && g.sigma.is_finite()) {
            return Err(Failure::Usage(format!(
                "--sigma must be a finite non-negative number, got {}",
                g.sigma
            )));
        }
        if g.repeats == 0 {
            return Err(Failure::Usage("--repeats must be at least 1".into()));
        }
        let profile = CostProfile::resolve(&g.profile, g.profile_dir.as_deref())?;
        Ok(ExperimentConfig {
            profile,
            seed: g.seed,
            jitter: JitterConfig {
                sigma: g.sigma,
                repeats: g.repeats,
                seed: g.seed,
            },
        })
    }

    fn header(&self) -> String {
        format!(
            "profile={}\nseed={}\nsigma={}\nrepeats={}\n",
            self.profile.name, self.seed, self.jitter.sigma, self.jitter.repeats
        )
    }

    fn oracle(&self, model: NetworkModel) -> Result<Oracle, Failure> {
        Ok(Oracle::new(model, self.profile.clone(), self.jitter)?)
    }
}

enum Failure {
    Domain(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

/// Output files are built in memory and written together. If a write fails,
/// everything written so far is removed.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.files.push((path, bytes.into()));
    }

    fn commit(self) -> Result<(), Failure> {
        let mut created_dirs: Vec<PathBuf> = Vec::new();
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| -> std::io::Result<()> {
            for (path, bytes) in &self.files {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    let mut missing: Vec<PathBuf> = parent
                        .ancestors()
                        .take_while(|a| !a.as_os_str().is_empty() && !a.exists())
                        .map(Path::to_path_buf)
                        .collect();
                    missing.reverse();
                    fs::create_dir_all(parent)?;
                    created_dirs.extend(missing);
                }
                fs::write(path, bytes)?;
                written.push(path.clone());
            }
            Ok(())
        })();
        if let Err(e) = result {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            for d in created_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
            return Err(Failure::Domain(Error::Io(e.to_string())));
        }
        Ok(())
    }
}

fn seeded_input(model: &NetworkModel, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model.zero_skipping {
        (0..model.input_width)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(1..=255)
                }
            })
            .collect()
    } else {
        (0..model.input_width).map(|_| rng.gen()).collect()
    }
}

fn cmd_gen(
    cfg: &ExperimentConfig,
    precision: Option<PrecisionArg>,
    dims: &[usize],
    example: Option<Example>,
    div255: bool,
    zero_skip: bool,
) -> Result<String, Failure> {
    let model = match (example, precision) {
        (Some(Example::FloatNeuron), _) => network::float_demo_neuron(),
        (Some(Example::FixedNeuron), _) => network::fixed_demo_neuron(),
        (Some(Example::BinaryNeuron), _) => network::binary_demo_neuron(),
        (None, Some(p)) => {
            let mut spec = RandomSpec::new(dims, p.into(), cfg.seed);
            spec.normalization = if div255 {
                Normalization::Div255
            } else {
                Normalization::None
            };
            spec.zero_skipping = zero_skip;
            random_model(&spec)?
        }
        (None, None) => return Err(Failure::Usage("gen needs --precision or --example".into())),
    };
    Ok(network::write_model(&model))
}

fn model_metrics(truth: &NetworkModel, rec: &RecoveredModel, seed: u64) -> Result<String, Failure> {
    let mut s = String::new();
    let _ = writeln!(s, "queries={}", rec.queries);
    let _ = writeln!(s, "unresolved={}", rec.unresolved());
    if truth.precision() == Precision::Float {
        let errs = relative_weight_errors(truth, rec);
        let max = errs.iter().copied().fold(0.0, f64::max);
        let under = errs.iter().filter(|&&e| e < 0.01).count();
        let _ = writeln!(s, "max_relative_weight_error={max:.6}");
        let _ = writeln!(s, "weights_under_1pct={under}/{}", errs.len());
    } else {
        let exact = truth.layers == rec.model.layers;
        let _ = writeln!(s, "exact={exact}");
    }
    let agree = equivalent_argmax(truth, &rec.model, 1000, seed)?;
    let _ = writeln!(s, "argmax_agreement={agree:.4}");
    Ok(s)
}

fn input_metrics(truth: &[u8], est: &InputEstimate) -> String {
    let exact = truth
        .iter()
        .zip(&est.values)
        .filter(|(t, v)| matches!(v, InputValue::Exact(x) if x == *t))
        .count();
    let sets = est
        .values
        .iter()
        .filter(|v| matches!(v, InputValue::Candidates(_)))
        .count();
    let mask_ok = truth
        .iter()
        .zip(&est.values)
        .filter(|(t, v)| matches!(v, InputValue::IsZero(z) if *z == (**t == 0)))
        .count();
    let mut s = String::new();
    let _ = writeln!(s, "method={}", est.method.as_str());
    let _ = writeln!(s, "positions={}", truth.len());
    let _ = writeln!(s, "exact_correct={exact}");
    let _ = writeln!(s, "candidate_sets={sets}");
    let _ = writeln!(s, "mask_correct={mask_ok}");
    let _ = writeln!(s, "collisions={}", est.collisions);
    s
}

fn cmd_attack_input(
    cfg: &ExperimentConfig,
    model: NetworkModel,
    input: Option<Vec<u8>>,
    method: Option<MethodArg>,
    traces: u32,
) -> Result<(Vec<u8>, InputEstimate), Failure> {
    let x = input.unwrap_or_else(|| seeded_input(&model, cfg.seed));
    let method = method.unwrap_or(if model.normalization == Normalization::Div255 {
        MethodArg::Div255
    } else if model.zero_skipping {
        MethodArg::Sparsity
    } else {
        MethodArg::Float
    });
    let est = match method {
        MethodArg::Float => {
            if model.precision() != Precision::Float {
                return Err(
                    Error::Precondition("the float input path needs a float model".into()).into(),
                );
            }
            // The attacker knows the first-layer mantissas from model recovery.
            let l = &model.layers[0];
            let mantissas: Vec<Vec<_>> = (0..l.out_dim)
                .map(|n| {
                    (0..l.in_dim)
                        .map(|k| {
                            Some(l.float_weight(n, k))
                                .filter(|w| !w.is_zero())
                                .map(|w| w.mantissa7())
                        })
                        .collect()
                })
                .collect();
            let (_, t) = cfg.oracle(model)?.run_inference(&x)?;
            recover_input_float(&t, &mantissas, &cfg.profile)?
        }
        MethodArg::Div255 => {
            let mut all = Vec::new();
            for i in 0..u64::from(traces) {
                let jitter = JitterConfig {
                    seed: cfg.jitter.seed.wrapping_add(i),
                    ..cfg.jitter
                };
                all.push(
                    Oracle::new(model.clone(), cfg.profile.clone(), jitter)?
                        .run_inference(&x)?
                        .1,
                );
            }
            recover_input_div255(&all, &cfg.profile)?
        }
        MethodArg::Sparsity => recover_sparsity_mask(&cfg.oracle(model)?.run_inference(&x)?.1)?,
    };
    Ok((x, est))
}

fn resolve_kernels(name: &str, hardened: bool) -> Result<Vec<Kernel>, Failure> {
    let generic = |d: Kernel, h: Kernel| vec![if hardened { h } else { d }];
    Ok(match name {
        "all" if hardened => Kernel::HARDENED.to_vec(),
        "all" => Kernel::DEFAULT
            .iter()
            .chain(Kernel::HARDENED.iter())
            .copied()
            .collect(),
        "mul" => generic(Kernel::FloatMul, Kernel::CtMul),
        "add" | "mac" => generic(Kernel::FloatAdd, Kernel::CtMac),
        "relu" => generic(Kernel::FloatRelu, Kernel::CtRelu),
        "cmp" | "argmax" => generic(Kernel::ArgmaxStep, Kernel::CtCmp),
        other => match Kernel::parse(other) {
            Some(k) if hardened && !k.is_hardened() => {
                return Err(Failure::Usage(format!(
                    "kernel '{other}' has no hardened form; use a generic name"
                )))
            }
            Some(k) => vec![k],
            None => return Err(Failure::Usage(format!("unknown kernel '{other}'"))),
        },
    })
}

fn leakage_table(reports: &[hardened::LeakageReport]) -> (String, String) {
    let mut csv = String::from("kernel,probes,exhaustive,classes,min_cycles,max_cycles,verdict\n");
    let mut table = format!(
        "{:<14} {:>8} {:>11} {:>8}  {}\n",
        "kernel", "probes", "exhaustive", "classes", "verdict"
    );
    for r in reports {
        let verdict = if r.constant_time() {
            "constant-time"
        } else {
            "leaky"
        };
        let lo = r.classes.first().copied().unwrap_or(0);
        let hi = r.classes.last().copied().unwrap_or(0);
        let _ = writeln!(
            csv,
            "{},{},{},{},{lo},{hi},{verdict}",
            r.kernel.as_str(),
            r.probes,
            r.exhaustive,
            r.classes.len()
        );
        let _ = writeln!(
            table,
            "{:<14} {:>8} {:>11} {:>8}  {verdict}",
            r.kernel.as_str(),
            r.probes,
            r.exhaustive,
            r.classes.len()
        );
    }
    (csv, table)
}

fn normalized_csv(model: &NetworkModel) -> Result<String, Failure> {
    let mut s = String::from("layer,index,e_max,word\n");
    for (li, l) in model.layers.iter().enumerate() {
        if l.precision() != Precision::Float {
            continue;
        }
        let nw = hardened::normalize_weights(l)?;
        for (i, w) in nw.words.iter().enumerate() {
            let _ = writeln!(s, "{li},{i},{},{w}", nw.e_max);
        }
    }
    Ok(s)
}

fn cmd_report(
    cfg: &ExperimentConfig,
    out: &Path,
    outputs: &mut Outputs,
) -> Result<String, Failure> {
    let mut summary = String::new();
    let runs: [(&str, NetworkModel); 3] = [
        ("float-neuron", network::float_demo_neuron()),
        ("fixed-neuron", network::fixed_demo_neuron()),
        ("binary-neuron", network::binary_demo_neuron()),
    ];
    for (name, truth) in runs {
        let oracle = Oracle::new(truth.clone(), cfg.profile.clone(), JitterConfig::none())?;
        let rec = recover_model(&oracle, &cfg.profile, cfg.seed)?;
        let table = if truth.precision() == Precision::Float {
            report::float_neuron_table(&truth, &rec)
        } else {
            report::int_neuron_table(&truth, &rec)
        };
        let _ = writeln!(summary, "{name}:\n{table}");
        outputs.add(out.join(format!("{name}.txt")), table);
        outputs.add(out.join(format!("{name}_weights.csv")), rec.weights_csv());
    }
    let overhead = hardened::overhead_report(&cfg.profile, cfg.seed);
    let _ = writeln!(summary, "overhead:\n{}", overhead.to_table());
    outputs.add(out.join("overhead.txt"), overhead.to_table());
    outputs.add(out.join("overhead.csv"), overhead.to_csv());
    let mut index = String::from("file,columns,description\n");
    for d in report::all_plots(&cfg.profile) {
        let _ = writeln!(
            index,
            "plots/{}.csv,\"{}\",{}",
            d.name, d.schema, d.description
        );
        outputs.add(out.join("plots").join(format!("{}.csv", d.name)), d.csv);
    }
    outputs.add(out.join("plots").join("index.csv"), index);
    Ok(summary)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_opts(&cli.global)?;
    let mut outputs = Outputs::default();
    match cli.command {
        Command::Gen {
            precision,
            dims,
            example,
            div255,
            zero_skip,
            out,
        } => {
            outputs.add(
                out,
                cmd_gen(&cfg, precision, &dims, example, div255, zero_skip)?,
            );
        }
        Command::Capture { model, input, out } => {
            let model = network::load_model(&model)?;
            let x = input.unwrap_or_else(|| seeded_input(&model, cfg.seed));
            let (_, trace) = cfg.oracle(model)?.run_inference(&x)?;
            outputs.add(out, trace.to_csv());
        }
        Command::AttackModel {
            model,
            precision,
            out,
        } => {
            let truth = network::load_model(&model)?;
            if let Some(p) = precision
                .map(Precision::from)
                .filter(|&p| p != truth.precision())
            {
                return Err(Error::Precondition(format!(
                    "device runs {} arithmetic, not {}",
                    truth.precision().as_str(),
                    p.as_str()
                ))
                .into());
            }
            let oracle = cfg.oracle(truth.clone())?;
            let rec = recover_model(&oracle, &cfg.profile, cfg.seed)?;
            let metrics = model_metrics(&truth, &rec, cfg.seed)?;
            print!("{metrics}");
            outputs.add(out.join("recovered.nn"), network::write_model(&rec.model));
            outputs.add(out.join("weights.csv"), rec.weights_csv());
            outputs.add(out.join("neurons.csv"), rec.neurons_csv());
            outputs.add(out.join("metrics.txt"), cfg.header() + &metrics);
        }
        Command::AttackInput {
            model,
            input,
            method,
            traces,
            out,
        } => {
            let model = network::load_model(&model)?;
            let (x, est) = cmd_attack_input(&cfg, model, input, method, traces)?;
            let metrics = input_metrics(&x, &est);
            print!("{metrics}");
            outputs.add(out.join("input.csv"), est.to_csv());
            outputs.add(out.join("metrics.txt"), cfg.header() + &metrics);
        }
        Command::Harden { model, out } => {
            let model = network::load_model(&model)?;
            let resistance = hardened::attack_resistance_suite(&model, &cfg.profile, cfg.seed)?;
            let overhead = hardened::overhead_report(&cfg.profile, cfg.seed);
            let reports: Vec<_> = Kernel::HARDENED
                .iter()
                .map(|&k| hardened::verify_constant_time(k, ProbeSet::Auto, &cfg.profile))
                .collect();
            let (leak_csv, leak_table) = leakage_table(&reports);
            print!("{leak_table}");
            println!("all attacks failed: {}", resistance.all_failed());
            outputs.add(out.join("resistance.csv"), resistance.to_csv());
            outputs.add(out.join("leakage.csv"), leak_csv);
            outputs.add(out.join("overhead.csv"), overhead.to_csv());
            outputs.add(out.join("overhead.txt"), overhead.to_table());
            outputs.add(out.join("normalized_weights.csv"), normalized_csv(&model)?);
        }
        Command::VerifyCt {
            kernel,
            hardened: h,
            samples,
            out,
        } => {
            let probes = match samples {
                Some(0) => return Err(Failure::Usage("--samples must be positive".into())),
                Some(count) => ProbeSet::Sampled {
                    count,
                    seed: cfg.seed,
                },
                None => ProbeSet::Auto,
            };
            let reports: Vec<_> = resolve_kernels(&kernel, h)?
                .into_iter()
                .map(|k| hardened::verify_constant_time(k, probes, &cfg.profile))
                .collect();
            let (csv, table) = leakage_table(&reports);
            print!("{table}");
            if let Some(out) = out {
                outputs.add(out, csv);
            }
        }
        Command::Report { out } => {
            let summary = cmd_report(&cfg, &out, &mut outputs)?;
            print!("{summary}");
        }
    }
    outputs.commit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
