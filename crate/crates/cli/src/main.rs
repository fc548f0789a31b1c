//! `chandb`: build, complete and benchmark channel-gain databases.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chandb::convnet::{AdamConfig, NetStructure};
use chandb::field_synth::{synth_field, FieldParams};
use chandb::gp_model::{fit_gp, gp_interpolate, D0Search, GpParams, Neighborhood};
use chandb::grid::{build_grid, ChannelGrid, GridSpec, Sample};
use chandb::io;
use chandb::knn::{knn_fill, KnnConfig, Weighting};
use chandb::pipeline::{
    default_sweep_structures, parse_config, reference_structure, run_experiment, sweep, two_step_interpolate, two_step_train, Dataset,
    ExperimentConfig, Method, MlpConfig, ReferenceBenchmark, TrainConfig, TrainedModel, SWEEP_HEADER,
};

#[derive(Parser, Debug)]
#[command(name = "chandb", version, about = "Channel-gain database construction and completion")]
#[command(args_override_self = true)]
struct Cli {
    /// key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ground-truth field and a sampled subset of it.
    Synth(SynthArgs),
    /// Quantize a sample CSV onto a grid.
    Grid(GridArgs),
    /// Estimate path-loss and shadowing parameters from a grid.
    Fit(FitArgs),
    /// Fill the invalid cells of a grid.
    Interpolate(InterpolateArgs),
    /// Train the refinement network of the two-step method.
    Train(TrainArgs),
    /// Score one method on held-out cells.
    Eval(EvalArgs),
    /// Score a set of network structures and baselines.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 80)]
    rows: usize,
    #[arg(long, default_value_t = 80)]
    cols: usize,
    /// Cell size in meters.
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[arg(long, default_value_t = 0.0)]
    g0: f64,
    #[arg(long, default_value_t = 3.5)]
    eta: f64,
    /// Shadowing correlation distance in cells.
    #[arg(long, default_value_t = 6.0)]
    d0: f64,
    #[arg(long, default_value_t = 8.0)]
    sigma_psi: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma_zeta: f64,
    #[command(flatten)]
    bs: BsArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Ground-truth grid CSV.
    #[arg(long)]
    out: PathBuf,
    /// Sampled subset in x1,x2,gain_db format.
    #[arg(long)]
    samples_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    keep_fraction: f64,
    #[arg(long, default_value_t = 2)]
    sample_seed: u64,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

/// Base-station position in fractional cell units; defaults to the grid center.
#[derive(Args, Debug, Clone, Copy)]
struct BsArgs {
    #[arg(long)]
    bs_row: Option<f64>,
    #[arg(long)]
    bs_col: Option<f64>,
}

impl BsArgs {
    fn resolve(&self, rows: usize, cols: usize) -> (f64, f64) {
        (self.bs_row.unwrap_or((rows as f64 - 1.0) / 2.0), self.bs_col.unwrap_or((cols as f64 - 1.0) / 2.0))
    }
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    /// Bounds default to the bounding box of the samples.
    #[arg(long, allow_hyphen_values = true)]
    x1_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x1_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x2_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x2_max: Option<f64>,
    /// Grid CSV; the mask goes to the sibling `.mask.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct GpArgs {
    /// Half-width of the MMSE neighborhood window in cells.
    #[arg(long, default_value_t = 4)]
    n_range: usize,
    #[arg(long, default_value_t = 1.0)]
    d0_min: f64,
    #[arg(long, default_value_t = 50.0)]
    d0_max: f64,
    #[arg(long, default_value_t = 1.0)]
    d0_step: f64,
    /// Share of the residual variance attributed to shadowing.
    #[arg(long)]
    psi_fraction: Option<f64>,
    /// Parameter report from `fit`; skips estimation.
    #[arg(long)]
    params: Option<PathBuf>,
}

impl GpArgs {
    fn search(&self) -> D0Search {
        D0Search { d_min: self.d0_min, d_max: self.d0_max, step: self.d0_step }
    }

    fn neighborhood(&self) -> Result<Neighborhood> {
        Ok(Neighborhood::new(self.n_range)?)
    }

    fn params(&self, grid: &ChannelGrid, bs: (f64, f64)) -> Result<GpParams> {
        match &self.params {
            Some(p) => read_params(p, bs),
            None => Ok(fit_gp(grid, bs, self.neighborhood()?, &self.search(), self.psi_fraction)?),
        }
    }
}

#[derive(Args, Debug, Clone, Copy)]
struct KnnArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// uniform or distance.
    #[arg(long, default_value_t = Weighting::InverseDistance)]
    weighting: Weighting,
}

impl KnnArgs {
    fn config(&self) -> Result<KnnConfig> {
        Ok(KnnConfig::new(self.k, self.weighting)?)
    }
}

#[derive(Args, Debug, Clone)]
struct NetArgs {
    /// Filter sizes and filter counts, e.g. "9-1-5(64-32-1)".
    #[arg(long, default_value = "9-1-5(64-32-1)")]
    structure: NetStructure,
    #[arg(long, default_value_t = 200_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Share of valid cells used as network inputs; the rest are labels.
    #[arg(long, default_value_t = 0.8)]
    split_fraction: f64,
    /// Leave the last layer linear.
    #[arg(long)]
    no_final_relu: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl NetArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            split_fraction: self.split_fraction,
            final_relu: !self.no_final_relu,
            log_every: self.log_every,
        }
    }
}

/// Observed grid and its resolution.
#[derive(Args, Debug, Clone)]
struct GridInput {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[command(flatten)]
    bs: BsArgs,
}

impl GridInput {
    fn load(&self) -> Result<(ChannelGrid, (f64, f64))> {
        let grid = io::read_grid(&self.grid, self.q).with_context(|| format!("reading {}", self.grid.display()))?;
        let (rows, cols) = grid.shape();
        Ok((grid, self.bs.resolve(rows, cols)))
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: GridInput,
    #[command(flatten)]
    gp: GpArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    input: GridInput,
    /// gp, knn or two-step.
    #[arg(long, default_value = "knn")]
    method: String,
    #[command(flatten)]
    knn: KnnArgs,
    #[command(flatten)]
    gp: GpArgs,
    /// Trained network for the two-step method.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-cell predicted MSE (gp only).
    #[arg(long)]
    mse_out: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    input: GridInput,
    #[command(flatten)]
    knn: KnnArgs,
    #[command(flatten)]
    net: NetArgs,
    /// CSV of iteration, masked RMSE on the label cells.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    model_out: PathBuf,
}

/// Either a truth/observation pair on disk or a reference benchmark seed.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Complete ground-truth grid CSV.
    #[arg(long, requires = "observed")]
    truth: Option<PathBuf>,
    /// Observed grid; its invalid cells are scored.
    #[arg(long)]
    observed: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[command(flatten)]
    bs: BsArgs,
    /// Use the built-in 80×80 synthetic benchmark with this seed.
    #[arg(long, conflicts_with = "truth")]
    benchmark_seed: Option<u64>,
    /// Drop the fading term from the benchmark.
    #[arg(long)]
    no_fading: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        if let Some(seed) = self.benchmark_seed {
            let mut b = ReferenceBenchmark::default();
            if self.no_fading {
                b = b.without_fading();
            }
            return Ok(b.dataset(&b.sampler()?, seed)?);
        }
        let (Some(truth), Some(observed)) = (&self.truth, &self.observed) else {
            bail!("give --truth and --observed, or --benchmark-seed");
        };
        let truth = io::read_matrix_path(truth).with_context(|| format!("reading {}", truth.display()))?;
        let grid = io::read_grid(observed, self.q).with_context(|| format!("reading {}", observed.display()))?;
        if truth.dim() != grid.shape() {
            bail!("truth is {:?} but observed grid is {:?}", truth.dim(), grid.shape());
        }
        let (rows, cols) = grid.shape();
        let eval_mask = grid.mask().mapv(|m| !m);
        Ok(Dataset { truth, eval_mask, bs_position: self.bs.resolve(rows, cols), grid })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "two-step")]
    method: Method,
    #[command(flatten)]
    knn: KnnArgs,
    #[command(flatten)]
    gp: GpArgs,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 5000)]
    mlp_iterations: usize,
    /// Results table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated structures; defaults to the full 20-structure sweep.
    #[arg(long, value_delimiter = ',')]
    structures: Vec<NetStructure>,
    #[arg(long, default_value_t = 200_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run GP and both KNN weightings with K = 3 and 5.
    #[arg(long)]
    baselines: bool,
    #[command(flatten)]
    gp: GpArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(std::env::args_os().collect()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(argv: Vec<OsString>) -> Result<()> {
    let cli = Cli::parse_from(with_config(argv)?);
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Grid(a) => grid(a),
        Command::Fit(a) => fit(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

/// Splices `--key=value` flags from the config file in front of the command
/// line's own flags, so later (command-line) occurrences win. A `command`
/// key names the subcommand when none is given.
fn with_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config");
    let path = match pos {
        Some(i) => argv.get(i + 1).cloned().context("--config needs a file")?,
        None => match argv.iter().find_map(|a| a.to_str().and_then(|s| s.strip_prefix("--config="))) {
            Some(p) => p.into(),
            None => return Ok(argv),
        },
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let mut command = None;
    let mut flags: Vec<OsString> = Vec::new();
    for (key, value) in parse_config(&text)? {
        let flag = format!("--{}", key.replace('_', "-"));
        match (key.as_str(), value.as_str()) {
            ("command", v) => command = Some(v.to_string()),
            (_, "true") => flags.push(flag.into()),
            (_, "false") => {}
            (_, v) => flags.push(format!("{flag}={v}").into()),
        }
    }
    let subcommands = ["synth", "grid", "fit", "interpolate", "train", "eval", "sweep"];
    let mut out = argv;
    let sub = out.iter().position(|a| a.to_str().is_some_and(|s| subcommands.contains(&s)));
    let at = match (sub, command) {
        (Some(i), _) => i + 1,
        (None, Some(c)) => {
            out.insert(1, c.into());
            2
        }
        (None, None) => bail!("no subcommand given on the command line or in the config"),
    };
    out.splice(at..at, flags);
    Ok(out)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = GridSpec::with_shape(a.rows, a.cols, a.q)?;
    let params = FieldParams {
        g0: a.g0,
        eta: a.eta,
        d0: a.d0,
        sigma_psi: a.sigma_psi,
        sigma_zeta: a.sigma_zeta,
        bs_position: a.bs.resolve(a.rows, a.cols),
    };
    let truth = synth_field(&params, &spec, a.seed)?;
    let complete = ChannelGrid::complete(spec, truth.clone())?;
    io::write_grid(&a.out, &complete)?;
    if let Some(p) = &a.pgm {
        io::write_pgm_path(p, &truth, complete.mask())?;
    }
    if let Some(p) = &a.samples_out {
        let d = Dataset::sample_from_truth(spec, truth, a.keep_fraction, a.sample_seed, params.bs_position)?;
        let samples: Vec<Sample> = d
            .grid
            .valid_cells()
            .map(|(c, v)| {
                let (x1, x2) = spec.cell_center(c);
                Sample { x1, x2, gain_db: v }
            })
            .collect();
        io::write_samples_path(p, &samples)?;
        println!("wrote {} samples to {}", samples.len(), p.display());
    }
    println!("wrote {}×{} field to {}", a.rows, a.cols, a.out.display());
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let samples = io::read_samples_path(&a.samples).with_context(|| format!("reading {}", a.samples.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", a.samples.display());
    }
    let fold = |f: fn(&Sample) -> f64, min: bool| {
        samples.iter().map(f).fold(if min { f64::INFINITY } else { f64::NEG_INFINITY }, |acc, v| if min { acc.min(v) } else { acc.max(v) })
    };
    let spec = GridSpec::new(
        a.x1_min.unwrap_or_else(|| fold(|s| s.x1, true)),
        a.x1_max.unwrap_or_else(|| fold(|s| s.x1, false)),
        a.x2_min.unwrap_or_else(|| fold(|s| s.x2, true)),
        a.x2_max.unwrap_or_else(|| fold(|s| s.x2, false)),
        a.q,
    )?;
    let g = build_grid(&spec, &samples)?;
    io::write_grid(&a.out, &g)?;
    if let Some(p) = &a.pgm {
        io::write_pgm_path(p, g.values(), g.mask())?;
    }
    let (rows, cols) = g.shape();
    println!("{rows}×{cols} grid, {} valid cells, written to {}", g.valid_count(), a.out.display());
    Ok(())
}

fn params_report(p: &GpParams) -> String {
    format!("g0={}\neta={}\nd0={}\ntotal_var={}\nsigma_psi_sq={}\n", p.g0, p.eta, p.d0, p.total_var, p.sigma_psi_sq())
}

fn read_params(path: &Path, bs: (f64, f64)) -> Result<GpParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let kv = parse_config(&text)?;
    let get = |k: &str| -> Result<Option<f64>> {
        kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.parse::<f64>().with_context(|| format!("{k}={v} is not a number"))).transpose()
    };
    let need = |k: &str| get(k)?.with_context(|| format!("{} lacks {k}", path.display()));
    let p = GpParams {
        g0: need("g0")?,
        eta: need("eta")?,
        d0: need("d0")?,
        total_var: need("total_var")?,
        sigma_psi_sq: get("sigma_psi_sq")?,
        bs_position: bs,
    };
    p.validate()?;
    Ok(p)
}

fn fit(a: FitArgs) -> Result<()> {
    let (g, bs) = a.input.load()?;
    let p = fit_gp(&g, bs, a.gp.neighborhood()?, &a.gp.search(), a.gp.psi_fraction)?;
    let report = params_report(&p);
    match &a.out {
        Some(path) => fs::write(path, report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let (g, bs) = a.input.load()?;
    let completed = match a.method.as_str() {
        "gp" => {
            let p = a.gp.params(&g, bs)?;
            let out = gp_interpolate(&g, &p, a.gp.neighborhood()?)?;
            if let Some(path) = &a.mse_out {
                io::write_matrix_path(path, &out.mse)?;
            }
            if out.fallback_count() > 0 {
                eprintln!("{} cells had no valid neighbor in range and use the path-loss mean", out.fallback_count());
            }
            out.grid
        }
        "knn" => knn_fill(&g, &a.knn.config()?)?,
        "two-step" => {
            let path = a.model.as_ref().context("--method two-step needs --model")?;
            let model = TrainedModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            two_step_interpolate(&g, &model, &model.knn)?.grid
        }
        other => bail!("unknown method {other:?} (expected gp, knn or two-step)"),
    };
    io::write_grid(&a.out, &completed)?;
    if let Some(p) = &a.pgm {
        io::write_pgm_path(p, completed.values(), completed.mask())?;
    }
    println!("completed {} cells, written to {}", g.mask().iter().filter(|&&m| !m).count(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (g, _) = a.input.load()?;
    let out = two_step_train(&g, &a.knn.config()?, &a.net.structure, &a.net.train_config(), a.net.seed)?;
    out.model.save(&a.model_out)?;
    if let Some(p) = &a.loss_log {
        io::write_loss_log(fs::File::create(p)?, &out.log)?;
    }
    let last = out.log.last().map(|r| r.rmse_db).unwrap_or(f64::NAN);
    println!("trained {} for {} iterations in {:.2} s, label RMSE {:.3} dB", a.net.structure, a.net.iterations, out.train_seconds, last);
    Ok(())
}

fn experiment(method: Method, knn: &KnnArgs, gp: &GpArgs, net: &NetArgs, mlp_iterations: usize) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        method,
        knn: knn.config()?,
        neighborhood: gp.neighborhood()?,
        d0_search: gp.search(),
        psi_fraction: gp.psi_fraction,
        gp_params: None,
        structure: net.structure.clone(),
        train: net.train_config(),
        mlp: MlpConfig { iterations: mlp_iterations, ..MlpConfig::default() },
        seed: net.seed,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut cfg = experiment(a.method, &a.knn, &a.gp, &a.net, a.mlp_iterations)?;
    if a.method == Method::Gp {
        if let Some(p) = &a.gp.params {
            cfg.gp_params = Some(read_params(p, data.bs_position)?);
        }
    }
    let out = run_experiment(&cfg, &data)?;
    let r = &out.report;
    println!("{}: RMSE {:.4} dB over {} cells ({}), {:.2} s", r.method, r.rmse, r.abs_errors.len(), r.detail, r.wall_seconds);
    if let Some(path) = &a.out {
        let structure = if a.method == Method::TwoStep { cfg.structure.to_string() } else { String::new() };
        let mut f = fs::File::create(path)?;
        writeln!(f, "{SWEEP_HEADER}")?;
        writeln!(f, "{},{},{},{},{},", r.method, structure, cfg.knn.k, r.rmse, r.wall_seconds)?;
    }
    if let (Some(path), Some(log)) = (&a.loss_log, &out.loss_log) {
        io::write_loss_log(fs::File::create(path)?, log)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let data = a.data.load()?;
    let structures = if a.structures.is_empty() { default_sweep_structures() } else { a.structures.clone() };
    let net = NetArgs {
        structure: reference_structure(),
        iterations: a.iterations,
        lr: a.lr,
        split_fraction: 0.8,
        no_final_relu: false,
        log_every: a.iterations.max(1),
        seed: a.seed,
    };
    let knn = KnnArgs { k: 5, weighting: Weighting::InverseDistance };
    let mut configs = Vec::new();
    for s in structures {
        let mut c = experiment(Method::TwoStep, &knn, &a.gp, &net, 0)?;
        c.structure = s;
        configs.push(c);
    }
    if a.baselines {
        configs.push(experiment(Method::Gp, &knn, &a.gp, &net, 0)?);
        for k in [3, 5] {
            for m in [Method::KnnUniform, Method::KnnDistance] {
                let mut c = experiment(m, &knn, &a.gp, &net, 0)?;
                c.knn.k = k;
                configs.push(c);
            }
        }
    }
    let rows = sweep(&configs, &data)?;
    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        table.push_str(&r.csv_line());
        table.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    println!("{:<16} {:<28} {:>2} {:>10} {:>10} {:>8}", "method", "structure", "k", "rmse_db", "runtime_s", "relative");
    for r in &rows {
        println!(
            "{:<16} {:<28} {:>2} {:>10.4} {:>10.2} {:>8}",
            r.method.to_string(),
            r.structure.as_deref().unwrap_or("-"),
            r.k,
            r.rmse_db,
            r.runtime_s,
            r.runtime_normalized.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}
