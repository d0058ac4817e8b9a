use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use stickbreak::config::Command;
use stickbreak::data_io::{
    ingest_grayscale_image, read_dataset_file, read_pgm, synth_moving_clusters, synth_symmetric, write_dataset_file,
};
use stickbreak::ddp::run_ddp_chain;
use stickbreak::diagnostics::{
    association_variance, mean_association, mean_slice_association, read_matrix_csv, trace_stats,
    upper_triangle_histogram, write_histogram_csv, write_matrix_csv, write_trace_csv, AssociationMatrix, SliceScope,
};
use stickbreak::mixture_gibbs::run_chain;
use stickbreak::rng::run_seed;
use stickbreak::{CouplingKernel, Dataset, RunConfig};

#[derive(Parser)]
#[command(name = "stickbreak", version, about = "Stick-breaking mixture samplers and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset CSV.
    Synth(SynthArgs),
    /// Fit a single mixture with the collapsed Gibbs sampler.
    Fit(FitArgs),
    /// Fit a time-sliced dataset with the coupled mixture sampler.
    FitDdp(FitArgs),
    /// Compare mean association matrices across run directories.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Symmetric,
    MovingClusters,
    /// One slice per PGM image given with --image.
    Image,
}

#[derive(Args)]
struct SynthArgs {
    kind: SynthKind,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_side: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    per_slice: Option<usize>,
    #[arg(long)]
    image: Vec<PathBuf>,
    #[arg(long)]
    intensity_per_point: Option<f64>,
    #[arg(long)]
    threshold: Option<u8>,
    /// Spread points uniformly within each pixel.
    #[arg(long)]
    jitter: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Disable all label moves.
    #[arg(long)]
    no_moves: bool,
    /// Independent chains to run concurrently, seeded `seed + r`.
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directories containing mean_association.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Divide by R - 1 instead of R.
    #[arg(long)]
    sample_variance: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<stickbreak::Error> for Failure {
    fn from(e: stickbreak::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Input errors are the caller's fault, including unreadable files.
fn input<T>(what: &Path, r: stickbreak::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Usage(format!("{}: {e}", what.display())))
}

fn output(what: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", what.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| output(path, e))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => input(p, RunConfig::from_file(p)),
        None => Ok(RunConfig::default()),
    }
}

fn write_resolved(cfg: &RunConfig, path: &Path) -> CliResult<()> {
    fs::write(path, cfg.to_toml()).map_err(|e| output(path, e))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| output(dir, e))
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_side {
        cfg.n_side = v;
    }
    if let Some(v) = args.offset {
        cfg.offset = v;
    }
    if let Some(v) = args.spread {
        cfg.spread = v;
    }
    if let Some(v) = args.slices {
        cfg.slices = v;
    }
    if let Some(v) = args.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = args.per_slice {
        cfg.per_slice = v;
    }
    if args.intensity_per_point.is_some() {
        cfg.intensity_per_point = args.intensity_per_point;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    cfg.jitter |= args.jitter;
    cfg.validate()?;
    let data = match args.kind {
        SynthKind::Symmetric => synth_symmetric(cfg.n_side, cfg.offset, cfg.spread, cfg.seed)?,
        SynthKind::MovingClusters => synth_moving_clusters(cfg.slices, &cfg.moving_clusters(), cfg.seed)?,
        SynthKind::Image => {
            if args.image.is_empty() {
                return usage("synth image needs at least one --image");
            }
            let Some(per_point) = cfg.intensity_per_point else {
                return usage("synth image needs intensity_per_point");
            };
            let mut data = Dataset::new(Vec::new(), Some(Vec::new()))?;
            for (t, path) in args.image.iter().enumerate() {
                let img = input(path, read_pgm(path))?;
                let jitter = cfg.jitter.then(|| run_seed(cfg.seed, t));
                data.extend(ingest_grayscale_image(&img, per_point, cfg.threshold, Some(t + 1), jitter)?)?;
            }
            data
        }
    };
    cfg.resolve(Command::Synth, data.dim());
    write_dataset_file(&data, &args.out).map_err(|e| output(&args.out, e))?;
    let mut resolved = args.out.clone().into_os_string();
    resolved.push(".config.resolved");
    write_resolved(&cfg, Path::new(&resolved))?;
    eprintln!("wrote {} points to {}", data.len(), args.out.display());
    Ok(())
}

fn fit_setup(args: &FitArgs, command: Command) -> CliResult<(RunConfig, Dataset, PathBuf)> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.sweeps.is_some() {
        cfg.sweeps = args.sweeps;
    }
    if args.burn_in.is_some() {
        cfg.burn_in = args.burn_in;
    }
    if args.no_moves {
        cfg.disable_moves();
    }
    if args.runs == 0 {
        return usage("--runs must be at least 1");
    }
    let out = match (&args.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => return usage("no output directory: pass --out or set out_dir"),
    };
    let data = input(&args.data, read_dataset_file(&args.data))?;
    if data.is_empty() {
        return usage(format!("{}: dataset has no points", args.data.display()));
    }
    cfg.out_dir = Some(out.display().to_string());
    cfg.resolve(command, data.dim());
    cfg.validate()?;
    Ok((cfg, data, out))
}

/// Runs `job` once per run, concurrently, in `out/run_NN` when there is
/// more than one run. Returns the run directories.
fn fan_out<F>(cfg: &RunConfig, runs: usize, out: &Path, job: F) -> CliResult<Vec<PathBuf>>
where
    F: Fn(&RunConfig, &Path) -> CliResult<()> + Sync,
{
    make_dir(out)?;
    let plan: Vec<(RunConfig, PathBuf)> = (0..runs)
        .map(|r| {
            let mut c = cfg.clone();
            if runs == 1 {
                return (c, out.to_path_buf());
            }
            c.seed = run_seed(cfg.seed, r);
            let dir = out.join(format!("run_{:02}", r + 1));
            c.out_dir = Some(dir.display().to_string());
            (c, dir)
        })
        .collect();
    write_resolved(cfg, &out.join("config.resolved"))?;
    let results: Vec<CliResult<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .iter()
            .map(|(c, dir)| {
                let job = &job;
                s.spawn(move || {
                    make_dir(dir)?;
                    write_resolved(c, &dir.join("config.resolved"))?;
                    job(c, dir)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Failure::Runtime("a run panicked".into()))))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(plan.into_iter().map(|(_, d)| d).collect())
}

fn write_samples(path: &Path, rows: impl Iterator<Item = Vec<String>>, header: &[&str]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| output(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| output(path, e))?;
    }
    w.flush().map_err(|e| output(path, e))
}

fn write_matrix(m: &AssociationMatrix, path: &Path) -> CliResult<()> {
    write_matrix_csv(&m.values, create(path)?).map_err(|e| output(path, e))
}

fn fit(args: FitArgs) -> CliResult<()> {
    let (cfg, data, out) = fit_setup(&args, Command::Fit)?;
    let dim = data.dim();
    cfg.chain_config()?;
    let dirs = fan_out(&cfg, args.runs, &out, |c, dir| {
        let prior = c.stick_prior()?;
        let nw = c.nw_prior(dim)?;
        let record = run_chain(&data.points, &prior, &nw, &c.chain_config()?)?;
        let path = dir.join("samples.csv");
        let rows = record.samples.iter().flat_map(|s| {
            s.labels.iter().enumerate().map(move |(n, l)| vec![s.iter.to_string(), n.to_string(), l.to_string()])
        });
        write_samples(&path, rows, &["iter", "datum_index", "label"])?;
        let path = dir.join("trace.csv");
        write_trace_csv(&record.trace, create(&path)?).map_err(|e| output(&path, e))?;
        let labels: Vec<&[usize]> = record.samples.iter().map(|s| s.labels.as_slice()).collect();
        write_matrix(&mean_association(&labels)?, &dir.join("mean_association.csv"))?;
        let summary = trace_stats(&record.trace, c.burn_in.unwrap_or(0));
        eprintln!(
            "{}: seed {}, final log joint {:.3}, mean clusters {:.2}, move acceptance {:.3}",
            dir.display(),
            c.seed,
            summary.final_log_joint,
            summary.mean_occupied,
            summary.acceptance_rate()
        );
        Ok(())
    })?;
    if dirs.len() > 1 {
        diagnose_dirs(&dirs, &out, &cfg, false)?;
    }
    Ok(())
}

/// Permutes a matrix indexed by slice-grouped position back to dataset
/// row order.
fn to_dataset_order(m: AssociationMatrix, data: &Dataset) -> AssociationMatrix {
    let by = data.by_slice();
    let starts: Vec<usize> = by
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.len();
            Some(start)
        })
        .collect();
    let flat: Vec<usize> = data.slice_positions().into_iter().map(|(t, i)| starts[t] + i).collect();
    let n = flat.len();
    AssociationMatrix { values: DMatrix::from_fn(n, n, |i, j| m.values[(flat[i], flat[j])]) }
}

fn fit_ddp(args: FitArgs) -> CliResult<()> {
    let (cfg, data, out) = fit_setup(&args, Command::FitDdp)?;
    if data.slices.is_none() {
        return usage(format!("{}: fit-ddp needs a dataset with a slice column", args.data.display()));
    }
    let dim = data.dim();
    cfg.ddp_config()?;
    let slices = data.by_slice();
    let positions = data.slice_positions();
    let mut index_of = vec![Vec::new(); slices.len()];
    for (n, &(t, _)) in positions.iter().enumerate() {
        index_of[t].push(n);
    }
    let dirs = fan_out(&cfg, args.runs, &out, |c, dir| {
        let prior = c.stick_prior()?;
        let iw = c.iw_prior(dim)?;
        let kernel = match c.kernel_location(dim)? {
            Some(m) => CouplingKernel::new(c.coupling_params(), slices.len(), m)?,
            None => CouplingKernel::with_pooled_mean(c.coupling_params(), &slices)?,
        };
        let record = run_ddp_chain(&slices, &prior, &kernel, &iw, &c.ddp_config()?)?;

        let path = dir.join("samples.csv");
        let rows = record.samples.iter().flat_map(|s| {
            let index_of = &index_of;
            s.labels.iter().enumerate().flat_map(move |(t, z)| {
                z.iter().enumerate().map(move |(i, l)| {
                    vec![s.iter.to_string(), (t + 1).to_string(), index_of[t][i].to_string(), l.to_string()]
                })
            })
        });
        write_samples(&path, rows, &["iter", "slice", "datum_index", "label"])?;

        let path = dir.join("theta.csv");
        let mut header = vec!["iter".to_string(), "label".into(), "slice".into()];
        header.extend((1..=dim).map(|k| format!("mu{k}")));
        for r in 1..=dim {
            header.extend((1..=dim).map(|c| format!("cov{r}{c}")));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = record.samples.iter().flat_map(|s| {
            s.theta.iter().flat_map(move |(label, traj)| {
                traj.iter().enumerate().map(move |(t, g)| {
                    let mut row = vec![s.iter.to_string(), label.to_string(), (t + 1).to_string()];
                    row.extend(g.mean().iter().map(|v| v.to_string()));
                    let cov = g.covariance();
                    for r in 0..dim {
                        row.extend((0..dim).map(|c| cov[(r, c)].to_string()));
                    }
                    row
                })
            })
        });
        write_samples(&path, rows, &header)?;

        let path = dir.join("trace.csv");
        write_trace_csv(&record.trace, create(&path)?).map_err(|e| output(&path, e))?;
        let labels: Vec<&[Vec<usize>]> = record.samples.iter().map(|s| s.labels.as_slice()).collect();
        let per = to_dataset_order(mean_slice_association(&labels, SliceScope::PerSlice)?, &data);
        write_matrix(&per, &dir.join("mean_association.csv"))?;
        let global = to_dataset_order(mean_slice_association(&labels, SliceScope::Global)?, &data);
        write_matrix(&global, &dir.join("mean_association_global.csv"))?;
        let path = dir.join("slice_index.csv");
        let rows = data.slices.iter().flatten().map(|t| vec![t.to_string()]);
        write_samples(&path, rows, &["slice"])?;
        let summary = trace_stats(&record.trace, c.burn_in.unwrap_or(0));
        eprintln!(
            "{}: seed {}, final log joint {:.3}, mean clusters {:.2}, swap acceptance {:.3}, new-cluster MC rel. SE {:.2e}",
            dir.display(),
            c.seed,
            summary.final_log_joint,
            summary.mean_occupied,
            summary.acceptance_rate(),
            record.mc_rel_se
        );
        Ok(())
    })?;
    if dirs.len() > 1 {
        diagnose_dirs(&dirs, &out, &cfg, false)?;
    }
    Ok(())
}

fn read_slices(path: &Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .map(|l| l.trim().parse().map_err(|_| Failure::Usage(format!("{}: bad slice {l:?}", path.display()))))
        .collect()
}

fn variance_outputs(
    dirs: &[PathBuf],
    file: &str,
    out: &Path,
    prefix: &str,
    cfg: &RunConfig,
    slices: Option<&[usize]>,
) -> CliResult<()> {
    let means = dirs
        .iter()
        .map(|d| {
            let p = d.join(file);
            let f = fs::File::open(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            input(&p, read_matrix_csv(f)).map(|values| AssociationMatrix { values })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let var = association_variance(&means, cfg.variance_kind()?)?;
    let path = out.join(format!("{prefix}.csv"));
    write_matrix_csv(&var, create(&path)?).map_err(|e| output(&path, e))?;
    let hist = upper_triangle_histogram(&var, cfg.histogram()?, |_, _| true);
    let path = out.join(format!("{prefix}_hist.csv"));
    write_histogram_csv(&hist, create(&path)?).map_err(|e| output(&path, e))?;
    if let Some(s) = slices.filter(|s| s.len() == var.nrows()) {
        let hist = upper_triangle_histogram(&var, cfg.histogram()?, |i, j| s[i] != s[j]);
        let path = out.join(format!("{prefix}_cross_slice_hist.csv"));
        write_histogram_csv(&hist, create(&path)?).map_err(|e| output(&path, e))?;
    }
    eprintln!(
        "{}: mean off-diagonal variance {:.4e} over {} runs",
        out.join(format!("{prefix}.csv")).display(),
        stickbreak::diagnostics::mean_off_diagonal(&var),
        dirs.len()
    );
    Ok(())
}

fn diagnose_dirs(dirs: &[PathBuf], out: &Path, cfg: &RunConfig, resolve: bool) -> CliResult<()> {
    if dirs.len() < 2 {
        return usage(format!("diagnose needs at least 2 run directories, got {}", dirs.len()));
    }
    make_dir(out)?;
    if resolve {
        write_resolved(cfg, &out.join("config.resolved"))?;
    }
    variance_outputs(dirs, "mean_association.csv", out, "variance", cfg, None)?;
    if dirs.iter().all(|d| d.join("mean_association_global.csv").exists()) {
        let slices = read_slices(&dirs[0].join("slice_index.csv")).ok();
        variance_outputs(dirs, "mean_association_global.csv", out, "variance_global", cfg, slices.as_deref())?;
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.sample_variance {
        cfg.variance = "sample".into();
    }
    cfg.out_dir = Some(args.out.display().to_string());
    cfg.resolve(Command::Diagnose, 0);
    cfg.validate()?;
    diagnose_dirs(&args.runs, &args.out, &cfg, true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Cmd::Synth(a) => synth(a),
        Cmd::Fit(a) => fit(a),
        Cmd::FitDdp(a) => fit_ddp(a),
        Cmd::Diagnose(a) => diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
