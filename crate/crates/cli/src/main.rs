use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vegoc::io::{
    emit_plotdata, exit_code, run, run_file, Artifact, ArtifactRef, InitialConfig, MeshConfig, ModelChoice, OutputConfig,
    Scenario, SolverConfig, SwitchConfig, Task, PLOT_KINDS,
};
use vegoc::{Error, ParameterSet, Result};

/// Canonical steady states, continuation, canonical paths and Skiba points for optimal
/// harvesting in a vegetation / soil water model.
#[derive(Parser, Debug)]
#[command(name = "vegoc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` parameter file applied over the defaults.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Single parameter override `KEY=VALUE`, applied after `--params`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `interval:L:elements`, `rectangle:L:nx:ny` or a mesh listing file.
    #[arg(long, global = true)]
    mesh: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Newton tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Stored artifact used as the starting state.
    #[arg(long = "seed-file", global = true)]
    seed_file: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file or re-run a manifest.
    Run { scenario: PathBuf },
    /// Steady state: flat from a guess or by homotopy, or patterned from `--seed-file`.
    Css {
        /// Flat guess `v,w,lambda,mu`.
        #[arg(long, value_delimiter = ',')]
        guess: Option<Vec<f64>>,
        #[arg(long)]
        no_defect: bool,
        /// With a branch as `--seed-file`: which crossing of the parameter value to solve.
        #[arg(long, default_value_t = 0)]
        crossing: usize,
    },
    /// Continue a branch, optionally switching at one of its branch points.
    Branch(BranchArgs),
    /// Spectrum of a steady state (the seed file, or the flat state).
    Spectrum {
        #[arg(long, default_value = "auto")]
        method: String,
        /// Eigenvalues requested from the Arnoldi method.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Canonical path to a stored target.
    Path {
        #[arg(long)]
        target: PathBuf,
        /// Stored state providing the initial `(v, w)`; defaults to `--seed-file`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Flat initial state `v,w`.
        #[arg(long, value_delimiter = ',')]
        flat: Option<Vec<f64>>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        strict: bool,
        /// Also solve on the doubled horizon and report the change of `J`.
        #[arg(long)]
        doubling_check: bool,
    },
    /// Indifference point between paths to two stored targets.
    Skiba {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_delimiter = ',')]
        range: Option<Vec<f64>>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Private optimization: steady states, branches and time simulation.
    Private {
        #[command(subcommand)]
        command: PrivateCommand,
    },
    /// Plot-ready column files from stored artifacts.
    Plotdata {
        /// One of `bifurcation`, `path`, `snapshot`.
        #[arg(long)]
        kind: String,
        artifacts: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct BranchArgs {
    #[arg(long, default_value = "trunk")]
    name: String,
    #[arg(long, default_value = "R")]
    param: String,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    direction: f64,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    ds: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    bounds: Option<Vec<f64>>,
    /// Flat guess when no seed file is given.
    #[arg(long, value_delimiter = ',')]
    guess: Option<Vec<f64>>,
    #[arg(long)]
    no_bifurcations: bool,
    #[arg(long)]
    no_index: bool,
    #[arg(long)]
    stop_after: Option<usize>,
    /// Switch at this bifurcation of the trunk.
    #[arg(long)]
    switch: Option<usize>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long, default_value = "switched")]
    switch_name: String,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    switch_bounds: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
enum PrivateCommand {
    /// Flat private steady state.
    Css {
        #[arg(long, value_delimiter = ',')]
        guess: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        crossing: usize,
    },
    /// Continue a branch of private steady states.
    Branch(BranchArgs),
    /// Integrate the private dynamics in time.
    Simulate {
        #[arg(long)]
        t_end: f64,
        #[arg(long, default_value_t = 0.0)]
        perturbation: f64,
        #[arg(long)]
        dt_max: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        guess: Option<Vec<f64>>,
    },
}

fn pair(v: &Option<Vec<f64>>, what: &str) -> Result<Option<[f64; 2]>> {
    match v {
        None => Ok(None),
        Some(x) if x.len() == 2 => Ok(Some([x[0], x[1]])),
        Some(_) => Err(Error::InvalidArgument(format!("{what} needs two comma separated values"))),
    }
}

fn file_ref(p: &Option<PathBuf>) -> Option<ArtifactRef> {
    p.clone().map(ArtifactRef::File)
}

fn branch_task(a: &BranchArgs, seed: Option<ArtifactRef>) -> Result<Task> {
    Ok(Task::Branch {
        name: a.name.clone(),
        param: a.param.clone(),
        direction: a.direction,
        start: seed,
        guess: a.guess.clone(),
        max_steps: a.max_steps,
        ds: a.ds,
        ds_max: None,
        bounds: pair(&a.bounds, "--bounds")?,
        detect_bifurcations: !a.no_bifurcations,
        compute_index: !a.no_index,
        stop_after_bifurcations: a.stop_after,
        switch: match a.switch {
            Some(b) => Some(SwitchConfig {
                bifurcation: b,
                eps: a.eps,
                name: a.switch_name.clone(),
                max_steps: None,
                bounds: pair(&a.switch_bounds, "--switch-bounds")?,
            }),
            None => None,
        },
    })
}

fn scenario(g: &Global, model: ModelChoice, task: Task) -> Result<Scenario> {
    let mut par = match &g.params {
        Some(p) => ParameterSet::from_text(&std::fs::read_to_string(p)?)?,
        None => ParameterSet::default(),
    };
    for s in &g.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let v: f64 = v.trim().parse().map_err(|e| Error::InvalidArgument(format!("--set {s}: {e}")))?;
        par.set(k.trim(), v)?;
    }
    let defaults = ParameterSet::default();
    let params: BTreeMap<String, f64> = vegoc::model::PARAM_KEYS
        .iter()
        .filter(|k| par.get(k) != defaults.get(k))
        .map(|k| (k.to_string(), par.get(k).unwrap()))
        .collect();
    let mesh = match &g.mesh {
        None => MeshConfig::default(),
        Some(s) => match vegoc::io::MeshSpec::parse(s)? {
            vegoc::io::MeshSpec::Interval { half_length, elements } => MeshConfig { half_length, elements, ..MeshConfig::default() },
            vegoc::io::MeshSpec::Rectangle { half_length, nx, ny } => {
                MeshConfig { dim: 2, half_length, elements: nx, ny: Some(ny), file: None }
            }
            vegoc::io::MeshSpec::Listing { .. } => MeshConfig { file: Some(PathBuf::from(s)), ..MeshConfig::default() },
        },
    };
    Ok(Scenario {
        model,
        params,
        mesh,
        solver: SolverConfig { tol: g.tol.unwrap_or(SolverConfig::default().tol), ..SolverConfig::default() },
        task: Some(task),
        output: OutputConfig { dir: g.out.clone().unwrap_or_else(|| PathBuf::from("out")) },
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let seed = file_ref(&g.seed_file);
    let (model, task) = match &cli.command {
        Command::Run { scenario } => {
            let rep = run_file(scenario, g.out.as_deref())?;
            return report(&rep.dir, &rep.manifest.summary);
        }
        Command::Plotdata { kind, artifacts } => {
            if !PLOT_KINDS.contains(&kind.as_str()) {
                return Err(Error::InvalidArgument(format!("unknown plot kind `{kind}`")));
            }
            let loaded = artifacts.iter().map(|p| Artifact::load(p)).collect::<Result<Vec<_>>>()?;
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("plotdata"));
            for f in emit_plotdata(&loaded, kind, &dir)? {
                println!("{}", f.display());
            }
            return Ok(());
        }
        Command::Css { guess, no_defect, crossing } => {
            (ModelChoice::Canonical, Task::FlatCss { guess: guess.clone(), seed, defect: !no_defect, crossing: *crossing })
        }
        Command::Branch(a) => (ModelChoice::Canonical, branch_task(a, seed)?),
        Command::Spectrum { method, count } => {
            (ModelChoice::Canonical, Task::Spectrum { state: seed, guess: None, method: method.clone(), count: *count })
        }
        Command::Path { target, from, flat, horizon, nodes, strict, doubling_check } => {
            let flat = pair(flat, "--flat")?;
            let from = file_ref(from).or(if flat.is_none() { seed } else { None });
            (
                ModelChoice::Canonical,
                Task::Path {
                    target: ArtifactRef::File(target.clone()),
                    initial: InitialConfig { from, flat },
                    horizon: *horizon,
                    nodes: *nodes,
                    grading: None,
                    mismatch_tol: None,
                    strict: *strict,
                    doubling_check: *doubling_check,
                },
            )
        }
        Command::Skiba { a, b, range, tol, grid, horizon } => (
            ModelChoice::Canonical,
            Task::Skiba {
                a: ArtifactRef::File(a.clone()),
                b: ArtifactRef::File(b.clone()),
                range: pair(range, "--range")?,
                tol: *tol,
                grid: *grid,
                horizon: *horizon,
                nodes: None,
            },
        ),
        Command::Private { command } => match command {
            PrivateCommand::Css { guess, crossing } => {
                (ModelChoice::Private, Task::FlatCss { guess: guess.clone(), seed, defect: true, crossing: *crossing })
            }
            PrivateCommand::Branch(a) => (ModelChoice::Private, branch_task(a, seed)?),
            PrivateCommand::Simulate { t_end, perturbation, dt_max, guess } => (
                ModelChoice::Private,
                Task::Simulate {
                    initial: seed,
                    guess: guess.clone(),
                    perturbation: *perturbation,
                    t_end: *t_end,
                    dt_max: *dt_max,
                    record_every: None,
                },
            ),
        },
    };
    let s = scenario(g, model, task)?;
    let rep = run(&s, None)?;
    report(&rep.dir, &rep.manifest.summary)
}

fn report(dir: &Path, summary: &vegoc::io::JsonValue) -> Result<()> {
    println!("{}", vegoc::io::human_summary(summary));
    println!("output: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
