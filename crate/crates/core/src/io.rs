//! Scenarios, artifact persistence, run manifests and plot data.
//!
//! Artifacts are stored as a compact binary file (exact `f64` bits, NaN included) with a JSON
//! sidecar `<file>.json` describing its content. Scenarios are sectioned `key = value` text
//! (TOML) or JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::bvp::{connect, truncation_check, CanonicalPath, PathOptions};
use crate::continuation::{
    branch_diagnostics, branch_switch, continue_branch, states_at, Branch, Canonical, ContinuationOptions, ModelKind, Private,
};
use crate::dynamics::{integrate_private, StepOptions, Trajectory};
use crate::error::{Error, Result};
use crate::fem::Domain;
use crate::newton::NewtonOptions;
use crate::skiba::{find_skiba, SkibaOptions};
use crate::spectral::{canonical_spectrum, private_spectrum, Method, SpectralData};
use crate::steady::{
    embed_flat, flat_css_from_seed, flat_private_from_seed, solve_css, solve_flat_css, solve_flat_private, solve_private,
    CssPoint, PrivateSteadyState,
};
use crate::{Mesh, Operators, ParameterSet};

pub const FORMAT_VERSION: u32 = 1;

/// How to rebuild the spatial mesh of an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshSpec {
    Interval { half_length: f64, elements: usize },
    Rectangle { half_length: f64, nx: usize, ny: usize },
    /// Node/element listing in the text format of [`Mesh::to_text`].
    Listing { text: String },
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec::Interval { half_length: 5.0, elements: 50 }
    }
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh> {
        match self {
            MeshSpec::Interval { half_length, elements } => Mesh::interval(*half_length, *elements),
            MeshSpec::Rectangle { half_length, nx, ny } => Mesh::rectangle(*half_length, *nx, *ny),
            MeshSpec::Listing { text } => Mesh::from_text(text.as_bytes()),
        }
    }

    pub fn of(mesh: &Mesh) -> Self {
        match mesh.domain() {
            Domain::Interval { half_length, elements } => MeshSpec::Interval { half_length, elements },
            Domain::Rectangle { half_length, nx, ny } => MeshSpec::Rectangle { half_length, nx, ny },
            Domain::Unstructured => MeshSpec::Listing { text: mesh.to_text() },
        }
    }

    /// Parses `interval:L:elements`, `rectangle:L:nx:ny`, or a path to a mesh listing.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("mesh spec `{s}`: {e}")));
        let int = |x: &str| x.trim().parse::<usize>().map_err(|e| Error::InvalidArgument(format!("mesh spec `{s}`: {e}")));
        match parts.as_slice() {
            ["interval", l, n] => Ok(MeshSpec::Interval { half_length: num(l)?, elements: int(n)? }),
            ["rectangle", l, nx, ny] => Ok(MeshSpec::Rectangle { half_length: num(l)?, nx: int(nx)?, ny: int(ny)? }),
            _ => Ok(MeshSpec::Listing { text: fs::read_to_string(s)? }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Content {
    Css(CssPoint),
    PrivateState(PrivateSteadyState),
    Branch(Branch),
    Path(CanonicalPath),
    Trajectory(Trajectory),
}

impl Content {
    pub fn kind(&self) -> &'static str {
        match self {
            Content::Css(_) => "css",
            Content::PrivateState(_) => "private-state",
            Content::Branch(_) => "branch",
            Content::Path(_) => "path",
            Content::Trajectory(_) => "trajectory",
        }
    }
}

/// A persisted result with the mesh it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub version: u32,
    pub mesh: MeshSpec,
    pub content: Content,
}

impl Artifact {
    pub fn new(mesh: MeshSpec, content: Content) -> Self {
        Self { version: FORMAT_VERSION, mesh, content }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::InvalidArgument(format!("encoding artifact: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let a: Artifact = bincode::deserialize(bytes).map_err(|e| Error::InvalidArgument(format!("decoding artifact: {e}")))?;
        if a.version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("artifact format {} is not supported", a.version)));
        }
        Ok(a)
    }

    /// Checks sizes against the mesh and the stored residuals.
    pub fn validate(&self) -> Result<()> {
        let n = self.mesh.build()?.n_nodes();
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} does not fit a mesh with {n} nodes")));
        match &self.content {
            Content::Css(c) => {
                if c.u.len() != 4 * n {
                    return bad("css state");
                }
                c.validate(1e-6)
            }
            Content::PrivateState(s) => {
                if s.vw.len() != 2 * n {
                    return bad("private state");
                }
                Ok(())
            }
            Content::Branch(b) => {
                let k = if b.model == ModelKind::Canonical { 4 } else { 2 };
                if b.points.iter().any(|p| p.u.len() != k * n) {
                    return bad("branch point");
                }
                Ok(())
            }
            Content::Path(p) => {
                if p.states.len() != p.mesh.len() || p.states.iter().any(|u| u.len() != 4 * n) {
                    return bad("path state");
                }
                p.mesh.validate()?;
                p.target.validate(1e-6)
            }
            Content::Trajectory(t) => {
                if t.states.iter().any(|u| u.len() != 2 * n) {
                    return bad("trajectory state");
                }
                Ok(())
            }
        }
    }

    /// Human-readable description written next to the binary file.
    pub fn summary(&self) -> serde_json::Value {
        use serde_json::json;
        let body = match &self.content {
            Content::Css(c) => json!({ "params": c.params, "diagnostics": c.diagnostics }),
            Content::PrivateState(s) => json!({
                "params": s.params, "avg_v": s.avg_v, "avg_w": s.avg_w, "profit": s.profit, "stable": s.stable
            }),
            Content::Branch(b) => json!({
                "name": b.name, "param": b.param, "points": b.points.len(),
                "folds": b.folds.iter().map(|f| f.param).collect::<Vec<_>>(),
                "bifurcations": b.bifurcations.iter().map(|f| f.param).collect::<Vec<_>>(),
                "stop": b.stop
            }),
            Content::Path(p) => json!({
                "horizon": p.mesh.horizon(), "nodes": p.mesh.len(), "J": p.value(), "mismatch": p.mismatch,
                "target_profit": p.target.diagnostics.profit, "warning": p.warning
            }),
            Content::Trajectory(t) => json!({ "t_end": t.times.last(), "records": t.times.len() }),
        };
        json!({ "kind": self.content.kind(), "version": self.version, "mesh": self.mesh, "content": body })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        fs::write(sidecar(path), serde_json::to_string_pretty(&self.summary())? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Self::from_bytes(&fs::read(path)?)?;
        a.validate()?;
        Ok(a)
    }

    pub fn ops(&self) -> Result<Operators> {
        Operators::assemble(&self.mesh.build()?)
    }

    pub fn css(&self) -> Result<&CssPoint> {
        match &self.content {
            Content::Css(c) => Ok(c),
            Content::Path(p) => Ok(&p.target),
            other => Err(Error::InvalidArgument(format!("expected a css artifact, found {}", other.kind()))),
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// An input artifact named by file, or embedded (base64 of the binary form) in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArtifactRef {
    File(PathBuf),
    Embedded { embedded: String },
}

impl ArtifactRef {
    pub fn load(&self) -> Result<Artifact> {
        match self {
            ArtifactRef::File(p) => Artifact::load(p).map_err(|e| match e {
                Error::Io(io) => Error::InvalidArgument(format!("cannot read artifact {}: {io}", p.display())),
                other => other,
            }),
            ArtifactRef::Embedded { embedded } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(embedded)
                    .map_err(|e| Error::InvalidArgument(format!("embedded artifact: {e}")))?;
                let a = Artifact::from_bytes(&bytes)?;
                a.validate()?;
                Ok(a)
            }
        }
    }

    fn embed(&self) -> Result<Self> {
        let bytes = self.load()?.to_bytes()?;
        Ok(ArtifactRef::Embedded { embedded: base64::engine::general_purpose::STANDARD.encode(bytes) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    #[default]
    Canonical,
    Private,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "five")]
    pub half_length: f64,
    #[serde(default = "fifty")]
    pub elements: usize,
    /// Elements in `y` for `dim = 2`; defaults to `elements`.
    pub ny: Option<usize>,
    /// Mesh listing file; overrides the structured fields.
    pub file: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn five() -> f64 {
    5.0
}
fn fifty() -> usize {
    50
}
fn yes() -> bool {
    true
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { dim: 1, half_length: 5.0, elements: 50, ny: None, file: None }
    }
}

impl MeshConfig {
    pub fn spec(&self) -> Result<MeshSpec> {
        if let Some(f) = &self.file {
            return Ok(MeshSpec::Listing { text: fs::read_to_string(f)? });
        }
        match self.dim {
            1 => Ok(MeshSpec::Interval { half_length: self.half_length, elements: self.elements }),
            2 => Ok(MeshSpec::Rectangle { half_length: self.half_length, nx: self.elements, ny: self.ny.unwrap_or(self.elements) }),
            d => Err(Error::InvalidArgument(format!("mesh dimension {d} is not 1 or 2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchConfig {
    /// Index into the trunk's bifurcation list.
    pub bifurcation: usize,
    #[serde(default = "unit")]
    pub eps: f64,
    #[serde(default = "child")]
    pub name: String,
    pub max_steps: Option<usize>,
    pub bounds: Option<[f64; 2]>,
}

fn unit() -> f64 {
    1.0
}
fn child() -> String {
    "switched".into()
}
fn trunk() -> String {
    "trunk".into()
}
fn rain() -> String {
    "R".into()
}
fn minus() -> f64 {
    -1.0
}

/// Initial states of a path: the `(v, w)` of a stored state, or flat values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub from: Option<ArtifactRef>,
    pub flat: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    FlatCss {
        guess: Option<Vec<f64>>,
        /// Stored state whose values start a Newton solve on the full mesh, for patterned states.
        seed: Option<ArtifactRef>,
        #[serde(default = "yes")]
        defect: bool,
        /// With a branch as seed: which crossing of the scenario's parameter value to solve.
        #[serde(default)]
        crossing: usize,
    },
    Branch {
        #[serde(default = "trunk")]
        name: String,
        #[serde(default = "rain")]
        param: String,
        #[serde(default = "minus")]
        direction: f64,
        /// Stored start state; the flat state of the scenario is used otherwise.
        start: Option<ArtifactRef>,
        guess: Option<Vec<f64>>,
        max_steps: Option<usize>,
        ds: Option<f64>,
        ds_max: Option<f64>,
        bounds: Option<[f64; 2]>,
        #[serde(default = "yes")]
        detect_bifurcations: bool,
        #[serde(default = "yes")]
        compute_index: bool,
        stop_after_bifurcations: Option<usize>,
        switch: Option<SwitchConfig>,
    },
    Spectrum {
        state: Option<ArtifactRef>,
        guess: Option<Vec<f64>>,
        /// `auto`, `dense`, `modal` or `arnoldi`.
        #[serde(default = "auto")]
        method: String,
        count: Option<usize>,
    },
    Path {
        target: ArtifactRef,
        initial: InitialConfig,
        horizon: Option<f64>,
        nodes: Option<usize>,
        grading: Option<f64>,
        mismatch_tol: Option<f64>,
        #[serde(default)]
        strict: bool,
        #[serde(default)]
        doubling_check: bool,
    },
    Skiba {
        a: ArtifactRef,
        b: ArtifactRef,
        range: Option<[f64; 2]>,
        tol: Option<f64>,
        grid: Option<usize>,
        horizon: Option<f64>,
        nodes: Option<usize>,
    },
    Simulate {
        initial: Option<ArtifactRef>,
        guess: Option<Vec<f64>>,
        /// Relative amplitude of a `cos(π x / L)` perturbation of `v`.
        #[serde(default)]
        perturbation: f64,
        t_end: f64,
        dt_max: Option<f64>,
        record_every: Option<usize>,
    },
}

fn auto() -> String {
    "auto".into()
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::FlatCss { .. } => "flat-css",
            Task::Branch { .. } => "branch",
            Task::Spectrum { .. } => "spectrum",
            Task::Path { .. } => "path",
            Task::Skiba { .. } => "skiba",
            Task::Simulate { .. } => "simulate",
        }
    }

    fn refs_mut(&mut self) -> Vec<&mut ArtifactRef> {
        match self {
            Task::FlatCss { seed, .. } => seed.iter_mut().collect(),
            Task::Branch { start, .. } => start.iter_mut().collect(),
            Task::Spectrum { state, .. } => state.iter_mut().collect(),
            Task::Path { target, initial, .. } => std::iter::once(target).chain(initial.from.iter_mut()).collect(),
            Task::Skiba { a, b, .. } => vec![a, b],
            Task::Simulate { initial, .. } => initial.iter_mut().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "newton_tol")]
    pub tol: f64,
    #[serde(default = "newton_iter")]
    pub max_iter: usize,
}

fn newton_tol() -> f64 {
    1e-8
}
fn newton_iter() -> usize {
    30
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub model: ModelChoice,
    /// Overrides of the default coefficients by name.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub task: Option<Task>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Byte offset to 1-based line number.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Scenario {
    /// Parses TOML, or JSON when the first non-blank character is `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value =
                serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
            let v = v.get("scenario").cloned().unwrap_or(v);
            return serde_json::from_value(v).map_err(|e| Error::Parse { line: 0, msg: e.to_string() });
        }
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parameters(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::default();
        for (k, v) in &self.params {
            p.set(k, *v)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.solver.tol, max_iter: self.solver.max_iter, ..Default::default() }
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        self.parameters()?;
        self.mesh.spec()?.build()?;
        let task = self.task.as_ref().ok_or_else(|| Error::InvalidArgument("scenario has no task".into()))?;
        let mut t = task.clone();
        for r in t.refs_mut() {
            if let ArtifactRef::File(p) = r {
                if !p.exists() {
                    return Err(Error::InvalidArgument(format!("input artifact {} does not exist", p.display())));
                }
            }
        }
        if let Task::Path { initial, .. } = task {
            if initial.from.is_some() == initial.flat.is_some() {
                return Err(Error::InvalidArgument("path initial needs exactly one of `from` and `flat`".into()));
            }
        }
        Ok(())
    }

    /// A copy with every input artifact embedded.
    pub fn embedded(&self) -> Result<Self> {
        let mut s = self.clone();
        if let Some(t) = s.task.as_mut() {
            for r in t.refs_mut() {
                *r = r.embed()?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: u64,
}

/// Record of a run; re-running it with [`run`] reproduces the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub program: String,
    pub version: String,
    pub task: String,
    pub params: ParameterSet,
    pub mesh: MeshSpec,
    pub scenario: Scenario,
    pub files: Vec<OutputFile>,
    pub summary: serde_json::Value,
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Exit status for an error: 2 configuration, 3 solver failure, 4 defective target, 5 no path.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::DegenerateElement { .. }
        | Error::ControlUndefined { .. }
        | Error::Domain { .. } => 2,
        Error::DefectiveTarget { .. } | Error::MarginalSpectrum { .. } => 4,
        Error::PathNonexistence { .. } => 5,
        Error::NonConvergence { .. }
        | Error::SingularJacobian(_)
        | Error::StepUnderflow { .. }
        | Error::SwitchFailed(_)
        | Error::NoSkiba { .. }
        | Error::BlowUp { .. }
        | Error::Eigen(_) => 3,
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.dir.join(name), text)?;
        self.files.push(OutputFile { name: name.into(), bytes: text.len() as u64 });
        Ok(())
    }

    fn artifact(&mut self, name: &str, a: &Artifact) -> Result<()> {
        let path = self.dir.join(name);
        a.save(&path)?;
        for f in [path.clone(), sidecar(&path)] {
            let bytes = fs::metadata(&f)?.len();
            self.files.push(OutputFile { name: f.file_name().unwrap().to_string_lossy().into_owned(), bytes });
        }
        Ok(())
    }
}

fn flat_guess<const K: usize>(g: &[f64]) -> Result<[f64; K]> {
    g.try_into().map_err(|_| Error::InvalidArgument(format!("guess needs {K} values, got {}", g.len())))
}

fn csv_row(values: &[f64]) -> String {
    values.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(",")
}

fn css_diagnostics_csv(c: &CssPoint) -> String {
    let d = &c.diagnostics;
    format!(
        "R,avg_v,avg_w,avg_lambda,avg_mu,J_ca,defect,residual\n{},{},{:.17e}\n",
        csv_row(&[c.params.rain, d.avg_v, d.avg_w, d.avg_lambda, d.avg_mu, d.profit]),
        d.defect.map(|x| x.to_string()).unwrap_or_default(),
        d.residual
    )
}

fn private_csv(s: &PrivateSteadyState) -> String {
    format!(
        "R,avg_v,avg_w,avg_profit,max_real,stable\n{},{}\n",
        csv_row(&[s.params.rain, s.avg_v, s.avg_w, s.profit, s.max_real]),
        u8::from(s.stable)
    )
}

fn spectrum_method(name: &str, count: Option<usize>) -> Result<Method> {
    Ok(match name {
        "auto" => Method::Auto,
        "dense" => Method::Dense,
        "modal" => Method::Modal,
        "arnoldi" => Method::ShiftInvert { count: count.unwrap_or(20) },
        other => return Err(Error::InvalidArgument(format!("unknown spectrum method `{other}`"))),
    })
}

/// Runs a scenario, writing artifacts and `manifest.json` into `out` (or the scenario's directory).
pub fn run(scenario: &Scenario, out: Option<&Path>) -> Result<RunReport> {
    scenario.validate()?;
    let task = scenario.task.clone().unwrap();
    let par = scenario.parameters()?;
    let mesh_spec = scenario.mesh.spec()?;
    let ops = Operators::assemble(&mesh_spec.build()?)?;
    let nopts = scenario.newton();
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| scenario.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let mut o = Outputs { dir: dir.clone(), files: Vec::new() };
    let private = scenario.model == ModelChoice::Private;
    let art = |c: Content| Artifact::new(mesh_spec.clone(), c);

    let flat_css = |guess: &Option<Vec<f64>>| -> Result<CssPoint> {
        match guess {
            Some(g) => solve_flat_css(&par, flat_guess::<4>(g)?, &ops, &nopts),
            None => flat_css_from_seed(&par, &ops, &nopts),
        }
    };
    let flat_private = |guess: &Option<Vec<f64>>| -> Result<PrivateSteadyState> {
        match guess {
            Some(g) => solve_flat_private(&par, flat_guess::<2>(g)?, &ops, &nopts),
            None => flat_private_from_seed(&par, &ops, &nopts),
        }
    };

    let summary = match &task {
        Task::FlatCss { guess, seed, defect, crossing } => {
            let mut seeded = match seed {
                Some(r) => Some(r.load()?),
                None => None,
            };
            let mut crossings = None;
            if let Some(Artifact { content: Content::Branch(b), mesh, .. }) = &seeded {
                let value = par.get(&b.param).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{}`", b.param)))?;
                let states = if private {
                    states_at(&Private, &ops, b, value, nopts.tol)?
                } else {
                    states_at(&Canonical, &ops, b, value, nopts.tol)?
                };
                crossings = Some(
                    states
                        .iter()
                        .map(|e| serde_json::json!({ "profit": e.profit, "index": e.index, "avg_v": e.averages[0] }))
                        .collect::<Vec<_>>(),
                );
                let e = states.get(*crossing).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "branch `{}` crosses {} = {value} {} times, crossing {crossing} requested",
                        b.name,
                        b.param,
                        states.len()
                    ))
                })?;
                let content = if private {
                    Content::PrivateState(solve_private(&par, &e.u, &ops, &nopts)?)
                } else {
                    Content::Css(e.css())
                };
                seeded = Some(Artifact::new(mesh.clone(), content));
            }
            if let Some(a) = &seeded {
                if a.mesh != mesh_spec {
                    return Err(Error::InvalidArgument("seed lives on a different mesh than the scenario".into()));
                }
            }
            if private {
                let s = match &seeded {
                    Some(Artifact { content: Content::PrivateState(s), .. }) => solve_private(&par, &s.vw, &ops, &nopts)?,
                    Some(a) => solve_private(&par, &a.css()?.u[..2 * ops.n_nodes()], &ops, &nopts)?,
                    None => flat_private(guess)?,
                };
                o.write("diagnostics.csv", &private_csv(&s))?;
                o.artifact("state.bin", &art(Content::PrivateState(s.clone())))?;
                let mut v = serde_json::json!({ "avg_v": s.avg_v, "avg_w": s.avg_w, "profit": s.profit, "stable": s.stable });
                if let Some(x) = crossings {
                    v["crossings"] = serde_json::Value::Array(x);
                }
                v
            } else {
                let mut c = match &seeded {
                    Some(a) => solve_css(&par, &a.css()?.u, &ops, &nopts)?,
                    None => flat_css(guess)?,
                };
                if !defect {
                    c.diagnostics.defect = None;
                } else if c.diagnostics.defect.is_none() {
                    c.ensure_defect(&ops)?;
                }
                o.write("diagnostics.csv", &css_diagnostics_csv(&c))?;
                o.artifact("css.bin", &art(Content::Css(c.clone())))?;
                let mut v = serde_json::to_value(&c.diagnostics)?;
                if let Some(x) = crossings {
                    v["crossings"] = serde_json::Value::Array(x);
                }
                v
            }
        }
        Task::Branch {
            name,
            param,
            direction,
            start,
            guess,
            max_steps,
            ds,
            ds_max,
            bounds,
            detect_bifurcations,
            compute_index,
            stop_after_bifurcations,
            switch,
        } => {
            let (u0, p0) = match start {
                Some(r) => {
                    let a = r.load()?;
                    match a.content {
                        Content::PrivateState(s) => (s.vw, s.params),
                        _ => {
                            let c = a.css()?;
                            (c.u.clone(), c.params)
                        }
                    }
                }
                None if private => {
                    let s = flat_private(guess)?;
                    (s.vw, s.params)
                }
                None => {
                    let c = flat_css(guess)?;
                    (c.u, c.params)
                }
            };
            let defaults = ContinuationOptions::default();
            let copts = ContinuationOptions {
                max_steps: max_steps.unwrap_or(defaults.max_steps),
                ds: ds.unwrap_or(defaults.ds),
                ds_max: ds_max.unwrap_or(defaults.ds_max),
                bounds: bounds.map(|b| (b[0], b[1])).unwrap_or(defaults.bounds),
                detect_bifurcations: *detect_bifurcations,
                compute_index: *compute_index,
                stop_after_bifurcations: *stop_after_bifurcations,
                ..defaults
            };
            let trunk = if private {
                continue_branch(&Private, &ops, &u0, &p0, param, *direction, name, &copts)?
            } else {
                continue_branch(&Canonical, &ops, &u0, &p0, param, *direction, name, &copts)?
            };
            let mut branches = vec![trunk];
            if let Some(sw) = switch {
                let sopts = ContinuationOptions {
                    max_steps: sw.max_steps.unwrap_or(copts.max_steps),
                    bounds: sw.bounds.map(|b| (b[0], b[1])).unwrap_or(copts.bounds),
                    stop_after_bifurcations: None,
                    ..copts.clone()
                };
                let child = if private {
                    branch_switch(&Private, &ops, &branches[0], sw.bifurcation, sw.eps, None, &sw.name, &sopts)?
                } else {
                    branch_switch(&Canonical, &ops, &branches[0], sw.bifurcation, sw.eps, None, &sw.name, &sopts)?
                };
                branches.push(child);
            }
            for b in &branches {
                o.write(&format!("{}.csv", b.name), &b.to_csv())?;
                o.artifact(&format!("{}.bin", b.name), &art(Content::Branch(b.clone())))?;
            }
            let refs: Vec<&Branch> = branches.iter().collect();
            o.write("diagnostics.json", &serde_json::to_string_pretty(&branch_diagnostics(&refs))?)?;
            serde_json::json!(branches
                .iter()
                .map(|b| serde_json::json!({
                    "name": b.name,
                    "points": b.points.len(),
                    "folds": b.folds.iter().map(|f| f.param).collect::<Vec<_>>(),
                    "bifurcations": b.bifurcations.iter().map(|f| f.param).collect::<Vec<_>>(),
                    "stop": b.stop,
                }))
                .collect::<Vec<_>>())
        }
        Task::Spectrum { state, guess, method, count } => {
            let m = spectrum_method(method, *count)?;
            let spec: SpectralData = match (state, private) {
                (Some(r), _) => {
                    let a = r.load()?;
                    match &a.content {
                        Content::PrivateState(s) => private_spectrum(&s.vw, &s.params, &a.ops()?, m)?,
                        _ => {
                            let c = a.css()?;
                            canonical_spectrum(&c.u, &c.params, &a.ops()?, m)?
                        }
                    }
                }
                (None, true) => {
                    let s = flat_private(guess)?;
                    private_spectrum(&s.vw, &s.params, &ops, m)?
                }
                (None, false) => {
                    let c = flat_css(guess)?;
                    canonical_spectrum(&c.u, &c.params, &ops, m)?
                }
            };
            o.write("spectrum.csv", &spec.to_csv())?;
            serde_json::json!({
                "dim": spec.dim, "stable": spec.n_stable, "unstable": spec.n_unstable,
                "marginal": spec.n_marginal, "defect": spec.defect, "complete": spec.complete
            })
        }
        Task::Path { target, initial, horizon, nodes, grading, mismatch_tol, strict, doubling_check } => {
            let ta = target.load()?;
            let tops = ta.ops()?;
            let mut tcss = ta.css()?.clone();
            let d = tcss.ensure_defect(&tops)?;
            if d > 0 {
                return Err(Error::DefectiveTarget { defect: d });
            }
            let n = tcss.n_nodes();
            let v0w0 = match (&initial.from, &initial.flat) {
                (Some(r), _) => {
                    let a = r.load()?;
                    match &a.content {
                        Content::PrivateState(s) => s.vw.clone(),
                        Content::Path(p) => p.initial_states(),
                        _ => a.css()?.u[..2 * n].to_vec(),
                    }
                }
                (None, Some(f)) => embed_flat(f, n),
                _ => unreachable!(),
            };
            if v0w0.len() != 2 * n {
                return Err(Error::InvalidArgument("initial states and target live on different meshes".into()));
            }
            let d = PathOptions::default();
            let popts = PathOptions {
                horizon: horizon.unwrap_or(d.horizon),
                nodes: nodes.unwrap_or(d.nodes),
                grading: grading.unwrap_or(d.grading),
                mismatch_tol: mismatch_tol.unwrap_or(d.mismatch_tol),
                strict: *strict,
                newton: NewtonOptions { tol: scenario.solver.tol, ..d.newton },
                ..d
            };
            let path = connect(&v0w0, &tcss, &tops, &popts)?;
            let tr = truncation_check(&path, &tops, &popts, *doubling_check)?;
            o.write("path.csv", &path.to_csv())?;
            o.artifact("path.bin", &Artifact::new(ta.mesh.clone(), Content::Path(path.clone())))?;
            serde_json::json!({
                "J": path.value(), "transient": path.value.transient, "tail": path.value.tail,
                "mismatch": path.mismatch, "warning": path.warning, "truncation": tr,
                "target_J": tcss.diagnostics.profit / tcss.params.rho
            })
        }
        Task::Skiba { a, b, range, tol, grid, horizon, nodes } => {
            let (aa, ba) = (a.load()?, b.load()?);
            if aa.mesh != ba.mesh {
                return Err(Error::InvalidArgument("skiba targets live on different meshes".into()));
            }
            let sops = aa.ops()?;
            let d = SkibaOptions::default();
            let sk = SkibaOptions {
                range: range.map(|r| (r[0], r[1])).unwrap_or(d.range),
                tol: tol.unwrap_or(d.tol),
                grid: grid.unwrap_or(d.grid),
                path: PathOptions { horizon: horizon.unwrap_or(d.path.horizon), nodes: nodes.unwrap_or(d.path.nodes), ..d.path.clone() },
                ..d
            };
            let res = find_skiba(aa.css()?, ba.css()?, &sops, &sk)?;
            o.write("skiba.csv", &res.to_csv())?;
            o.write("skiba.json", &(res.manifest_json()? + "\n"))?;
            o.artifact("path_a.bin", &Artifact::new(aa.mesh.clone(), Content::Path(res.path_a.clone())))?;
            o.artifact("path_b.bin", &Artifact::new(aa.mesh.clone(), Content::Path(res.path_b.clone())))?;
            serde_json::json!({ "alpha": res.alpha, "J_a": res.j_a, "J_b": res.j_b, "gap": res.gap })
        }
        Task::Simulate { initial, guess, perturbation, t_end, dt_max, record_every } => {
            let (vw0, p0, mesh) = match initial {
                Some(r) => {
                    let a = r.load()?;
                    match a.content {
                        Content::PrivateState(s) => (s.vw, s.params, a.mesh),
                        Content::Trajectory(t) => (t.last().to_vec(), par, a.mesh),
                        other => return Err(Error::InvalidArgument(format!("cannot simulate from a {} artifact", other.kind()))),
                    }
                }
                None => (flat_private(guess)?.vw, par, mesh_spec.clone()),
            };
            let m = mesh.build()?;
            let sim_ops = Operators::assemble(&m)?;
            let n = m.n_nodes();
            let half = m.xs().iter().map(|x| x.abs()).fold(0.0, f64::max);
            let xs = m.xs();
            let vw: Vec<f64> = vw0
                .iter()
                .enumerate()
                .map(|(i, &x)| if i < n { x * (1.0 + perturbation * (std::f64::consts::PI * xs[i] / half).cos()) } else { x })
                .collect();
            let d = StepOptions::default();
            let sopts = StepOptions { dt_max: dt_max.unwrap_or(d.dt_max), record_every: record_every.unwrap_or(d.record_every), ..d };
            let traj = integrate_private(&vw, *t_end, &p0, &sim_ops, &sopts)?;
            o.write("trajectory.csv", &traj.to_csv(&sim_ops)?)?;
            o.artifact("trajectory.bin", &Artifact::new(mesh.clone(), Content::Trajectory(traj.clone())))?;
            let last = traj.last().to_vec();
            if let Ok(s) = solve_private(&p0, &last, &sim_ops, &nopts) {
                o.write("final_state.csv", &private_csv(&s))?;
            }
            serde_json::json!({ "t_end": t_end, "final_avg_profit": traj.avg_profit.last() })
        }
    };

    let manifest = Manifest {
        program: "vegoc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task: task.name().into(),
        params: par,
        mesh: mesh_spec.clone(),
        scenario: scenario.embedded()?,
        files: o.files.clone(),
        summary,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunReport { dir, manifest })
}

pub use serde_json::Value as JsonValue;

/// Pretty JSON with floating point values rounded to 6 significant digits.
pub fn human_summary(v: &JsonValue) -> String {
    fn round(v: &JsonValue) -> JsonValue {
        match v {
            JsonValue::Number(x) if x.is_f64() => {
                let r: f64 = format!("{:.5e}", x.as_f64().unwrap()).parse().unwrap();
                serde_json::Number::from_f64(r).map(JsonValue::Number).unwrap_or(JsonValue::Null)
            }
            JsonValue::Array(a) => JsonValue::Array(a.iter().map(round).collect()),
            JsonValue::Object(m) => JsonValue::Object(m.iter().map(|(k, x)| (k.clone(), round(x))).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string_pretty(&round(v)).unwrap()
}

/// Loads a scenario or a manifest from disk and runs it.
pub fn run_file(path: &Path, out: Option<&Path>) -> Result<RunReport> {
    run(&Scenario::load(path)?, out)
}

/// Kinds accepted by [`emit_plotdata`].
pub const PLOT_KINDS: [&str; 3] = ["bifurcation", "path", "snapshot"];

/// Writes whitespace-separated column files and a gnuplot stub for `artifacts` into `dir`.
///
/// `bifurcation`: per branch `(param, ⟨v⟩)` and `(param, J)`; `path`: `(t, x, v)` and
/// `(t, x, E)` triples; `snapshot`: `(x, [y,] v)` and `(x, [y,] E)` of a steady state.
pub fn emit_plotdata(artifacts: &[Artifact], kind: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    if !PLOT_KINDS.contains(&kind) {
        return Err(Error::InvalidArgument(format!("unknown plot kind `{kind}` (expected one of {PLOT_KINDS:?})")));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut plots = Vec::new();
    let put = |name: String, text: String, written: &mut Vec<PathBuf>| -> Result<()> {
        let p = dir.join(&name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    for (k, a) in artifacts.iter().enumerate() {
        let mesh = a.mesh.build()?;
        let coords = |i: usize| mesh.node(i).iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ");
        match (kind, &a.content) {
            ("bifurcation", Content::Branch(b)) => {
                let col = |f: &dyn Fn(&crate::continuation::BranchEntry) -> f64| -> String {
                    b.points.iter().map(|p| format!("{:.17e} {:.17e}\n", p.param, f(p))).collect()
                };
                put(format!("{}_v.dat", b.name), col(&|p| p.averages[0]), &mut written)?;
                put(format!("{}_J.dat", b.name), col(&|p| p.profit), &mut written)?;
                plots.push(format!("'{}_J.dat' using 1:2 with lines title '{}'", b.name, b.name));
            }
            ("path", Content::Path(p)) => {
                let n = mesh.n_nodes();
                let mut v = String::new();
                let mut e = String::new();
                for (j, (u, ef)) in p.states.iter().zip(&p.effort).enumerate() {
                    for i in 0..n {
                        v.push_str(&format!("{:.17e} {} {:.17e}\n", p.mesh.times[j], coords(i), u[i]));
                        e.push_str(&format!("{:.17e} {} {:.17e}\n", p.mesh.times[j], coords(i), ef[i]));
                    }
                    v.push('\n');
                    e.push('\n');
                }
                put(format!("path{k}_v.dat"), v, &mut written)?;
                put(format!("path{k}_E.dat"), e, &mut written)?;
                plots.push(format!("'path{k}_E.dat' using 1:2:3 with pm3d title 'E'"));
            }
            ("snapshot", c @ (Content::Css(_) | Content::PrivateState(_) | Content::Path(_))) => {
                let (v, e): (Vec<f64>, Vec<f64>) = match c {
                    Content::PrivateState(s) => {
                        let n = mesh.n_nodes();
                        let g = s.params.private_gamma();
                        (s.vw[..n].to_vec(), s.vw[..n].iter().map(|x| g * x).collect())
                    }
                    _ => {
                        let css = a.css()?;
                        (css.components()[0].to_vec(), css.effort()?)
                    }
                };
                let col = |f: &[f64]| -> String { (0..f.len()).map(|i| format!("{} {:.17e}\n", coords(i), f[i])).collect() };
                put(format!("snapshot{k}_v.dat"), col(&v), &mut written)?;
                put(format!("snapshot{k}_E.dat"), col(&e), &mut written)?;
                let using = if mesh.dim() == 1 { "1:2 with lines" } else { "1:2:3 with points palette" };
                plots.push(format!("'snapshot{k}_v.dat' using {using} title 'v'"));
            }
            (_, other) => {
                return Err(Error::InvalidArgument(format!("plot kind `{kind}` does not apply to a {} artifact", other.kind())))
            }
        }
    }
    let verb = if kind == "path" { "splot" } else if kind == "snapshot" && artifacts.iter().any(|a| !matches!(a.mesh, MeshSpec::Interval { .. })) { "splot" } else { "plot" };
    let script = format!("# gnuplot\nset key outside\n{verb} {}\n", plots.join(", \\\n    "));
    put("plot.gp".into(), script, &mut written)?;
    Ok(written)
}

/// `max |E(v, τ = λ) - E|` along a path, with `E(v, τ)` the privately optimal effort under tax `τ`.
pub fn tax_identity_residual(path: &CanonicalPath) -> Result<f64> {
    let n = path.target.n_nodes();
    let mut worst: f64 = 0.0;
    for (u, e) in path.states.iter().zip(&path.effort) {
        let taxed = crate::model::taxed_private_effort(&u[..n], &crate::model::tax_field(u), path.params())?;
        worst = taxed.iter().zip(e).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "model = \"canonical\"\n[params]\nR = 28\nalpha = oops\n";
        match Scenario::parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match Scenario::parse("{\n \"model\": \"canonical\",\n \"params\": {\"R\": }\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Scenario::parse("[mesh]\nelements = 10\ncolour = 3\n"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn empty_task_fails_validation_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::parse("[params]\nR = 28\n").unwrap();
        let out = dir.path().join("run");
        assert!(matches!(run(&s, Some(&out)), Err(Error::InvalidArgument(_))));
        assert!(!out.exists());
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let s = Scenario::parse("[params]\nalpha = 1.5\n[task]\nkind = \"flat-css\"\n").unwrap();
        let e = s.validate().unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let s = Scenario::parse("[params]\nbogus = 1\n[task]\nkind = \"flat-css\"\n").unwrap();
        assert_eq!(exit_code(&s.validate().unwrap_err()), 2);
    }

    #[test]
    fn missing_input_artifact_is_reported() {
        let s = Scenario::parse("[task]\nkind = \"spectrum\"\nstate = \"/nonexistent/css.bin\"\n").unwrap();
        assert!(matches!(s.validate(), Err(Error::InvalidArgument(m)) if m.contains("does not exist")));
    }

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(exit_code(&Error::PathNonexistence { sigma: 0.5 }), 5);
        assert_eq!(exit_code(&Error::DefectiveTarget { defect: 2 }), 4);
        assert_eq!(exit_code(&Error::NonConvergence { iterations: 3, residual: 1.0 }), 3);
        assert_eq!(exit_code(&Error::Parse { line: 1, msg: String::new() }), 2);
    }

    #[test]
    fn mesh_spec_strings() {
        assert_eq!(MeshSpec::parse("interval:5:40").unwrap(), MeshSpec::Interval { half_length: 5.0, elements: 40 });
        assert_eq!(MeshSpec::parse("rectangle:5:8:6").unwrap(), MeshSpec::Rectangle { half_length: 5.0, nx: 8, ny: 6 });
        let m = MeshSpec::Rectangle { half_length: 5.0, nx: 4, ny: 3 }.build().unwrap();
        assert_eq!(MeshSpec::of(&m), MeshSpec::Rectangle { half_length: 5.0, nx: 4, ny: 3 });
    }

    #[test]
    fn human_summary_rounds() {
        let v = serde_json::json!({ "J": 132.48912345678, "n": 3, "list": [0.1234567891] });
        let s = human_summary(&v);
        assert!(s.contains("132.489") && !s.contains("132.4891"));
        assert!(s.contains("0.123457") && s.contains("\"n\": 3"));
    }

    #[test]
    fn unknown_plot_kind() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plotdata(&[], "movie", dir.path()), Err(Error::InvalidArgument(_))));
    }
}
