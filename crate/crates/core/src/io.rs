//! Run configuration, expert input files, and run-directory artifacts.
//!
//! Floats in CSV output use `{:.16e}`, which is 17 significant digits and
//! round-trips any `f64` exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{DivergenceError, ExpertDensity, FDivKind};
use crate::gradcheck::GradcheckRecord;
use crate::mdp::{FiniteMdp, MdpError, Trajectory};
use crate::reward::RewardModel;
use crate::scenarios::{
    AnalyticDensity, GridConfig, GtRewardSpec, HardTaskSpec, PriorHeatmap, RewardSpec,
    TargetDynamics,
};
use crate::trainer::{IterationMetrics, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ROOT_ENV: &str = "FIRL_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Top-level run description. The top-level `seed` is mandatory and
/// overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    DensityMatching {
        grid: GridConfig,
        expert: ExpertSource,
    },
    Irl {
        grid: GridConfig,
        gt_reward: GtRewardSpec,
        n_trajectories: usize,
        #[serde(default = "default_expert_alpha")]
        expert_alpha: f64,
        /// States at or below this quantile of expert visitation are left
        /// out of the recovery fit.
        #[serde(default = "default_support_quantile")]
        support_quantile: f64,
    },
    PriorDownstream {
        #[serde(default)]
        task: HardTaskSpec,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_alphas")]
        alphas: Vec<f64>,
    },
    /// Trains against the gt policy's exact marginal on the source grid,
    /// then solves on the target grid.
    Transfer {
        grid: GridConfig,
        gt_reward: GtRewardSpec,
        target: TargetDynamics,
    },
}

fn default_expert_alpha() -> f64 {
    1.0
}

fn default_support_quantile() -> f64 {
    0.1
}

pub fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 1.0, 3.0]
}

pub fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.3, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpertSource {
    Analytic(AnalyticDensity),
    /// CSV with header `state,value`; absent states get zero mass.
    DensityCsv {
        path: PathBuf,
    },
    /// One state-index sequence per line, initial state first.
    Trajectories {
        path: PathBuf,
    },
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, IoError> {
        serde_json::from_str(text).map_err(|e| parse_err(origin, e))
    }

    /// Reads, parses and validates a config. Relative expert paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let ScenarioConfig::DensityMatching { expert, .. } = &mut self.scenario {
            match expert {
                ExpertSource::DensityCsv { path } | ExpertSource::Trajectories { path }
                    if path.is_relative() =>
                {
                    *path = base.join(&*path);
                }
                _ => {}
            }
        }
    }

    /// Copies the top-level seed into the training config.
    pub fn sync_seed(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IoError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let name_ok = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            && !self.name.starts_with('.');
        if !name_ok {
            return Err(IoError::Invalid(format!(
                "name {:?} must be non-empty and use only [A-Za-z0-9_.-]",
                self.name
            )));
        }
        self.train
            .validate()
            .map_err(|e| IoError::Invalid(e.to_string()))?;
        match &self.scenario {
            ScenarioConfig::Irl {
                n_trajectories,
                expert_alpha,
                support_quantile,
                ..
            } => {
                if *n_trajectories == 0 {
                    return Err(IoError::Invalid("n_trajectories must be positive".into()));
                }
                if ![1, 4, 16].contains(n_trajectories) {
                    eprintln!("warning: n_trajectories = {n_trajectories} is outside the studied set {{1, 4, 16}}");
                }
                if !(*expert_alpha > 0.0) {
                    return Err(IoError::Invalid("expert_alpha must be positive".into()));
                }
                if !(0.0..1.0).contains(support_quantile) {
                    return Err(IoError::Invalid(
                        "support_quantile must lie in [0, 1)".into(),
                    ));
                }
            }
            ScenarioConfig::PriorDownstream {
                lambdas, alphas, ..
            } => {
                if lambdas.is_empty() || alphas.is_empty() {
                    return Err(IoError::Invalid(
                        "lambda and alpha grids must be non-empty".into(),
                    ));
                }
                if alphas.iter().any(|a| !(*a > 0.0)) {
                    return Err(IoError::Invalid("alphas must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads a `state,value` table. RKL training may keep it unnormalized;
/// every other divergence normalizes it.
pub fn load_density_csv(
    path: &Path,
    n_states: usize,
    kind: FDivKind,
) -> Result<ExpertDensity, IoError> {
    #[derive(Deserialize)]
    struct Row {
        state: usize,
        value: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let mut values = vec![0.0; n_states];
    let mut seen = vec![false; n_states];
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| parse_err(path, e))?;
        if row.state >= n_states {
            return Err(parse_err(
                path,
                format!("state {} out of range for {n_states} states", row.state),
            ));
        }
        if std::mem::replace(&mut seen[row.state], true) {
            return Err(parse_err(path, format!("state {} listed twice", row.state)));
        }
        values[row.state] = row.value;
    }
    Ok(match kind {
        FDivKind::Rkl => ExpertDensity::unnormalized(values)?,
        _ => ExpertDensity::from_weights(values)?,
    })
}

/// Parses one trajectory per non-empty line; separators may be commas or
/// whitespace and `#` starts a comment line.
pub fn load_trajectories(path: &Path, mdp: &FiniteMdp) -> Result<Vec<Trajectory>, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let states = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(|tok| tok.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        let traj = Trajectory::new(states);
        traj.validate(mdp)
            .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(traj);
    }
    if out.is_empty() {
        return Err(parse_err(path, "no trajectories"));
    }
    Ok(out)
}

pub fn trajectories_to_text(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        let line: Vec<String> = t.states.iter().map(usize::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

pub const METRICS_HEADER: &str =
    "iteration,loss,fkl_estimate,rkl_estimate,exact_fkl,exact_rkl,return,grad_norm";

pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.iteration,
            fmt_float(m.loss),
            fmt_opt(m.fkl_estimate),
            fmt_opt(m.rkl_estimate),
            fmt_float(m.exact_fkl),
            fmt_float(m.exact_rkl),
            fmt_opt(m.return_value),
            fmt_float(m.grad_norm),
        ));
    }
    out
}

/// Rows `state,x,y,reward` in state order. Grid MDPs report integer cells,
/// other MDPs their coordinates.
pub fn heatmap_csv(model: &RewardModel, mdp: &FiniteMdp) -> String {
    let rewards = model.rewards();
    let mut out = String::from("state,x,y,reward\n");
    for (s, r) in rewards.iter().enumerate() {
        let (x, y) = match mdp.grid() {
            Some(g) => {
                let (x, y) = g.cell_of(s);
                (x.to_string(), y.to_string())
            }
            None => {
                let c = mdp.coords()[s];
                (fmt_float(c[0]), fmt_float(c[1]))
            }
        };
        out.push_str(&format!("{s},{x},{y},{}\n", fmt_float(*r)));
    }
    out
}

pub fn emit_heatmap(model: &RewardModel, mdp: &FiniteMdp, path: &Path) -> Result<(), IoError> {
    write_atomic(path, heatmap_csv(model, mdp).as_bytes())
}

pub fn gradcheck_csv(records: &[GradcheckRecord]) -> String {
    let mut out =
        String::from("instance,n_states,n_actions,horizon,kind,reward,n_params,analytic_norm,fd_norm,rel_error\n");
    for r in records {
        let reward = match r.reward {
            crate::gradcheck::InstanceReward::Tabular => "tabular",
            crate::gradcheck::InstanceReward::Mlp => "mlp",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.instance,
            r.n_states,
            r.n_actions,
            r.horizon,
            r.kind,
            reward,
            r.n_params,
            fmt_float(r.analytic_norm),
            fmt_float(r.fd_norm),
            fmt_float(r.rel_error),
        ));
    }
    out
}

pub fn prior_heatmap_csv(heatmap: &PriorHeatmap) -> String {
    let control = heatmap.lambdas.iter().position(|&l| l == 0.0);
    let mut out = String::from("alpha,lambda,task_return,gain_over_control\n");
    for (i, row) in heatmap.returns.iter().enumerate() {
        for (j, &value) in row.iter().enumerate() {
            let gain = control.map(|c| value - row[c]);
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_float(heatmap.alphas[i]),
                fmt_float(heatmap.lambdas[j]),
                fmt_float(value),
                fmt_opt(gain),
            ));
        }
    }
    out
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(file_err(&tmp))?;
        f.write_all(bytes).map_err(file_err(&tmp))?;
        f.sync_all().map_err(file_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(file_err(path))
}

/// `--out` wins, then `$FIRL_OUT_ROOT/<name>/<timestamp>`, then
/// `runs/<name>/<timestamp>`.
pub fn resolve_out_dir(explicit: Option<&Path>, name: &str, now: DateTime<Utc>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    let base = root
        .join(name)
        .join(now.format("%Y%m%dT%H%M%S%.3fZ").to_string());
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub code_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub wall_clock_secs: f64,
    /// Present for config-driven commands; re-running it reproduces the run.
    pub config: Option<RunConfig>,
    pub files: Vec<FileEntry>,
}

/// One output directory with an inventory of what was written into it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: Vec<FileEntry>,
    started_at: DateTime<Utc>,
}

impl RunDir {
    pub fn create(root: PathBuf, started_at: DateTime<Utc>) -> Result<Self, IoError> {
        fs::create_dir_all(&root).map_err(file_err(&root))?;
        Ok(Self {
            root,
            files: Vec::new(),
            started_at,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, IoError> {
        let path = self.root.join(name);
        write_atomic(&path, bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, IoError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(
        self,
        command: &str,
        seed: u64,
        config: Option<&RunConfig>,
    ) -> Result<RunManifest, IoError> {
        let finished_at = Utc::now();
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at,
            wall_clock_secs: (finished_at - self.started_at)
                .num_microseconds()
                .unwrap_or(0) as f64
                * 1e-6,
            config: config.cloned(),
            files: self.files.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

/// Learned reward as written to `reward.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardArtifact {
    pub model: RewardModel,
    pub rewards: Vec<f64>,
}

pub fn read_reward(path: &Path) -> Result<RewardModel, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let artifact: RewardArtifact = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    Ok(artifact.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_gridworld;

    fn sample_config() -> &'static str {
        r#"{
            "schema_version": 1,
            "name": "gauss",
            "seed": 3,
            "scenario": {
                "type": "density_matching",
                "grid": {"width": 5, "height": 5, "start": [2, 2], "horizon": 10},
                "expert": {"analytic": {"type": "gaussian", "mean": [3.5, 3.5], "sigma": 1.0}}
            },
            "train": {"iterations": 5, "reward_lr": 0.1}
        }"#
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::from_json(sample_config(), Path::new("x.json")).unwrap();
        cfg.validate().unwrap();
        let again = RunConfig::from_json(&cfg.to_json_pretty(), Path::new("y.json")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = sample_config().replace("\"seed\": 3,", "");
        let err = RunConfig::from_json(&text, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = sample_config().replace("\"seed\": 3,", "\"seed\": 3, \"bogus\": 1,");
        assert!(RunConfig::from_json(&text, Path::new("x.json")).is_err());
        let text = sample_config().replace("\"reward_lr\": 0.1", "\"reward_lr\": 0.1, \"lr\": 2");
        assert!(RunConfig::from_json(&text, Path::new("x.json")).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = sample_config().replace("\"schema_version\": 1", "\"schema_version\": 9");
        let cfg = RunConfig::from_json(&text, Path::new("x.json")).unwrap();
        assert!(matches!(cfg.validate(), Err(IoError::Invalid(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn relative_expert_paths_follow_the_config() {
        let text = sample_config().replace(
            r#"{"analytic": {"type": "gaussian", "mean": [3.5, 3.5], "sigma": 1.0}}"#,
            r#"{"density_csv": {"path": "rho.csv"}}"#,
        );
        let mut cfg = RunConfig::from_json(&text, Path::new("x.json")).unwrap();
        cfg.resolve_paths(Path::new("/data/cfgs"));
        let ScenarioConfig::DensityMatching { expert, .. } = &cfg.scenario else {
            unreachable!()
        };
        assert_eq!(
            expert,
            &ExpertSource::DensityCsv {
                path: PathBuf::from("/data/cfgs/rho.csv")
            }
        );
    }

    #[test]
    fn density_csv_loads_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.csv");
        fs::write(&path, "state,value\n0,1\n2,3\n").unwrap();
        let d = load_density_csv(&path, 4, FDivKind::Fkl).unwrap();
        assert_eq!(d.values(), &[0.25, 0.0, 0.75, 0.0]);
        let raw = load_density_csv(&path, 4, FDivKind::Rkl).unwrap();
        assert_eq!(raw.values(), &[1.0, 0.0, 3.0, 0.0]);
        fs::write(&path, "state,value\n0,1\n0,3\n").unwrap();
        assert!(load_density_csv(&path, 4, FDivKind::Fkl).is_err());
        fs::write(&path, "state,value\n7,1\n").unwrap();
        assert!(load_density_csv(&path, 4, FDivKind::Fkl).is_err());
    }

    #[test]
    fn trajectory_file_round_trips() {
        let mdp = build_gridworld(2, 2, 0.0, 0, 2).unwrap();
        let trajs = vec![
            Trajectory::new(vec![0, 1, 3]),
            Trajectory::new(vec![0, 0, 2]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        fs::write(&path, format!("# demo\n{}\n", trajectories_to_text(&trajs))).unwrap();
        assert_eq!(load_trajectories(&path, &mdp).unwrap(), trajs);
        fs::write(&path, "0 1 3 2\n").unwrap();
        assert!(load_trajectories(&path, &mdp).is_err());
    }

    #[test]
    fn heatmap_rows_and_determinism() {
        let mdp = build_gridworld(2, 2, 0.0, 0, 3).unwrap();
        let model = RewardModel::tabular_from(vec![0.5; 4]).unwrap();
        let text = heatmap_csv(&model, &mdp);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "state,x,y,reward");
        assert_eq!(lines[4], format!("3,1,1,{}", fmt_float(0.5)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        emit_heatmap(&model, &mdp, &path).unwrap();
        let first = fs::read(&path).unwrap();
        emit_heatmap(&model, &mdp, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [
            0.1,
            1.0 / 3.0,
            6.02214076e23,
            -2.2250738585072014e-308,
            1e-300,
        ] {
            assert_eq!(fmt_float(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn metrics_leave_absent_fields_blank() {
        let m = IterationMetrics {
            iteration: 0,
            loss: 1.0,
            exact_fkl: 1.0,
            exact_rkl: 2.0,
            fkl_estimate: None,
            rkl_estimate: Some(0.5),
            grad_norm: 0.25,
            return_value: None,
        };
        let text = metrics_csv(&[m]);
        let row = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[2], "");
        assert_eq!(fields[6], "");
        assert_eq!(fields[3], fmt_float(0.5));
    }

    #[test]
    fn out_dir_precedence() {
        let now = Utc::now();
        assert_eq!(
            resolve_out_dir(Some(Path::new("/tmp/x")), "n", now),
            PathBuf::from("/tmp/x")
        );
        let auto = resolve_out_dir(None, "n", now);
        assert!(auto.to_string_lossy().contains("/n/"));
    }

    #[test]
    fn manifest_inventory_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path().join("r"), Utc::now()).unwrap();
        run.write("a.csv", b"x\n1\n").unwrap();
        run.write("a.csv", b"x\n2\n").unwrap();
        let manifest = run.finish("train", 4, None).unwrap();
        assert_eq!(manifest.files.len(), 1);
        let back = read_manifest(&dir.path().join("r").join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("r"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
