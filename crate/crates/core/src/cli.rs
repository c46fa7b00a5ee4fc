//! Batch entry point: strict TOML configuration, execution of a single
//! solve or a convergence study, CSV outputs, and a replayable JSON
//! manifest.
//!
//! Configuration parsing is strict: unknown tables or keys abort before any
//! computation, since a silently ignored typo is the usual way a numerical
//! study goes wrong. The manifest embeds the fully resolved configuration,
//! so `run` accepts a manifest in place of a config and reproduces the
//! original outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backward::{
    check_admissibility, point_estimates, solve, BackwardConfig, CondExpMode, PicardConfig,
};
use crate::error::{Error, Result};
use crate::forward::{euler_x0, simulate_increments, X1Family};
use crate::harness::{convergence_study, errors_csv, slopes_csv, StudyConfig};
use crate::model::{builtin_model, ModelSpec};
use crate::timegrid::TimeGrid;

/// Raw TOML schema. Every table rejects unknown keys except the model table,
/// whose free parameters are validated against the registry schema instead.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: String,
    model: RawModel,
    grid: Option<RawGrid>,
    study: Option<RawStudy>,
    mc: Option<RawMc>,
    regress: Option<RawRegress>,
    backward: Option<RawBackward>,
    oracle: Option<RawOracle>,
    output_dir: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawModel {
    name: String,
    #[serde(flatten)]
    params: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    n: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    n_list: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    paths: Option<usize>,
    seed: Option<u64>,
    refine_factor: Option<usize>,
    family_budget: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegress {
    degree: Option<usize>,
    ridge: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackward {
    mode: Option<String>,
    picard_tol: Option<f64>,
    picard_max: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOracle {
    gh_nodes: Option<usize>,
    mesh_nodes: Option<usize>,
}

/// Execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Solve,
    Study,
}

/// Fully resolved configuration: every knob explicit, serializable into the
/// manifest and replayable from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub model_name: String,
    pub model_params: BTreeMap<String, f64>,
    pub grid_n: usize,
    pub study_n_list: Vec<usize>,
    pub mc_paths: usize,
    pub mc_seed: u64,
    pub mc_refine_factor: usize,
    pub mc_family_budget: usize,
    pub regress_degree: usize,
    pub regress_ridge: f64,
    pub backward_mode: String,
    pub backward_picard_tol: f64,
    pub backward_picard_max: usize,
    pub oracle_gh_nodes: usize,
    pub oracle_mesh_nodes: usize,
    pub output_dir: String,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| Error::config("cli.run", format!("config parse failed: {e}")))?;
        let mode = match raw.mode.as_str() {
            "solve" => RunMode::Solve,
            "study" => RunMode::Study,
            other => {
                return Err(Error::config(
                    "cli.run",
                    format!("mode must be `solve` or `study`, got `{other}`"),
                ))
            }
        };
        let backward_mode = raw
            .backward
            .as_ref()
            .and_then(|b| b.mode.clone())
            .unwrap_or_else(|| "lsmc".to_string());
        if backward_mode != "lsmc" && backward_mode != "quadrature" {
            return Err(Error::config(
                "cli.run",
                format!("backward.mode must be `lsmc` or `quadrature`, got `{backward_mode}`"),
            ));
        }
        let cfg = RunConfig {
            mode,
            model_name: raw.model.name.clone(),
            model_params: raw.model.params.clone(),
            grid_n: raw.grid.as_ref().and_then(|g| g.n).unwrap_or(64),
            study_n_list: raw
                .study
                .as_ref()
                .and_then(|s| s.n_list.clone())
                .unwrap_or_else(|| vec![8, 16, 32, 64, 128]),
            mc_paths: raw.mc.as_ref().and_then(|m| m.paths).unwrap_or(10_000),
            mc_seed: raw.mc.as_ref().and_then(|m| m.seed).unwrap_or(42),
            mc_refine_factor: raw.mc.as_ref().and_then(|m| m.refine_factor).unwrap_or(16),
            mc_family_budget: raw.mc.as_ref().and_then(|m| m.family_budget).unwrap_or(1 << 28),
            regress_degree: raw.regress.as_ref().and_then(|r| r.degree).unwrap_or(3),
            regress_ridge: raw.regress.as_ref().and_then(|r| r.ridge).unwrap_or(1e-10),
            backward_mode,
            backward_picard_tol: raw.backward.as_ref().and_then(|b| b.picard_tol).unwrap_or(1e-12),
            backward_picard_max: raw.backward.as_ref().and_then(|b| b.picard_max).unwrap_or(50),
            oracle_gh_nodes: raw.oracle.as_ref().and_then(|o| o.gh_nodes).unwrap_or(16),
            oracle_mesh_nodes: raw.oracle.as_ref().and_then(|o| o.mesh_nodes).unwrap_or(401),
            output_dir: raw.output_dir.unwrap_or_else(|| "out".to_string()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.mc_paths == 0 {
            return Err(Error::config("cli.run", "mc.paths must be positive"));
        }
        if self.regress_ridge < 0.0 {
            return Err(Error::config("cli.run", "regress.ridge must be nonnegative"));
        }
        if self.backward_picard_tol <= 0.0 || self.backward_picard_max == 0 {
            return Err(Error::config("cli.run", "picard settings must be positive"));
        }
        if self.mode == RunMode::Study {
            if self.study_n_list.len() < 3 {
                return Err(Error::config(
                    "cli.run",
                    "study.n_list needs at least 3 ascending grid sizes",
                ));
            }
            if self.study_n_list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("cli.run", "study.n_list must be strictly ascending"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec> {
        builtin_model(&self.model_name, &self.model_params)
    }

    pub fn backward_config(&self) -> BackwardConfig {
        BackwardConfig {
            mode: if self.backward_mode == "quadrature" {
                CondExpMode::Quadrature
            } else {
                CondExpMode::Lsmc
            },
            degree: self.regress_degree,
            ridge: self.regress_ridge,
            picard: PicardConfig { tol: self.backward_picard_tol, max_iter: self.backward_picard_max },
            gh_nodes: self.oracle_gh_nodes,
            mesh_nodes: self.oracle_mesh_nodes,
        }
    }
}

/// In-memory run outputs keyed by file name; writing is the caller's choice
/// so tests can compare byte content directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutputs {
    pub files: Vec<(String, String)>,
}

const MANIFEST_VERSION: &str = env!("CARGO_PKG_VERSION");

fn manifest_json(cfg: &RunConfig) -> Result<String> {
    let manifest = serde_json::json!({
        "artifact_version": MANIFEST_VERSION,
        "config": cfg,
    });
    serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config("cli.run", format!("manifest serialization failed: {e}")))
}

/// Parse a manifest produced by a previous run back into its configuration.
pub fn config_from_manifest(text: &str) -> Result<RunConfig> {
    #[derive(Deserialize)]
    struct Manifest {
        #[allow(dead_code)]
        artifact_version: String,
        config: RunConfig,
    }
    let m: Manifest = serde_json::from_str(text)
        .map_err(|e| Error::config("cli.run", format!("manifest parse failed: {e}")))?;
    m.config.validate()?;
    Ok(m.config)
}

/// Execute a resolved configuration and return the output files.
pub fn execute(cfg: &RunConfig) -> Result<RunOutputs> {
    let model = cfg.model()?;
    let bcfg = cfg.backward_config();
    let mut files = Vec::new();
    match cfg.mode {
        RunMode::Solve => {
            let grid = TimeGrid::uniform(cfg.grid_n, model.horizon)?;
            check_admissibility(&model, grid.mesh())?;
            let mut bundle = simulate_increments(&model.density, &grid, cfg.mc_paths, cfg.mc_seed)?;
            euler_x0(&model, &mut bundle)?;
            let family = X1Family::on_demand();
            let sol = solve(&model, &bundle, &family, &bcfg)?;
            let est = point_estimates(&model, &bundle, &sol)?;
            let mut csv = String::from("model,mode,n,y0,se_y0,z0,se_z0,u0,se_u0\n");
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                model.name,
                bcfg.mode.label(),
                cfg.grid_n,
                est.y0,
                est.se_y0,
                est.z0,
                est.se_z0,
                est.u0,
                est.se_u0
            ));
            files.push(("solution.csv".to_string(), csv));
        }
        RunMode::Study => {
            for &n in &cfg.study_n_list {
                let grid = TimeGrid::uniform(n, model.horizon)?;
                check_admissibility(&model, grid.mesh())?;
            }
            let study_cfg = StudyConfig { refine_factor: cfg.mc_refine_factor, backward: bcfg };
            let report =
                convergence_study(&model, &cfg.study_n_list, cfg.mc_paths, cfg.mc_seed, &study_cfg)?;
            files.push(("errors.csv".to_string(), errors_csv(&report)));
            files.push(("slopes.csv".to_string(), slopes_csv(&report)));
        }
    }
    files.push(("manifest.json".to_string(), manifest_json(cfg)?));
    Ok(RunOutputs { files })
}

/// Load a configuration from a `.toml` config or a `.json` manifest.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("cli.run", format!("cannot read {}: {e}", path.display())))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        config_from_manifest(&text)
    } else {
        RunConfig::from_toml_str(&text)
    }
}

/// Run a config file end to end, writing outputs under its output directory.
pub fn run(path: &Path) -> Result<Vec<String>> {
    let cfg = load_config(path)?;
    let outputs = execute(&cfg)?;
    let dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, content) in &outputs.files {
        let target = dir.join(name);
        std::fs::write(&target, content)?;
        written.push(target.display().to_string());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STUDY_TOML: &str = r#"
mode = "study"
output_dir = "out"

[model]
name = "LIN"
beta0 = 0.3

[study]
n_list = [4, 8, 16]

[mc]
paths = 500
seed = 7
refine_factor = 4

[backward]
mode = "quadrature"
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let cfg = RunConfig::from_toml_str(STUDY_TOML).unwrap();
        assert_eq!(cfg.mode, RunMode::Study);
        assert_eq!(cfg.mc_paths, 500);
        assert_eq!(cfg.regress_degree, 3);
        assert_eq!(cfg.oracle_gh_nodes, 16);
        assert_eq!(cfg.model_params.get("beta0"), Some(&0.3));
    }

    #[test]
    fn unknown_top_level_key_is_fatal() {
        let bad = STUDY_TOML.replace("[model]", "[modle]");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_nested_key_is_fatal() {
        let bad = format!("{STUDY_TOML}\n[grid]\nm = 3\n");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn unknown_model_parameter_is_fatal() {
        let bad = STUDY_TOML.replace("beta0 = 0.3", "beta9 = 0.3");
        let cfg = RunConfig::from_toml_str(&bad).unwrap();
        assert!(cfg.model().is_err());
    }

    #[test]
    fn execute_study_row_counts() {
        let cfg = RunConfig::from_toml_str(STUDY_TOML).unwrap();
        let out = execute(&cfg).unwrap();
        let errors = &out.files.iter().find(|(n, _)| n == "errors.csv").unwrap().1;
        assert_eq!(errors.lines().count(), 1 + 3);
        let slopes = &out.files.iter().find(|(n, _)| n == "slopes.csv").unwrap().1;
        assert_eq!(slopes.lines().count(), 1 + 4);
    }

    #[test]
    fn manifest_round_trip_reproduces_outputs() {
        let cfg = RunConfig::from_toml_str(STUDY_TOML).unwrap();
        let out1 = execute(&cfg).unwrap();
        let manifest = &out1.files.iter().find(|(n, _)| n == "manifest.json").unwrap().1;
        let cfg2 = config_from_manifest(manifest).unwrap();
        let out2 = execute(&cfg2).unwrap();
        // wall_ms is timing; everything else must agree byte for byte
        for ((n1, c1), (n2, c2)) in out1.files.iter().zip(&out2.files) {
            assert_eq!(n1, n2);
            if n1 == "errors.csv" {
                let strip = |s: &str| {
                    s.lines()
                        .map(|l| l.rsplit_once(',').map(|(h, _)| h.to_string()).unwrap_or_default())
                        .collect::<Vec<_>>()
                        .join("\n")
                };
                assert_eq!(strip(c1), strip(c2));
            } else {
                assert_eq!(c1, c2);
            }
        }
    }

    #[test]
    fn admissibility_violation_maps_to_exit_3() {
        let toml = r#"
mode = "solve"

[model]
name = "TRIG"

[grid]
n = 2
"#;
        let cfg = RunConfig::from_toml_str(toml).unwrap();
        let err = execute(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("grid too coarse for implicit step"));
    }
}
