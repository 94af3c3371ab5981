//! Pipeline configuration: one TOML file drives every stage. The
//! configuration hash (SHA-256 over the canonical JSON form of the parsed
//! config, so formatting and comments do not matter) is embedded in every
//! artifact header, and stages refuse inputs built from a different
//! configuration.

use crate::error::{Error, Result};
use crate::grid::{Grid, HyperRect};
use crate::models::ModelSpec;
use crate::nn::{Activation, MlpConfig};
use crate::synthesis::ReachAvoidSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub grids: GridSection,
    pub spec: SpecSection,
    #[serde(default)]
    pub compress: CompressSection,
    #[serde(default)]
    pub synthesize: SynthesizeSection,
    #[serde(default)]
    pub deploy: DeploySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub nets: NetsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Target cell widths; snapped so an integer number of cells tiles each
    /// box exactly.
    pub eta_x: Vec<f64>,
    pub eta_u: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub goal: Vec<RectSection>,
    #[serde(default)]
    pub avoid: Vec<RectSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routes {
    Regression,
    Classification,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    pub routes: Routes,
    /// Abort when the classification exception rate exceeds this fraction.
    pub abort_fraction: f64,
}

impl Default for CompressSection {
    fn default() -> Self {
        CompressSection { routes: Routes::Both, abort_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Lookup,
    Regression,
    Classification,
}

impl SourceKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SourceKind::Lookup => "lookup",
            SourceKind::Regression => "regression",
            SourceKind::Classification => "classification",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeSection {
    /// Which representation drives the on-the-fly synthesis.
    pub source: SourceKind,
    /// Also run the exact-table baseline for comparison and validation.
    pub baseline: bool,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        SynthesizeSection { source: SourceKind::Classification, baseline: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Baseline,
    Neural,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploySection {
    /// Which synthesized controller gets compressed for deployment.
    pub controller: ControllerKind,
}

impl Default for DeploySection {
    fn default() -> Self {
        DeploySection { controller: ControllerKind::Baseline }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub runs: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { runs: 500, max_steps: 1000, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl NetSection {
    fn to_mlp_config(&self, input: usize, output: usize, seed_offset: u64) -> MlpConfig {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(output);
        MlpConfig {
            layer_sizes: sizes,
            activation: self.activation,
            seed: self.seed.wrapping_add(seed_offset),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsSection {
    pub regression: NetSection,
    pub classification: NetSection,
    pub controller: NetSection,
}

impl Default for NetsSection {
    fn default() -> Self {
        NetsSection {
            regression: NetSection {
                hidden: vec![20, 40, 30],
                activation: Activation::Tanh,
                learning_rate: 1e-3,
                epochs: 200,
                batch_size: 1024,
                seed: 101,
            },
            classification: NetSection {
                hidden: vec![40, 160, 160, 160, 160, 160, 160, 160, 160, 500, 800],
                activation: Activation::Relu,
                learning_rate: 1e-4,
                epochs: 200,
                batch_size: 1024,
                seed: 202,
            },
            controller: NetSection {
                hidden: vec![20, 80, 80, 80, 80, 80, 160],
                activation: Activation::Relu,
                learning_rate: 1e-4,
                epochs: 200,
                batch_size: 1024,
                seed: 303,
            },
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("pipeline config: {e}")))
    }

    /// Loads a config file; relative paths inside it (model file, output
    /// directory) resolve against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, [u8; 32])> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(file) = cfg.model.file.take() {
            cfg.model.file =
                Some(if file.is_relative() { base.join(file) } else { file });
        }
        let hash = cfg.hash();
        Ok((cfg, hash))
    }

    /// SHA-256 of the canonical JSON serialization; whitespace and comments
    /// in the TOML never change it.
    pub fn hash(&self) -> [u8; 32] {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        h.finalize().into()
    }

    pub fn resolve_model(&self) -> Result<ModelSpec> {
        match (&self.model.name, &self.model.file) {
            (Some(name), None) => ModelSpec::builtin(name),
            (None, Some(file)) => {
                let text = std::fs::read_to_string(file)?;
                ModelSpec::from_config_str(&text)
            }
            _ => Err(Error::InvalidConfig(
                "model must specify exactly one of `name` or `file`".into(),
            )),
        }
    }

    pub fn state_grid(&self, model: &ModelSpec) -> Result<Grid> {
        Grid::with_target_eta(
            model.state_box.lo().to_vec(),
            model.state_box.hi().to_vec(),
            self.grids.eta_x.clone(),
        )
    }

    pub fn input_grid(&self, model: &ModelSpec) -> Result<Grid> {
        Grid::with_target_eta(
            model.input_box.lo().to_vec(),
            model.input_box.hi().to_vec(),
            self.grids.eta_u.clone(),
        )
    }

    pub fn reach_avoid(&self, model: &ModelSpec) -> Result<ReachAvoidSpec> {
        let rects = |list: &[RectSection]| -> Result<Vec<HyperRect>> {
            list.iter().map(|r| HyperRect::new(r.lo.clone(), r.hi.clone())).collect()
        };
        let spec = ReachAvoidSpec::new(rects(&self.spec.goal)?, rects(&self.spec.avoid)?)?;
        spec.check_within(&model.state_box)?;
        Ok(spec)
    }

    pub fn regression_net(&self, n: usize, m: usize, forward: bool) -> MlpConfig {
        self.nets
            .regression
            .to_mlp_config(n + m, 2 * n, if forward { 0 } else { 1 })
    }

    pub fn classification_net(&self, n: usize, m: usize, code: usize, forward: bool) -> MlpConfig {
        let _ = n;
        self.nets
            .classification
            .to_mlp_config(n + m, code, if forward { 0 } else { 1 })
    }

    pub fn controller_net(&self, n: usize, num_inputs: usize) -> MlpConfig {
        self.nets.controller.to_mlp_config(n, num_inputs, 0)
    }
}

/// Canonical artifact file names inside the output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub table: PathBuf,
    pub hulls: PathBuf,
    pub ball_fwd: PathBuf,
    pub ball_bwd: PathBuf,
    pub corner_fwd: PathBuf,
    pub corner_bwd: PathBuf,
    pub regression: PathBuf,
    pub classification: PathBuf,
    pub controller_baseline: PathBuf,
    pub controller_neural: PathBuf,
    pub winning_csv: PathBuf,
    pub deploy: PathBuf,
    pub report_csv: PathBuf,
    pub traces_dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: &Path) -> Self {
        ArtifactPaths {
            table: dir.join("table.tf1"),
            hulls: dir.join("hulls.tb1"),
            ball_fwd: dir.join("dataset-ball-forward.ds1"),
            ball_bwd: dir.join("dataset-ball-backward.ds1"),
            corner_fwd: dir.join("dataset-corner-forward.dz1"),
            corner_bwd: dir.join("dataset-corner-backward.dz1"),
            regression: dir.join("repr-regression.rb1"),
            classification: dir.join("repr-classification.rc1"),
            controller_baseline: dir.join("controller-baseline.ct1"),
            controller_neural: dir.join("controller-neural.ct1"),
            winning_csv: dir.join("winning-set.csv"),
            deploy: dir.join("deploy.dc1"),
            report_csv: dir.join("report.csv"),
            traces_dir: dir.join("traces"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "out"

        [model]
        name = "car2d"

        [grids]
        eta_x = [0.1, 0.1]
        eta_u = [0.23, 0.23]

        [spec]
        goal = [{ lo = [3.2, 3.2], hi = [4.8, 4.8] }]
        avoid = [{ lo = [2.0, 2.0], hi = [2.5, 2.5] }]
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.compress.routes, Routes::Both);
        assert_eq!(cfg.simulate.runs, 500);
        assert_eq!(cfg.nets.regression.hidden, vec![20, 40, 30]);
        assert_eq!(cfg.nets.classification.hidden.len(), 11);
        let model = cfg.resolve_model().unwrap();
        let sg = cfg.state_grid(&model).unwrap();
        let ug = cfg.input_grid(&model).unwrap();
        assert_eq!(sg.num_cells(), 2500);
        assert_eq!(ug.num_cells(), 81);
        let net = cfg.regression_net(2, 2, true);
        assert_eq!(net.layer_sizes, vec![4, 20, 40, 30, 4]);
        let bwd = cfg.regression_net(2, 2, false);
        assert_eq!(bwd.seed, net.seed + 1);
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        let spaced = MINIMAL.replace("eta_x = [0.1, 0.1]", "eta_x   =    [0.1,0.1]");
        let b = PipelineConfig::from_toml_str(&spaced).unwrap();
        assert_eq!(a.hash(), b.hash());
        let changed = MINIMAL.replace("eta_x = [0.1, 0.1]", "eta_x = [0.2, 0.2]");
        let c = PipelineConfig::from_toml_str(&changed).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = format!("{MINIMAL}\n[typo_section]\nx = 1\n");
        assert!(PipelineConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn model_section_needs_exactly_one_source() {
        let bad = MINIMAL.replace("name = \"car2d\"", "");
        let cfg = PipelineConfig::from_toml_str(&bad).unwrap();
        assert!(cfg.resolve_model().is_err());
    }
}
