//! Run configuration: one TOML file drives a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, DdnParams, Method, Norm, DEFAULT_LAMBDA};
use crate::camera::{CameraView, ViewpointDistribution, DEFAULT_FOCAL_FACTOR, DEFAULT_ORBIT_RADIUS};
use crate::embedder::{Architecture, SurrogateEmbedder};
use crate::error::{Error, Result};
use crate::eval::{ProtocolSpec, SsimParams};
use crate::renderer::{ParamClass, RenderOptions};
use crate::scene::{load_scene, synth_scene, Layout, RegionSet, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub layout: Layout,
    pub primitives: usize,
    /// Defaults to the global seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Exactly one of `path` and `synth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// Defaults to 1.25·min(width, height).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    pub orbit_radius: f64,
    /// Symmetric pitch/yaw radius of the EOT viewpoint distribution.
    pub range: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            width: 64,
            height: 64,
            focal: None,
            orbit_radius: DEFAULT_ORBIT_RADIUS,
            range: 0.5,
        }
    }
}

impl CameraSpec {
    pub fn base_view(&self) -> Result<CameraView> {
        let focal = self
            .focal
            .unwrap_or(DEFAULT_FOCAL_FACTOR * self.width.min(self.height) as f64);
        CameraView::frontal(self.width, self.height, self.orbit_radius, focal)
    }

    pub fn distribution(&self) -> Result<ViewpointDistribution> {
        self.distribution_with(self.range)
    }

    pub fn distribution_with(&self, range: f64) -> Result<ViewpointDistribution> {
        ViewpointDistribution::symmetric(range, self.base_view()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub architecture: Architecture,
    /// Defaults to the global seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// One masked output per budget.
    pub epsilons: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_alpha: Option<f64>,
    pub t_max: usize,
    pub k_viewpoints: usize,
    pub lambda: f64,
    pub norm: Norm,
    pub method: Method,
    pub param_class: ParamClass,
    /// `all`, letters such as `EFN`, or names such as `eyes,nose`.
    pub region: String,
    pub eval_grid: usize,
    pub ddn: DdnParams,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilons: vec![0.1],
            step_alpha: None,
            t_max: 300,
            k_viewpoints: 5,
            lambda: DEFAULT_LAMBDA,
            norm: Norm::Linf,
            method: Method::Pgd,
            param_class: ParamClass::DcColor,
            region: "all".into(),
            eval_grid: 3,
            ddn: DdnParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub protocol: ProtocolSpec,
    pub ks: Vec<usize>,
    pub grid: [usize; 2],
    /// Pitch/yaw radius of the rotation grid.
    pub grid_range: f64,
    /// Identity whose masked scene gets a rotation-grid report.
    pub grid_identity: usize,
    /// Mask against the first embedder, evaluate with the second.
    pub cross_system: bool,
    pub ssim: SsimParams,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            protocol: ProtocolSpec::default(),
            ks: vec![1, 50],
            grid: [5, 5],
            grid_range: 0.8,
            grid_identity: 0,
            cross_system: false,
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneSource,
    pub camera: CameraSpec,
    pub render: RenderOptions,
    pub embedders: Vec<EmbedderSpec>,
    pub attack: AttackSpec,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            scene: SceneSource {
                path: None,
                synth: Some(SynthSpec {
                    layout: Layout::HeadLike,
                    primitives: 400,
                    seed: None,
                }),
            },
            camera: CameraSpec::default(),
            render: RenderOptions::default(),
            embedders: vec![EmbedderSpec {
                architecture: Architecture::A,
                seed: None,
            }],
            attack: AttackSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative scene paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.scene.path {
            if p.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                cfg.scene.path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, in hex. The output directory
    /// is left out: it never changes a result.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Sha256::digest(canonical.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.scene.path, &self.scene.synth) {
            (Some(p), None) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("scene file {} does not exist", p.display())));
                }
            }
            (None, Some(s)) => {
                if s.primitives == 0 {
                    return Err(Error::Config("scene.synth.primitives must be at least 1".into()));
                }
            }
            _ => return Err(Error::Config("scene needs exactly one of `path` or `synth`".into())),
        }
        self.camera.base_view()?;
        self.render.validate()?;
        if self.embedders.is_empty() || self.embedders.len() > 2 {
            return Err(Error::Config("one or two embedders required".into()));
        }
        if self.eval.cross_system && self.embedders.len() != 2 {
            return Err(Error::Config("cross_system needs two embedders".into()));
        }
        if self.attack.epsilons.is_empty() {
            return Err(Error::Config("attack.epsilons is empty".into()));
        }
        RegionSet::parse(&self.attack.region)?;
        for &eps in &self.attack.epsilons {
            self.attack_config(eps)?.validate()?;
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be nonempty with every k ≥ 1".into()));
        }
        if self.eval.grid.contains(&0) {
            return Err(Error::Config("eval.grid dimensions must be at least 1".into()));
        }
        self.eval.protocol.validate()?;
        if self.eval.grid_identity >= self.eval.protocol.identities {
            return Err(Error::Config("eval.grid_identity is outside the protocol".into()));
        }
        Ok(())
    }

    pub fn scene(&self) -> Result<Scene> {
        match (&self.scene.path, &self.scene.synth) {
            (Some(p), _) => load_scene(p),
            (None, Some(s)) => synth_scene(s.seed.unwrap_or(self.seed), s.primitives, s.layout),
            (None, None) => Err(Error::Config("no scene source".into())),
        }
    }

    pub fn embedder(&self, index: usize) -> Result<SurrogateEmbedder> {
        let spec = self
            .embedders
            .get(index)
            .ok_or_else(|| Error::Config(format!("no embedder {index}")))?;
        Ok(SurrogateEmbedder::new(spec.seed.unwrap_or(self.seed), spec.architecture))
    }

    /// Embedder used for evaluation: the second one in cross-system mode.
    pub fn eval_embedder(&self) -> Result<SurrogateEmbedder> {
        self.embedder(usize::from(self.eval.cross_system))
    }

    pub fn attack_config(&self, epsilon: f64) -> Result<AttackConfig> {
        let a = &self.attack;
        let mut cfg = AttackConfig::standard(epsilon, self.camera.distribution()?);
        cfg.step_alpha = a.step_alpha;
        cfg.t_max = a.t_max;
        cfg.k_viewpoints = a.k_viewpoints;
        cfg.lambda = a.lambda;
        cfg.norm = a.norm;
        cfg.method = a.method;
        cfg.param_class = a.param_class;
        cfg.region = RegionSet::parse(&a.region)?;
        cfg.seed = self.seed;
        cfg.render = self.render.clone();
        cfg.ddn = a.ddn;
        cfg.eval_grid = a.eval_grid;
        Ok(cfg)
    }

    /// Protocol spec with the camera resolution applied.
    pub fn protocol(&self) -> ProtocolSpec {
        ProtocolSpec {
            width: self.camera.width,
            height: self.camera.height,
            ..self.eval.protocol
        }
    }
}
