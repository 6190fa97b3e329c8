//! Run configuration: one JSON document with scene, environment, PPO and
//! prior sections. Missing fields take the canonical desk-scene defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, Material, Panel, Region, Scene, Wall};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::geometry::{SegmentSpec, Vec3};
use crate::marl::{Method, PpoConfig, PriorSchedule, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub ap: Vec3,
    pub segments: Vec<SegmentSpec>,
    pub walls: Vec<Wall>,
    pub obstructions: Vec<Panel>,
    pub region: Region,
    pub user_height: f64,
    pub channel: ChannelConfig,
}

fn corner_segment(origin: Vec3, inward: Vec3, rows: usize, cols: usize, pitch: f64) -> SegmentSpec {
    // axis_u x axis_v must equal the inward face normal
    let up = Vec3::new(0.0, 0.0, 1.0);
    let axis_u = up.cross(inward).try_normalize().expect("horizontal inward normal");
    SegmentSpec { origin, axis_u, axis_v: up, rows, cols, pitch }
}

fn room_walls(region: &Region, height: f64) -> Vec<Wall> {
    let (cx, cy) = region.center();
    let hw = region.width() / 2.0;
    let hd = region.depth() / 2.0;
    let hh = height / 2.0;
    let x = Vec3::new(1.0, 0.0, 0.0);
    let y = Vec3::new(0.0, 1.0, 0.0);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let wall = |center, axis_u, axis_v, half_u, half_v| Wall {
        panel: Panel { center, axis_u, axis_v, half_u, half_v },
        material: Material::CONCRETE,
    };
    vec![
        Wall {
            panel: Panel { center: Vec3::new(cx, cy, 0.0), axis_u: x, axis_v: y, half_u: hw, half_v: hd },
            material: Material::MARBLE,
        },
        wall(Vec3::new(region.x_min, cy, hh), y, z, hd, hh),
        wall(Vec3::new(region.x_max, cy, hh), z, y, hh, hd),
        wall(Vec3::new(cx, region.y_min, hh), z, x, hh, hw),
        wall(Vec3::new(cx, region.y_max, hh), x, z, hw, hh),
    ]
}

impl SceneConfig {
    /// 10 x 10 m room centered on the origin, AP at (-2, 0, 2.5), two 8 x 8
    /// segments of 2.5 cm tiles in the far corners facing the room center.
    pub fn canonical() -> Self {
        let region = Region { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0 };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            ap: Vec3::new(-2.0, 0.0, 2.5),
            segments: vec![
                corner_segment(Vec3::new(5.0, 5.0, 2.0), Vec3::new(-s, -s, 0.0), 8, 8, 0.025),
                corner_segment(Vec3::new(5.0, -5.0, 2.0), Vec3::new(-s, s, 0.0), 8, 8, 0.025),
            ],
            walls: room_walls(&region, 3.0),
            obstructions: vec![],
            region,
            user_height: 1.5,
            channel: ChannelConfig::default(),
        }
    }

    pub fn build(&self) -> Result<Scene> {
        Scene::new(
            self.ap,
            self.segments.clone(),
            self.walls.clone(),
            self.obstructions.clone(),
            self.region,
            self.user_height,
            self.channel.clone(),
        )
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub prior: PriorSchedule,
    pub method: Method,
    pub n_envs: usize,
    pub sigma_sweep: Vec<f64>,
    pub eval_horizon: usize,
    pub checkpoint_every: usize,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::canonical(),
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            prior: PriorSchedule::default(),
            method: Method::Allocator,
            n_envs: 8,
            sigma_sweep: vec![0.0, 0.1, 0.3, 0.5, 1.0, 2.0],
            eval_horizon: 300,
            checkpoint_every: 0,
            output_dir: "runs".into(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.prior.validate()?;
        self.scene.channel.validate()?;
        for s in &self.scene.segments {
            s.validate()?;
        }
        if self.n_envs == 0 {
            return Err(Error::Config("n_envs must be at least 1".into()));
        }
        if self.eval_horizon == 0 {
            return Err(Error::Config("eval horizon must be positive".into()));
        }
        if let Some(s) = self.sigma_sweep.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Config(format!("sweep value {s} must be non-negative")));
        }
        crate::harness::allocation_space(self.env.n_users, self.scene.segments.len())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            env: self.env.clone(),
            ppo: self.ppo.clone(),
            prior: self.prior.clone(),
            method: self.method,
            n_envs: self.n_envs,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }
}
