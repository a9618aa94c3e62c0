//! Synthetic scene generation and the scene.json schema.
//!
//! A scene is a camera rig, a BEV grid, and one value tensor per
//! (camera, feature level), all derived deterministically from a 64-bit
//! seed: re-running generation with the same spec produces byte-identical
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ring_rig, BEVGridSpec, CameraModel, Extent};
use crate::rng::CounterRng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// One feature pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLevel {
    pub h_f: usize,
    pub w_f: usize,
    pub d: usize,
}

/// Distribution the value tensors are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueInit {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Everything needed to materialize a scene on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    pub bev: BEVGridSpec,
    pub feature_levels: Vec<FeatureLevel>,
    pub value_init: ValueInit,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidSpec("scene needs at least one camera".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        self.bev.validate()?;
        if self.feature_levels.is_empty() {
            return Err(Error::InvalidSpec("scene needs at least one feature level".into()));
        }
        if let ValueInit::Uniform { lo, hi } = self.value_init {
            if !(lo < hi) {
                return Err(Error::InvalidSpec("uniform init needs lo < hi".into()));
            }
        }
        Ok(())
    }

    /// The standard rig: six cameras with 60° horizontal fields of view at a
    /// seeded global yaw, 50×50 BEV grid over ±50 m, four pillar heights
    /// between -1 m and 3 m, one stride-32 feature level of width 32.
    pub fn standard(seed: u64) -> SceneSpec {
        let mut rng = CounterRng::new(seed).substream("rig");
        let yaw0 = rng.uniform(0.0, std::f64::consts::TAU);
        let height = rng.uniform(0.9, 1.1);
        SceneSpec {
            seed,
            cameras: ring_rig(6, yaw0, height, 60.0, 120.0, 800, 450),
            bev: BEVGridSpec {
                h_bev: 50,
                w_bev: 50,
                extent: Extent {
                    x_min: -50.0,
                    x_max: 50.0,
                    y_min: -50.0,
                    y_max: 50.0,
                },
                pillar_z: evenly_spaced(-1.0, 3.0, 4),
            },
            feature_levels: vec![FeatureLevel {
                h_f: 450 / 32,
                w_f: 800 / 32,
                d: 32,
            }],
            value_init: ValueInit::Normal { mean: 0.0, std: 1.0 },
        }
    }

    /// Small scene for smoke tests and the configuration sweep.
    pub fn smoke(seed: u64) -> SceneSpec {
        let mut rng = CounterRng::new(seed).substream("rig");
        let yaw0 = rng.uniform(0.0, std::f64::consts::TAU);
        SceneSpec {
            seed,
            cameras: ring_rig(6, yaw0, 1.0, 60.0, 120.0, 320, 180),
            bev: BEVGridSpec {
                h_bev: 6,
                w_bev: 6,
                extent: Extent {
                    x_min: -12.0,
                    x_max: 12.0,
                    y_min: -12.0,
                    y_max: 12.0,
                },
                pillar_z: evenly_spaced(0.0, 2.0, 2),
            },
            feature_levels: vec![FeatureLevel { h_f: 4, w_f: 6, d: 16 }],
            value_init: ValueInit::Normal { mean: 0.0, std: 1.0 },
        }
    }
}

pub fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

pub const SCENE_FILE: &str = "scene.json";

/// File name of one value tensor.
pub fn value_tensor_name(camera: usize, level: usize) -> String {
    format!("values_cam{camera}_level{level}.xbev")
}

fn value_stream(seed: u64, camera: usize, level: usize) -> CounterRng {
    CounterRng::new(seed).substream(&format!("values/cam{camera}/level{level}"))
}

fn draw(init: ValueInit, rng: &mut CounterRng) -> f64 {
    match init {
        ValueInit::Normal { mean, std } => mean + std * rng.normal(),
        ValueInit::Uniform { lo, hi } => rng.uniform(lo, hi),
    }
}

/// Write scene.json and all value tensors into `dir`. Returns the files
/// written, scene.json first.
pub fn gen_scene(spec: &SceneSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let scene_path = dir.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(spec).expect("scene serializes");
    fs::write(&scene_path, json.as_bytes())?;
    written.push(scene_path);

    for (level, fl) in spec.feature_levels.iter().enumerate() {
        for camera in 0..spec.cameras.len() {
            let mut rng = value_stream(spec.seed, camera, level);
            let count = fl.h_f * fl.w_f * fl.d;
            let data: Vec<f32> = (0..count)
                .map(|_| draw(spec.value_init, &mut rng) as f32)
                .collect();
            let tensor = Tensor::new(vec![fl.h_f, fl.w_f, fl.d], data)?;
            let path = dir.join(value_tensor_name(camera, level));
            write_tensor(&path, &tensor)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Parse scene.json in strict mode, reporting the offending field path.
pub fn parse_scene_json(text: &str) -> Result<SceneSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    match serde_path_to_error::deserialize::<_, SceneSpec>(de) {
        Ok(spec) => {
            spec.validate()?;
            Ok(spec)
        }
        Err(err) => Err(Error::Config {
            path: err.path().to_string(),
            message: err.inner().to_string(),
        }),
    }
}

/// Load a scene directory: the spec plus value tensors indexed
/// `[camera][level]`.
pub fn load_scene(dir: &Path) -> Result<(SceneSpec, Vec<Vec<Tensor>>)> {
    let text = fs::read_to_string(dir.join(SCENE_FILE))?;
    let spec = parse_scene_json(&text)?;
    let mut tensors = Vec::with_capacity(spec.cameras.len());
    for camera in 0..spec.cameras.len() {
        let mut per_level = Vec::with_capacity(spec.feature_levels.len());
        for (level, fl) in spec.feature_levels.iter().enumerate() {
            let path = dir.join(value_tensor_name(camera, level));
            let tensor = read_tensor(&path)?;
            if tensor.dims != vec![fl.h_f, fl.w_f, fl.d] {
                return Err(Error::Format {
                    file: path,
                    message: format!(
                        "dims {:?} do not match level spec {:?}",
                        tensor.dims,
                        (fl.h_f, fl.w_f, fl.d)
                    ),
                });
            }
            per_level.push(tensor);
        }
        tensors.push(per_level);
    }
    Ok((spec, tensors))
}
