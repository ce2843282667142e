//! Experiment specification: one TOML document drives scenario
//! generation, training, and the latency sweep. Unknown keys are
//! rejected so a typo cannot silently fall back to a default, and the
//! file's SHA-256 is stamped into every output for auditability.

use coopflow::error::{Error, Result};
use coopflow::sim::WorldConfig;
use coopflow::sweep::{SweepConfig, Variant, DEFAULT_LATENCIES_MS};
use coopflow::train::{Stage1Config, Stage2Config};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Master seed; scenario, training, and channel streams derive from it.
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_objects: usize,
    pub speed_range: (f64, f64),
    pub dt: f64,
    pub n_frames: usize,
    pub vehicle_speed: f64,
    pub vehicle_range: f64,
    pub infra_range: f64,
    pub point_density: f64,
    pub ground_points: usize,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        WorldSection {
            n_objects: w.n_objects,
            speed_range: w.speed_range,
            dt: w.dt,
            n_frames: 16,
            vehicle_speed: w.vehicle_speed,
            vehicle_range: w.vehicle_range,
            infra_range: w.infra_range,
            point_density: w.point_density,
            ground_points: w.ground_points,
            train_scenarios: 20,
            eval_scenarios: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Seed for the narrow checkpoint's initialization; the wide
    /// checkpoint uses `init_seed + 1`.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { init_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub infra_dropout: f64,
    pub horizons: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        TrainSection {
            stage1_epochs: s1.epochs,
            stage2_epochs: s2.epochs,
            batch: s1.batch,
            lr: s1.lr,
            weight_decay: s1.weight_decay,
            infra_dropout: s1.infra_dropout,
            horizons: s2.horizons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub latencies_ms: Vec<u32>,
    pub per_byte_cost: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection { latencies_ms: DEFAULT_LATENCIES_MS.to_vec(), per_byte_cost: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub variants: Vec<String>,
    pub window: (f64, f64),
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            variants: Variant::ALL.iter().map(|v| v.tag().to_string()).collect(),
            window: (0.6, 1.6),
            score_thresh: 0.05,
            nms_iou: 0.2,
        }
    }
}

/// A parsed spec together with the hash of the bytes it came from and
/// the effective seed after command-line overrides.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub sha256: String,
    pub seed: u64,
}

pub fn load_spec(path: &std::path::Path) -> Result<LoadedSpec> {
    let bytes = std::fs::read(path)?;
    let sha256 = hex(&Sha256::digest(&bytes));
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::config(format!("spec {} is not UTF-8: {e}", path.display())))?;
    let spec: ExperimentSpec = toml::from_str(text)
        .map_err(|e| Error::config(format!("spec {}: {e}", path.display())))?;
    let seed = spec.seed;
    let loaded = LoadedSpec { spec, sha256, seed };
    validate(&loaded.spec)?;
    Ok(loaded)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Re-checks a spec after command-line overrides touched it.
pub fn revalidate(s: &ExperimentSpec) -> Result<()> {
    validate(s)
}

fn validate(s: &ExperimentSpec) -> Result<()> {
    let w = &s.world;
    if w.dt <= 0.0 || !w.dt.is_finite() {
        return Err(Error::config("world.dt must be positive".to_string()));
    }
    if w.n_frames < 3 {
        return Err(Error::config("world.n_frames must be at least 3".to_string()));
    }
    if w.speed_range.0 < 0.0 || w.speed_range.1 < w.speed_range.0 {
        return Err(Error::config("world.speed_range must be 0 <= lo <= hi".to_string()));
    }
    if w.vehicle_range <= 0.0 || w.infra_range <= 0.0 || w.point_density <= 0.0 {
        return Err(Error::config("world ranges and point density must be positive".to_string()));
    }
    if w.train_scenarios == 0 || w.eval_scenarios == 0 {
        return Err(Error::config("world.train_scenarios and eval_scenarios must be positive".to_string()));
    }
    let t = &s.train;
    if t.batch == 0 {
        return Err(Error::config("train.batch must be positive".to_string()));
    }
    if !(t.lr > 0.0) || t.weight_decay < 0.0 {
        return Err(Error::config("train.lr must be positive and weight_decay nonnegative".to_string()));
    }
    if !(0.0..=1.0).contains(&t.infra_dropout) {
        return Err(Error::config("train.infra_dropout must lie in [0, 1]".to_string()));
    }
    if t.horizons.is_empty() || t.horizons.iter().any(|&h| h == 0) {
        return Err(Error::config("train.horizons must be nonempty positive frame counts".to_string()));
    }
    let max_h = t.horizons.iter().copied().max().unwrap_or(1);
    if w.n_frames < max_h + 2 {
        return Err(Error::config(format!(
            "world.n_frames = {} cannot host a prediction horizon of {max_h} frames",
            w.n_frames
        )));
    }
    for tag in &s.eval.variants {
        Variant::from_tag(tag)?;
    }
    self_check_sweep(s)?;
    Ok(())
}

/// Builds the sweep config once during validation so window/latency
/// mistakes surface as config errors instead of runtime ones.
fn self_check_sweep(s: &ExperimentSpec) -> Result<()> {
    let cfg = sweep_config(s, s.seed)?;
    cfg.validate()?;
    let any_eval_frame = (0..s.world.n_frames)
        .any(|f| cfg.eval_window.0 <= f as f64 * s.world.dt && (f as f64) * s.world.dt < cfg.eval_window.1);
    if !any_eval_frame {
        return Err(Error::config(format!(
            "eval.window [{}, {}) selects no frames at dt = {} with {} frames",
            cfg.eval_window.0, cfg.eval_window.1, s.world.dt, s.world.n_frames
        )));
    }
    Ok(())
}

/// Splitmix-style stream derivation so scenario seeds never collide
/// across (experiment seed, purpose, index).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const TRAIN_STREAM: u64 = 0xA;
pub const EVAL_STREAM: u64 = 0xB;

pub fn world_config(s: &ExperimentSpec, scenario_seed: u64) -> WorldConfig {
    let w = &s.world;
    WorldConfig {
        seed: scenario_seed,
        n_objects: w.n_objects,
        speed_range: w.speed_range,
        dt: w.dt,
        n_frames: w.n_frames,
        vehicle_speed: w.vehicle_speed,
        vehicle_range: w.vehicle_range,
        infra_range: w.infra_range,
        point_density: w.point_density,
        ground_points: w.ground_points,
    }
}

pub fn stage1_config(s: &ExperimentSpec, seed: u64) -> Stage1Config {
    let t = &s.train;
    Stage1Config {
        seed,
        epochs: t.stage1_epochs,
        batch: t.batch,
        lr: t.lr,
        weight_decay: t.weight_decay,
        infra_dropout: t.infra_dropout,
    }
}

pub fn stage2_config(s: &ExperimentSpec, seed: u64) -> Stage2Config {
    let t = &s.train;
    Stage2Config {
        seed,
        epochs: t.stage2_epochs,
        batch: t.batch,
        lr: t.lr,
        weight_decay: t.weight_decay,
        horizons: t.horizons.clone(),
    }
}

pub fn sweep_config(s: &ExperimentSpec, seed: u64) -> Result<SweepConfig> {
    let variants = s
        .eval
        .variants
        .iter()
        .map(|t| Variant::from_tag(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepConfig {
        seed,
        latencies_ms: s.channel.latencies_ms.clone(),
        variants,
        eval_window: s.eval.window,
        per_byte_cost: s.channel.per_byte_cost,
        score_thresh: s.eval.score_thresh as f32,
        nms_iou: s.eval.nms_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_spec(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("exp.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_spec_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_spec(&dir, "seed = 7\n");
        let loaded = load_spec(&path).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.spec.world.train_scenarios, 20);
        assert_eq!(loaded.spec.channel.latencies_ms, DEFAULT_LATENCIES_MS.to_vec());
        assert_eq!(loaded.spec.eval.variants.len(), Variant::ALL.len());
        assert_eq!(loaded.sha256.len(), 64);
    }

    #[test]
    fn missing_seed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_spec(&dir, "[world]\nn_objects = 3\n");
        let err = load_spec(&path).unwrap_err();
        assert!(err.to_string().contains("seed"), "error should name the missing key: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_spec(&dir, "seed = 1\n[world]\nnum_objects = 3\n");
        let err = load_spec(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("num_objects"), "error should name the unknown key: {msg}");
    }

    #[test]
    fn nonsense_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            "seed = 1\n[world]\ndt = 0.0\n",
            "seed = 1\n[world]\nn_frames = 2\n",
            "seed = 1\n[train]\nhorizons = []\n",
            "seed = 1\n[train]\ninfra_dropout = 1.5\n",
            "seed = 1\n[eval]\nvariants = [\"warp_drive\"]\n",
            "seed = 1\n[eval]\nwindow = [5.0, 6.0]\n",
            "seed = 1\n[channel]\nlatencies_ms = []\n",
        ] {
            let path = write_spec(&dir, bad);
            assert!(load_spec(&path).is_err(), "spec should be rejected: {bad}");
        }
    }

    #[test]
    fn spec_hash_tracks_file_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = load_spec(&write_spec(&dir, "seed = 1\n")).unwrap();
        let b = load_spec(&write_spec(&dir, "seed = 1\n")).unwrap();
        let c = load_spec(&write_spec(&dir, "seed = 1 \n")).unwrap();
        assert_eq!(a.sha256, b.sha256);
        assert_ne!(a.sha256, c.sha256, "whitespace must change the audit hash");
    }

    #[test]
    fn derived_seeds_separate_streams_and_indices() {
        let mut seen = std::collections::HashSet::new();
        for stream in [TRAIN_STREAM, EVAL_STREAM] {
            for i in 0..50 {
                assert!(seen.insert(derive_seed(9, stream, i)), "seed collision at {stream}/{i}");
            }
        }
    }
}
