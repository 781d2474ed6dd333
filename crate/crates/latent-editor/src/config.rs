//! Run configuration: one structured file with flat namespaced keys
//! (`edit.mu`, `guidance.s_text`, ...), strict about unknown keys, with
//! defaults matching the shipped hyperparameters. CLI flags override file
//! values through [`RunConfig::apply_override`].

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, GuidanceConfig, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::field::train::Phase;
use crate::field::{FieldArch, LossWeights};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub kind: String,
    pub t_min: f64,
    pub t_max: f64,
    pub delta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 1000,
            kind: "scaled_linear".into(),
            t_min: 0.02,
            t_max: 0.98,
            delta_t: 0.75,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub mu: f64,
    pub editing_rate: usize,
    pub iterations: u64,
    pub ddim_steps: usize,
    pub refresh_mask_each_edit: bool,
    /// First-phase length at the reference iteration count; scaled
    /// proportionally when `iterations` differs.
    pub phase1_steps: u64,
    pub reference_iterations: u64,
    pub phase1_weights: [f64; 3],
    pub phase2_weights: [f64; 3],
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            mu: 0.45,
            editing_rate: 10,
            iterations: 2000,
            ddim_steps: 20,
            refresh_mask_each_edit: true,
            phase1_steps: 400,
            reference_iterations: 2000,
            phase1_weights: [0.90, 0.1, 0.0],
            phase2_weights: [1.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub steps: u64,
    /// First-phase length at the reference step count; scaled proportionally.
    pub phase1_steps: u64,
    pub reference_steps: u64,
    pub phase1_weights: [f64; 3],
    pub phase2_weights: [f64; 3],
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            steps: 30_000,
            phase1_steps: 2_500,
            reference_steps: 30_000,
            phase1_weights: [0.80, 0.1, 0.1],
            phase2_weights: [0.75, 0.0, 0.25],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub patch_size: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub lr_field: f64,
    pub lr_camera: f64,
    /// Geometric decay target for initialization training (1.0 = constant).
    pub lr_final_fraction: f64,
    pub background: [f64; 4],
    pub checkpoint_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            patch_size: 16,
            samples_per_ray: 64,
            stratified: true,
            lr_field: 1e-3,
            lr_camera: 1e-4,
            lr_final_fraction: 1.0,
            background: [0.0; 4],
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub hidden: Vec<usize>,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            pos_bands: 6,
            dir_bands: 2,
            hidden: vec![64, 64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub channels: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            channels: crate::refine::DEFAULT_CHANNELS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub s_text: f64,
    pub s_image: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            s_text: 7.5,
            s_image: 1.5,
        }
    }
}

/// Test-backend settings (the oracle stands in for a pretrained editor).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub direction: [f64; 4],
    pub magnitude: f64,
    /// When positive, the oracle saturates at this mean displacement along
    /// the direction (absolute-state edit); zero keeps pushing forever.
    pub target: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            direction: [0.5, -0.5, 0.5, -0.5],
            magnitude: 5e-4,
            target: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// `oracle_edit`, `identity`, or `external`.
    pub name: String,
    /// Command line for the `external` backend.
    pub external_command: Vec<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            name: "oracle_edit".into(),
            external_command: Vec::new(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceSection,
    pub edit: EditSection,
    pub init: InitSection,
    pub train: TrainSection,
    pub field: FieldSection,
    pub adapter: AdapterSection,
    pub oracle: OracleSection,
    pub backend: BackendSection,
}

fn scaled_breakpoint(phase1: u64, reference: u64, actual: u64) -> u64 {
    if reference == 0 {
        return phase1.min(actual);
    }
    let scaled = (phase1 as f64 * actual as f64 / reference as f64).round() as u64;
    scaled.clamp(1, actual)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply one `section.key=value` override. Values parse as TOML literals
    /// (falling back to a bare string).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root: toml::Value =
            toml::Value::try_from(self.clone()).expect("config round-trips");
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let segments: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut root;
        for (i, seg) in segments.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{key}: not a table at {seg}")))?;
            if i + 1 == segments.len() {
                if !table.contains_key(*seg) {
                    return Err(Error::config(format!("unknown config key {key}")));
                }
                table.insert(seg.to_string(), parsed);
                break;
            }
            cursor = table
                .get_mut(*seg)
                .ok_or_else(|| Error::config(format!("unknown config section {seg}")))?;
        }
        *self = root
            .try_into()
            .map_err(|e| Error::config(format!("override {key}={value}: {e}")))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let kind: ScheduleKind = self.schedule.kind.parse()?;
        make_schedule(
            self.schedule.num_steps,
            kind,
            self.schedule.t_min,
            self.schedule.t_max,
            self.schedule.delta_t,
        )
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            s_image: self.guidance.s_image,
            s_text: self.guidance.s_text,
        }
    }

    pub fn field_arch(&self) -> Result<FieldArch> {
        FieldArch::new(
            self.field.pos_bands,
            self.field.dir_bands,
            self.field.hidden.clone(),
        )
    }

    /// Initialization-phase schedule, compressed proportionally to `steps`.
    pub fn init_phases(&self, steps: u64) -> Result<Vec<Phase>> {
        let split = scaled_breakpoint(self.init.phase1_steps, self.init.reference_steps, steps);
        let w1 = self.init.phase1_weights;
        let w2 = self.init.phase2_weights;
        Ok(vec![
            Phase {
                start: 0,
                end: split.min(steps),
                weights: LossWeights::new(w1[0], w1[1], w1[2])?,
            },
            Phase {
                start: split.min(steps),
                end: steps,
                weights: LossWeights::new(w2[0], w2[1], w2[2])?,
            },
        ]
        .into_iter()
        .filter(|p| p.end > p.start)
        .collect())
    }

    /// Editing-phase schedule, compressed proportionally to `iterations`.
    pub fn edit_phases(&self, iterations: u64) -> Result<Vec<Phase>> {
        let split = scaled_breakpoint(
            self.edit.phase1_steps,
            self.edit.reference_iterations,
            iterations,
        );
        let w1 = self.edit.phase1_weights;
        let w2 = self.edit.phase2_weights;
        Ok(vec![
            Phase {
                start: 0,
                end: split.min(iterations),
                weights: LossWeights::new(w1[0], w1[1], w1[2])?,
            },
            Phase {
                start: split.min(iterations),
                end: iterations,
                weights: LossWeights::new(w2[0], w2[1], w2[2])?,
            },
        ]
        .into_iter()
        .filter(|p| p.end > p.start)
        .collect())
    }
}
