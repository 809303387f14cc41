//! The benchmark configuration file: dataset sizes and grids, membranes,
//! architecture, training hyperparameters, and the ablation axes. Ships with
//! defaults sized for a commodity 4-core machine.

use serde::{Deserialize, Serialize};

use ionflux_core::bench::Family;
use ionflux_core::dspmde::{MembraneParams, SolverConfig};
use ionflux_core::model::{OdeNetConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub schema_version: u32,

    // Dataset shape. Composition pools are drawn with margin because solves
    // on extreme-exclusion mixtures may fail and be skipped.
    pub pretrain_compositions: usize,
    pub finetune_compositions: usize,
    pub test_compositions: usize,
    /// Flux points per simulated rollout (includes 0).
    pub pretrain_flux_points: usize,
    /// Flux measurements per pseudo-experimental rollout (includes 0).
    pub measured_flux_points: usize,

    /// Membrane generating the pre-training data.
    pub membrane: MembraneParams,
    /// Perturbed membrane emulating the sim-to-real gap for the
    /// pseudo-experimental datasets.
    pub membrane_perturbed: MembraneParams,
    pub solver: SolverConfig,

    pub odenet: OdeNetConfig,
    /// Flagship pre-training run (checkpoint used for evaluation/plots).
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Shorter pre-training used inside each ablation cell.
    pub ablation_pretrain_epochs: usize,

    pub families: Vec<Family>,
    pub seeds: Vec<u64>,
    pub lambda: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let membrane = MembraneParams::nf_default();
        let membrane_perturbed = MembraneParams {
            pore_radius: membrane.pore_radius * 1.2,
            thickness: membrane.thickness,
            charge_density: membrane.charge_density * 1.2,
        };
        BenchmarkConfig {
            schema_version: SCHEMA_VERSION,
            pretrain_compositions: 64,
            finetune_compositions: 12,
            test_compositions: 16,
            pretrain_flux_points: 8,
            measured_flux_points: 6,
            membrane,
            membrane_perturbed,
            solver: SolverConfig::default(),
            odenet: OdeNetConfig::default(),
            pretrain: TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            ablation_pretrain_epochs: 120,
            families: vec![Family::OdeNet, Family::Mlp, Family::Conv, Family::Unet],
            seeds: vec![0, 1, 2],
            lambda: 1.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<BenchmarkConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: BenchmarkConfig = serde_json::from_str(&text)?;
        anyhow::ensure!(
            cfg.schema_version == SCHEMA_VERSION,
            "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        );
        Ok(cfg)
    }

    pub fn flux_grid(&self, points: usize) -> Vec<f64> {
        (0..points)
            .map(|i| self.odenet.flux_max * i as f64 / (points - 1) as f64)
            .collect()
    }
}
