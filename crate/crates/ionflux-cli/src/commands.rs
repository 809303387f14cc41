//! Command implementations. Each command writes its outputs plus exactly one
//! manifest into its output directory and is byte-reproducible for a fixed
//! seed (manifest timings excepted).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ionflux_core::bench::{self, AblationSpec, Family, Predictor};
use ionflux_core::data::{
    self, read_csv_file, write_csv_file, IonDb, MixtureComposition, Provenance, RolloutSample,
    ION_LABELS, ION_NAMES, N_IONS,
};
use ionflux_core::dspmde::{self, MembraneParams, SolverConfig};
use ionflux_core::model::{
    self, CompContext, ConstraintMode, OdeNetConfig, Stage, TrainConfig,
};
use ionflux_core::nn::SeedRecord;
use ionflux_core::odeint::IntegratorConfig;
use ionflux_core::plot;

use crate::config::BenchmarkConfig;
use crate::log;
use crate::manifest::ManifestBuilder;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<BenchmarkConfig> {
    match path {
        Some(p) => BenchmarkConfig::load(p),
        None => Ok(BenchmarkConfig::default()),
    }
}

fn config_json(cfg: &BenchmarkConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

/// Draw compositions from a keyed stream and keep those the pore model can
/// solve across the whole grid, until `target` survive.
fn solvable_compositions(
    target: usize,
    stream: u64,
    fluxes: &[f64],
    membrane: &MembraneParams,
    solver: &SolverConfig,
    db: &IonDb,
    warnings: &mut Vec<String>,
) -> Vec<MixtureComposition> {
    let pool = data::sample_compositions(target * 3, stream);
    let mut keep = Vec::with_capacity(target);
    let mut skipped = 0usize;
    for comp in pool {
        if keep.len() == target {
            break;
        }
        let mut warm: Option<Vec<f64>> = None;
        let mut ok = true;
        for &jv in fluxes {
            match dspmde::solve(&comp, jv, membrane, solver, db, warm.as_deref()) {
                Ok(sol) => warm = Some(sol.permeate),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            keep.push(comp);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        warnings.push(format!(
            "{skipped} compositions skipped (pore model did not converge on the full grid)"
        ));
    }
    keep
}

pub struct SimulateOutputs {
    pub pretrain_csv: PathBuf,
    pub finetune_csv: PathBuf,
    pub test_csv: PathBuf,
}

/// Generate the three benchmark datasets: simulated pre-training data from
/// the reference membrane, and pseudo-experimental fine-tune/test data from
/// the perturbed membrane (the controlled sim-to-real gap).
pub fn cmd_simulate(
    config_path: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<SimulateOutputs> {
    let cfg = load_config(config_path)?;
    ensure_dir(out)?;
    let mut manifest = ManifestBuilder::new(
        format!("ionflux simulate --out {} --seed {seed}", out.display()),
        config_json(&cfg),
        vec![seed],
    );
    if let Some(p) = config_path {
        manifest.input(p);
    }
    let db = IonDb::default();
    let mut warnings = Vec::new();

    let sim_grid = cfg.flux_grid(cfg.pretrain_flux_points);
    let measured_grid = cfg.flux_grid(cfg.measured_flux_points);

    let pre_comps = solvable_compositions(
        cfg.pretrain_compositions,
        seed,
        &sim_grid,
        &cfg.membrane,
        &cfg.solver,
        &db,
        &mut warnings,
    );
    let (pre_samples, pre_report) = dspmde::generate_dataset(
        &pre_comps,
        &sim_grid,
        &cfg.membrane,
        &cfg.solver,
        &db,
        Provenance::Simulated,
        "sim-",
    );
    for (ci, msg) in &pre_report.failures {
        warnings.push(format!("pretrain composition {ci}: {msg}"));
    }

    // Pseudo-experimental pool: a different stream, solvable under the
    // perturbed membrane; split whole compositions between train and test.
    let pexp_target = cfg.finetune_compositions + cfg.test_compositions;
    let pexp_comps = solvable_compositions(
        pexp_target,
        seed.wrapping_add(1),
        &sim_grid,
        &cfg.membrane_perturbed,
        &cfg.solver,
        &db,
        &mut warnings,
    );
    let (ft_comps, test_comps) = pexp_comps.split_at(cfg.finetune_compositions.min(pexp_comps.len()));
    let (ft_samples, ft_report) = dspmde::generate_dataset(
        ft_comps,
        &measured_grid,
        &cfg.membrane_perturbed,
        &cfg.solver,
        &db,
        Provenance::PseudoExperimental,
        "pexp-train-",
    );
    let (test_samples, test_report) = dspmde::generate_dataset(
        test_comps,
        &sim_grid,
        &cfg.membrane_perturbed,
        &cfg.solver,
        &db,
        Provenance::PseudoExperimental,
        "pexp-test-",
    );
    for (ci, msg) in ft_report.failures.iter().chain(&test_report.failures) {
        warnings.push(format!("pseudo-experimental composition {ci}: {msg}"));
    }

    let pretrain_csv = out.join("sim_pretrain.csv");
    let finetune_csv = out.join("pexp_train.csv");
    let test_csv = out.join("pexp_test.csv");
    write_csv_file(&pre_samples, &pretrain_csv)?;
    write_csv_file(&ft_samples, &finetune_csv)?;
    write_csv_file(&test_samples, &test_csv)?;
    log::info(&format!(
        "simulate: {} pretrain, {} finetune, {} test samples",
        pre_samples.len(),
        ft_samples.len(),
        test_samples.len()
    ));

    for w in warnings {
        manifest.warn(w);
    }
    manifest.output(&pretrain_csv);
    manifest.output(&finetune_csv);
    manifest.output(&test_csv);
    manifest.write(out)?;
    Ok(SimulateOutputs {
        pretrain_csv,
        finetune_csv,
        test_csv,
    })
}

fn write_loss_curve(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{i},{}\n", data::fmt_f64(*l)));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
    pub initial_loss: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_pretrain(
    config_path: Option<&Path>,
    data_path: &Path,
    ckpt_out: &Path,
    epochs: Option<usize>,
    seed: u64,
    constraint: ConstraintMode,
    lambda: Option<f64>,
) -> Result<TrainOutputs> {
    let cfg = load_config(config_path)?;
    let out_dir = ckpt_out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ensure_dir(&out_dir)?;
    let mut model_cfg = OdeNetConfig {
        constraint,
        ..cfg.odenet.clone()
    };
    if let Some(l) = lambda {
        model_cfg.lambda = l;
    }
    let mut hyper = TrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    if let Some(e) = epochs {
        hyper.epochs = e;
    }
    let mut manifest = ManifestBuilder::new(
        format!(
            "ionflux pretrain --data {} --ckpt-out {} --epochs {} --seed {seed} --constraint {}",
            data_path.display(),
            ckpt_out.display(),
            hyper.epochs,
            constraint.as_str()
        ),
        config_json(&cfg),
        vec![seed],
    );
    manifest.input(data_path);

    let (samples, report) = read_csv_file(data_path)?;
    for w in report.warnings {
        manifest.warn(w);
    }
    if samples.iter().any(|s| s.provenance != Provenance::Simulated) {
        manifest.warn("pre-training data contains non-SIMULATED samples");
    }
    let db = IonDb::default();
    let mut store = model::init_params(&model_cfg, seed);
    let report = model::train(
        Stage::Pretrain,
        &mut store,
        &model_cfg,
        &samples,
        &db,
        &hyper,
        &IntegratorConfig::default(),
    )?;
    model::save_checkpoint(
        ckpt_out,
        &store,
        &model_cfg,
        vec![
            SeedRecord {
                stage: "init".into(),
                seed,
            },
            SeedRecord {
                stage: "pretrain".into(),
                seed,
            },
        ],
    )?;
    let loss_csv = out_dir.join("pretrain_loss.csv");
    write_loss_curve(&loss_csv, &report.loss_history)?;
    if let (Some(first), Some(last)) = (report.loss_history.first(), report.loss_history.last()) {
        log::info(&format!(
            "pretrain: loss {first:.6} -> {last:.6} over {} epochs (decreasing fraction {:.2})",
            report.loss_history.len(),
            report.decreasing_fraction
        ));
    }
    manifest.output(ckpt_out);
    manifest.output(&loss_csv);
    manifest.write(&out_dir)?;
    Ok(TrainOutputs {
        checkpoint: ckpt_out.to_path_buf(),
        initial_loss: report.loss_history.first().copied(),
        final_loss: report.loss_history.last().copied(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    config_path: Option<&Path>,
    data_path: &Path,
    ckpt_in: Option<&Path>,
    ckpt_out: &Path,
    epochs: Option<usize>,
    seed: u64,
    constraint: Option<ConstraintMode>,
    lambda: Option<f64>,
    allow_npt: bool,
) -> Result<TrainOutputs> {
    let cfg = load_config(config_path)?;
    let out_dir = ckpt_out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ensure_dir(&out_dir)?;

    // Stage order: fine-tuning without a pre-trained checkpoint is the NPT
    // ablation path and must be requested explicitly.
    let (mut store, mut model_cfg, mut seeds) = match ckpt_in {
        Some(p) => {
            let (store, cfg_in, seeds) = model::load_checkpoint(p)?;
            (store, cfg_in, seeds)
        }
        None => {
            if !allow_npt {
                bail!("finetune requires --ckpt-in (pass --allow-npt for the no-pretraining path)");
            }
            let model_cfg = OdeNetConfig {
                constraint: constraint.unwrap_or(cfg.odenet.constraint),
                ..cfg.odenet.clone()
            };
            (
                model::init_params(&model_cfg, seed),
                model_cfg,
                vec![SeedRecord {
                    stage: "init".into(),
                    seed,
                }],
            )
        }
    };
    if let Some(c) = constraint {
        model_cfg.constraint = c;
    }
    if let Some(l) = lambda {
        model_cfg.lambda = l;
    }
    let mut hyper = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    if let Some(e) = epochs {
        hyper.epochs = e;
    }
    let mut manifest = ManifestBuilder::new(
        format!(
            "ionflux finetune --data {} --ckpt-out {} --epochs {} --seed {seed}{}{}",
            data_path.display(),
            ckpt_out.display(),
            hyper.epochs,
            ckpt_in
                .map(|p| format!(" --ckpt-in {}", p.display()))
                .unwrap_or_default(),
            if allow_npt { " --allow-npt" } else { "" }
        ),
        config_json(&cfg),
        vec![seed],
    );
    manifest.input(data_path);
    if let Some(p) = ckpt_in {
        manifest.input(p);
    }

    let (samples, report) = read_csv_file(data_path)?;
    for w in report.warnings {
        manifest.warn(w);
    }
    let db = IonDb::default();
    let report = model::train(
        Stage::Finetune,
        &mut store,
        &model_cfg,
        &samples,
        &db,
        &hyper,
        &IntegratorConfig::default(),
    )?;
    // The manifest records the freeze map the stage applied.
    for name in store.frozen_names() {
        manifest.warn(format!("frozen: {name}"));
    }
    seeds.push(SeedRecord {
        stage: "finetune".into(),
        seed,
    });
    model::save_checkpoint(ckpt_out, &store, &model_cfg, seeds)?;
    let loss_csv = out_dir.join("finetune_loss.csv");
    write_loss_curve(&loss_csv, &report.loss_history)?;
    manifest.output(ckpt_out);
    manifest.output(&loss_csv);
    manifest.write(&out_dir)?;
    Ok(TrainOutputs {
        checkpoint: ckpt_out.to_path_buf(),
        initial_loss: report.loss_history.first().copied(),
        final_loss: report.loss_history.last().copied(),
    })
}

/// Dense rejection-rollout plot for one sample.
fn rollout_figure(
    store: &ionflux_core::nn::ParamStore,
    model_cfg: &OdeNetConfig,
    sample: &RolloutSample,
    db: &IonDb,
) -> Result<(String, model::RolloutPrediction)> {
    let ctx = CompContext::new(&sample.composition, db, model_cfg);
    let queries: Vec<f64> = (0..=32)
        .map(|i| model_cfg.flux_max * i as f64 / 32.0)
        .collect();
    let pred = model::rollout(store, model_cfg, &ctx, &queries, &IntegratorConfig::default())?;
    let mut series = Vec::new();
    for j in 0..N_IONS {
        if !sample.composition.mask[j] {
            continue;
        }
        series.push(plot::Series {
            label: ION_LABELS[j].to_string(),
            points: queries
                .iter()
                .zip(pred.rejections.iter().map(|r| r[j]))
                .map(|(q, r)| (*q * 1e6, r))
                .collect(),
        });
    }
    let svg = plot::line_chart(
        &format!("rejection rollout: {}", sample.id),
        "J_v (um/s)",
        "rejection",
        &series,
    );
    Ok((svg, pred))
}

pub struct EvaluateOutputs {
    pub model_mse: f64,
    pub pde_mse: f64,
}

pub fn cmd_evaluate(
    config_path: Option<&Path>,
    ckpt: &Path,
    data_path: &Path,
    out: &Path,
) -> Result<EvaluateOutputs> {
    let cfg = load_config(config_path)?;
    ensure_dir(out)?;
    let mut manifest = ManifestBuilder::new(
        format!(
            "ionflux evaluate --ckpt {} --data {} --out {}",
            ckpt.display(),
            data_path.display(),
            out.display()
        ),
        config_json(&cfg),
        vec![],
    );
    manifest.input(ckpt);
    manifest.input(data_path);

    let (store, model_cfg, _) = model::load_checkpoint(ckpt)?;
    let (samples, report) = read_csv_file(data_path)?;
    for w in report.warnings {
        manifest.warn(w);
    }
    let db = IonDb::default();

    let int_cfg = IntegratorConfig::default();
    let model_metrics = bench::evaluate(
        &Predictor::OdeNet {
            store: &store,
            cfg: &model_cfg,
            int_cfg: int_cfg.clone(),
        },
        &samples,
        &db,
    );
    // The classical PDE baseline: the unperturbed membrane model scored
    // against the (perturbed-membrane) truth.
    let pde_metrics = bench::evaluate(
        &Predictor::Dspmde {
            membrane: &cfg.membrane,
            solver: &cfg.solver,
        },
        &samples,
        &db,
    );

    let metrics_csv = out.join("metrics.csv");
    let mut text =
        String::from("model,mse,band_fraction,en_violation,skipped_samples\n");
    text.push_str(&format!(
        "odenet,{},{},{},{}\n",
        data::fmt_f64(model_metrics.mse),
        data::fmt_f64(model_metrics.band_fraction),
        data::fmt_f64(model_metrics.en_violation),
        model_metrics.skipped
    ));
    text.push_str(&format!(
        "dspmde,{},{},{},{}\n",
        data::fmt_f64(pde_metrics.mse),
        data::fmt_f64(pde_metrics.band_fraction),
        data::fmt_f64(pde_metrics.en_violation),
        pde_metrics.skipped
    ));
    std::fs::write(&metrics_csv, text)?;
    manifest.output(&metrics_csv);

    // Parity data and figure for both rows.
    for (name, metrics) in [("odenet", &model_metrics), ("dspmde", &pde_metrics)] {
        let parity_csv = out.join(format!("parity_{name}.csv"));
        let mut text = String::from("truth_mol_m3,pred_mol_m3\n");
        for (t, p) in &metrics.parity {
            text.push_str(&format!("{},{}\n", data::fmt_f64(*t), data::fmt_f64(*p)));
        }
        std::fs::write(&parity_csv, text)?;
        manifest.output(&parity_csv);
        let svg_path = out.join(format!("parity_{name}.svg"));
        std::fs::write(
            &svg_path,
            plot::parity_scatter(&format!("parity: {name}"), &metrics.parity, 0.1),
        )?;
        manifest.output(&svg_path);
    }

    // Per-sample rejection rollouts plus the rollout CSV export.
    let mut preds = Vec::new();
    for sample in &samples {
        let (svg, pred) = rollout_figure(&store, &model_cfg, sample, &db)?;
        let svg_path = out.join(format!("rollout_{}.svg", sample.id));
        std::fs::write(&svg_path, svg)?;
        manifest.output(&svg_path);
        if let Some(att) = &pred.mean_attention {
            let sidecar = out.join(format!("attention_{}.json", sample.id));
            std::fs::write(&sidecar, model::attention_sidecar_json(att))?;
            manifest.output(&sidecar);
        }
        preds.push((sample.id.clone(), pred));
    }
    let rollouts_csv = out.join("rollouts.csv");
    std::fs::write(&rollouts_csv, model::export_rollouts_csv(&preds))?;
    manifest.output(&rollouts_csv);

    log::info(&format!(
        "evaluate: odenet mse {:.6} ({} band) vs dspmde mse {:.6} ({} band)",
        model_metrics.mse,
        model_metrics.band_fraction,
        pde_metrics.mse,
        pde_metrics.band_fraction
    ));
    manifest.write(out)?;
    Ok(EvaluateOutputs {
        model_mse: model_metrics.mse,
        pde_mse: pde_metrics.mse,
    })
}

pub fn cmd_ablate(
    config_path: Option<&Path>,
    pretrain_data: &Path,
    finetune_data: &Path,
    test_data: &Path,
    out: &Path,
) -> Result<ionflux_core::bench::AblationResult> {
    let cfg = load_config(config_path)?;
    ensure_dir(out)?;
    let mut manifest = ManifestBuilder::new(
        format!(
            "ionflux ablate --pretrain-data {} --finetune-data {} --test-data {} --out {}",
            pretrain_data.display(),
            finetune_data.display(),
            test_data.display(),
            out.display()
        ),
        config_json(&cfg),
        cfg.seeds.clone(),
    );
    manifest.input(pretrain_data);
    manifest.input(finetune_data);
    manifest.input(test_data);

    let (pre, r1) = read_csv_file(pretrain_data)?;
    let (fin, r2) = read_csv_file(finetune_data)?;
    let (test, r3) = read_csv_file(test_data)?;
    for w in r1.warnings.into_iter().chain(r2.warnings).chain(r3.warnings) {
        manifest.warn(w);
    }
    let db = IonDb::default();
    let spec = AblationSpec {
        families: cfg.families.clone(),
        seeds: cfg.seeds.clone(),
        odenet: cfg.odenet.clone(),
        lambda: cfg.lambda,
        pretrain: TrainConfig {
            epochs: cfg.ablation_pretrain_epochs,
            ..cfg.pretrain.clone()
        },
        finetune: cfg.finetune.clone(),
        attention_ablation: true,
    };
    let result = bench::run_ablation(&spec, &pre, &fin, &test, &db);

    let rows_csv = out.join("ablation_rows.csv");
    std::fs::write(&rows_csv, result.rows_csv())?;
    manifest.output(&rows_csv);
    let summary_csv = out.join("ablation_summary.csv");
    std::fs::write(&summary_csv, result.summary_csv())?;
    manifest.output(&summary_csv);

    let bars: Vec<(String, f64)> = result
        .cells
        .iter()
        .filter(|c| c.mean_mse.is_finite())
        .map(|c| {
            (
                format!(
                    "{} {} {} {}",
                    c.key.family.as_str(),
                    if c.key.attention { "att" } else { "noatt" },
                    if c.key.pretrained { "PT" } else { "NPT" },
                    match c.key.constraint {
                        ConstraintMode::Hard => "HIB",
                        ConstraintMode::Soft => "SIB",
                        ConstraintMode::None => "none",
                    }
                ),
                c.mean_mse,
            )
        })
        .collect();
    let svg_path = out.join("ablation_summary.svg");
    std::fs::write(
        &svg_path,
        plot::bar_chart("ablation grid: mean test MSE", "MSE", &bars),
    )?;
    manifest.output(&svg_path);

    // Per-cell runtimes belong to the manifest, not the deterministic CSVs.
    for cell in &result.cells {
        for o in &cell.outcomes {
            manifest.warn(format!(
                "runtime: {} att={} {} {} seed {} = {:.1}s",
                cell.key.family.as_str(),
                cell.key.attention,
                if cell.key.pretrained { "PT" } else { "NPT" },
                match cell.key.constraint {
                    ConstraintMode::Hard => "HIB",
                    ConstraintMode::Soft => "SIB",
                    ConstraintMode::None => "none",
                },
                o.seed,
                o.runtime_s
            ));
        }
        for (seed, e) in &cell.failures {
            manifest.warn(format!("cell failure (seed {seed}): {e}"));
        }
    }
    manifest.write(out)?;
    Ok(result)
}

pub fn cmd_export_attention(
    ckpt: &Path,
    data_path: &Path,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let mut manifest = ManifestBuilder::new(
        format!(
            "ionflux export-attention --ckpt {} --data {} --out {}",
            ckpt.display(),
            data_path.display(),
            out.display()
        ),
        String::new(),
        vec![],
    );
    manifest.input(ckpt);
    manifest.input(data_path);

    let (store, model_cfg, _) = model::load_checkpoint(ckpt)?;
    anyhow::ensure!(
        model_cfg.attention,
        "checkpoint was trained without the attention block"
    );
    let (samples, _) = read_csv_file(data_path)?;
    let db = IonDb::default();

    for sample in &samples {
        let ctx = CompContext::new(&sample.composition, &db, &model_cfg);
        let pred = model::rollout(
            &store,
            &model_cfg,
            &ctx,
            &sample.fluxes,
            &IntegratorConfig::default(),
        )?;
        let Some(att) = pred.mean_attention else { continue };
        // 8x8 CSV with ion labels in vocabulary order.
        let mut text = String::from("ion");
        for name in ION_NAMES {
            text.push(',');
            text.push_str(name);
        }
        text.push('\n');
        for i in 0..N_IONS {
            text.push_str(ION_NAMES[i]);
            for j in 0..N_IONS {
                text.push(',');
                text.push_str(&data::fmt_f64(att.at(i, j)));
            }
            text.push('\n');
        }
        let csv_path = out.join(format!("attention_{}.csv", sample.id));
        std::fs::write(&csv_path, text)?;
        manifest.output(&csv_path);

        let matrix: Vec<Vec<f64>> = (0..N_IONS)
            .map(|i| (0..N_IONS).map(|j| att.at(i, j)).collect())
            .collect();
        let svg_path = out.join(format!("attention_{}.svg", sample.id));
        std::fs::write(
            &svg_path,
            plot::heatmap(
                &format!("mean attention: {}", sample.id),
                &matrix,
                &ION_LABELS,
            ),
        )?;
        manifest.output(&svg_path);
    }
    manifest.write(out)?;
    Ok(())
}

pub struct ReproSummary {
    pub pretrain_initial_loss: f64,
    pub pretrain_final_loss: f64,
    pub model_mse: f64,
    pub pde_mse: f64,
    pub ablation: ionflux_core::bench::AblationResult,
}

/// The whole pipeline in one invocation: simulate, pretrain, finetune,
/// evaluate, ablate, export attention.
pub fn cmd_repro(config_path: Option<&Path>, out: &Path, seed: u64) -> Result<ReproSummary> {
    ensure_dir(out)?;
    let cfg = load_config(config_path)?;
    let mut manifest = ManifestBuilder::new(
        format!("ionflux repro --out {} --seed {seed}", out.display()),
        config_json(&cfg),
        vec![seed],
    );

    let data_dir = out.join("data");
    let datasets = cmd_simulate(config_path, &data_dir, seed)?;

    let pretrain_dir = out.join("pretrain");
    ensure_dir(&pretrain_dir)?;
    let ckpt_pre = pretrain_dir.join("ckpt.json");
    let pre = cmd_pretrain(
        config_path,
        &datasets.pretrain_csv,
        &ckpt_pre,
        None,
        seed,
        cfg.odenet.constraint,
        Some(cfg.lambda),
    )?;

    let finetune_dir = out.join("finetune");
    ensure_dir(&finetune_dir)?;
    let ckpt_fin = finetune_dir.join("ckpt.json");
    cmd_finetune(
        config_path,
        &datasets.finetune_csv,
        Some(&ckpt_pre),
        &ckpt_fin,
        None,
        seed,
        None,
        None,
        false,
    )?;

    let evaluate_dir = out.join("evaluate");
    let eval = cmd_evaluate(config_path, &ckpt_fin, &datasets.test_csv, &evaluate_dir)?;

    let ablation_dir = out.join("ablation");
    let ablation = cmd_ablate(
        config_path,
        &datasets.pretrain_csv,
        &datasets.finetune_csv,
        &datasets.test_csv,
        &ablation_dir,
    )?;

    let attention_dir = out.join("attention");
    cmd_export_attention(&ckpt_fin, &datasets.test_csv, &attention_dir)?;

    for dir in ["data", "pretrain", "finetune", "evaluate", "ablation", "attention"] {
        manifest.output(&out.join(dir));
    }
    manifest.write(out)?;
    Ok(ReproSummary {
        pretrain_initial_loss: pre.initial_loss.unwrap_or(f64::NAN),
        pretrain_final_loss: pre.final_loss.unwrap_or(f64::NAN),
        model_mse: eval.model_mse,
        pde_mse: eval.pde_mse,
        ablation,
    })
}

/// Directional readouts used by the acceptance suite and the summary print.
pub fn ablation_readout(result: &ionflux_core::bench::AblationResult) -> String {
    use ionflux_core::bench::CellKey;
    let cell = |family: Family, attention: bool, pretrained: bool, constraint: ConstraintMode| {
        result.cell(&CellKey {
            family,
            attention,
            pretrained,
            constraint,
        })
    };
    let mut out = String::new();
    if let (Some(pt), Some(npt)) = (
        cell(Family::OdeNet, true, true, ConstraintMode::Hard),
        cell(Family::OdeNet, true, false, ConstraintMode::Hard),
    ) {
        out.push_str(&format!(
            "pretraining: MSE(NPT)/MSE(PT) = {:.2} (reference direction ~1.4x)\n",
            npt.mean_mse / pt.mean_mse
        ));
    }
    if let (Some(hib), Some(sib)) = (
        cell(Family::OdeNet, true, true, ConstraintMode::Hard),
        cell(Family::OdeNet, true, true, ConstraintMode::Soft),
    ) {
        out.push_str(&format!(
            "constraints: MSE(SIB)/MSE(HIB) = {:.2} (reference: hard drops MSE 10-20%)\n",
            sib.mean_mse / hib.mean_mse
        ));
    }
    for family in [Family::OdeNet, Family::Mlp, Family::Conv, Family::Unet] {
        if let (Some(with), Some(without)) = (
            cell(family, true, true, ConstraintMode::Hard),
            cell(family, false, true, ConstraintMode::Hard),
        ) {
            out.push_str(&format!(
                "attention ({}): MSE(no-att)/MSE(att) = {:.2}\n",
                family.as_str(),
                without.mean_mse / with.mean_mse
            ));
        }
    }
    out
}
