//! Browser demo over the core crate: explore pore-model rejection curves
//! against membrane parameters, roll out the bundled neural checkpoint, and
//! inspect its rollout-averaged attention matrix. Everything returns
//! self-contained SVG strings; the page just injects them.
//!
//! Build with `wasm-pack build --target web crates/ionflux-demo` and open
//! `crates/ionflux-demo/static/index.html` from any static file server.

use wasm_bindgen::prelude::*;

use ionflux_core::data::{validate_composition, IonDb, MixtureComposition, ION_LABELS, N_IONS};
use ionflux_core::dspmde::{solve, MembraneParams, SolverConfig};
use ionflux_core::model::{load_checkpoint_bytes_model, rollout, CompContext};
use ionflux_core::odeint::IntegratorConfig;
use ionflux_core::plot::{self, Series};

// Trained by the repository pipeline; regenerate with
//   ionflux repro --out out --seed 0
// and copy out/finetune/ckpt.{json,bin} here.
const CKPT_MANIFEST: &str = include_str!("../assets/demo-ckpt.json");
const CKPT_BLOB: &[u8] = include_bytes!("../assets/demo-ckpt.bin");

const PRESETS: [(&str, [f64; N_IONS]); 4] = [
    // Na+, K+, Li+, Mg2+, Ca2+, Cl-, SO4-2, NO3-
    ("NaCl", [10.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0]),
    (
        "Seawater-like",
        [20.0, 0.0, 0.0, 3.0, 1.0, 25.0, 1.5, 0.0],
    ),
    ("Nitrate mix", [8.0, 0.0, 0.0, 4.0, 2.0, 0.0, 0.0, 0.0]),
    ("Lithium sulfate", [0.0, 0.0, 8.0, 0.0, 0.0, 0.0, 4.0, 0.0]),
];

fn preset(name: &str) -> Result<MixtureComposition, JsValue> {
    let mut feed = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f.to_vec())
        .ok_or_else(|| JsValue::from_str(&format!("unknown preset '{name}'")))?;
    // The nitrate preset balances its cations with Cl- and NO3-.
    if name == "Nitrate mix" {
        feed[7] = 6.0;
        feed[5] = 14.0;
    }
    validate_composition(&feed).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Preset names as a JSON array.
#[wasm_bindgen]
pub fn presets() -> String {
    let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
    serde_json::to_string(&names).unwrap()
}

/// Pore-model rejection curves for a preset mixture under adjustable membrane
/// parameters (pore radius in nm, volumetric charge in mol/m^3).
#[wasm_bindgen]
pub fn pde_rejection_svg(
    preset_name: &str,
    pore_radius_nm: f64,
    charge_density: f64,
) -> Result<String, JsValue> {
    let comp = preset(preset_name)?;
    if !(0.1..=2.0).contains(&pore_radius_nm) {
        return Err(JsValue::from_str("pore radius must be in [0.1, 2.0] nm"));
    }
    let membrane = MembraneParams {
        pore_radius: pore_radius_nm * 1e-9,
        thickness: 1.0e-6,
        charge_density,
    };
    let cfg = SolverConfig::default();
    let db = IonDb::default();
    let n = 17;
    let mut curves: Vec<Vec<(f64, f64)>> = vec![Vec::new(); N_IONS];
    let mut warm: Option<Vec<f64>> = None;
    for i in 0..n {
        let jv = 5e-5 * i as f64 / (n - 1) as f64;
        match solve(&comp, jv, &membrane, &cfg, &db, warm.as_deref()) {
            Ok(sol) => {
                warm = Some(sol.permeate.clone());
                let rej = sol.rejections(&comp);
                for j in 0..N_IONS {
                    if comp.mask[j] {
                        curves[j].push((jv * 1e6, rej[j]));
                    }
                }
            }
            Err(_) => continue, // skip unconverged points, keep the sweep going
        }
    }
    let series: Vec<Series> = (0..N_IONS)
        .filter(|j| comp.mask[*j] && !curves[*j].is_empty())
        .map(|j| Series {
            label: ION_LABELS[j].to_string(),
            points: curves[j].clone(),
        })
        .collect();
    if series.is_empty() {
        return Err(JsValue::from_str(
            "pore model did not converge anywhere on the sweep; try different parameters",
        ));
    }
    Ok(plot::line_chart(
        &format!("pore model: {preset_name} (r_p {pore_radius_nm:.2} nm, X_d {charge_density:.0})"),
        "J_v (um/s)",
        "rejection",
        &series,
    ))
}

fn bundled_model() -> Result<
    (
        ionflux_core::nn::ParamStore,
        ionflux_core::model::OdeNetConfig,
    ),
    JsValue,
> {
    load_checkpoint_bytes_model(CKPT_MANIFEST, CKPT_BLOB)
        .map(|(store, cfg, _)| (store, cfg))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Rejection rollout of the bundled neural checkpoint for a preset mixture.
#[wasm_bindgen]
pub fn model_rollout_svg(preset_name: &str) -> Result<String, JsValue> {
    let comp = preset(preset_name)?;
    let (store, cfg) = bundled_model()?;
    let db = IonDb::default();
    let ctx = CompContext::new(&comp, &db, &cfg);
    let queries: Vec<f64> = (0..=32).map(|i| cfg.flux_max * i as f64 / 32.0).collect();
    let pred = rollout(&store, &cfg, &ctx, &queries, &IntegratorConfig::default())
        .map_err(|e| JsValue::from_str(&e.to_string()))?;
    let series: Vec<Series> = (0..N_IONS)
        .filter(|j| comp.mask[*j])
        .map(|j| Series {
            label: ION_LABELS[j].to_string(),
            points: queries
                .iter()
                .zip(pred.rejections.iter().map(|r| r[j]))
                .map(|(q, r)| (*q * 1e6, r))
                .collect(),
        })
        .collect();
    Ok(plot::line_chart(
        &format!("neural rollout: {preset_name}"),
        "J_v (um/s)",
        "rejection",
        &series,
    ))
}

/// Rollout-averaged attention heatmap of the bundled checkpoint.
#[wasm_bindgen]
pub fn attention_heatmap_svg(preset_name: &str) -> Result<String, JsValue> {
    let comp = preset(preset_name)?;
    let (store, cfg) = bundled_model()?;
    if !cfg.attention {
        return Err(JsValue::from_str("bundled model has no attention block"));
    }
    let db = IonDb::default();
    let ctx = CompContext::new(&comp, &db, &cfg);
    let queries: Vec<f64> = (0..=8).map(|i| cfg.flux_max * i as f64 / 8.0).collect();
    let pred = rollout(&store, &cfg, &ctx, &queries, &IntegratorConfig::default())
        .map_err(|e| JsValue::from_str(&e.to_string()))?;
    let att = pred
        .mean_attention
        .ok_or_else(|| JsValue::from_str("no attention recorded"))?;
    let matrix: Vec<Vec<f64>> = (0..N_IONS)
        .map(|i| (0..N_IONS).map(|j| att.at(i, j)).collect())
        .collect();
    Ok(plot::heatmap(
        &format!("mean attention: {preset_name}"),
        &matrix,
        &ION_LABELS,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_balance() {
        let names: Vec<String> = serde_json::from_str(&presets()).unwrap();
        assert_eq!(names.len(), 4);
        for name in names {
            preset(&name).expect("preset composition must validate");
        }
    }

    #[test]
    fn pde_curves_render() {
        let svg = pde_rejection_svg("NaCl", 0.43, -100.0).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert!(svg.contains("Na⁺"));
    }

    #[test]
    fn bundled_rollout_renders() {
        let svg = model_rollout_svg("Nitrate mix").unwrap();
        assert!(svg.contains("NO₃⁻"));
        let heat = attention_heatmap_svg("Seawater-like").unwrap();
        assert!(heat.contains("SO₄²⁻"));
    }
}
