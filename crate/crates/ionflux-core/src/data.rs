//! The fixed ion vocabulary, mixture compositions, rollout datasets,
//! measurement-noise emulation, train/test splits, and the dataset CSV schema.
//!
//! Everything downstream indexes ions by their position in [`ION_NAMES`]; the
//! order is a global constant and every matrix column means the same ion in
//! every module.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fnv1a, Rng};

pub const N_IONS: usize = 8;

/// Vocabulary order. CSV files and matrices use these ASCII names.
pub const ION_NAMES: [&str; N_IONS] = [
    "Na+", "K+", "Li+", "Mg2+", "Ca2+", "Cl-", "SO4-2", "NO3-",
];

/// Display labels for plots.
pub const ION_LABELS: [&str; N_IONS] = [
    "Na⁺", "K⁺", "Li⁺", "Mg²⁺", "Ca²⁺", "Cl⁻", "SO₄²⁻", "NO₃⁻",
];

pub const VALENCES: [i32; N_IONS] = [1, 1, 1, 2, 2, -1, -2, -1];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("composition: expected {N_IONS} entries, got {0}")]
    BadLength(usize),
    #[error("composition: negative concentration at index {0}")]
    NegativeConcentration(usize),
    #[error(
        "composition violates electroneutrality: residual {residual} exceeds {limit} (sum |z| c)"
    )]
    Electroneutrality { residual: f64, limit: f64 },
    #[error("composition needs at least one cation and one anion")]
    MissingCounterIon,
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("split produced an empty side (n = {n}, fractions {fractions:?})")]
    DegenerateSplit { n: usize, fractions: Vec<f64> },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("sample '{id}': {msg}")]
    Sample { id: String, msg: String },
    #[error("ion config: {0}")]
    IonConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static physical descriptors of one ionic species.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IonSpec {
    pub name: String,
    /// Signed integer charge.
    pub valence: i32,
    /// Stokes radius, m.
    pub stokes_radius: f64,
    /// Bulk diffusivity at infinite dilution, m^2/s.
    pub diffusivity: f64,
}

/// The 8-species ion table. Default values come from standard 25 degC
/// infinite-dilution conductivity tables (diffusivities) with Stokes radii via
/// the Stokes-Einstein relation; both are editable through [`IonDb::from_json`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IonDb {
    /// Where the numbers came from (recorded into dataset manifests).
    pub source: String,
    pub ions: Vec<IonSpec>,
}

impl Default for IonDb {
    fn default() -> Self {
        // Diffusivities: infinite-dilution values at 25 degC (1e-9 m^2/s),
        // standard electrochemistry tables. Stokes radii: kT/(6 pi mu D) with
        // mu = 0.8903e-3 Pa s.
        let d9 = [1.334, 1.957, 1.029, 0.706, 0.792, 2.032, 1.065, 1.902];
        let ions = (0..N_IONS)
            .map(|i| {
                let diffusivity = d9[i] * 1e-9;
                let kt = 1.380649e-23 * 298.15;
                let stokes_radius = kt / (6.0 * std::f64::consts::PI * 0.8903e-3 * diffusivity);
                IonSpec {
                    name: ION_NAMES[i].to_string(),
                    valence: VALENCES[i],
                    stokes_radius,
                    diffusivity,
                }
            })
            .collect();
        IonDb {
            source: "infinite-dilution limiting diffusivities, 25 degC (standard \
                     electrochemistry tables); Stokes radii via Stokes-Einstein, \
                     mu = 0.8903e-3 Pa s"
                .to_string(),
            ions,
        }
    }
}

impl IonDb {
    pub fn from_json(text: &str) -> Result<IonDb, DataError> {
        let db: IonDb =
            serde_json::from_str(text).map_err(|e| DataError::IonConfig(e.to_string()))?;
        if db.ions.len() != N_IONS {
            return Err(DataError::IonConfig(format!(
                "expected {N_IONS} ions, got {}",
                db.ions.len()
            )));
        }
        for (i, ion) in db.ions.iter().enumerate() {
            if ion.name != ION_NAMES[i] {
                return Err(DataError::IonConfig(format!(
                    "ion {i} must be '{}' (fixed vocabulary order), got '{}'",
                    ION_NAMES[i], ion.name
                )));
            }
            if ion.valence != VALENCES[i] {
                return Err(DataError::IonConfig(format!(
                    "'{}' must have valence {}",
                    ion.name, VALENCES[i]
                )));
            }
            if ion.stokes_radius <= 0.0 || ion.diffusivity <= 0.0 {
                return Err(DataError::IonConfig(format!(
                    "'{}' needs positive radius and diffusivity",
                    ion.name
                )));
            }
        }
        Ok(db)
    }

    pub fn spec(&self, idx: usize) -> &IonSpec {
        &self.ions[idx]
    }
}

pub fn ion_index(name: &str) -> Option<usize> {
    ION_NAMES.iter().position(|n| *n == name)
}

/// Feed-side concentrations over the fixed vocabulary plus a presence mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComposition {
    /// mol/m^3, one entry per vocabulary ion; absent ions are zero.
    pub feed: Vec<f64>,
    pub mask: Vec<bool>,
}

pub fn charge_residual(conc: &[f64]) -> f64 {
    conc.iter()
        .zip(VALENCES.iter())
        .map(|(c, z)| *z as f64 * c)
        .sum()
}

pub fn charge_scale(conc: &[f64]) -> f64 {
    conc.iter()
        .zip(VALENCES.iter())
        .map(|(c, z)| z.abs() as f64 * c)
        .sum()
}

/// Validate feed concentrations: electroneutral within 1e-6 relative, at
/// least one cation and one anion present.
pub fn validate_composition(conc: &[f64]) -> Result<MixtureComposition, DataError> {
    if conc.len() != N_IONS {
        return Err(DataError::BadLength(conc.len()));
    }
    for (i, c) in conc.iter().enumerate() {
        if *c < 0.0 {
            return Err(DataError::NegativeConcentration(i));
        }
    }
    let residual = charge_residual(conc);
    let limit = 1e-6 * charge_scale(conc);
    if residual.abs() > limit {
        return Err(DataError::Electroneutrality { residual, limit });
    }
    let mask: Vec<bool> = conc.iter().map(|c| *c > 0.0).collect();
    let has_cation = mask
        .iter()
        .zip(VALENCES.iter())
        .any(|(m, z)| *m && *z > 0);
    let has_anion = mask
        .iter()
        .zip(VALENCES.iter())
        .any(|(m, z)| *m && *z < 0);
    if !has_cation || !has_anion {
        return Err(DataError::MissingCounterIon);
    }
    Ok(MixtureComposition {
        feed: conc.to_vec(),
        mask,
    })
}

impl MixtureComposition {
    pub fn max_feed(&self) -> f64 {
        self.feed.iter().cloned().fold(0.0, f64::max)
    }

    pub fn present_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Simulated,
    PseudoExperimental,
    Experimental,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Simulated => "SIMULATED",
            Provenance::PseudoExperimental => "PSEUDO_EXPERIMENTAL",
            Provenance::Experimental => "EXPERIMENTAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SIMULATED" => Some(Provenance::Simulated),
            "PSEUDO_EXPERIMENTAL" => Some(Provenance::PseudoExperimental),
            "EXPERIMENTAL" => Some(Provenance::Experimental),
            _ => None,
        }
    }
}

/// One (composition, flux grid, concentration curves, noise scales) record;
/// the unit of every dataset in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub id: String,
    pub composition: MixtureComposition,
    /// Ascending, starting at 0 (m/s).
    pub fluxes: Vec<f64>,
    /// Permeate concentrations, #fluxes x N_IONS; absent ions are zero and
    /// masked by the composition.
    pub conc: Vec<Vec<f64>>,
    /// Gaussian noise scales, same shape.
    pub sigma: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Default noise policy: 2% relative plus a small absolute floor tied to the
/// sample's largest mean.
pub fn default_sigma(conc: &[Vec<f64>], mask: &[bool]) -> Vec<Vec<f64>> {
    let peak = conc
        .iter()
        .flat_map(|row| row.iter())
        .cloned()
        .fold(0.0, f64::max);
    conc.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, mu)| {
                    if mask[j] {
                        0.02 * mu + 0.01 * peak
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Draw noisy targets for one sample: target_ij ~ N(mu_ij, sigma_ij^2), from a
/// counter-based stream keyed (seed, sample id, epoch, i, j). A fresh epoch
/// re-draws every entry; negatives clamp to zero and are counted.
pub fn sample_noisy_targets(
    sample: &RolloutSample,
    seed: u64,
    epoch: u64,
) -> (Vec<Vec<f64>>, usize) {
    let id_key = fnv1a(sample.id.as_bytes());
    let mut clamped = 0usize;
    let targets = sample
        .conc
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, mu)| {
                    if !sample.composition.mask[j] {
                        return 0.0;
                    }
                    let sigma = sample.sigma[i][j];
                    if sigma == 0.0 {
                        return *mu;
                    }
                    let g = crate::rng::keyed_normal(
                        seed,
                        &[id_key, epoch, i as u64, j as u64],
                    );
                    let v = mu + sigma * g;
                    if v < 0.0 {
                        clamped += 1;
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    (targets, clamped)
}

/// Split whole samples (never flux rows) into parts with the given fractions.
pub fn split(
    samples: &[RolloutSample],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<RolloutSample>>, DataError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(total));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::from_key(seed, &[fnv1a(b"split")]).shuffle(&mut order);
    let n = samples.len();
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Rounding drift lands in the largest side.
    if assigned != n {
        let widest = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| **c)
            .map(|(i, _)| i)
            .unwrap();
        let adjusted = counts[widest] as i64 + n as i64 - assigned as i64;
        if adjusted <= 0 {
            return Err(DataError::DegenerateSplit {
                n,
                fractions: fractions.to_vec(),
            });
        }
        counts[widest] = adjusted as usize;
    }
    if counts.iter().any(|c| *c == 0) {
        return Err(DataError::DegenerateSplit {
            n,
            fractions: fractions.to_vec(),
        });
    }
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for c in counts {
        let part: Vec<RolloutSample> = order[cursor..cursor + c]
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        cursor += c;
        out.push(part);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset CSV schema (bit-exact)
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str =
    "sample_id,provenance,ion,valence,c_feed_mol_m3,J_v_m_per_s,c_perm_mol_m3,sigma_mol_m3";

/// Shortest round-trip decimal form; parsing the field recovers the exact f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Serialize samples in lexicographic sample order, vocabulary ion order,
/// ascending flux. Absent ions keep their rows with empty value fields.
pub fn write_csv(samples: &[RolloutSample]) -> String {
    let mut sorted: Vec<&RolloutSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in sorted {
        for j in 0..N_IONS {
            for (i, jv) in s.fluxes.iter().enumerate() {
                let present = s.composition.mask[j];
                let feed = if present {
                    fmt_f64(s.composition.feed[j])
                } else {
                    String::new()
                };
                let perm = if present {
                    fmt_f64(s.conc[i][j])
                } else {
                    String::new()
                };
                let sig = if present {
                    fmt_f64(s.sigma[i][j])
                } else {
                    String::new()
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    s.id,
                    s.provenance.as_str(),
                    ION_NAMES[j],
                    VALENCES[j],
                    feed,
                    fmt_f64(*jv),
                    perm,
                    sig
                );
            }
        }
    }
    out
}

pub fn write_csv_file(samples: &[RolloutSample], path: &Path) -> Result<(), DataError> {
    std::fs::write(path, write_csv(samples))?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub warnings: Vec<String>,
}

/// Parse and validate a dataset CSV. Feed electroneutrality and ascending flux
/// are enforced; descending flux rows are reordered with a warning.
pub fn read_csv(text: &str) -> Result<(Vec<RolloutSample>, IngestReport), DataError> {
    let mut report = IngestReport::default();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Csv {
        line: 1,
        msg: "empty file".into(),
    })?;
    if header.trim() != CSV_HEADER {
        return Err(DataError::Csv {
            line: 1,
            msg: format!("bad header, expected '{CSV_HEADER}'"),
        });
    }

    struct Row {
        line: usize,
        provenance: Provenance,
        ion: usize,
        feed: Option<f64>,
        jv: f64,
        perm: Option<f64>,
        sigma: Option<f64>,
    }
    let mut by_sample: BTreeMap<String, Vec<Row>> = BTreeMap::new();

    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 8 {
            return Err(DataError::Csv {
                line,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_opt = |s: &str, what: &str| -> Result<Option<f64>, DataError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| DataError::Csv {
                    line,
                    msg: format!("bad {what} '{s}'"),
                })
            }
        };
        let provenance = Provenance::parse(fields[1]).ok_or_else(|| DataError::Csv {
            line,
            msg: format!("unknown provenance '{}'", fields[1]),
        })?;
        let ion = ion_index(fields[2]).ok_or_else(|| DataError::Csv {
            line,
            msg: format!("unknown ion '{}'", fields[2]),
        })?;
        let valence: i32 = fields[3].parse().map_err(|_| DataError::Csv {
            line,
            msg: format!("bad valence '{}'", fields[3]),
        })?;
        if valence != VALENCES[ion] {
            return Err(DataError::Csv {
                line,
                msg: format!(
                    "valence {valence} does not match vocabulary value {} for {}",
                    VALENCES[ion], ION_NAMES[ion]
                ),
            });
        }
        let jv = fields[5].parse::<f64>().map_err(|_| DataError::Csv {
            line,
            msg: format!("bad flux '{}'", fields[5]),
        })?;
        by_sample.entry(fields[0].to_string()).or_default().push(Row {
            line,
            provenance,
            ion,
            feed: parse_opt(fields[4], "feed concentration")?,
            jv,
            perm: parse_opt(fields[6], "permeate concentration")?,
            sigma: parse_opt(fields[7], "sigma")?,
        });
    }

    let mut samples = Vec::new();
    for (id, rows) in by_sample {
        let sample_err = |msg: String| DataError::Sample { id: id.clone(), msg };
        let provenance = rows[0].provenance;
        if rows.iter().any(|r| r.provenance != provenance) {
            return Err(sample_err("mixed provenance".into()));
        }
        // Flux grid: order of first ion's rows as written.
        let first_ion = rows[0].ion;
        let mut fluxes: Vec<f64> = rows.iter().filter(|r| r.ion == first_ion).map(|r| r.jv).collect();
        let k = fluxes.len();
        if k == 0 {
            return Err(sample_err("no flux rows".into()));
        }
        let descending = fluxes.windows(2).all(|w| w[0] > w[1]) && k > 1;
        if descending {
            report
                .warnings
                .push(format!("sample '{id}': descending flux rows reordered"));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| fluxes[a].partial_cmp(&fluxes[b]).unwrap());
        if fluxes.iter().any(|f| !f.is_finite()) {
            return Err(sample_err("non-finite flux".into()));
        }

        let mut feed = vec![0.0; N_IONS];
        let mut mask = vec![false; N_IONS];
        let mut conc = vec![vec![0.0; N_IONS]; k];
        let mut sigma = vec![vec![0.0; N_IONS]; k];
        for j in 0..N_IONS {
            let ion_rows: Vec<&Row> = rows.iter().filter(|r| r.ion == j).collect();
            if ion_rows.is_empty() {
                continue;
            }
            if ion_rows.len() != k {
                return Err(sample_err(format!(
                    "ion {} has {} flux rows, expected {k}",
                    ION_NAMES[j],
                    ion_rows.len()
                )));
            }
            let present = ion_rows.iter().any(|r| r.feed.is_some());
            if !present {
                continue;
            }
            mask[j] = true;
            let f0 = ion_rows[0].feed.ok_or_else(|| {
                sample_err(format!("ion {} missing feed concentration", ION_NAMES[j]))
            })?;
            for r in &ion_rows {
                match r.feed {
                    Some(f) if f == f0 => {}
                    _ => {
                        return Err(DataError::Csv {
                            line: r.line,
                            msg: format!(
                                "feed concentration must be constant per (sample, ion), saw {:?} vs {f0}",
                                r.feed
                            ),
                        })
                    }
                }
            }
            feed[j] = f0;
            for (pos, &oi) in order.iter().enumerate() {
                let r = ion_rows[oi];
                conc[pos][j] = r
                    .perm
                    .ok_or_else(|| sample_err(format!("ion {} missing permeate value", ION_NAMES[j])))?;
                let s = r.sigma.unwrap_or(0.0);
                if s < 0.0 {
                    return Err(DataError::Csv {
                        line: r.line,
                        msg: "sigma must be non-negative".into(),
                    });
                }
                sigma[pos][j] = s;
            }
        }
        let mut sorted_fluxes: Vec<f64> = Vec::with_capacity(k);
        for &oi in &order {
            sorted_fluxes.push(fluxes[oi]);
        }
        if sorted_fluxes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(sample_err("duplicate flux values".into()));
        }
        fluxes = sorted_fluxes;

        let composition = validate_composition(&feed)
            .map_err(|e| sample_err(format!("invalid feed: {e}")))?;
        samples.push(RolloutSample {
            id,
            composition,
            fluxes,
            conc,
            sigma,
            provenance,
        });
    }
    Ok((samples, report))
}

pub fn read_csv_file(path: &Path) -> Result<(Vec<RolloutSample>, IngestReport), DataError> {
    let text = std::fs::read_to_string(path)?;
    read_csv(&text)
}

// ---------------------------------------------------------------------------
// Synthetic composition sampling (benchmark stand-in for the unavailable
// experimental corpus: 2-5 ion electroneutral mixtures, log-uniform 1-100
// mol/m^3, anions rescaled for exact charge balance).
// ---------------------------------------------------------------------------

pub fn sample_composition(rng: &mut Rng) -> MixtureComposition {
    loop {
        let n_species = 2 + rng.usize_below(4);
        let cations: Vec<usize> = (0..5).collect();
        let anions: Vec<usize> = (5..8).collect();
        let mut chosen = vec![false; N_IONS];
        chosen[cations[rng.usize_below(5)]] = true;
        chosen[anions[rng.usize_below(3)]] = true;
        while chosen.iter().filter(|c| **c).count() < n_species {
            chosen[rng.usize_below(N_IONS)] = true;
        }
        let mut feed = vec![0.0; N_IONS];
        for (j, sel) in chosen.iter().enumerate() {
            if *sel {
                feed[j] = 10f64.powf(rng.uniform_in(0.0, 2.0));
            }
        }
        let pos: f64 = feed
            .iter()
            .zip(VALENCES.iter())
            .filter(|(_, z)| **z > 0)
            .map(|(c, z)| *z as f64 * c)
            .sum();
        let neg: f64 = feed
            .iter()
            .zip(VALENCES.iter())
            .filter(|(_, z)| **z < 0)
            .map(|(c, z)| -*z as f64 * c)
            .sum();
        let factor = pos / neg;
        for (j, z) in VALENCES.iter().enumerate() {
            if *z < 0 {
                feed[j] *= factor;
            }
        }
        if let Ok(comp) = validate_composition(&feed) {
            return comp;
        }
    }
}

pub fn sample_compositions(n: usize, seed: u64) -> Vec<MixtureComposition> {
    let mut rng = Rng::from_key(seed, &[fnv1a(b"compositions")]);
    (0..n).map(|_| sample_composition(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(id: &str) -> RolloutSample {
        let mut feed = vec![0.0; N_IONS];
        feed[0] = 10.0; // Na+
        feed[5] = 10.0; // Cl-
        let composition = validate_composition(&feed).unwrap();
        let fluxes = vec![0.0, 1e-5, 2e-5];
        let conc = vec![
            feed.clone(),
            {
                let mut r = vec![0.0; N_IONS];
                r[0] = 8.0;
                r[5] = 8.0;
                r
            },
            {
                let mut r = vec![0.0; N_IONS];
                r[0] = 7.0;
                r[5] = 7.0;
                r
            },
        ];
        let sigma = default_sigma(&conc, &composition.mask);
        RolloutSample {
            id: id.into(),
            composition,
            fluxes,
            conc,
            sigma,
            provenance: Provenance::Simulated,
        }
    }

    #[test]
    fn nacl_composition_valid() {
        let mut c = vec![0.0; N_IONS];
        c[0] = 10.0;
        c[5] = 10.0;
        assert!(validate_composition(&c).is_ok());
    }

    #[test]
    fn mgcl2_composition_valid() {
        let mut c = vec![0.0; N_IONS];
        c[3] = 5.0; // Mg2+
        c[5] = 10.0; // Cl-
        let comp = validate_composition(&c).unwrap();
        assert_eq!(comp.present_count(), 2);
    }

    #[test]
    fn sodium_sulfate_imbalance_reports_residual() {
        let mut c = vec![0.0; N_IONS];
        c[0] = 10.0; // Na+ (+10)
        c[6] = 10.0; // SO4-2 (-20)
        match validate_composition(&c) {
            Err(DataError::Electroneutrality { residual, .. }) => {
                assert!((residual + 10.0).abs() < 1e-12)
            }
            other => panic!("expected electroneutrality error, got {other:?}"),
        }
    }

    #[test]
    fn missing_counter_ion_rejected() {
        let c = vec![0.0; N_IONS];
        assert!(matches!(
            validate_composition(&c),
            Err(DataError::MissingCounterIon)
        ));
    }

    #[test]
    fn noisy_targets_sigma_zero_exact() {
        let mut s = toy_sample("a");
        for row in s.sigma.iter_mut() {
            for v in row.iter_mut() {
                *v = 0.0;
            }
        }
        let (t, clamped) = sample_noisy_targets(&s, 1, 0);
        assert_eq!(t, s.conc);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn noisy_targets_deterministic_per_epoch() {
        let s = toy_sample("a");
        let (t1, _) = sample_noisy_targets(&s, 42, 3);
        let (t2, _) = sample_noisy_targets(&s, 42, 3);
        assert_eq!(t1, t2);
        let (t3, _) = sample_noisy_targets(&s, 42, 4);
        assert_ne!(t1, t3);
    }

    #[test]
    fn noisy_targets_statistics() {
        // 1e5 draws at sigma = 1 around mu = 50: mean within 0.01 of mu,
        // std within 0.01 of 1.
        let mut s = toy_sample("stats");
        s.fluxes = vec![0.0];
        s.conc = vec![{
            let mut r = vec![0.0; N_IONS];
            r[0] = 50.0;
            r[5] = 50.0;
            r
        }];
        s.sigma = vec![{
            let mut r = vec![0.0; N_IONS];
            r[0] = 1.0;
            r[5] = 1.0;
            r
        }];
        let n = 100_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for epoch in 0..n {
            let (t, _) = sample_noisy_targets(&s, 7, epoch);
            let x = t[0][0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!((mean - 50.0).abs() < 0.01, "mean {mean}");
        assert!((std - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn noisy_targets_clamp_negatives() {
        let mut s = toy_sample("clamp");
        s.fluxes = vec![0.0];
        s.conc = vec![{
            let mut r = vec![0.0; N_IONS];
            r[0] = 0.001;
            r[5] = 0.001;
            r
        }];
        s.sigma = vec![{
            let mut r = vec![0.0; N_IONS];
            r[0] = 10.0;
            r[5] = 10.0;
            r
        }];
        let mut total_clamped = 0;
        for epoch in 0..100 {
            let (t, clamped) = sample_noisy_targets(&s, 1, epoch);
            total_clamped += clamped;
            assert!(t.iter().flatten().all(|v| *v >= 0.0));
        }
        assert!(total_clamped > 0);
    }

    #[test]
    fn split_80_20() {
        let samples: Vec<RolloutSample> = (0..10).map(|i| toy_sample(&format!("s{i}"))).collect();
        let parts = split(&samples, &[0.8, 0.2], 0).unwrap();
        assert_eq!(parts[0].len(), 8);
        assert_eq!(parts[1].len(), 2);
        // No id on both sides.
        for a in &parts[0] {
            assert!(parts[1].iter().all(|b| b.id != a.id));
        }
        // Same seed, same partition.
        let parts2 = split(&samples, &[0.8, 0.2], 0).unwrap();
        let ids = |p: &[RolloutSample]| p.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&parts[0]), ids(&parts2[0]));
    }

    #[test]
    fn split_degenerate_errors() {
        let samples: Vec<RolloutSample> = (0..3).map(|i| toy_sample(&format!("s{i}"))).collect();
        assert!(matches!(
            split(&samples, &[0.99, 0.01], 0),
            Err(DataError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            split(&samples, &[0.5, 0.2], 0),
            Err(DataError::BadFractions(_))
        ));
    }

    #[test]
    fn csv_round_trip_bit_identical() {
        let samples = vec![toy_sample("b"), toy_sample("a")];
        let text = write_csv(&samples);
        let (parsed, report) = read_csv(&text).unwrap();
        assert!(report.warnings.is_empty());
        assert_eq!(parsed.len(), 2);
        // Lexicographic on write; compare against sorted originals.
        assert_eq!(parsed[0], samples[1]);
        assert_eq!(parsed[1], samples[0]);
        // And the re-serialization is byte-identical.
        assert_eq!(write_csv(&parsed), text);
    }

    #[test]
    fn csv_header_canary() {
        let text = write_csv(&[toy_sample("x")]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        // Vocabulary order is a global constant: first rows are Na+.
        let first = lines.next().unwrap();
        assert!(first.starts_with("x,SIMULATED,Na+,1,"), "{first}");
        let (parsed, _) = read_csv(&text).unwrap();
        assert_eq!(parsed[0].composition.feed[0], 10.0);
        assert_eq!(parsed[0].composition.feed[5], 10.0);
    }

    #[test]
    fn csv_rejects_non_neutral_feed() {
        let mut s = toy_sample("bad");
        s.composition.feed[0] = 20.0; // breaks balance; bypasses validation
        let text = write_csv(&[s]);
        match read_csv(&text) {
            Err(DataError::Sample { id, msg }) => {
                assert_eq!(id, "bad");
                assert!(msg.contains("electroneutrality"), "{msg}");
            }
            other => panic!("expected sample error, got {other:?}"),
        }
    }

    #[test]
    fn csv_descending_flux_reordered_with_warning() {
        let s = toy_sample("d");
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        // Write rows with descending flux order per ion.
        for j in [0usize, 5] {
            for i in (0..s.fluxes.len()).rev() {
                text.push_str(&format!(
                    "d,SIMULATED,{},{},{},{},{},{}\n",
                    ION_NAMES[j],
                    VALENCES[j],
                    fmt_f64(s.composition.feed[j]),
                    fmt_f64(s.fluxes[i]),
                    fmt_f64(s.conc[i][j]),
                    fmt_f64(s.sigma[i][j]),
                ));
            }
        }
        let (parsed, report) = read_csv(&text).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("reordered"));
        assert_eq!(parsed[0].fluxes, s.fluxes);
        assert_eq!(parsed[0].conc, s.conc);
    }

    #[test]
    fn csv_error_carries_line_number() {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        text.push_str("a,SIMULATED,Na+,1,ten,0,1,0\n");
        match read_csv(&text) {
            Err(DataError::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    #[test]
    fn sampled_compositions_valid_and_deterministic() {
        let a = sample_compositions(50, 9);
        let b = sample_compositions(50, 9);
        assert_eq!(a, b);
        for comp in &a {
            let res = charge_residual(&comp.feed).abs();
            let scale = charge_scale(&comp.feed);
            assert!(res <= 1e-12 * scale, "residual {res} scale {scale}");
            let n = comp.present_count();
            assert!((2..=5).contains(&n));
        }
    }

    #[test]
    fn default_ion_db_sane() {
        let db = IonDb::default();
        // Stokes radius of Na+ is ~0.184 nm in standard tables.
        assert!((db.spec(0).stokes_radius - 1.84e-10).abs() < 2e-12);
        // Cl- diffuses faster than SO4-2.
        assert!(db.spec(5).diffusivity > db.spec(6).diffusivity);
        let json = serde_json::to_string(&db).unwrap();
        let db2 = IonDb::from_json(&json).unwrap();
        assert_eq!(db2.spec(3).valence, 2);
    }

    #[test]
    fn ion_db_rejects_reordered_vocabulary() {
        let mut db = IonDb::default();
        db.ions.swap(0, 1);
        let json = serde_json::to_string(&db).unwrap();
        assert!(IonDb::from_json(&json).is_err());
    }
}
