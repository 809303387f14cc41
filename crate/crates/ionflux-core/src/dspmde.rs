//! Simplified Donnan-steric pore model: steady-state extended Nernst-Planck
//! transport across a charged nanopore with steric and Donnan partitioning at
//! both interfaces. This is the PDE-based reference model and the source of
//! simulated pre-training data.
//!
//! Dielectric (Born) exclusion is deliberately omitted; the retained physics
//! is valence, ionic size, fixed membrane charge, and the electromigration
//! coupling that produces negative rejection.
//!
//! Per ion j, with hindered diffusivity K_d D and convective factor K_c, the
//! solute flux through the pore must equal what leaves with the permeate:
//!
//! ```text
//! J_v c_p,j = -K_d,j D_j dc_j/dx - z_j c_j K_d,j D_j (F/RT) dpsi/dx + K_c,j c_j J_v
//! ```
//!
//! dpsi/dx is eliminated at every position through in-pore electroneutrality
//! (sum z_j c_j + X_d = 0), the entrance and exit carry Donnan-steric
//! partitioning, and an outer Newton iteration closes the loop on the unknown
//! permeate concentrations.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{IonDb, MixtureComposition, Provenance, RolloutSample, N_IONS};

pub const FARADAY: f64 = 96485.33212;
pub const GAS_CONSTANT: f64 = 8.31446261815324;
pub const TEMPERATURE: f64 = 298.15;

#[derive(Debug, Error)]
pub enum DspmdeError {
    #[error("membrane parameters must be positive (r_p {pore_radius}, dx {thickness})")]
    BadMembrane { pore_radius: f64, thickness: f64 },
    #[error("solve requires J_v >= 0, got {0}")]
    NegativeFlux(f64),
    #[error("no transportable ions (all present species sterically excluded)")]
    NothingTransportable,
    #[error("Donnan potential solve failed to converge ({context})")]
    DonnanDiverged { context: &'static str },
    #[error("outer iteration failed to converge after {iterations} steps, residual {residual}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("converged solution has negative concentration for ion {ion}")]
    NegativeSolution { ion: usize },
    #[error("singular ionic strength inside pore (all concentrations vanished)")]
    SingularPotential,
    #[error("iterate produced a non-physical pore profile")]
    NonPhysicalIterate,
}

/// Pore geometry and fixed charge.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MembraneParams {
    /// Pore radius, m.
    pub pore_radius: f64,
    /// Effective membrane thickness, m.
    pub thickness: f64,
    /// Volumetric membrane charge, mol/m^3, signed.
    pub charge_density: f64,
}

impl MembraneParams {
    /// NF270-class defaults; representative, not fitted.
    pub fn nf_default() -> Self {
        MembraneParams {
            pore_radius: 0.43e-9,
            thickness: 1.0e-6,
            charge_density: -100.0,
        }
    }
}

/// Polynomial closures for hindered transport, swappable via config.
/// `kd` are coefficients of K_d(lambda) in ascending powers; `kc_inner`
/// likewise for the bracket of K_c = (2 - phi) * poly(lambda).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HindranceCoeffs {
    pub kd: Vec<f64>,
    pub kc_inner: Vec<f64>,
}

impl Default for HindranceCoeffs {
    fn default() -> Self {
        // K_d: centerline hydrodynamic fit, monotone decreasing on [0, 0.95].
        // K_c: (2 - phi)(1 + 0.054 l - 0.988 l^2 + 0.441 l^3), the standard
        // convective fit from the hindered-transport literature.
        HindranceCoeffs {
            kd: vec![1.0, -2.104, 0.0, 2.09, 0.0, -0.95],
            kc_inner: vec![1.0, 0.054, -0.988, 0.441],
        }
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Steric partition and hindrance factors for lambda = r_ion / r_pore.
/// lambda >= 1 means full steric exclusion: phi = 0 and the species never
/// enters the pore (handled by the solver, not an error).
pub fn hindrance_factors(lambda: f64, coeffs: &HindranceCoeffs) -> (f64, f64, f64) {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    if lambda >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let phi = (1.0 - lambda) * (1.0 - lambda);
    let kd = poly(&coeffs.kd, lambda);
    let kc = (2.0 - phi) * poly(&coeffs.kc_inner, lambda);
    (kd, kc, phi)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub n_slices: usize,
    /// Relative residual target for the outer iteration.
    pub tolerance: f64,
    pub max_outer: usize,
    /// Partition-row residual bound at which a stalled iteration is still
    /// accepted. Deep steric/Donnan boundary layers make the exit-partition
    /// Jacobian nearly rank-deficient, flooring the reachable residual well
    /// above `tolerance` in f64. Electroneutrality is never relaxed: a stall
    /// is accepted only while the charge-balance row sits below
    /// `electro_tolerance`. Achieved residuals are reported per solve.
    pub accept_tolerance: f64,
    pub electro_tolerance: f64,
    /// Step shrink factor when a Newton update drives a permeate
    /// concentration negative.
    pub damping: f64,
    pub hindrance: HindranceCoeffs,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_slices: 100,
            tolerance: 1e-9,
            max_outer: 40,
            damping: 0.5,
            accept_tolerance: 1e-5,
            electro_tolerance: 1e-9,
            hindrance: HindranceCoeffs::default(),
        }
    }
}

/// Converged pore solution on the slice grid.
#[derive(Debug, Clone)]
pub struct PoreSolution {
    /// n_slices + 1 positions across the membrane, m.
    pub grid: Vec<f64>,
    /// Concentration profile, (n_slices + 1) x N_IONS, mol/m^3.
    pub conc: Vec<Vec<f64>>,
    /// Electric potential inside the pore relative to the feed, V.
    pub potential: Vec<f64>,
    /// Permeate concentrations, mol/m^3.
    pub permeate: Vec<f64>,
    /// Donnan jumps (pore minus adjacent bulk), V.
    pub donnan_in: f64,
    pub donnan_out: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl PoreSolution {
    pub fn rejections(&self, comp: &MixtureComposition) -> Vec<f64> {
        (0..N_IONS)
            .map(|j| {
                if comp.mask[j] {
                    1.0 - self.permeate[j] / comp.feed[j]
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

struct Species {
    idx: usize,
    z: f64,
    kd_d: f64, // K_d * D
    kc: f64,
    phi: f64,
    feed: f64,
}

/// Newton with bisection fallback for a strictly monotone scalar function.
fn solve_monotone<F, G>(
    f: F,
    df: G,
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    context: &'static str,
) -> Result<f64, DspmdeError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(DspmdeError::DonnanDiverged { context });
    }
    let increasing = fhi > flo;
    let mut x = x0.clamp(lo, hi);
    for _ in 0..200 {
        let fx = f(x);
        if !fx.is_finite() {
            return Err(DspmdeError::DonnanDiverged { context });
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if (increasing && fx > 0.0) || (!increasing && fx < 0.0) {
            hi = x;
        } else {
            lo = x;
        }
        let d = df(x);
        if d != 0.0 {
            let step = fx / d;
            if step.is_finite() && step.abs() <= 1e-15 * (1.0 + x.abs()) {
                return Ok(x - step);
            }
            let newton = x - step;
            if newton.is_finite() && newton >= lo && newton <= hi {
                x = newton;
            } else {
                x = 0.5 * (lo + hi);
            }
        } else {
            x = 0.5 * (lo + hi);
        }
        if (hi - lo).abs() <= 1e-15 * (1.0 + x.abs()) {
            return Ok(x);
        }
    }
    Ok(x)
}

fn donnan_entrance(species: &[Species], x_d: f64) -> Result<f64, DspmdeError> {
    // g(u) = sum z phi c_f exp(-z u) + X_d, strictly decreasing in u.
    let g = |u: f64| -> f64 {
        species
            .iter()
            .map(|s| s.z * s.phi * s.feed * (-s.z * u).exp())
            .sum::<f64>()
            + x_d
    };
    let dg = |u: f64| -> f64 {
        species
            .iter()
            .map(|s| -s.z * s.z * s.phi * s.feed * (-s.z * u).exp())
            .sum()
    };
    solve_monotone(g, dg, -60.0, 60.0, 0.0, "entrance")
}

/// Exit Donnan potential from solved wall concentrations via permeate
/// electroneutrality; valid once the profile is physical (non-negative).
fn donnan_exit(species: &[Species], c_wall: &[f64], u0: f64) -> Result<f64, DspmdeError> {
    // h(u) = sum z (c_L / phi) exp(z u), strictly increasing in u.
    let h = |u: f64| -> f64 {
        species
            .iter()
            .zip(c_wall)
            .map(|(s, c)| s.z * (c / s.phi) * (s.z * u).exp())
            .sum()
    };
    let dh = |u: f64| -> f64 {
        species
            .iter()
            .zip(c_wall)
            .map(|(s, c)| s.z * s.z * (c / s.phi) * (s.z * u).exp())
            .sum()
    };
    solve_monotone(h, dh, -60.0, 60.0, u0, "exit")
}

/// (e^x - 1) / x, stable near zero.
fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// Advance one ion across one slice with frozen coefficients. The per-ion
/// flux balance dc/dx = gamma c - beta (gamma = K_c J/K_dD - z du/h,
/// beta = J c_p / K_dD) is linear, so the slice update is exact:
/// c(h) = c e^{gamma h} - beta h phi1(gamma h). Multiplicative structure keeps
/// relative accuracy for exponentially small concentrations, which additive
/// RK stepping loses to cancellation.
fn slice_step(c: f64, alpha: f64, beta: f64, z: f64, du: f64, h: f64) -> f64 {
    let gh = alpha * h - z * du;
    c * gh.exp() - beta * h * phi1(gh)
}

/// March the coupled profile across the pore. Every slice solves a scalar
/// Donnan-like problem: the potential step `du` over the slice is chosen so
/// that the end-of-slice concentrations satisfy in-pore electroneutrality
/// exactly. Returns wall concentrations, the accumulated potential drop, and
/// the number of slices where the neutrality solve lost its bracket (possible
/// only at unphysical Newton probe points, where the slice falls back to the
/// previous potential step so the march still completes).
fn march(
    species: &[Species],
    c0: &[f64],
    c_p: &[f64],
    jv: f64,
    thickness: f64,
    n: usize,
    x_d: f64,
    mut record: Option<&mut Vec<(Vec<f64>, f64)>>,
) -> Result<(Vec<f64>, f64, usize), DspmdeError> {
    let h = thickness / n as f64;
    let m = species.len();
    let alphas: Vec<f64> = species.iter().map(|s| s.kc * jv / s.kd_d).collect();
    let betas: Vec<f64> = species
        .iter()
        .zip(c_p)
        .map(|(s, cp)| jv * cp / s.kd_d)
        .collect();
    let mut c = c0.to_vec();
    let mut u = 0.0f64;
    let mut du_guess = 0.0f64;
    let mut fallbacks = 0usize;
    if let Some(rec) = record.as_deref_mut() {
        rec.push((c.clone(), u));
    }
    for _ in 0..n {
        let net = |du: f64| -> f64 {
            let mut acc = x_d;
            for i in 0..m {
                acc += species[i].z * slice_step(c[i], alphas[i], betas[i], species[i].z, du, h);
            }
            acc
        };
        let dnet = |du: f64| -> f64 {
            // d/d(du) of z * c e^{alpha h - z du} dominates; the beta phi1 term
            // is carried for Newton quality.
            let mut acc = 0.0;
            for i in 0..m {
                let s = &species[i];
                let gh = alphas[i] * h - s.z * du;
                let d_exp = -s.z * s.z * c[i] * gh.exp();
                let dphi = if gh.abs() < 1e-8 {
                    0.5
                } else {
                    (gh.exp() * (gh - 1.0) + 1.0) / (gh * gh)
                };
                let d_beta = s.z * s.z * betas[i] * h * dphi;
                acc += d_exp + d_beta;
            }
            acc
        };
        let du = match solve_monotone(net, dnet, -60.0, 60.0, du_guess, "slice") {
            Ok(du) => du,
            Err(_) => {
                fallbacks += 1;
                du_guess
            }
        };
        du_guess = du;
        for i in 0..m {
            c[i] = slice_step(c[i], alphas[i], betas[i], species[i].z, du, h);
        }
        u += du;
        if !u.is_finite() || c.iter().any(|x| !x.is_finite()) {
            return Err(DspmdeError::SingularPotential);
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push((c.clone(), u));
        }
    }
    Ok((c, u, fallbacks))
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Solve one (composition, flux) point. `initial_permeate` warm-starts the
/// outer iteration (pass the previous flux's solution when sweeping).
///
/// If the Newton solve stalls at the target flux, the solver falls back to
/// continuation: it walks up from J_v = 0 (where permeate = feed exactly) in
/// progressively finer flux increments, warm-starting each solve.
pub fn solve(
    comp: &MixtureComposition,
    jv: f64,
    membrane: &MembraneParams,
    cfg: &SolverConfig,
    db: &IonDb,
    initial_permeate: Option<&[f64]>,
) -> Result<PoreSolution, DspmdeError> {
    let direct = solve_inner(comp, jv, membrane, cfg, db, initial_permeate);
    if direct.is_ok() || jv == 0.0 {
        return direct;
    }
    // Adaptive continuation: walk the flux up from zero (where permeate = feed
    // exactly), warm-starting every solve, halving the increment on failure
    // and growing it again on success. Strong-exclusion mixtures have a thin
    // low-flux boundary layer that uniform increments cannot resolve.
    let mut last_err = direct.err().unwrap();
    let mut j_cur = 0.0f64;
    let mut warm: Option<Vec<f64>> = None;
    let mut dj = jv / 8.0;
    let min_dj = jv * 1e-6;
    for _ in 0..60 {
        let j_try = (j_cur + dj).min(jv);
        let attempt = solve_inner(comp, j_try, membrane, cfg, db, warm.as_deref());
        if std::env::var("IONFLUX_TRACE").is_ok() {
            eprintln!("CONT j_try {j_try:.6e} dj {dj:.3e} -> {:?}", attempt.as_ref().map(|s| s.iterations).map_err(|e| e.to_string()));
        }
        match attempt {
            Ok(sol) => {
                if j_try >= jv {
                    return Ok(sol);
                }
                j_cur = j_try;
                warm = Some(sol.permeate);
                dj = (dj * 2.0).min(jv / 4.0);
            }
            Err(e) => {
                last_err = e;
                dj *= 0.5;
                if dj < min_dj {
                    return Err(last_err);
                }
            }
        }
    }
    Err(last_err)
}

fn solve_inner(
    comp: &MixtureComposition,
    jv: f64,
    membrane: &MembraneParams,
    cfg: &SolverConfig,
    db: &IonDb,
    initial_permeate: Option<&[f64]>,
) -> Result<PoreSolution, DspmdeError> {
    if membrane.pore_radius <= 0.0 || membrane.thickness <= 0.0 {
        return Err(DspmdeError::BadMembrane {
            pore_radius: membrane.pore_radius,
            thickness: membrane.thickness,
        });
    }
    if jv < 0.0 {
        return Err(DspmdeError::NegativeFlux(jv));
    }

    // Transportable species: present and not sterically excluded.
    let mut species = Vec::new();
    for j in 0..N_IONS {
        if !comp.mask[j] {
            continue;
        }
        let spec = db.spec(j);
        let lambda = spec.stokes_radius / membrane.pore_radius;
        let (kd, kc, phi) = hindrance_factors(lambda, &cfg.hindrance);
        if phi == 0.0 {
            continue; // fully excluded; permeate concentration is zero
        }
        species.push(Species {
            idx: j,
            z: spec.valence as f64,
            kd_d: kd * spec.diffusivity,
            kc,
            phi,
            feed: comp.feed[j],
        });
    }
    if species.is_empty() {
        return Err(DspmdeError::NothingTransportable);
    }
    let m = species.len();
    let x_d = membrane.charge_density;
    let feed_peak = comp.max_feed();
    // Residuals are relative (see below), so the tolerance applies directly.
    let tol_abs = cfg.tolerance;

    // Entrance Donnan potential and pore-side boundary concentrations follow
    // from the permeate-independent feed partition.
    let u_in = donnan_entrance(&species, x_d)?;
    let c0: Vec<f64> = species
        .iter()
        .map(|s| s.phi * s.feed * (-s.z * u_in).exp())
        .collect();

    // Outer unknowns: log permeate concentrations (positivity built in) plus
    // the exit Donnan potential. Residuals are scale-free: per ion the LOG of
    // the exit-partition ratio (so a wall concentration heading to zero reads
    // as a diverging residual rather than a flat basin Newton could stall in),
    // and the charge imbalance normalized by total ionic content for the
    // potential row. Iterates whose march turns non-physical are rejected.
    let residual = |x: &[f64]| -> Result<Vec<f64>, DspmdeError> {
        let c_p: Vec<f64> = x[..m].iter().map(|y| y.exp()).collect();
        let u_ex = x[m];
        let (c_wall, _, fallbacks) = march(
            &species,
            &c0,
            &c_p,
            jv,
            membrane.thickness,
            cfg.n_slices,
            x_d,
            None,
        )?;
        if fallbacks > 0 {
            return Err(DspmdeError::NonPhysicalIterate);
        }
        let mut res = Vec::with_capacity(m + 1);
        for (i, (s, cw)) in species.iter().zip(&c_wall).enumerate() {
            let ratio = cw / (s.phi * c_p[i]);
            if !(ratio > 0.0) {
                return Err(DspmdeError::NonPhysicalIterate);
            }
            res.push(ratio.ln() + s.z * u_ex);
        }
        let net: f64 = species.iter().zip(&c_p).map(|(s, cp)| s.z * cp).sum();
        let scale: f64 = species
            .iter()
            .zip(&c_p)
            .map(|(s, cp)| s.z.abs() * cp)
            .sum();
        res.push(net / scale.max(1e-300));
        Ok(res)
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // Line-search acceptance uses the 2-norm: the Newton direction descends it
    // to first order, which is not true of the max norm.
    let norm2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

    let floor = 1e-12 * feed_peak.max(1e-30);
    let mut x: Vec<f64> = match initial_permeate {
        Some(p) => species.iter().map(|s| p[s.idx].max(floor).ln()).collect(),
        None => species.iter().map(|s| s.feed.ln()).collect(),
    };
    x.push(u_in);
    let dim = m + 1;
    let mut iterations = 0usize;
    // The guess may overestimate permeate concentrations enough that the
    // march goes non-physical (the beta sink scales with c_p). Halving every
    // permeate guess preserves its charge balance and always reaches
    // feasibility, since the march is positivity-preserving as c_p -> 0.
    let mut res = {
        let mut restore = 0;
        loop {
            match residual(&x) {
                Ok(r) => break r,
                Err(e) => {
                    restore += 1;
                    if restore > 200 {
                        return Err(e);
                    }
                    for y in x[..m].iter_mut() {
                        *y -= std::f64::consts::LN_2;
                    }
                }
            }
        }
    };
    let mut res_norm = norm(&res);
    let mut best_norm = f64::INFINITY;
    let mut slow_iters = 0usize;

    while res_norm > tol_abs {
        if iterations >= cfg.max_outer {
            if res_norm <= cfg.accept_tolerance && res[m].abs() <= cfg.electro_tolerance {
                break;
            }
            return Err(DspmdeError::NotConverged {
                iterations,
                residual: res_norm,
            });
        }
        iterations += 1;
        // Central-difference Jacobian; systems are at most 9x9 and the extra
        // marches are cheap, while the O(delta^2) truncation keeps the Newton
        // floor well below the residual tolerance. A probe that falls off the
        // physical manifold degrades to a one-sided difference.
        let mut jac = vec![vec![0.0; dim]; dim];
        for col in 0..dim {
            let delta = 1e-6 * (1.0 + x[col].abs());
            let mut hi_x = x.clone();
            hi_x[col] += delta;
            let mut lo_x = x.clone();
            lo_x[col] -= delta;
            let (res_hi, res_lo) = (residual(&hi_x), residual(&lo_x));
            let (probe, base, width): (Vec<f64>, &[f64], f64) = match (res_hi, res_lo) {
                (Ok(h), Ok(l)) => {
                    for row in 0..dim {
                        jac[row][col] = (h[row] - l[row]) / (2.0 * delta);
                    }
                    continue;
                }
                (Ok(h), Err(_)) => (h, &res, delta),
                (Err(_), Ok(l)) => (l, &res, -delta),
                (Err(e), Err(_)) => return Err(e),
            };
            for row in 0..dim {
                jac[row][col] = (probe[row] - base[row]) / width;
            }
        }
        let neg_res: Vec<f64> = res.iter().map(|r| -r).collect();
        let step = gauss_solve(jac, neg_res).ok_or(DspmdeError::NotConverged {
            iterations,
            residual: res_norm,
        })?;
        // Backtracking line search on the residual norm; the damping factor is
        // the configured one.
        let mut alpha = 1.0f64;
        let mut improved = false;
        let res_norm2 = norm2(&res);
        for _ in 0..25 {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(v, s)| v + alpha * s).collect();
            // Keep log-concentrations in a representable band.
            if trial[..m].iter().all(|y| *y > -700.0 && *y < 700.0) {
                if let Ok(res_t) = residual(&trial) {
                    if norm2(&res_t) < res_norm2 {
                        x = trial;
                        res_norm = norm(&res_t);
                        res = res_t;
                        improved = true;
                        break;
                    }
                }
            }
            alpha *= cfg.damping;
        }
        // A stalled or barely-moving iteration ends the solve: accepted when
        // electroneutrality is already tight and the partition rows sit at
        // their f64 conditioning floor, an error otherwise.
        if res_norm < 0.95 * best_norm {
            best_norm = res_norm;
            slow_iters = 0;
        } else {
            slow_iters += 1;
        }
        if !improved || slow_iters >= 8 {
            let electro = res[m].abs();
            if res_norm <= cfg.accept_tolerance && electro <= cfg.electro_tolerance {
                break;
            }
            return Err(DspmdeError::NotConverged {
                iterations,
                residual: res_norm,
            });
        }
    }
    let c_p: Vec<f64> = x[..m].iter().map(|y| y.exp()).collect();
    let u_ex = x[m];

    // Final march with the profile recorded. The exit potential is refined
    // once more from the converged (now physical) wall concentrations.
    let mut profile: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cfg.n_slices + 1);
    let (c_wall, _, fallbacks) = march(
        &species,
        &c0,
        &c_p,
        jv,
        membrane.thickness,
        cfg.n_slices,
        x_d,
        Some(&mut profile),
    )?;
    if fallbacks > 0 {
        return Err(DspmdeError::NotConverged {
            iterations,
            residual: res_norm,
        });
    }
    let u_ex_final = donnan_exit(&species, &c_wall, u_ex).unwrap_or(u_ex);

    let rt_over_f = GAS_CONSTANT * TEMPERATURE / FARADAY;
    let mut conc = vec![vec![0.0; N_IONS]; cfg.n_slices + 1];
    let mut potential = vec![0.0; cfg.n_slices + 1];
    for (row, (c, u)) in profile.iter().enumerate() {
        for (i, s) in species.iter().enumerate() {
            if c[i] < 0.0 {
                return Err(DspmdeError::NegativeSolution { ion: s.idx });
            }
            conc[row][s.idx] = c[i];
        }
        potential[row] = rt_over_f * (u_in + u);
    }
    let mut permeate = vec![0.0; N_IONS];
    for (i, s) in species.iter().enumerate() {
        permeate[s.idx] = (c_wall[i] / s.phi) * (s.z * u_ex_final).exp();
    }
    let grid = (0..=cfg.n_slices)
        .map(|i| membrane.thickness * i as f64 / cfg.n_slices as f64)
        .collect();

    Ok(PoreSolution {
        grid,
        conc,
        potential,
        permeate,
        donnan_in: rt_over_f * u_in,
        donnan_out: rt_over_f * u_ex_final,
        iterations,
        residual: res_norm,
    })
}

#[derive(Debug, Default)]
pub struct GenerateReport {
    /// (composition index, error text) of failed solves, skipped with a warning.
    pub failures: Vec<(usize, String)>,
}

/// Run the pore model over every (composition, flux) pair and package the
/// results as rollout samples. Solves parallelize across compositions; output
/// order is deterministic.
pub fn generate_dataset(
    compositions: &[MixtureComposition],
    fluxes: &[f64],
    membrane: &MembraneParams,
    cfg: &SolverConfig,
    db: &IonDb,
    provenance: Provenance,
    id_prefix: &str,
) -> (Vec<RolloutSample>, GenerateReport) {
    let results: Vec<Result<RolloutSample, String>> = compositions
        .par_iter()
        .enumerate()
        .map(|(ci, comp)| {
            let mut conc = Vec::with_capacity(fluxes.len());
            let mut warm: Option<Vec<f64>> = None;
            for &jv in fluxes {
                match solve(comp, jv, membrane, cfg, db, warm.as_deref()) {
                    Ok(sol) => {
                        warm = Some(sol.permeate.clone());
                        conc.push(sol.permeate);
                    }
                    Err(e) => return Err(format!("flux {jv}: {e}")),
                }
            }
            let sigma = crate::data::default_sigma(&conc, &comp.mask);
            Ok(RolloutSample {
                id: format!("{id_prefix}{ci:04}"),
                composition: comp.clone(),
                fluxes: fluxes.to_vec(),
                conc,
                sigma,
                provenance,
            })
        })
        .collect();

    let mut samples = Vec::new();
    let mut report = GenerateReport::default();
    for (ci, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(msg) => report.failures.push((ci, msg)),
        }
    }
    (samples, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_composition, ION_NAMES, VALENCES};

    fn nacl(c: f64) -> MixtureComposition {
        let mut feed = vec![0.0; N_IONS];
        feed[0] = c;
        feed[5] = c;
        validate_composition(&feed).unwrap()
    }

    #[test]
    fn hindrance_limits() {
        let coeffs = HindranceCoeffs::default();
        let (kd, kc, phi) = hindrance_factors(0.0, &coeffs);
        assert_eq!(phi, 1.0);
        assert!((kd - 1.0).abs() < 1e-12);
        assert!((kc - 1.0).abs() < 1e-12);
        let (_, _, phi_half) = hindrance_factors(0.5, &coeffs);
        assert!((phi_half - 0.25).abs() < 1e-15);
        assert_eq!(hindrance_factors(1.0, &coeffs), (0.0, 0.0, 0.0));
        assert_eq!(hindrance_factors(1.3, &coeffs), (0.0, 0.0, 0.0));
    }

    #[test]
    fn kd_monotone_decreasing_to_095() {
        let coeffs = HindranceCoeffs::default();
        let mut prev = f64::INFINITY;
        for i in 0..=95 {
            let lambda = i as f64 / 100.0;
            let (kd, kc, _) = hindrance_factors(lambda, &coeffs);
            assert!(kd > 0.0 && kc > 0.0, "lambda {lambda}: kd {kd} kc {kc}");
            assert!(kd < prev, "K_d not decreasing at lambda {lambda}");
            prev = kd;
        }
    }

    #[test]
    fn zero_flux_zero_rejection() {
        let comp = nacl(10.0);
        let sol = solve(
            &comp,
            0.0,
            &MembraneParams::nf_default(),
            &SolverConfig::default(),
            &IonDb::default(),
            None,
        )
        .unwrap();
        for j in [0usize, 5] {
            let r = 1.0 - sol.permeate[j] / comp.feed[j];
            assert!(r.abs() < 1e-10, "ion {j} rejection {r}");
        }
    }

    /// Closed-form hindered-transport solution for an uncharged symmetric
    /// salt: c_p/c_f = K_c phi / (1 - (1 - K_c phi) exp(-Pe')) with
    /// Pe' = K_c J_v dx / (K_d D).
    fn analytic_uncharged(kc: f64, kd_d: f64, phi: f64, jv: f64, dx: f64) -> f64 {
        if jv == 0.0 {
            return 0.0;
        }
        let pe = kc * jv * dx / kd_d;
        1.0 - kc * phi / (1.0 - (1.0 - kc * phi) * (-pe).exp())
    }

    fn symmetric_db() -> IonDb {
        // Na+ and Cl- given identical size and diffusivity so the charged
        // system degenerates to a neutral solute when X_d = 0.
        let mut db = IonDb::default();
        let d = 1.5e-9;
        let r = 0.15e-9;
        for j in [0usize, 5] {
            db.ions[j].diffusivity = d;
            db.ions[j].stokes_radius = r;
        }
        db
    }

    #[test]
    fn uncharged_symmetric_salt_matches_analytic() {
        let db = symmetric_db();
        let membrane = MembraneParams {
            pore_radius: 0.43e-9,
            thickness: 1.0e-6,
            charge_density: 0.0,
        };
        let cfg = SolverConfig::default();
        let comp = nacl(10.0);
        let lambda = 0.15e-9 / 0.43e-9;
        let (kd, kc, phi) = hindrance_factors(lambda, &cfg.hindrance);
        let kd_d = kd * 1.5e-9;
        for jv in [1e-6, 5e-6, 1e-5, 3e-5, 5e-5] {
            let sol = solve(&comp, jv, &membrane, &cfg, &db, None).unwrap();
            let r_num = 1.0 - sol.permeate[0] / comp.feed[0];
            let r_ref = analytic_uncharged(kc, kd_d, phi, jv, membrane.thickness);
            let rel = (r_num - r_ref).abs() / r_ref.abs().max(1e-12);
            assert!(rel < 1e-6, "J_v {jv}: {r_num} vs {r_ref} rel {rel}");
        }
    }

    #[test]
    fn sulfate_sterically_excluded() {
        // Tight pore: SO4-2 (Stokes radius ~0.23 nm) cannot enter r_p = 0.2 nm.
        let db = IonDb::default();
        assert!(db.spec(6).stokes_radius > 0.2e-9);
        let membrane = MembraneParams {
            pore_radius: 0.2e-9,
            thickness: 1.0e-6,
            charge_density: -20.0,
        };
        let mut feed = vec![0.0; N_IONS];
        feed[0] = 12.0; // Na+
        feed[5] = 10.0; // Cl-
        feed[6] = 1.0; // SO4-2
        let comp = validate_composition(&feed).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve(&comp, 2e-5, &membrane, &cfg, &db, None).unwrap();
        assert_eq!(sol.permeate[6], 0.0, "sulfate must be fully rejected");
        let rej = sol.rejections(&comp);
        assert!((rej[6] - 1.0).abs() < 1e-15);
        // Permeate electroneutrality carried by the remaining pair.
        let res: f64 = (0..N_IONS).map(|j| VALENCES[j] as f64 * sol.permeate[j]).sum();
        let scale: f64 = (0..N_IONS)
            .map(|j| VALENCES[j].abs() as f64 * sol.permeate[j])
            .sum();
        assert!(res.abs() <= 1e-8 * scale.max(1e-30), "residual {res}");
    }

    #[test]
    fn pore_and_permeate_electroneutrality() {
        let db = IonDb::default();
        let membrane = MembraneParams::nf_default();
        let cfg = SolverConfig::default();
        let comps = crate::data::sample_compositions(12, 31);
        let mut attempted = 0usize;
        let mut converged = 0usize;
        for comp in &comps {
            for jv in [0.0, 1e-5, 4e-5] {
                attempted += 1;
                // Invariants are asserted on converged solves; mixtures with
                // extreme exclusion may legitimately fail and are skipped.
                let sol = match solve(comp, jv, &membrane, &cfg, &db, None) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                converged += 1;
                let x_d = membrane.charge_density;
                for row in &sol.conc {
                    let net: f64 = (0..N_IONS).map(|j| VALENCES[j] as f64 * row[j]).sum::<f64>() + x_d;
                    let scale: f64 = (0..N_IONS)
                        .map(|j| VALENCES[j].abs() as f64 * row[j])
                        .sum::<f64>()
                        + x_d.abs();
                    assert!(
                        net.abs() <= 1e-8 * scale,
                        "pore slice violates neutrality: {net} vs scale {scale}"
                    );
                }
                let res: f64 = (0..N_IONS).map(|j| VALENCES[j] as f64 * sol.permeate[j]).sum();
                let scale: f64 = (0..N_IONS)
                    .map(|j| VALENCES[j].abs() as f64 * sol.permeate[j])
                    .sum();
                assert!(
                    res.abs() <= 1e-8 * scale.max(1e-30),
                    "permeate residual {res} scale {scale}"
                );
            }
        }
        assert!(
            converged * 4 >= attempted * 3,
            "solver converged on only {converged}/{attempted} cases"
        );
    }

    #[test]
    fn grid_doubling_changes_little() {
        let db = IonDb::default();
        let membrane = MembraneParams::nf_default();
        let comp = nacl(20.0);
        let mut cfg = SolverConfig::default();
        let sol_100 = solve(&comp, 3e-5, &membrane, &cfg, &db, None).unwrap();
        cfg.n_slices = 200;
        let sol_200 = solve(&comp, 3e-5, &membrane, &cfg, &db, None).unwrap();
        for j in [0usize, 5] {
            let rel = (sol_100.permeate[j] - sol_200.permeate[j]).abs() / sol_200.permeate[j];
            assert!(rel < 1e-3, "ion {j} grid sensitivity {rel}");
        }
    }

    #[test]
    fn nacl_rejection_monotone_in_flux() {
        let db = IonDb::default();
        let membrane = MembraneParams::nf_default();
        let cfg = SolverConfig::default();
        let comp = nacl(10.0);
        let mut warm = None;
        let mut prev = -1.0;
        for i in 0..=10 {
            let jv = 5e-5 * i as f64 / 10.0;
            let sol = solve(&comp, jv, &membrane, &cfg, &db, warm.as_deref()).unwrap();
            warm = Some(sol.permeate.clone());
            let r = 1.0 - sol.permeate[0] / comp.feed[0];
            assert!(
                r >= prev - 1e-12,
                "rejection not non-decreasing at J_v {jv}: {r} < {prev}"
            );
            prev = r;
        }
        assert!(prev > 0.05, "default membrane should reject NaCl, got {prev}");
    }

    #[test]
    fn dataset_generation_deterministic() {
        let db = IonDb::default();
        let membrane = MembraneParams::nf_default();
        let cfg = SolverConfig::default();
        let comps = crate::data::sample_compositions(3, 5);
        let fluxes: Vec<f64> = (0..5).map(|i| 5e-5 * i as f64 / 4.0).collect();
        let (a, ra) = generate_dataset(
            &comps,
            &fluxes,
            &membrane,
            &cfg,
            &db,
            Provenance::Simulated,
            "sim-",
        );
        let (b, _) = generate_dataset(
            &comps,
            &fluxes,
            &membrane,
            &cfg,
            &db,
            Provenance::Simulated,
            "sim-",
        );
        assert!(ra.failures.is_empty(), "{:?}", ra.failures);
        assert_eq!(a, b);
        // Zero-flux row equals the feed.
        for s in &a {
            for j in 0..N_IONS {
                if s.composition.mask[j] {
                    assert!(
                        (s.conc[0][j] - s.composition.feed[j]).abs()
                            <= 1e-9 * s.composition.feed[j],
                        "ion {} at J=0: {} vs feed {}",
                        ION_NAMES[j],
                        s.conc[0][j],
                        s.composition.feed[j]
                    );
                }
            }
        }
    }
}
