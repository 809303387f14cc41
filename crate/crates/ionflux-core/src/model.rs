//! The physics-informed ODE network: masked ion tokens with learned per-ion
//! encodings feed a single attention head, the attended tokens feed a
//! five-layer MLP that outputs the concentration derivative with respect to
//! transmembrane flux, and an orthogonal projector onto the electroneutral
//! subspace keeps every trajectory charge-balanced when the constraint is
//! hard. Integration over flux uses the adaptive solver in [`crate::odeint`],
//! and gradients flow through every accepted step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, NodeId, NumArray, Tape};
use crate::data::{DataError, IonDb, MixtureComposition, RolloutSample, N_IONS, VALENCES};
use crate::nn::{
    add_positional_encoding, attention, init_bias, init_table, init_weight, mlp_forward,
    AttentionNodes, Grads, LinearNodes, NnError, ParamStore, SeedRecord, TapeBinding,
};
use crate::odeint::{integrate, IntegratorConfig, OdeError, Trajectory};
use crate::rng::{fnv1a, Rng};

/// Normalization constants for the static token features; chosen so typical
/// ionic values land at O(1).
pub const RADIUS_SCALE: f64 = 1e-10;
pub const DIFF_SCALE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("projection: every ion is masked out")]
    AllIonsAbsent,
    #[error("rollout: query flux {0} outside [0, {1}]")]
    QueryOutOfRange(f64, f64),
    #[error("training: non-finite loss at epoch {epoch}; last good parameters retained")]
    NonFiniteLoss { epoch: usize },
    #[error("loss: empty presence mask")]
    EmptyMask,
    #[error("loss: prediction shape {pred:?} does not match target shape {target:?}")]
    LossShape { pred: Vec<usize>, target: Vec<usize> },
    #[error("sample '{id}': {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<ModelError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintMode {
    Hard,
    Soft,
    None,
}

impl ConstraintMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hard" => Some(ConstraintMode::Hard),
            "soft" => Some(ConstraintMode::Soft),
            "none" => Some(ConstraintMode::None),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintMode::Hard => "hard",
            ConstraintMode::Soft => "soft",
            ConstraintMode::None => "none",
        }
    }
}

/// How the hard constraint is applied: to the derivative plus the initial
/// state (electroneutral along the entire trajectory), or to the output
/// states only (kept as a comparison mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HardApply {
    DerivativeAndInit,
    OutputOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeNetConfig {
    /// Ion vocabulary size; fixed by the dataset schema.
    pub d: usize,
    pub d_k: usize,
    pub token_features: usize,
    /// Output widths of MLP layers 1-4; layer 5 maps back to d.
    pub hidden: Vec<usize>,
    pub attention: bool,
    pub constraint: ConstraintMode,
    pub hard_apply: HardApply,
    /// Weight of the soft electroneutrality penalty.
    pub lambda: f64,
    /// Flux range upper bound, m/s.
    pub flux_max: f64,
}

impl Default for OdeNetConfig {
    fn default() -> Self {
        OdeNetConfig {
            d: N_IONS,
            d_k: 8,
            token_features: 6,
            hidden: vec![32, 32, 32, 32],
            attention: true,
            constraint: ConstraintMode::Hard,
            hard_apply: HardApply::DerivativeAndInit,
            lambda: 1.0,
            flux_max: 5e-5,
        }
    }
}

impl OdeNetConfig {
    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.d * self.d_k];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.d);
        widths
    }
}

/// Orthogonal projection onto the electroneutral subspace of the present
/// ions: v - (z.v / z.z) z with z restricted to the mask. Components of
/// absent ions pass through untouched.
pub fn project_electroneutral(
    v: &[f64],
    z: &[f64],
    mask: &[bool],
) -> Result<Vec<f64>, ModelError> {
    let zz: f64 = z
        .iter()
        .zip(mask)
        .map(|(zi, m)| if *m { zi * zi } else { 0.0 })
        .sum();
    if zz == 0.0 {
        return Err(ModelError::AllIonsAbsent);
    }
    let zv: f64 = v
        .iter()
        .zip(z.iter().zip(mask))
        .map(|(vi, (zi, m))| if *m { vi * zi } else { 0.0 })
        .sum();
    let coeff = zv / zz;
    Ok(v.iter()
        .zip(z.iter().zip(mask))
        .map(|(vi, (zi, m))| if *m { vi - coeff * zi } else { *vi })
        .collect())
}

/// Per-composition constants shared by every dynamics evaluation.
pub struct CompContext {
    pub comp: MixtureComposition,
    /// Peak feed concentration; states and targets are divided by it.
    pub c_scale: f64,
    /// Masked valence vector (absent entries zero).
    pub z_masked: Vec<f64>,
    /// 1 / (z.z over present ions).
    inv_zz: f64,
    /// Static token features (d x token_features): normalized feed
    /// concentration, valence, normalized Stokes radius, normalized bulk
    /// diffusivity; the state and flux columns are filled per evaluation.
    static_features: NumArray,
    row_mask_feat: NumArray,
    mask_vec: NumArray,
}

impl CompContext {
    pub fn new(comp: &MixtureComposition, db: &IonDb, cfg: &OdeNetConfig) -> CompContext {
        let d = cfg.d;
        let f = cfg.token_features;
        let c_scale = comp.max_feed();
        let mut features = vec![0.0; d * f];
        for j in 0..d {
            if !comp.mask[j] {
                continue;
            }
            let spec = db.spec(j);
            features[j * f] = comp.feed[j] / c_scale;
            features[j * f + 1] = spec.valence as f64;
            features[j * f + 2] = spec.stokes_radius / RADIUS_SCALE;
            features[j * f + 3] = spec.diffusivity / DIFF_SCALE;
            // column 4: current state, column 5: flux (set per evaluation)
        }
        let z_masked: Vec<f64> = (0..d)
            .map(|j| if comp.mask[j] { VALENCES[j] as f64 } else { 0.0 })
            .collect();
        let zz: f64 = z_masked.iter().map(|z| z * z).sum();
        let row_mask_feat = NumArray::new(
            vec![d, f],
            (0..d * f)
                .map(|i| if comp.mask[i / f] { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let mask_vec = NumArray::vector(
            (0..d)
                .map(|j| if comp.mask[j] { 1.0 } else { 0.0 })
                .collect(),
        );
        CompContext {
            comp: comp.clone(),
            c_scale,
            z_masked,
            inv_zz: 1.0 / zz,
            static_features: NumArray::new(vec![d, f], features).unwrap(),
            row_mask_feat,
            mask_vec,
        }
    }

    /// The static token feature block (state and flux columns zero), as the
    /// grid baselines consume it.
    pub fn static_token_features(&self) -> NumArray {
        self.static_features.clone()
    }

    /// Normalized feed state, projected onto the electroneutral subspace in
    /// hard mode so that the linear invariant holds from the first step.
    pub fn initial_state(&self, cfg: &OdeNetConfig) -> Result<Vec<f64>, ModelError> {
        let h0: Vec<f64> = self.comp.feed.iter().map(|c| c / self.c_scale).collect();
        if cfg.constraint == ConstraintMode::Hard && cfg.hard_apply == HardApply::DerivativeAndInit
        {
            project_electroneutral(&h0, &self.z_masked, &self.comp.mask)
        } else {
            Ok(h0)
        }
    }
}

/// Parameter node handles for one forward pass.
pub struct TapeParams {
    pub embed: NodeId,
    pub pe: NodeId,
    pub head: Option<AttentionNodes>,
    pub layers: Vec<LinearNodes>,
}

impl TapeParams {
    pub fn bind(binding: &TapeBinding, cfg: &OdeNetConfig) -> Result<TapeParams, ModelError> {
        let head = if cfg.attention {
            Some(AttentionNodes {
                wq: binding.node("attn.wq")?,
                wk: binding.node("attn.wk")?,
                wv: binding.node("attn.wv")?,
                d_k: cfg.d_k,
            })
        } else {
            None
        };
        let layers = (0..5)
            .map(|i| {
                Ok(LinearNodes {
                    weight: binding.node(&format!("mlp.{i}.w"))?,
                    bias: binding.node(&format!("mlp.{i}.b"))?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(TapeParams {
            embed: binding.node("embed.w")?,
            pe: binding.node("pe.table")?,
            head,
            layers,
        })
    }
}

/// Fresh parameters for the configured architecture, deterministic per seed.
/// Weights are U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero; each array
/// draws from its own keyed stream so insertion order never matters.
pub fn init_params(cfg: &OdeNetConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let keyed = |name: &str| Rng::from_key(seed, &[fnv1a(name.as_bytes())]);
    store
        .insert(
            "embed.w",
            init_table(&mut keyed("embed.w"), cfg.token_features, cfg.d_k),
        )
        .unwrap();
    store
        .insert("pe.table", init_table(&mut keyed("pe.table"), cfg.d, cfg.d_k))
        .unwrap();
    if cfg.attention {
        for name in ["attn.wq", "attn.wk", "attn.wv"] {
            store
                .insert(name, init_table(&mut keyed(name), cfg.d_k, cfg.d_k))
                .unwrap();
        }
    }
    let widths = cfg.mlp_widths();
    for i in 0..5 {
        store
            .insert(
                &format!("mlp.{i}.w"),
                init_weight(&mut keyed(&format!("mlp.{i}.w")), widths[i + 1], widths[i]),
            )
            .unwrap();
        store
            .insert(&format!("mlp.{i}.b"), init_bias(widths[i + 1]))
            .unwrap();
    }
    store
}

/// Arrays frozen during fine-tuning: the token embedding, positional table,
/// attention projections, and MLP layers 1-3. Layers 4-5 stay trainable.
pub fn finetune_frozen_names(cfg: &OdeNetConfig) -> Vec<String> {
    let mut names = vec!["embed.w".to_string(), "pe.table".to_string()];
    if cfg.attention {
        names.extend(["attn.wq", "attn.wk", "attn.wv"].map(String::from));
    }
    for i in 0..3 {
        names.push(format!("mlp.{i}.w"));
        names.push(format!("mlp.{i}.b"));
    }
    names
}

/// Tape-side projector: v - (z.v / z.z) z over present ions.
pub fn project_node(
    tape: &mut Tape,
    v: NodeId,
    ctx: &CompContext,
) -> Result<NodeId, ModelError> {
    let z_leaf = tape.leaf(NumArray::vector(ctx.z_masked.clone()));
    let zv_terms = tape.mul(v, z_leaf)?;
    let zv = tape.sum(zv_terms)?;
    let coeff = tape.scalar_mul(zv, ctx.inv_zz)?;
    let corr = tape.mul(coeff, z_leaf)?;
    Ok(tape.sub(v, corr)?)
}

/// One dynamics evaluation: build masked ion tokens from the normalized
/// state and flux, embed, add positional encodings, attend, and run the MLP.
/// Absent-ion derivative components are forced to zero; hard mode projects
/// the derivative onto the electroneutral subspace.
///
/// Returns the derivative node plus the attention weight matrix values (for
/// rollout-averaged inspection).
pub fn dynamics_node(
    tape: &mut Tape,
    params: &TapeParams,
    ctx: &CompContext,
    state: NodeId,
    flux_norm: f64,
    cfg: &OdeNetConfig,
) -> Result<(NodeId, Option<NumArray>), ModelError> {
    let d = cfg.d;
    let f = cfg.token_features;

    // Static features with the flux column filled for present ions.
    let mut feat = ctx.static_features.clone();
    for j in 0..d {
        if ctx.comp.mask[j] {
            feat.data_mut()[j * f + 5] = flux_norm;
        }
    }
    let static_leaf = tape.leaf(feat);

    // State enters column 4 through an outer product with a one-hot row.
    let state_col = tape.reshape(state, vec![d, 1])?;
    let mut onehot = vec![0.0; f];
    onehot[4] = 1.0;
    let onehot = tape.leaf(NumArray::new(vec![1, f], onehot).unwrap());
    let state_feat = tape.matmul(state_col, onehot)?;
    let tokens = tape.add(static_leaf, state_feat)?;
    let row_mask = tape.leaf(ctx.row_mask_feat.clone());
    let tokens = tape.mul(tokens, row_mask)?;

    let embedded = tape.matmul(tokens, params.embed)?;
    let encoded = add_positional_encoding(tape, embedded, params.pe, &ctx.comp.mask)?;

    let (pooled, weights) = match &params.head {
        Some(head) => {
            // Residual sum: attended context augments the per-ion tokens
            // rather than replacing them, so ion identity survives the
            // convex combination.
            let (att, w) = attention(tape, encoded, &ctx.comp.mask, head)?;
            let mixed = tape.add(encoded, att)?;
            (mixed, Some(tape.value(w).clone()))
        }
        None => (encoded, None),
    };

    let flat = tape.reshape(pooled, vec![d * cfg.d_k])?;
    let out = mlp_forward(tape, &params.layers, flat)?;
    let mask_vec = tape.leaf(ctx.mask_vec.clone());
    let masked = tape.mul(out, mask_vec)?;

    let deriv = if cfg.constraint == ConstraintMode::Hard
        && cfg.hard_apply == HardApply::DerivativeAndInit
    {
        project_node(tape, masked, ctx)?
    } else {
        masked
    };
    Ok((deriv, weights))
}

/// Dynamics evaluated as plain values (fresh tape per call); the public form
/// of the operation for tests and inspection.
pub fn dynamics_values(
    store: &ParamStore,
    cfg: &OdeNetConfig,
    ctx: &CompContext,
    state: &[f64],
    flux_norm: f64,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let binding = TapeBinding::bind(&mut tape, store);
    let params = TapeParams::bind(&binding, cfg)?;
    let state = tape.leaf(NumArray::vector(state.to_vec()));
    let (deriv, _) = dynamics_node(&mut tape, &params, ctx, state, flux_norm, cfg)?;
    Ok(tape.value(deriv).data().to_vec())
}

/// A rollout recorded on a live tape: normalized state nodes at the query
/// fluxes plus the averaged attention matrix over accepted-step evaluations.
pub struct RolloutNodes {
    pub states: Vec<NodeId>,
    pub mean_attention: Option<NumArray>,
    pub trajectory: Trajectory<NodeId>,
}

/// Integrate the dynamics over normalized flux queries on the given tape.
pub fn rollout_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &OdeNetConfig,
    ctx: &CompContext,
    queries_norm: &[f64],
    int_cfg: &IntegratorConfig,
) -> Result<RolloutNodes, ModelError> {
    let binding = TapeBinding::bind(tape, store);
    let params = TapeParams::bind(&binding, cfg)?;
    let h0 = ctx.initial_state(cfg)?;
    let h0 = tape.leaf(NumArray::vector(h0));

    let mut attn_log: Vec<NumArray> = Vec::new();
    let trajectory = integrate(
        tape,
        |tape: &mut Tape, state: &NodeId, flux: f64| -> Result<NodeId, OdeError> {
            let (deriv, weights) = dynamics_node(tape, &params, ctx, *state, flux, cfg)
                .map_err(|e| OdeError::Dynamics(e.to_string()))?;
            if let Some(w) = weights {
                attn_log.push(w);
            }
            Ok(deriv)
        },
        h0,
        queries_norm,
        int_cfg,
    )?;

    // Average attention over evaluations belonging to accepted steps.
    let mean_attention = if cfg.attention {
        let mut acc = NumArray::zeros(vec![cfg.d, cfg.d]);
        let mut count = 0usize;
        for step in trajectory.steps.iter().filter(|s| s.accepted) {
            for idx in step.eval_range.0..step.eval_range.1 {
                if let Some(w) = attn_log.get(idx) {
                    for (a, b) in acc.data_mut().iter_mut().zip(w.data()) {
                        *a += b;
                    }
                    count += 1;
                }
            }
        }
        if count > 0 {
            for a in acc.data_mut() {
                *a /= count as f64;
            }
        }
        Some(acc)
    } else {
        None
    };

    let mut states = trajectory.states.clone();
    if cfg.constraint == ConstraintMode::Hard && cfg.hard_apply == HardApply::OutputOnly {
        for s in states.iter_mut() {
            *s = project_node(tape, *s, ctx)?;
        }
    }
    Ok(RolloutNodes {
        states,
        mean_attention,
        trajectory,
    })
}

/// Model-predicted rejection rollout for one composition.
#[derive(Debug, Clone)]
pub struct RolloutPrediction {
    pub composition: MixtureComposition,
    /// Physical flux queries, m/s.
    pub queries: Vec<f64>,
    /// Predicted permeate concentrations, mol/m^3 (#queries x d).
    pub concentrations: Vec<Vec<f64>>,
    /// Rejection 1 - h/c_in for present ions, NaN where undefined.
    pub rejections: Vec<Vec<f64>>,
    pub mean_attention: Option<NumArray>,
    pub accepted_steps: usize,
    pub n_evals: usize,
}

pub fn rejection_from(conc: f64, feed: f64) -> f64 {
    1.0 - conc / feed
}

/// Run a rollout with a finished parameter store; a pure function safe to
/// evaluate concurrently across samples.
pub fn rollout(
    store: &ParamStore,
    cfg: &OdeNetConfig,
    ctx: &CompContext,
    queries: &[f64],
    int_cfg: &IntegratorConfig,
) -> Result<RolloutPrediction, ModelError> {
    for q in queries {
        if *q < 0.0 || *q > cfg.flux_max * (1.0 + 1e-12) {
            return Err(ModelError::QueryOutOfRange(*q, cfg.flux_max));
        }
    }
    let queries_norm: Vec<f64> = queries.iter().map(|q| q / cfg.flux_max).collect();
    let mut tape = Tape::new();
    let nodes = rollout_nodes(&mut tape, store, cfg, ctx, &queries_norm, int_cfg)?;
    let concentrations: Vec<Vec<f64>> = nodes
        .states
        .iter()
        .map(|s| {
            tape.value(*s)
                .data()
                .iter()
                .enumerate()
                .map(|(j, h)| if ctx.comp.mask[j] { h * ctx.c_scale } else { 0.0 })
                .collect()
        })
        .collect();
    let rejections = concentrations
        .iter()
        .map(|row| {
            (0..cfg.d)
                .map(|j| {
                    if ctx.comp.mask[j] && ctx.comp.feed[j] > 0.0 {
                        rejection_from(row[j], ctx.comp.feed[j])
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect();
    Ok(RolloutPrediction {
        composition: ctx.comp.clone(),
        queries: queries.to_vec(),
        concentrations,
        rejections,
        mean_attention: nodes.mean_attention,
        accepted_steps: nodes.trajectory.accepted_steps(),
        n_evals: nodes.trajectory.n_evals,
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Masked mean squared error over k flux points and the present ions:
/// (1/(k d')) sum_i sum_j (pred_ij - target_ij)^2, d' = present-ion count.
pub fn masked_mse(pred: &NumArray, target: &NumArray, mask: &[bool]) -> Result<f64, ModelError> {
    if pred.shape() != target.shape() {
        return Err(ModelError::LossShape {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let d = mask.len();
    let d_present = mask.iter().filter(|m| **m).count();
    if d_present == 0 {
        return Err(ModelError::EmptyMask);
    }
    let k = pred.len() / d;
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..d {
            if mask[j] {
                let r = pred.data()[i * d + j] - target.data()[i * d + j];
                acc += r * r;
            }
        }
    }
    Ok(acc / (k * d_present) as f64)
}

/// Pre-training loss against PDE targets; identical form to the fine-tuning
/// loss, which differs only in where its targets come from.
pub fn pretrain_loss(pred: &NumArray, target: &NumArray, mask: &[bool]) -> Result<f64, ModelError> {
    masked_mse(pred, target, mask)
}

pub fn finetune_loss(pred: &NumArray, target: &NumArray, mask: &[bool]) -> Result<f64, ModelError> {
    masked_mse(pred, target, mask)
}

/// Same loss as a tape node over per-query state nodes.
pub fn masked_mse_node(
    tape: &mut Tape,
    states: &[NodeId],
    target: &NumArray,
    mask: &[bool],
) -> Result<NodeId, ModelError> {
    let d = mask.len();
    let d_present = mask.iter().filter(|m| **m).count();
    if d_present == 0 {
        return Err(ModelError::EmptyMask);
    }
    let k = states.len();
    if target.shape() != [k, d] {
        return Err(ModelError::LossShape {
            pred: vec![k, d],
            target: target.shape().to_vec(),
        });
    }
    let rows: Vec<NodeId> = states
        .iter()
        .map(|s| tape.reshape(*s, vec![1, d]))
        .collect::<Result<_, _>>()?;
    let stacked = tape.concat(&rows)?;
    let target_leaf = tape.leaf(target.clone());
    let diff = tape.sub(stacked, target_leaf)?;
    let mask_mat = NumArray::new(
        vec![k, d],
        (0..k * d)
            .map(|i| if mask[i % d] { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let mask_leaf = tape.leaf(mask_mat);
    let masked = tape.mul(diff, mask_leaf)?;
    let sq = tape.square(masked)?;
    let total = tape.sum(sq)?;
    Ok(tape.scalar_mul(total, 1.0 / (k * d_present) as f64)?)
}

/// Mean over query points of the squared net charge of the state.
pub fn soft_penalty(states: &[Vec<f64>], z: &[f64], mask: &[bool]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for s in states {
        let net: f64 = s
            .iter()
            .zip(z.iter().zip(mask))
            .map(|(h, (zi, m))| if *m { h * zi } else { 0.0 })
            .sum();
        acc += net * net;
    }
    acc / states.len() as f64
}

pub fn soft_penalty_node(
    tape: &mut Tape,
    states: &[NodeId],
    ctx: &CompContext,
) -> Result<NodeId, ModelError> {
    let d = ctx.z_masked.len();
    let rows: Vec<NodeId> = states
        .iter()
        .map(|s| tape.reshape(*s, vec![1, d]))
        .collect::<Result<_, _>>()?;
    let stacked = tape.concat(&rows)?;
    let z_leaf = tape.leaf(NumArray::vector(ctx.z_masked.clone()));
    let net = tape.matmul(stacked, z_leaf)?;
    let sq = tape.square(net)?;
    Ok(tape.mean(sq)?)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Draw Gaussian noise on pre-training targets too (off by default; the
    /// noise scales still ride along in the dataset).
    pub noise_on_pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            noise_on_pretrain: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-sample loss per epoch.
    pub loss_history: Vec<f64>,
    /// Fraction of epoch-to-epoch transitions that decreased the loss;
    /// reported, never enforced.
    pub decreasing_fraction: f64,
    pub clamped_targets: usize,
}

/// Mini-batch Adam over rollout samples. Pre-training fits PDE targets with
/// every array trainable; fine-tuning freezes the embedding, positional
/// table, attention projections and MLP layers 1-3, then fits noisy targets
/// redrawn each epoch. Soft mode appends lambda times the electroneutrality
/// penalty to either stage's loss.
pub fn train(
    stage: Stage,
    store: &mut ParamStore,
    cfg: &OdeNetConfig,
    samples: &[RolloutSample],
    db: &IonDb,
    hyper: &TrainConfig,
    int_cfg: &IntegratorConfig,
) -> Result<TrainReport, ModelError> {
    match stage {
        Stage::Pretrain => {
            let names: Vec<String> = store.names().map(String::from).collect();
            for name in names {
                store.set_frozen(&name, false)?;
            }
        }
        Stage::Finetune => {
            for name in finetune_frozen_names(cfg) {
                if store.contains(&name) {
                    store.set_frozen(&name, true)?;
                }
            }
        }
    }
    store.reset_optimizer();

    let contexts: Vec<CompContext> = samples
        .iter()
        .map(|s| CompContext::new(&s.composition, db, cfg))
        .collect();
    let queries_norm: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.fluxes.iter().map(|f| f / cfg.flux_max).collect())
        .collect();

    let mut loss_history = Vec::with_capacity(hyper.epochs);
    let mut clamped_total = 0usize;

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Rng::from_key(hyper.seed, &[fnv1a(b"epoch-shuffle"), epoch as u64]).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut grads = Grads::new();
            let mut batch_loss = 0.0;
            for &si in batch {
                let sample = &samples[si];
                let ctx = &contexts[si];
                let use_noise = stage == Stage::Finetune || hyper.noise_on_pretrain;
                let target = if use_noise {
                    let (noisy, clamped) =
                        crate::data::sample_noisy_targets(sample, hyper.seed, epoch as u64);
                    clamped_total += clamped;
                    noisy
                } else {
                    sample.conc.clone()
                };
                let k = sample.fluxes.len();
                let target_norm = NumArray::new(
                    vec![k, cfg.d],
                    target
                        .iter()
                        .flat_map(|row| row.iter().map(|c| c / ctx.c_scale))
                        .collect(),
                )
                .map_err(ModelError::Ad)?;

                let mut tape = Tape::new();
                let binding = TapeBinding::bind(&mut tape, store);
                let params = TapeParams::bind(&binding, cfg)?;
                let h0 = ctx.initial_state(cfg)?;
                let h0 = tape.leaf(NumArray::vector(h0));
                let traj = integrate(
                    &mut tape,
                    |tape: &mut Tape, state: &NodeId, flux: f64| -> Result<NodeId, OdeError> {
                        let (deriv, _) = dynamics_node(tape, &params, ctx, *state, flux, cfg)
                            .map_err(|e| OdeError::Dynamics(e.to_string()))?;
                        Ok(deriv)
                    },
                    h0,
                    &queries_norm[si],
                    int_cfg,
                )
                .map_err(|e| ModelError::Sample {
                    id: sample.id.clone(),
                    source: Box::new(ModelError::Ode(e)),
                })?;

                let mut loss =
                    masked_mse_node(&mut tape, &traj.states, &target_norm, &sample.composition.mask)?;
                if cfg.constraint == ConstraintMode::Soft {
                    let penalty = soft_penalty_node(&mut tape, &traj.states, ctx)?;
                    let weighted = tape.scalar_mul(penalty, cfg.lambda)?;
                    loss = tape.add(loss, weighted)?;
                }
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch });
                }
                batch_loss += loss_value;
                let adjoints = tape.backward(loss)?;
                grads.accumulate(&binding.grads(&adjoints));
            }
            grads.scale(1.0 / batch.len() as f64);
            store.adam_step(&grads, hyper.lr)?;
            epoch_loss += batch_loss;
        }
        loss_history.push(epoch_loss / samples.len().max(1) as f64);
    }

    let decreasing = loss_history
        .windows(2)
        .filter(|w| w[1] < w[0])
        .count();
    let decreasing_fraction = if loss_history.len() > 1 {
        decreasing as f64 / (loss_history.len() - 1) as f64
    } else {
        1.0
    };
    Ok(TrainReport {
        loss_history,
        decreasing_fraction,
        clamped_targets: clamped_total,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints and rollout export
// ---------------------------------------------------------------------------

pub fn save_checkpoint(
    path: &std::path::Path,
    store: &ParamStore,
    cfg: &OdeNetConfig,
    seeds: Vec<SeedRecord>,
) -> Result<(), ModelError> {
    let arch = serde_json::to_value(cfg).expect("config serializes");
    crate::nn::save_checkpoint(path, store, arch, seeds)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(ParamStore, OdeNetConfig, Vec<SeedRecord>), ModelError> {
    let (store, manifest) = crate::nn::load_checkpoint(path)?;
    let cfg: OdeNetConfig = serde_json::from_value(manifest.architecture)
        .map_err(|e| ModelError::Nn(NnError::Checkpoint(e.to_string())))?;
    Ok((store, cfg, manifest.seeds))
}

/// In-memory checkpoint loader (embedded assets, wasm).
pub fn load_checkpoint_bytes_model(
    manifest_json: &str,
    blob: &[u8],
) -> Result<(ParamStore, OdeNetConfig, Vec<SeedRecord>), ModelError> {
    let (store, manifest) = crate::nn::load_checkpoint_bytes(manifest_json, blob)?;
    let cfg: OdeNetConfig = serde_json::from_value(manifest.architecture)
        .map_err(|e| ModelError::Nn(NnError::Checkpoint(e.to_string())))?;
    Ok((store, cfg, manifest.seeds))
}

/// Rollout export: one CSV row per (sample, ion, flux) with predictions.
pub fn export_rollouts_csv(preds: &[(String, RolloutPrediction)]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("sample_id,ion,J_v,c_pred,rejection_pred\n");
    for (id, pred) in preds {
        for j in 0..N_IONS {
            if !pred.composition.mask[j] {
                continue;
            }
            for (qi, q) in pred.queries.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    id,
                    crate::data::ION_NAMES[j],
                    crate::data::fmt_f64(*q),
                    crate::data::fmt_f64(pred.concentrations[qi][j]),
                    crate::data::fmt_f64(pred.rejections[qi][j]),
                );
            }
        }
    }
    out
}

/// JSON sidecar holding the mean attention matrix with ion labels.
pub fn attention_sidecar_json(matrix: &NumArray) -> String {
    let rows: Vec<Vec<f64>> = (0..N_IONS)
        .map(|i| (0..N_IONS).map(|j| matrix.at(i, j)).collect())
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "ions": crate::data::ION_NAMES,
        "mean_attention": rows,
    }))
    .expect("attention matrix serializes")
}
