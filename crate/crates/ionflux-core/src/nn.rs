//! Neural building blocks: linear layers, masked single-head attention with
//! learned positional encodings, parameter storage with freeze flags, and
//! Adam with bias correction.
//!
//! Parameters live in a [`ParamStore`] keyed by name. A forward pass binds the
//! store onto a fresh [`Tape`] (one leaf per array) so gradients accumulate
//! across however many times the dynamics gets evaluated along a trajectory.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, NodeId, NumArray, Tape};
use crate::rng::Rng;

pub const CHECKPOINT_VERSION: &str = "ionflux-ckpt/1";

/// Default Adam constants; the learning rate is the caller's.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Additive constant for masked attention scores. Finite so gradients stay
/// finite, large enough that exp underflows to exactly zero after max
/// subtraction.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("attention: all tokens are masked out")]
    AllMasked,
    #[error("adam: non-finite gradient for '{name}', step aborted")]
    NonFiniteGradient { name: String },
    #[error("adam: gradient shape {got:?} does not match param '{name}' shape {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("duplicate parameter '{name}'")]
    DuplicateParam { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct ParamEntry {
    name: String,
    value: NumArray,
    frozen: bool,
    m: NumArray,
    v: NumArray,
}

/// Named trainable arrays with freeze flags and Adam moment state.
/// Iteration order is insertion order everywhere, so serialization and
/// optimizer behaviour are deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: NumArray) -> Result<(), NnError> {
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateParam { name: name.into() });
        }
        let shape = value.shape().to_vec();
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
            m: NumArray::zeros(shape.clone()),
            v: NumArray::zeros(shape),
        });
        Ok(())
    }

    fn idx(&self, name: &str) -> Result<usize, NnError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam { name: name.into() })
    }

    pub fn get(&self, name: &str) -> Result<&NumArray, NnError> {
        Ok(&self.entries[self.idx(name)?].value)
    }

    pub fn set(&mut self, name: &str, value: NumArray) -> Result<(), NnError> {
        let i = self.idx(name)?;
        self.entries[i].value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NnError> {
        let i = self.idx(name)?;
        self.entries[i].frozen = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool, NnError> {
        Ok(self.entries[self.idx(name)?].frozen)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.frozen)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count over trainable (unfrozen) arrays.
    pub fn count_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.value.len())
            .sum()
    }

    /// Element count over every array, frozen or not.
    pub fn count_all(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Clear Adam moments and the step counter (used between training stages).
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.m = NumArray::zeros(e.value.shape().to_vec());
            e.v = NumArray::zeros(e.value.shape().to_vec());
        }
    }

    pub fn deep_clone(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.clone()).unwrap();
            let i = out.by_name[&e.name];
            out.entries[i].frozen = e.frozen;
            out.entries[i].m = e.m.clone();
            out.entries[i].v = e.v.clone();
        }
        out.step = self.step;
        out
    }

    /// Standard Adam with bias correction, applied to unfrozen arrays only.
    /// A non-finite or mis-shaped gradient aborts before touching any value.
    pub fn adam_step(&mut self, grads: &Grads, lr: f64) -> Result<(), NnError> {
        // Validate everything first so a failed step leaves params untouched.
        for e in &self.entries {
            if e.frozen {
                continue;
            }
            if let Some(g) = grads.get(&e.name) {
                if g.shape() != e.value.shape() {
                    return Err(NnError::GradientShape {
                        name: e.name.clone(),
                        expected: e.value.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient { name: e.name.clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for e in &mut self.entries {
            if e.frozen {
                continue;
            }
            let Some(g) = grads.get(&e.name) else { continue };
            for i in 0..e.value.len() {
                let gi = g.data()[i];
                let m = ADAM_BETA1 * e.m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * e.v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                e.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Named gradients, accumulated across a mini-batch.
#[derive(Default, Debug, Clone)]
pub struct Grads(BTreeMap<String, NumArray>);

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&NumArray> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: String, g: NumArray) {
        self.0.insert(name, g);
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NumArray)> {
        self.0.iter()
    }
}

/// Tape leaves for every array in a store, in store order.
pub struct TapeBinding {
    ids: HashMap<String, NodeId>,
}

impl TapeBinding {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> TapeBinding {
        let mut ids = HashMap::new();
        for e in &store.entries {
            ids.insert(e.name.clone(), tape.leaf(e.value.clone()));
        }
        TapeBinding { ids }
    }

    pub fn node(&self, name: &str) -> Result<NodeId, NnError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam { name: name.into() })
    }

    /// Pull per-parameter adjoints out of a finished backward pass.
    pub fn grads(&self, adjoints: &crate::ad::Adjoints) -> Grads {
        let mut g = Grads::new();
        for (name, id) in &self.ids {
            g.insert(name.clone(), adjoints.wrt(*id));
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Weight matrix (out x in) ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
pub fn init_weight(rng: &mut Rng, out_dim: usize, in_dim: usize) -> NumArray {
    let bound = (1.0 / in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    NumArray::new(vec![out_dim, in_dim], data).unwrap()
}

/// Table (rows x cols) with the same fan-in rule, fan_in = cols.
pub fn init_table(rng: &mut Rng, rows: usize, cols: usize) -> NumArray {
    let bound = (1.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    NumArray::new(vec![rows, cols], data).unwrap()
}

pub fn init_bias(out_dim: usize) -> NumArray {
    NumArray::zeros(vec![out_dim])
}

// ---------------------------------------------------------------------------
// Forward blocks
// ---------------------------------------------------------------------------

/// One linear layer bound onto a tape: weight (out x in), bias (out).
#[derive(Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// y = W x + b for a vector x.
pub fn linear_forward(tape: &mut Tape, layer: LinearNodes, x: NodeId) -> Result<NodeId, NnError> {
    let wx = tape.matmul(layer.weight, x)?;
    Ok(tape.add(wx, layer.bias)?)
}

/// Five linear layers with tanh after the first four; the last output is raw.
pub fn mlp_forward(tape: &mut Tape, layers: &[LinearNodes], x: NodeId) -> Result<NodeId, NnError> {
    let mut h = x;
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        h = linear_forward(tape, *layer, h)?;
        if i < last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Single attention head bound onto a tape. Projections map token features to
/// d_k-wide queries/keys/values.
#[derive(Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub d_k: usize,
}

/// Scaled dot-product attention over ion tokens with presence masking.
///
/// `tokens` is (d x feat); rows for absent ions are expected to be zero
/// already. Returns the output tokens (d x d_k) and the weight matrix
/// (d x d) in which rows over present tokens sum to one, columns of absent
/// tokens are exactly zero, and rows of absent tokens are zero vectors.
pub fn attention(
    tape: &mut Tape,
    tokens: NodeId,
    mask: &[bool],
    head: &AttentionNodes,
) -> Result<(NodeId, NodeId), NnError> {
    if !mask.iter().any(|&m| m) {
        return Err(NnError::AllMasked);
    }
    let d = tape.value(tokens).shape()[0];
    debug_assert_eq!(mask.len(), d);

    let q = tape.matmul(tokens, head.wq)?;
    let k = tape.matmul(tokens, head.wk)?;
    let v = tape.matmul(tokens, head.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scalar_mul(scores, 1.0 / (head.d_k as f64).sqrt())?;

    // Columns of absent tokens drop out of every softmax row.
    let col_mask: Vec<bool> = (0..d * d).map(|i| mask[i % d]).collect();
    let masked = tape.masked_fill(scores, &col_mask, MASK_FILL)?;
    let weights = tape.softmax(masked)?;

    // Rows of absent tokens are zeroed so their outputs stay identically zero.
    let row_mask = NumArray::new(
        vec![d, d],
        (0..d * d)
            .map(|i| if mask[i / d] { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let row_mask = tape.leaf(row_mask);
    let weights = tape.mul(weights, row_mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Adds the learned per-ion encoding row to each present token; absent token
/// rows are left untouched (zero).
pub fn add_positional_encoding(
    tape: &mut Tape,
    tokens: NodeId,
    pe: NodeId,
    mask: &[bool],
) -> Result<NodeId, NnError> {
    let shape = tape.value(tokens).shape().to_vec();
    let (d, w) = (shape[0], shape[1]);
    let row_mask = NumArray::new(
        vec![d, w],
        (0..d * w)
            .map(|i| if mask[i / w] { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let row_mask = tape.leaf(row_mask);
    let pe_masked = tape.mul(pe, row_mask)?;
    Ok(tape.add(tokens, pe_masked)?)
}

// ---------------------------------------------------------------------------
// Checkpoint format "ionflux-ckpt/1"
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub stage: String,
    pub seed: u64,
}

/// Manifest half of a checkpoint; the sibling `.bin` file holds the arrays as
/// little-endian f64, concatenated in manifest order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub arrays: Vec<ArrayInfo>,
    pub architecture: serde_json::Value,
    pub seeds: Vec<SeedRecord>,
}

fn blob_path(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    architecture: serde_json::Value,
    seeds: Vec<SeedRecord>,
) -> Result<(), NnError> {
    let arrays: Vec<ArrayInfo> = store
        .entries
        .iter()
        .map(|e| ArrayInfo {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            frozen: e.frozen,
        })
        .collect();
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.to_string(),
        arrays,
        architecture,
        seeds,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;

    let mut blob = Vec::with_capacity(store.count_all() * 8);
    for e in &store.entries {
        for x in e.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(blob_path(path))?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointManifest), NnError> {
    let json = std::fs::read_to_string(path)?;
    let mut blob = Vec::new();
    std::fs::File::open(blob_path(path))?.read_to_end(&mut blob)?;
    load_checkpoint_bytes(&json, &blob)
}

/// Checkpoint loader over in-memory buffers (embedded assets, wasm).
pub fn load_checkpoint_bytes(
    manifest_json: &str,
    blob: &[u8],
) -> Result<(ParamStore, CheckpointManifest), NnError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(manifest_json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version '{}', expected '{CHECKPOINT_VERSION}'",
            manifest.version
        )));
    }
    let expected: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 8 {
        return Err(NnError::Checkpoint(format!(
            "blob holds {} bytes, manifest implies {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for info in &manifest.arrays {
        let n: usize = info.shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let b = &blob[(offset + i) * 8..(offset + i + 1) * 8];
                f64::from_le_bytes(b.try_into().unwrap())
            })
            .collect();
        offset += n;
        let arr = NumArray::new(info.shape.clone(), data)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        store.insert(&info.name, arr)?;
        store.set_frozen(&info.name, info.frozen)?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::gradient_check;

    fn tokens_leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> NodeId {
        let d = rows.len();
        let w = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.leaf(NumArray::new(vec![d, w], data).unwrap())
    }

    fn identity_head(tape: &mut Tape, feat: usize) -> AttentionNodes {
        let eye = NumArray::new(
            vec![feat, feat],
            (0..feat * feat)
                .map(|i| if i / feat == i % feat { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        AttentionNodes {
            wq: tape.leaf(eye.clone()),
            wk: tape.leaf(eye.clone()),
            wv: tape.leaf(eye),
            d_k: feat,
        }
    }

    #[test]
    fn attention_identical_keys_uniform_rows() {
        let mut tape = Tape::new();
        let t = tokens_leaf(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let head = identity_head(&mut tape, 2);
        let (_, w) = attention(&mut tape, t, &[true, true, true], &head).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((tape.value(w).at(i, j) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_present_token() {
        let mut tape = Tape::new();
        let t = tokens_leaf(&mut tape, &[vec![0.5, -0.25], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let head = identity_head(&mut tape, 2);
        let (out, w) = attention(&mut tape, t, &[true, false, false], &head).unwrap();
        assert!((tape.value(w).at(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(tape.value(w).at(0, 1), 0.0);
        // Output row 0 equals its own value vector (identity W_V).
        assert!((tape.value(out).at(0, 0) - 0.5).abs() < 1e-15);
        assert!((tape.value(out).at(0, 1) + 0.25).abs() < 1e-15);
        // Absent rows are zero vectors.
        for j in 0..2 {
            assert_eq!(tape.value(out).at(1, j), 0.0);
            assert_eq!(tape.value(out).at(2, j), 0.0);
        }
    }

    #[test]
    fn attention_hand_softmax() {
        // Scores row for token 1 are [0, ln 3] -> weights [0.25, 0.75].
        let mut tape = Tape::new();
        let t = tokens_leaf(&mut tape, &[vec![0.0], vec![1.0]]);
        let head = AttentionNodes {
            wq: tape.leaf(NumArray::matrix(1, 1, vec![1.0]).unwrap()),
            wk: tape.leaf(NumArray::matrix(1, 1, vec![3.0f64.ln()]).unwrap()),
            wv: tape.leaf(NumArray::matrix(1, 1, vec![1.0]).unwrap()),
            d_k: 1,
        };
        let (_, w) = attention(&mut tape, t, &[true, true], &head).unwrap();
        assert!((tape.value(w).at(1, 0) - 0.25).abs() < 1e-12);
        assert!((tape.value(w).at(1, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_all_masked_errors() {
        let mut tape = Tape::new();
        let t = tokens_leaf(&mut tape, &[vec![1.0], vec![1.0]]);
        let head = identity_head(&mut tape, 1);
        assert!(matches!(
            attention(&mut tape, t, &[false, false], &head),
            Err(NnError::AllMasked)
        ));
    }

    #[test]
    fn attention_rows_sum_to_one_and_absent_cols_zero() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let d = 8;
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..4).map(|_| rng.uniform_in(-2.0, 2.0)).collect())
                .collect();
            let mut mask = vec![false; d];
            let n_present = 1 + rng.usize_below(d);
            for slot in mask.iter_mut().take(n_present) {
                *slot = true;
            }
            rng.shuffle(&mut mask);
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            // Zero absent rows as the model does before attention.
            let rows: Vec<Vec<f64>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| if mask[i] { r.clone() } else { vec![0.0; 4] })
                .collect();
            let t = tokens_leaf(&mut tape, &rows);
            let wq = tape.leaf(init_weight(&mut rng, 4, 4));
            let wk = tape.leaf(init_weight(&mut rng, 4, 4));
            let wv = tape.leaf(init_weight(&mut rng, 4, 4));
            let head = AttentionNodes { wq, wk, wv, d_k: 4 };
            let (_, w) = attention(&mut tape, t, &mask, &head).unwrap();
            for i in 0..d {
                let sum: f64 = (0..d).map(|j| tape.value(w).at(i, j)).sum();
                if mask[i] {
                    assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
                } else {
                    assert_eq!(sum, 0.0);
                }
                for j in 0..d {
                    if !mask[j] {
                        assert_eq!(tape.value(w).at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_permutation_equivariance() {
        // Swapping two present tokens permutes output rows identically.
        let mut rng = Rng::new(17);
        let feat = 4;
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..feat).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let wq = init_weight(&mut rng, feat, 3);
        let wk = init_weight(&mut rng, feat, 3);
        let wv = init_weight(&mut rng, feat, 3);
        let mask = vec![true, true, true, false];

        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let permuted: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            let pmask: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
            let t = tokens_leaf(&mut tape, &permuted);
            let head = AttentionNodes {
                wq: tape.leaf(wq.clone()),
                wk: tape.leaf(wk.clone()),
                wv: tape.leaf(wv.clone()),
                d_k: 3,
            };
            let (out, _) = attention(&mut tape, t, &pmask, &head).unwrap();
            tape.value(out).clone()
        };

        let base = run(&[0, 1, 2, 3]);
        let swapped = run(&[1, 0, 2, 3]);
        for j in 0..3 {
            assert!((base.at(0, j) - swapped.at(1, j)).abs() < 1e-14);
            assert!((base.at(1, j) - swapped.at(0, j)).abs() < 1e-14);
            assert!((base.at(2, j) - swapped.at(2, j)).abs() < 1e-14);
        }
    }

    #[test]
    fn positional_encoding_contract() {
        let mut tape = Tape::new();
        let zero_tokens = tape.leaf(NumArray::zeros(vec![3, 2]));
        let table = NumArray::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pe = tape.leaf(table.clone());
        // All present, zero tokens: output equals the table.
        let out = add_positional_encoding(&mut tape, zero_tokens, pe, &[true, true, true]).unwrap();
        assert_eq!(tape.value(out).data(), table.data());
        // Absent token row stays zero even with a nonzero table row.
        let out2 =
            add_positional_encoding(&mut tape, zero_tokens, pe, &[true, false, true]).unwrap();
        assert_eq!(tape.value(out2).at(1, 0), 0.0);
        assert_eq!(tape.value(out2).at(1, 1), 0.0);
        // Zero table leaves tokens unchanged.
        let toks = tokens_leaf(&mut tape, &[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        let zero_pe = tape.leaf(NumArray::zeros(vec![3, 2]));
        let out3 = add_positional_encoding(&mut tape, toks, zero_pe, &[true, true, true]).unwrap();
        assert_eq!(tape.value(out3).data(), tape.value(toks).data());
    }

    #[test]
    fn mlp_zero_params_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(NumArray::vector(vec![1.0, -2.0, 3.0]));
        let layers: Vec<LinearNodes> = (0..5)
            .map(|_| LinearNodes {
                weight: tape.leaf(NumArray::zeros(vec![3, 3])),
                bias: tape.leaf(NumArray::zeros(vec![3])),
            })
            .collect();
        let y = mlp_forward(&mut tape, &layers, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mlp_matches_straight_line_reimplementation() {
        let mut rng = Rng::new(23);
        let widths = [3usize, 4, 4, 3, 2, 2];
        let ws: Vec<NumArray> = (0..5)
            .map(|i| init_weight(&mut rng, widths[i + 1], widths[i]))
            .collect();
        let bs: Vec<NumArray> = (0..5)
            .map(|i| {
                NumArray::vector((0..widths[i + 1]).map(|_| rng.uniform_in(-0.5, 0.5)).collect())
            })
            .collect();
        let x0: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        // Independent plain-loop evaluation.
        let mut h = x0.clone();
        for i in 0..5 {
            let (out_w, in_w) = (widths[i + 1], widths[i]);
            let mut next = vec![0.0; out_w];
            for r in 0..out_w {
                let mut acc = bs[i].data()[r];
                for c in 0..in_w {
                    acc += ws[i].data()[r * in_w + c] * h[c];
                }
                next[r] = acc;
            }
            if i < 4 {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = next;
        }

        let mut tape = Tape::new();
        let x = tape.leaf(NumArray::vector(x0));
        let layers: Vec<LinearNodes> = (0..5)
            .map(|i| LinearNodes {
                weight: tape.leaf(ws[i].clone()),
                bias: tape.leaf(bs[i].clone()),
            })
            .collect();
        let y = mlp_forward(&mut tape, &layers, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_mlp_stack_gradient_check() {
        let mut rng = Rng::new(41);
        let d = 4;
        let feat = 3;
        let d_k = 3;
        let mask = vec![true, true, true, false];
        let mut token_rows = vec![0.0; d * feat];
        for (i, v) in token_rows.iter_mut().enumerate() {
            if mask[i / feat] {
                *v = rng.uniform_in(-1.0, 1.0);
            }
        }
        let tokens = NumArray::new(vec![d, feat], token_rows).unwrap();
        let widths = [d * d_k, 5, 5, 5, 5, d];
        let mut params: Vec<(String, NumArray)> = vec![
            ("wq".into(), init_weight(&mut rng, feat, d_k)),
            ("wk".into(), init_weight(&mut rng, feat, d_k)),
            ("wv".into(), init_weight(&mut rng, feat, d_k)),
        ];
        for i in 0..5 {
            params.push((format!("w{i}"), init_weight(&mut rng, widths[i + 1], widths[i])));
            params.push((
                format!("b{i}"),
                NumArray::vector(
                    (0..widths[i + 1]).map(|_| rng.uniform_in(-0.2, 0.2)).collect(),
                ),
            ));
        }

        let build = |ps: &[(String, NumArray)]| -> Result<(Tape, NodeId, Vec<NodeId>), NnError> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|(_, a)| tape.leaf(a.clone())).collect();
            let t = tape.leaf(tokens.clone());
            let head = AttentionNodes {
                wq: ids[0],
                wk: ids[1],
                wv: ids[2],
                d_k,
            };
            let (att, _) = attention(&mut tape, t, &mask, &head)?;
            let flat = tape.reshape(att, vec![d * d_k])?;
            let layers: Vec<LinearNodes> = (0..5)
                .map(|i| LinearNodes {
                    weight: ids[3 + 2 * i],
                    bias: ids[4 + 2 * i],
                })
                .collect();
            let y = mlp_forward(&mut tape, &layers, flat)?;
            let sq = tape.square(y)?;
            let root = tape.sum(sq)?;
            Ok((tape, root, ids))
        };

        let report = gradient_check(
            |ps| {
                let (tape, root, _) = build(ps).unwrap();
                Ok(tape.value(root).item())
            },
            |ps| {
                let (tape, root, ids) = build(ps).unwrap();
                let adj = tape.backward(root)?;
                Ok(ids.iter().map(|id| adj.wrt(*id)).collect())
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::new();
        store.insert("w", NumArray::vector(vec![1.0, -2.0])).unwrap();
        let mut grads = Grads::new();
        grads.insert("w".into(), NumArray::zeros(vec![2]));
        store.adam_step(&grads, 1e-3).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // param 0, grad 2, lr 1e-3: m_hat = 2, v_hat = 4, step = -lr*2/(2+eps).
        let mut store = ParamStore::new();
        store.insert("w", NumArray::scalar(0.0)).unwrap();
        let mut grads = Grads::new();
        grads.insert("w".into(), NumArray::scalar(2.0));
        store.adam_step(&grads, 1e-3).unwrap();
        let expected = -1e-3 * 2.0 / (2.0 + ADAM_EPS);
        assert!((store.get("w").unwrap().item() - expected).abs() < 1e-18);
        assert!((store.get("w").unwrap().item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_frozen_bit_identical() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        store.insert("frozen", init_weight(&mut rng, 3, 3)).unwrap();
        store.insert("live", init_weight(&mut rng, 3, 3)).unwrap();
        store.set_frozen("frozen", true).unwrap();
        let before: Vec<u64> = store.get("frozen").unwrap().data().iter().map(|x| x.to_bits()).collect();
        for step in 0..25 {
            let mut grads = Grads::new();
            grads.insert(
                "frozen".into(),
                NumArray::new(vec![3, 3], vec![step as f64 + 1.0; 9]).unwrap(),
            );
            grads.insert(
                "live".into(),
                NumArray::new(vec![3, 3], vec![0.1; 9]).unwrap(),
            );
            store.adam_step(&grads, 1e-2).unwrap();
        }
        let after: Vec<u64> = store.get("frozen").unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(
            store.get("live").unwrap().data()[0],
            store.get("live").unwrap().data()[0] + 1.0
        );
    }

    #[test]
    fn adam_nonfinite_gradient_aborts_untouched() {
        let mut store = ParamStore::new();
        store.insert("w", NumArray::vector(vec![1.0, 2.0])).unwrap();
        let mut grads = Grads::new();
        grads.insert("w".into(), NumArray::vector(vec![1.0, f64::NAN]));
        let err = store.adam_step(&grads, 1e-3);
        assert!(matches!(err, Err(NnError::NonFiniteGradient { .. })));
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(store.step_count(), 0);
    }

    #[test]
    fn init_deterministic_and_bounded() {
        let a = init_weight(&mut Rng::new(9), 4, 1);
        let b = init_weight(&mut Rng::new(9), 4, 1);
        assert_eq!(a.data(), b.data());
        // fan_in = 1 -> entries in [-1, 1]
        for x in a.data() {
            assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn init_mean_near_zero() {
        let w = init_weight(&mut Rng::new(123), 100, 100);
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        // bound = 0.1, sd = bound/sqrt(3) ~ 0.0577, se of mean over 1e4 ~ 5.8e-4
        assert!(mean.abs() < 3.0 * 0.1 / (3.0f64).sqrt() / 100.0, "mean {mean}");
    }

    #[test]
    fn count_params_examples() {
        let mut store = ParamStore::new();
        assert_eq!(store.count_params(), 0);
        store.insert("w", NumArray::zeros(vec![3, 4])).unwrap();
        store.insert("b", NumArray::zeros(vec![4])).unwrap();
        assert_eq!(store.count_params(), 16);
        store.set_frozen("b", true).unwrap();
        assert_eq!(store.count_params(), 12);
        assert_eq!(store.count_all(), 16);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join("ionflux-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let mut rng = Rng::new(77);
        let mut store = ParamStore::new();
        store.insert("embed.w", init_weight(&mut rng, 6, 8)).unwrap();
        store.insert("mlp.0.w", init_weight(&mut rng, 4, 4)).unwrap();
        store.set_frozen("embed.w", true).unwrap();
        let arch = serde_json::json!({"d": 8, "d_k": 8});
        save_checkpoint(
            &path,
            &store,
            arch.clone(),
            vec![SeedRecord {
                stage: "init".into(),
                seed: 77,
            }],
        )
        .unwrap();
        let (loaded, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.version, CHECKPOINT_VERSION);
        assert_eq!(manifest.architecture, arch);
        assert_eq!(loaded.get("embed.w").unwrap(), store.get("embed.w").unwrap());
        assert_eq!(loaded.get("mlp.0.w").unwrap(), store.get("mlp.0.w").unwrap());
        assert!(loaded.is_frozen("embed.w").unwrap());
        assert!(!loaded.is_frozen("mlp.0.w").unwrap());
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = std::env::temp_dir().join("ionflux-ckpt-test-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            r#"{"version":"ionflux-ckpt/99","arrays":[],"architecture":null,"seeds":[]}"#,
        )
        .unwrap();
        std::fs::write(path.with_extension("bin"), b"").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::Checkpoint(_))));
    }
}
