//! Architectures built from the shared kernels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::{build_impression_batch, expand_batch, fanout, BatchConfig, JaggedBatch, KeyedJagged, PAD_ID};
use crate::schema::{expand_request_sample, FeatureId, FeatureRegistry, RequestSample};
use crate::tensor::{affine, dot, relu, Matrix};

use super::embedding::{lookup_pooled, EmbeddingTable};
use super::lce::{user_arch_forward, LceParams, Tensor3};
use super::seq::{pool_user, SeqEncoderParams, UserPooling};
use super::{uniform_matrix, uniform_vec, Counters, ModelError};

/// Counter key for item-id embedding rows (targets and item towers).
pub const ITEM_ID_FEATURE: FeatureId = FeatureId(u64::MAX);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// UserArch user tower, MLP item tower, dot-product score.
    TwoTower,
    /// Sequence-encoder user tower over history only, dot-product score.
    Retrieval,
    /// Per-target sequence encodings.
    Ranking,
    /// UserArch + ranking encoder + item features through an interaction
    /// MLP and multi-task head.
    Lsr,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::TwoTower,
        Architecture::Retrieval,
        Architecture::Ranking,
        Architecture::Lsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::TwoTower => "two_tower",
            Architecture::Retrieval => "retrieval",
            Architecture::Ranking => "ranking",
            Architecture::Lsr => "lsr",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Roo,
    Impression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seed: u64,
    pub dim: usize,
    pub table_rows: u32,
    pub lce_n_out: usize,
    pub lce_d_out: usize,
    pub n_max: usize,
    pub hidden: usize,
    pub num_tasks: usize,
    /// RO id-list holding the user's history item ids, oldest first.
    pub history_items: Option<FeatureId>,
    /// Action ids aligned with `history_items`.
    pub history_actions: Option<FeatureId>,
    /// Context ids aligned with `history_items`.
    pub history_contexts: Option<FeatureId>,
    pub user_pooling: UserPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            table_rows: 1024,
            lce_n_out: 2,
            lce_d_out: 8,
            n_max: 64,
            hidden: 32,
            num_tasks: 2,
            history_items: None,
            history_actions: None,
            history_contexts: None,
            user_pooling: UserPooling::LastValid,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if c.dim == 0 || c.lce_n_out == 0 || c.lce_d_out == 0 || c.hidden == 0 || c.n_max == 0 || c.table_rows == 0 {
            return Err(ModelError::Shape("model dimensions must be positive".into()));
        }
        Ok(())
    }

    fn history_features(&self) -> impl Iterator<Item = FeatureId> {
        [self.history_items, self.history_actions, self.history_contexts]
            .into_iter()
            .flatten()
    }
}

/// Two affine layers with a ReLU between them and, optionally, after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
    pub relu_out: bool,
}

impl Mlp2 {
    pub fn init(n_in: usize, hidden: usize, n_out: usize, relu_out: bool, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform_matrix(rng, n_in, hidden),
            b1: uniform_vec(rng, hidden, n_in),
            w2: uniform_matrix(rng, hidden, n_out),
            b2: uniform_vec(rng, n_out, hidden),
            relu_out,
        }
    }

    pub fn forward(&self, x: &Matrix, flops: &mut u64) -> Matrix {
        let h = affine(x, &self.w1, Some(&self.b1)).map(relu);
        let y = affine(&h, &self.w2, Some(&self.b2));
        *flops += 2 * (x.rows() * (self.w1.rows() * self.w1.cols() + self.w2.rows() * self.w2.cols())) as u64;
        if self.relu_out {
            y.map(relu)
        } else {
            y
        }
    }
}

/// One affine logit per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskHead {
    /// `[hidden x tasks]`
    pub w: Matrix,
    pub b: Vec<f32>,
}

impl MultiTaskHead {
    pub fn forward(&self, x: &Matrix, flops: &mut u64) -> Matrix {
        *flops += 2 * (x.rows() * self.w.rows() * self.w.cols()) as u64;
        affine(x, &self.w, Some(&self.b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Shared by history positions and targets.
    pub item_table: EmbeddingTable,
    pub action_table: EmbeddingTable,
    pub context_table: EmbeddingTable,
    /// UserArch inputs: every RO id-list that is not a history feature.
    pub ro_tables: BTreeMap<FeatureId, EmbeddingTable>,
    pub nro_tables: BTreeMap<FeatureId, EmbeddingTable>,
    pub ro_dense_keys: Vec<FeatureId>,
    pub nro_dense_keys: Vec<FeatureId>,
    /// `[n_ro_dense x d]`, present when there are RO dense features.
    pub ro_dense_proj: Option<Matrix>,
    pub lce: LceParams,
    pub seq: SeqEncoderParams,
    /// `[n_out * d_out x d]`
    pub user_proj: Matrix,
    pub user_proj_b: Vec<f32>,
    pub item_tower: Mlp2,
    pub interaction: Mlp2,
    pub head: MultiTaskHead,
}

fn table_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.gen()
}

impl ModelParams {
    pub fn init(config: &ModelConfig, registry: &FeatureRegistry) -> Result<Self, ModelError> {
        let c = config;
        c.validate()?;
        for f in c.history_features() {
            if !registry.ro_idlist().contains(&f) {
                return Err(ModelError::UnknownFeature(f));
            }
        }
        let d = c.dim;
        let dim = d as u32;
        let history: Vec<FeatureId> = c.history_features().collect();
        let ro_tables: BTreeMap<_, _> = registry
            .ro_idlist()
            .iter()
            .filter(|f| !history.contains(f))
            .map(|&f| (f, EmbeddingTable::new(c.table_rows, dim, table_seed(c.seed, f.0))))
            .collect();
        let nro_tables: BTreeMap<_, _> = registry
            .nro_idlist()
            .iter()
            .map(|&f| (f, EmbeddingTable::new(c.table_rows, dim, table_seed(c.seed, f.0))))
            .collect();
        let ro_dense_keys: Vec<FeatureId> = registry.ro_dense().iter().copied().collect();
        let nro_dense_keys: Vec<FeatureId> = registry.nro_dense().iter().copied().collect();

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let ro_dense_proj = (!ro_dense_keys.is_empty()).then(|| uniform_matrix(&mut rng, ro_dense_keys.len(), d));
        let n_in = ro_tables.len() + usize::from(ro_dense_proj.is_some());
        if n_in == 0 {
            return Err(ModelError::Shape(
                "UserArch needs at least one non-history RO feature".into(),
            ));
        }
        let lce = LceParams::init(n_in, c.lce_n_out, d, c.lce_d_out, &mut rng);
        let seq = SeqEncoderParams::init(d, c.n_max, &mut rng);
        let flat = c.lce_n_out * c.lce_d_out;
        let user_proj = uniform_matrix(&mut rng, flat, d);
        let user_proj_b = uniform_vec(&mut rng, d, flat);
        let item_tower = Mlp2::init(d + nro_dense_keys.len(), c.hidden, d, false, &mut rng);
        let interaction = Mlp2::init(flat + 2 * d + nro_dense_keys.len(), c.hidden, c.hidden, true, &mut rng);
        let head = MultiTaskHead {
            w: uniform_matrix(&mut rng, c.hidden, c.num_tasks),
            b: uniform_vec(&mut rng, c.num_tasks, c.hidden),
        };
        Ok(Self {
            config: c.clone(),
            item_table: EmbeddingTable::new(c.table_rows, dim, table_seed(c.seed, u64::MAX)),
            action_table: EmbeddingTable::new(c.table_rows, dim, table_seed(c.seed, u64::MAX - 1)),
            context_table: EmbeddingTable::new(c.table_rows, dim, table_seed(c.seed, u64::MAX - 2)),
            ro_tables,
            nro_tables,
            ro_dense_keys,
            nro_dense_keys,
            ro_dense_proj,
            lce,
            seq,
            user_proj,
            user_proj_b,
            item_tower,
            interaction,
            head,
        })
    }

    fn check_batch(&self, batch: &JaggedBatch) -> Result<(), ModelError> {
        if batch.ro_dense_keys != self.ro_dense_keys || batch.nro_dense_keys != self.nro_dense_keys {
            return Err(ModelError::Shape("dense feature keys differ from the model's".into()));
        }
        let counts: u32 = batch.impressions_per_sample.iter().sum();
        if counts != batch.b_nro || batch.impressions_per_sample.len() != batch.b_ro as usize {
            return Err(ModelError::Shape(
                "impressions_per_sample disagrees with batch sizes".into(),
            ));
        }
        Ok(())
    }
}

/// Sum-pooled RO lookup, booked once per request row.
pub fn lookup_ro(
    table: &EmbeddingTable,
    jagged: &KeyedJagged,
    feature: FeatureId,
    counters: &mut Counters,
) -> Result<Matrix, ModelError> {
    lookup_pooled(table, jagged, feature, true, counters)
}

/// `[b_ro x n_out*d_out]` flattened UserArch output.
fn user_arch(batch: &JaggedBatch, p: &ModelParams, counters: &mut Counters) -> Result<Matrix, ModelError> {
    let mut features = Vec::with_capacity(p.lce.n_in);
    for (&f, table) in &p.ro_tables {
        features.push(lookup_ro(table, &batch.ro_idlist, f, counters)?);
    }
    if let Some(proj) = &p.ro_dense_proj {
        features.push(affine(&batch.ro_dense, proj, None));
        counters.ro_flops += 2 * (batch.ro_dense.rows() * proj.rows() * proj.cols()) as u64;
    }
    let x = Tensor3::stack_features(&features)?;
    Ok(user_arch_forward(&x, &p.lce, counters)?.flatten_rows())
}

fn history_ids(batch: &JaggedBatch, f: Option<FeatureId>, row: usize) -> Result<Option<&[u64]>, ModelError> {
    let Some(f) = f else { return Ok(None) };
    let k = batch.ro_idlist.key_index(f).ok_or(ModelError::UnknownFeature(f))?;
    Ok(Some(batch.ro_idlist.row(k, row)))
}

/// Embedded history of one request row: the most recent `n_max`
/// positions, padding positions dropped. Each token is
/// `item + action + context`.
fn history_tokens(
    batch: &JaggedBatch,
    p: &ModelParams,
    row: usize,
    counters: &mut Counters,
) -> Result<Vec<Vec<f32>>, ModelError> {
    let c = &p.config;
    let f_items = c
        .history_items
        .ok_or_else(|| ModelError::Shape("no history feature configured".into()))?;
    let items = history_ids(batch, Some(f_items), row)?.unwrap_or_default();
    let actions = history_ids(batch, c.history_actions, row)?;
    let contexts = history_ids(batch, c.history_contexts, row)?;
    for side in [actions, contexts].into_iter().flatten() {
        if side.len() != items.len() {
            return Err(ModelError::Misaligned { row });
        }
    }
    let start = items.len().saturating_sub(c.n_max);
    let mut tokens = Vec::new();
    for pos in start..items.len() {
        if items[pos] == PAD_ID {
            continue;
        }
        let mut t = p.item_table.row(items[pos]).to_vec();
        for (table, ids) in [(&p.action_table, actions), (&p.context_table, contexts)] {
            if let Some(ids) = ids {
                for (x, &w) in t.iter_mut().zip(table.row(ids[pos])) {
                    *x += w;
                }
            }
        }
        tokens.push(t);
    }
    let n = tokens.len() as u64;
    counters.record_fetch(f_items, true, n, p.item_table.dim);
    for f in [c.history_actions, c.history_contexts].into_iter().flatten() {
        counters.record_fetch(f, true, n, p.item_table.dim);
    }
    Ok(tokens)
}

/// User representation per request row from history alone; rows with no
/// valid history yield zeros and bump `empty_history_rows`.
pub fn seq_encode_retrieval(
    batch: &JaggedBatch,
    p: &ModelParams,
    counters: &mut Counters,
) -> Result<Matrix, ModelError> {
    let d = p.config.dim;
    let mut out = Matrix::zeros(batch.b_ro as usize, d);
    for r in 0..batch.b_ro as usize {
        let tokens = history_tokens(batch, p, r, counters)?;
        let enc = p.seq.encode_causal(&tokens, tokens.len(), counters);
        match pool_user(&enc, p.config.user_pooling) {
            Some(u) => out.row_mut(r).copy_from_slice(&u),
            None => counters.empty_history_rows += 1,
        }
    }
    Ok(out)
}

/// Encodings at every target position: history is encoded once per
/// request row, then each target attends to it and to itself.
pub fn seq_encode_ranking(batch: &JaggedBatch, p: &ModelParams, counters: &mut Counters) -> Result<Matrix, ModelError> {
    let mut out = Matrix::zeros(batch.b_nro as usize, p.config.dim);
    let mut j = 0;
    for (r, &k) in batch.impressions_per_sample.iter().enumerate() {
        if k == 0 {
            return Err(ModelError::EmptyTargets { row: r });
        }
        let tokens = history_tokens(batch, p, r, counters)?;
        if tokens.is_empty() {
            counters.empty_history_rows += 1;
        }
        let history = p.seq.encode_causal(&tokens, tokens.len(), counters);
        for _ in 0..k {
            let target = p.item_table.row(batch.items[j]);
            let enc = p.seq.encode_target(&history, target, counters);
            out.row_mut(j).copy_from_slice(&enc);
            j += 1;
        }
    }
    counters.record_fetch(ITEM_ID_FEATURE, false, batch.b_nro as u64, p.item_table.dim);
    Ok(out)
}

/// Item id embedding plus pooled NRO id-lists, `[b_nro x d]`.
fn item_embeddings(batch: &JaggedBatch, p: &ModelParams, counters: &mut Counters) -> Result<Matrix, ModelError> {
    let mut out = Matrix::zeros(batch.b_nro as usize, p.config.dim);
    for (j, &item) in batch.items.iter().enumerate() {
        out.row_mut(j).copy_from_slice(p.item_table.row(item));
    }
    counters.record_fetch(ITEM_ID_FEATURE, false, batch.b_nro as u64, p.item_table.dim);
    for (&f, table) in &p.nro_tables {
        let pooled = lookup_pooled(table, &batch.nro_idlist, f, false, counters)?;
        for j in 0..out.rows() {
            for (x, &y) in out.row_mut(j).iter_mut().zip(pooled.row(j)) {
                *x += y;
            }
        }
    }
    Ok(out)
}

fn item_tower(batch: &JaggedBatch, p: &ModelParams, counters: &mut Counters) -> Result<Matrix, ModelError> {
    let e = item_embeddings(batch, p, counters)?;
    let x = Matrix::hconcat(&[&e, &batch.nro_dense]);
    Ok(p.item_tower.forward(&x, &mut counters.nro_flops))
}

fn score(users: &Matrix, items: &Matrix, batch: &JaggedBatch, counters: &mut Counters) -> Matrix {
    let idx = fanout(batch);
    let mut out = Matrix::zeros(items.rows(), 1);
    for (j, &r) in idx.row_map.iter().enumerate() {
        out.set(j, 0, dot(users.row(r as usize), items.row(j)));
    }
    counters.nro_flops += 2 * (items.rows() * items.cols()) as u64;
    out
}

/// Scores `[b_nro x 1]`. The user tower is UserArch (two-tower) or the
/// history encoder (retrieval), computed once per request row.
pub fn two_tower_forward(
    batch: &JaggedBatch,
    p: &ModelParams,
    arch: Architecture,
    counters: &mut Counters,
) -> Result<Matrix, ModelError> {
    p.check_batch(batch)?;
    let users = match arch {
        Architecture::Retrieval => seq_encode_retrieval(batch, p, counters)?,
        _ => {
            let ua = user_arch(batch, p, counters)?;
            counters.ro_flops += 2 * (ua.rows() * p.user_proj.rows() * p.user_proj.cols()) as u64;
            affine(&ua, &p.user_proj, Some(&p.user_proj_b))
        }
    };
    let items = item_tower(batch, p, counters)?;
    Ok(score(&users, &items, batch, counters))
}

/// Per-task logits `[b_nro x tasks]`.
pub fn lsr_forward(batch: &JaggedBatch, p: &ModelParams, counters: &mut Counters) -> Result<Matrix, ModelError> {
    p.check_batch(batch)?;
    let ua = fanout(batch).gather(&user_arch(batch, p, counters)?);
    let ranked = seq_encode_ranking(batch, p, counters)?;
    let items = item_embeddings(batch, p, counters)?;
    let x = Matrix::hconcat(&[&ua, &ranked, &items, &batch.nro_dense]);
    let z = p.interaction.forward(&x, &mut counters.nro_flops);
    Ok(p.head.forward(&z, &mut counters.nro_flops))
}

/// Runs `arch`. In [`Mode::Impression`] the batch is first expanded so
/// user-side work runs once per impression row.
pub fn forward(
    batch: &JaggedBatch,
    p: &ModelParams,
    arch: Architecture,
    mode: Mode,
    counters: &mut Counters,
) -> Result<Matrix, ModelError> {
    let expanded;
    let batch = match mode {
        Mode::Roo => batch,
        Mode::Impression => {
            expanded = expand_batch(batch);
            &expanded
        }
    };
    counters.b_ro += batch.b_ro as u64;
    counters.b_nro += batch.b_nro as u64;
    match arch {
        Architecture::TwoTower | Architecture::Retrieval => two_tower_forward(batch, p, arch, counters),
        Architecture::Ranking => {
            p.check_batch(batch)?;
            seq_encode_ranking(batch, p, counters)
        }
        Architecture::Lsr => lsr_forward(batch, p, counters),
    }
}

/// Reference path: expands every sample to impression rows, batches
/// them impression-level and runs `arch` on that batch.
pub fn expanded_forward_oracle(
    samples: &[RequestSample],
    registry: &FeatureRegistry,
    batch_config: &BatchConfig,
    p: &ModelParams,
    arch: Architecture,
) -> Result<(Matrix, Counters), ModelError> {
    let mut rows = Vec::new();
    for s in samples {
        rows.extend(expand_request_sample(s)?);
    }
    let batch = build_impression_batch(&rows, registry, batch_config)?;
    let mut counters = Counters::default();
    let out = forward(&batch, p, arch, Mode::Impression, &mut counters)?;
    Ok((out, counters))
}
