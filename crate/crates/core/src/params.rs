//! Trainable parameters, sparse gradients, Adam and the L2 penalty.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{KcanError, Result};
use crate::linalg::norm2;

/// Shape configuration of every parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub entity_count: usize,
    pub relation_count: usize,
    /// Knowledge-embedding width `F0`.
    pub embed_dim: usize,
    /// `[F1, F2, ..., F_{K+1}]`: global layer width followed by one entry per LCSAN layer.
    pub tower: Vec<usize>,
    pub out_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.entity_count == 0 || self.relation_count == 0 {
            return Err(KcanError::Config("graph must have entities and relations".into()));
        }
        if self.embed_dim == 0 || self.out_dim == 0 || self.tower.contains(&0) {
            return Err(KcanError::Config("all dimensions must be positive".into()));
        }
        if self.tower.len() < 2 {
            return Err(KcanError::Config("tower needs at least two entries (K >= 1)".into()));
        }
        Ok(())
    }

    /// Number of LCSAN layers `K`.
    pub fn hops(&self) -> usize {
        self.tower.len() - 1
    }

    pub fn global_dim(&self) -> usize {
        self.tower[0]
    }

    pub fn local_dim(&self) -> usize {
        *self.tower.last().unwrap()
    }

    /// Width of the attention projections of LCSAN layer `j` (0-based).
    pub fn attention_dim(&self, j: usize) -> usize {
        self.tower[j + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    EntityEmbedding,
    RelationTranslation,
    RelationNormal,
    GlobalWeight,
    GlobalBias,
    /// `W_t` of LCSAN layer j.
    AttnTarget(usize),
    /// `W_e` of LCSAN layer j.
    AttnEntity(usize),
    /// Attention vector `a` of LCSAN layer j.
    AttnVector(usize),
    LocalWeight(usize),
    LocalBias(usize),
    OutWeight,
    OutBias,
}

impl ParamId {
    /// Embedding tables receive row-sparse gradients and lazy Adam updates.
    pub fn is_embedding(self) -> bool {
        matches!(
            self,
            ParamId::EntityEmbedding | ParamId::RelationTranslation | ParamId::RelationNormal
        )
    }

    fn slot(self, hops: usize) -> usize {
        match self {
            ParamId::EntityEmbedding => 0,
            ParamId::RelationTranslation => 1,
            ParamId::RelationNormal => 2,
            ParamId::GlobalWeight => 3,
            ParamId::GlobalBias => 4,
            ParamId::AttnTarget(j) => 5 + 5 * j,
            ParamId::AttnEntity(j) => 6 + 5 * j,
            ParamId::AttnVector(j) => 7 + 5 * j,
            ParamId::LocalWeight(j) => 8 + 5 * j,
            ParamId::LocalBias(j) => 9 + 5 * j,
            ParamId::OutWeight => 5 + 5 * hops,
            ParamId::OutBias => 6 + 5 * hops,
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamId::EntityEmbedding => "entity_embedding".into(),
            ParamId::RelationTranslation => "relation_translation".into(),
            ParamId::RelationNormal => "relation_normal".into(),
            ParamId::GlobalWeight => "global_weight".into(),
            ParamId::GlobalBias => "global_bias".into(),
            ParamId::AttnTarget(j) => format!("attn_target_{j}"),
            ParamId::AttnEntity(j) => format!("attn_entity_{j}"),
            ParamId::AttnVector(j) => format!("attn_vector_{j}"),
            ParamId::LocalWeight(j) => format!("local_weight_{j}"),
            ParamId::LocalBias(j) => format!("local_bias_{j}"),
            ParamId::OutWeight => "out_weight".into(),
            ParamId::OutBias => "out_bias".into(),
        }
    }
}

fn param_layout(dims: &ModelDims) -> Vec<(ParamId, usize, usize)> {
    let f0 = dims.embed_dim;
    let f1 = dims.global_dim();
    let mut out = vec![
        (ParamId::EntityEmbedding, dims.entity_count, f0),
        (ParamId::RelationTranslation, dims.relation_count, f0),
        (ParamId::RelationNormal, dims.relation_count, f0),
        (ParamId::GlobalWeight, f1, 2 * f0),
        (ParamId::GlobalBias, 1, f1),
    ];
    for j in 0..dims.hops() {
        let (fin, fout) = (dims.tower[j], dims.tower[j + 1]);
        let att = dims.attention_dim(j);
        out.push((ParamId::AttnTarget(j), att, 2 * f1));
        out.push((ParamId::AttnEntity(j), att, fin));
        out.push((ParamId::AttnVector(j), 1, 2 * att));
        out.push((ParamId::LocalWeight(j), fout, 2 * fin));
        out.push((ParamId::LocalBias(j), 1, fout));
    }
    out.push((ParamId::OutWeight, dims.out_dim, f1 + dims.local_dim()));
    out.push((ParamId::OutBias, 1, dims.out_dim));
    out
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

/// All trainable tensors plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    dims: ModelDims,
    ids: Vec<ParamId>,
    tensors: Vec<Tensor>,
    adam: AdamState,
}

/// Xavier-uniform bound for a `rows x cols` tensor (`fan_in = cols`, `fan_out = rows`).
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Xavier-uniform weights and embeddings, zero biases, unit hyperplane normals.
pub fn init_params(dims: &ModelDims, rng: &mut impl Rng) -> Result<ParameterStore> {
    dims.validate()?;
    let layout = param_layout(dims);
    let mut ids = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for &(id, rows, cols) in &layout {
        let mut t = Tensor::zeros(rows, cols);
        let is_bias = matches!(id, ParamId::GlobalBias | ParamId::LocalBias(_) | ParamId::OutBias);
        if !is_bias {
            let bound = xavier_bound(rows, cols);
            for x in t.data.iter_mut() {
                *x = rng.random_range(-bound..=bound);
            }
        }
        if id == ParamId::RelationNormal {
            for r in 0..rows {
                normalize(t.row_mut(r));
            }
        }
        ids.push(id);
        tensors.push(t);
    }
    let zeros: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    Ok(ParameterStore {
        dims: dims.clone(),
        ids,
        tensors,
        adam: AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        },
    })
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
}

impl ParameterStore {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    fn slot(&self, id: ParamId) -> usize {
        id.slot(self.dims.hops())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[self.slot(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let s = self.slot(id);
        &mut self.tensors[s]
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn entity(&self, e: u32) -> &[f64] {
        self.get(ParamId::EntityEmbedding).row(e as usize)
    }

    pub fn translation(&self, r: u32) -> &[f64] {
        self.get(ParamId::RelationTranslation).row(r as usize)
    }

    pub fn normal(&self, r: u32) -> &[f64] {
        self.get(ParamId::RelationNormal).row(r as usize)
    }

    pub fn renormalize_normals(&mut self) {
        let t = self.get_mut(ParamId::RelationNormal);
        for r in 0..t.rows {
            normalize(t.row_mut(r));
        }
    }

    /// Sum of squared entries over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Gradient for one tensor: dense, or a map of touched rows.
#[derive(Debug, Clone, PartialEq)]
pub enum GradTensor {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradients mirroring the layout of a [`ParameterStore`]; untouched tensors and rows are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    hops: usize,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<GradTensor>>,
}

impl GradientSet {
    pub fn for_store(store: &ParameterStore) -> Self {
        GradientSet {
            hops: store.dims.hops(),
            shapes: store.tensors.iter().map(|t| (t.rows, t.cols)).collect(),
            grads: vec![None; store.tensors.len()],
        }
    }

    /// Zero-initialized accumulator for one row of an embedding table.
    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        debug_assert!(id.is_embedding());
        let s = id.slot(self.hops);
        let cols = self.shapes[s].1;
        let g = self.grads[s].get_or_insert_with(|| GradTensor::Rows(BTreeMap::new()));
        match g {
            GradTensor::Rows(rows) => rows.entry(row).or_insert_with(|| vec![0.0; cols]),
            GradTensor::Dense(_) => unreachable!("embedding tables use row gradients"),
        }
    }

    /// Zero-initialized accumulator for a dense tensor.
    pub fn dense_mut(&mut self, id: ParamId) -> &mut [f64] {
        debug_assert!(!id.is_embedding());
        let s = id.slot(self.hops);
        let (r, c) = self.shapes[s];
        let g = self.grads[s].get_or_insert_with(|| GradTensor::Dense(vec![0.0; r * c]));
        match g {
            GradTensor::Dense(v) => v,
            GradTensor::Rows(_) => unreachable!("dense tensors use dense gradients"),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradTensor> {
        self.grads[id.slot(self.hops)].as_ref()
    }

    /// Gradient of a single scalar, zero if absent.
    pub fn value(&self, id: ParamId, flat: usize) -> f64 {
        let cols = self.shapes[id.slot(self.hops)].1;
        match self.get(id) {
            None => 0.0,
            Some(GradTensor::Dense(v)) => v[flat],
            Some(GradTensor::Rows(rows)) => rows.get(&(flat / cols)).map(|r| r[flat % cols]).unwrap_or(0.0),
        }
    }

    /// Every `(param, flat index)` that has a gradient entry, in a fixed order.
    pub fn entries(&self, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
        let mut out = Vec::new();
        for &id in ids {
            let cols = self.shapes[id.slot(self.hops)].1;
            match self.get(id) {
                None => {}
                Some(GradTensor::Dense(v)) => out.extend((0..v.len()).map(|k| (id, k))),
                Some(GradTensor::Rows(rows)) => {
                    for &r in rows.keys() {
                        out.extend((0..cols).map(|c| (id, r * cols + c)));
                    }
                }
            }
        }
        out
    }

    pub fn merge(&mut self, other: &GradientSet) {
        for (s, g) in other.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match (&mut self.grads[s], g) {
                (slot @ None, g) => *slot = Some(g.clone()),
                (Some(GradTensor::Dense(a)), GradTensor::Dense(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (Some(GradTensor::Rows(a)), GradTensor::Rows(b)) => {
                    for (r, v) in b {
                        match a.get_mut(r) {
                            Some(dst) => dst.iter_mut().zip(v).for_each(|(x, y)| *x += y),
                            None => {
                                a.insert(*r, v.clone());
                            }
                        }
                    }
                }
                _ => unreachable!("gradient kinds are fixed per slot"),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            match g {
                GradTensor::Dense(v) => v.iter_mut().for_each(|x| *x *= factor),
                GradTensor::Rows(rows) => rows.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= factor)),
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| match g {
            GradTensor::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradTensor::Rows(rows) => rows.values().all(|v| v.iter().all(|x| x.is_finite())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam step. Only tensors and rows present in `grads` move;
/// hyperplane normals are renormalized to unit length afterwards.
pub fn adam_step(store: &mut ParameterStore, grads: &GradientSet, cfg: &AdamConfig) -> Result<()> {
    if grads.shapes.len() != store.tensors.len()
        || grads
            .shapes
            .iter()
            .zip(&store.tensors)
            .any(|(&(r, c), t)| r != t.rows || c != t.cols)
    {
        return Err(KcanError::Shape("gradient set does not match parameter store".into()));
    }
    store.adam.step += 1;
    let t = store.adam.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let update = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    };
    let mut touched_normals = Vec::new();
    for (s, g) in grads.grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let tensor = &mut store.tensors[s];
        let m = &mut store.adam.first[s];
        let v = &mut store.adam.second[s];
        match g {
            GradTensor::Dense(gd) => update(&mut tensor.data, m, v, gd),
            GradTensor::Rows(rows) => {
                let cols = tensor.cols;
                for (&r, gr) in rows {
                    if r >= tensor.rows || gr.len() != cols {
                        return Err(KcanError::Shape(format!(
                            "row {r} out of range for {}",
                            store.ids[s].name()
                        )));
                    }
                    let span = r * cols..(r + 1) * cols;
                    update(&mut tensor.data[span.clone()], &mut m[span.clone()], &mut v[span], gr);
                    if store.ids[s] == ParamId::RelationNormal {
                        touched_normals.push(r);
                    }
                }
            }
        }
    }
    let normals = store.get_mut(ParamId::RelationNormal);
    for r in touched_normals {
        normalize(normals.row_mut(r));
    }
    Ok(())
}

/// `λ · Σ θ²` over every parameter.
pub fn l2_penalty(store: &ParameterStore, lambda: f64) -> f64 {
    lambda * store.squared_norm()
}

/// Adds `2λθ` to every gradient entry present in `grads` and returns
/// `λ · Σ θ²` over exactly those entries.
pub fn add_l2_gradient(store: &ParameterStore, lambda: f64, grads: &mut GradientSet) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    for (s, g) in grads.grads.iter_mut().enumerate() {
        let Some(g) = g else { continue };
        let tensor = &store.tensors[s];
        match g {
            GradTensor::Dense(gd) => {
                for (gk, &th) in gd.iter_mut().zip(&tensor.data) {
                    *gk += 2.0 * lambda * th;
                    penalty += th * th;
                }
            }
            GradTensor::Rows(rows) => {
                for (&r, gr) in rows.iter_mut() {
                    for (gk, &th) in gr.iter_mut().zip(tensor.row(r)) {
                        *gk += 2.0 * lambda * th;
                        penalty += th * th;
                    }
                }
            }
        }
    }
    lambda * penalty
}

/// Metadata recorded alongside parameters in a snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotMeta {
    pub config_hash: String,
    pub id_map_hash: String,
    /// Seed of the run, which also fixes the train/test split.
    pub seed: u64,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"KCANSNAP";
const SNAPSHOT_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a versioned little-endian binary snapshot (parameters, Adam state, metadata).
pub fn save_snapshot(store: &ParameterStore, meta: &SnapshotMeta, mut w: impl Write) -> Result<()> {
    let io = |e| KcanError::Snapshot(format!("write failed: {e}"));
    (|| -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        put_str(&mut w, &meta.config_hash)?;
        put_str(&mut w, &meta.id_map_hash)?;
        put_u64(&mut w, meta.seed)?;
        let d = &store.dims;
        for x in [d.entity_count, d.relation_count, d.embed_dim, d.out_dim, d.tower.len()] {
            put_u64(&mut w, x as u64)?;
        }
        for &x in &d.tower {
            put_u64(&mut w, x as u64)?;
        }
        put_u64(&mut w, store.adam.step)?;
        for (s, t) in store.tensors.iter().enumerate() {
            put_str(&mut w, &store.ids[s].name())?;
            put_u64(&mut w, t.rows as u64)?;
            put_u64(&mut w, t.cols as u64)?;
            put_f64s(&mut w, &t.data)?;
            put_f64s(&mut w, &store.adam.first[s])?;
            put_f64s(&mut w, &store.adam.second[s])?;
        }
        w.flush()
    })()
    .map_err(io)
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| KcanError::Snapshot(format!("truncated snapshot: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x)
            .ok()
            .filter(|&v| v < (1 << 40))
            .ok_or_else(|| KcanError::Snapshot(format!("implausible size {x}")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.usize()?;
        let mut buf = vec![0u8; len];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| KcanError::Snapshot(format!("truncated snapshot: {e}")))?;
        String::from_utf8(buf).map_err(|_| KcanError::Snapshot("invalid utf-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn load_snapshot(r: impl Read) -> Result<(ParameterStore, SnapshotMeta)> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != SNAPSHOT_MAGIC {
        return Err(KcanError::Snapshot("not a snapshot file".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != SNAPSHOT_VERSION {
        return Err(KcanError::Snapshot(format!("unsupported version {version}")));
    }
    let meta = SnapshotMeta {
        config_hash: r.string()?,
        id_map_hash: r.string()?,
        seed: r.u64()?,
    };
    let (entity_count, relation_count, embed_dim, out_dim, tower_len) =
        (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let tower = (0..tower_len).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let dims = ModelDims {
        entity_count,
        relation_count,
        embed_dim,
        tower,
        out_dim,
    };
    dims.validate()?;
    let step = r.u64()?;
    let layout = param_layout(&dims);
    let mut ids = Vec::new();
    let mut tensors = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (id, rows, cols) in layout {
        let name = r.string()?;
        let (fr, fc) = (r.usize()?, r.usize()?);
        if name != id.name() || fr != rows || fc != cols {
            return Err(KcanError::Snapshot(format!(
                "tensor {name} ({fr}x{fc}) does not match expected {} ({rows}x{cols})",
                id.name()
            )));
        }
        ids.push(id);
        tensors.push(Tensor {
            rows,
            cols,
            data: r.f64s(rows * cols)?,
        });
        first.push(r.f64s(rows * cols)?);
        second.push(r.f64s(rows * cols)?);
    }
    Ok((
        ParameterStore {
            dims,
            ids,
            tensors,
            adam: AdamState { first, second, step },
        },
        meta,
    ))
}
