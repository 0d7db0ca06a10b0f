//! Conditional attention over a target subgraph and the stacked local layers.
//!
//! All state is indexed by position in the subgraph's sorted node list. Layer
//! `j` only computes outputs for nodes whose value can still reach a target in
//! the remaining `K - j - 1` layers, unless `full` evaluation is requested.

use crate::error::{KcanError, Result};
use crate::graph::EntityId;
use crate::linalg::{
    axpy, dot, leaky_relu, leaky_relu_grad, matvec, matvec_t_acc, outer_acc, softmax_backward, softmax_in_place,
};
use crate::params::{GradientSet, ParamId, ParameterStore};
use crate::rng::{dropout_row, dropout_scale};
use crate::sampler::TargetSubgraph;

/// `e_𝒯 = e_u ‖ e_i`, user first.
pub fn target_repr(user: &[f64], item: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(user.len() + item.len());
    out.extend_from_slice(user);
    out.extend_from_slice(item);
    out
}

/// `α₂ = aᵀ [W_t e_𝒯 ‖ W_e e_t]` for LCSAN layer `layer` (0-based).
pub fn entity_target_score(store: &ParameterStore, layer: usize, target: &[f64], entity: &[f64]) -> Result<f64> {
    let wt = store.get(ParamId::AttnTarget(layer));
    let we = store.get(ParamId::AttnEntity(layer));
    let a = &store.get(ParamId::AttnVector(layer)).data;
    if wt.cols != target.len() || we.cols != entity.len() || a.len() != wt.rows + we.rows {
        return Err(KcanError::Shape(format!(
            "layer {layer} attention expects target dim {} and entity dim {}",
            wt.cols, we.cols
        )));
    }
    let mut s = vec![0.0; wt.rows];
    matvec(&wt.data, wt.rows, wt.cols, target, &mut s);
    let mut q = vec![0.0; we.rows];
    matvec(&we.data, we.rows, we.cols, entity, &mut q);
    Ok(dot(&a[..wt.rows], &s) + dot(&a[wt.rows..], &q))
}

/// `softmax(LeakyReLU(α₁ · α₂))` over one neighbor set.
pub fn conditional_attention(alpha1: &[f64], alpha2: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = alpha1.iter().zip(alpha2).map(|(a, b)| leaky_relu(a * b)).collect();
    softmax_in_place(&mut out);
    out
}

/// Subgraph re-indexed by local node position.
#[derive(Debug, Clone)]
pub struct LocalGraph {
    nodes: Vec<EntityId>,
    offsets: Vec<usize>,
    tails: Vec<usize>,
    alpha1: Vec<f64>,
    user: usize,
    item: usize,
}

impl LocalGraph {
    /// Edge `k` of the local graph is edge `k` of `sg.edges()`.
    pub fn new(sg: &TargetSubgraph) -> Self {
        let nodes = sg.nodes().to_vec();
        let pos = |v: EntityId| nodes.binary_search(&v).expect("edge endpoint in node set");
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        offsets.push(0);
        let edges = sg.edges();
        let mut k = 0;
        for &v in &nodes {
            while k < edges.len() && edges[k].head == v {
                k += 1;
            }
            offsets.push(k);
        }
        debug_assert_eq!(k, edges.len());
        let tails = edges.iter().map(|e| pos(e.tail)).collect();
        let alpha1 = edges.iter().map(|e| e.attention).collect();
        LocalGraph {
            user: pos(sg.user),
            item: pos(sg.item),
            nodes,
            offsets,
            tails,
            alpha1,
        }
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn item(&self) -> usize {
        self.item
    }

    pub fn edge_count(&self) -> usize {
        self.tails.len()
    }

    fn edge_range(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    /// `active[l][v]`: node `v` needs a value at level `l` (level 0 = layer-1 input).
    /// With `full`, every node is active at every level.
    pub fn active_levels(&self, hops: usize, full: bool) -> Vec<Vec<bool>> {
        let n = self.len();
        if full {
            return vec![vec![true; n]; hops + 1];
        }
        let mut levels = vec![vec![false; n]; hops + 1];
        levels[hops][self.user] = true;
        levels[hops][self.item] = true;
        for l in (0..hops).rev() {
            let mut cur = levels[l + 1].clone();
            for (v, _) in levels[l + 1].iter().enumerate().filter(|(_, &on)| on) {
                for e in self.edge_range(v) {
                    cur[self.tails[e]] = true;
                }
            }
            levels[l] = cur;
        }
        levels
    }
}

/// Inverted-dropout setting for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    pub fn scale(&self, layer: usize, node: EntityId, k: usize) -> f64 {
        dropout_scale(self.rate, self.seed, &[layer as u64, node as u64], k)
    }

    /// Multipliers of a whole row; `out[k] == self.scale(layer, node, k)`.
    pub fn fill_row(&self, layer: usize, node: EntityId, out: &mut [f64]) {
        dropout_row(self.rate, self.seed, &[layer as u64, node as u64], out)
    }
}

/// Per-layer forward state. Node-wide arrays are indexed by local node; the
/// rest are compact over `outs`, the nodes whose output is computed.
#[derive(Debug, Clone)]
struct LayerTrace {
    fin: usize,
    fout: usize,
    att: usize,
    outs: Vec<usize>,
    s_target: Vec<f64>,
    /// `W_eᵀ a_E`, so that `a_E · W_e h_t = u · h_t`.
    u: Vec<f64>,
    products: Vec<f64>,
    alpha: Vec<f64>,
    /// `h_v ‖ Σ α h_t` per output slot.
    concat: Vec<f64>,
    pre: Vec<f64>,
    mask: Vec<f64>,
    /// Node-wide output, zero where inactive.
    output: Vec<f64>,
}

/// Forward state of all LCSAN layers for one target.
#[derive(Debug, Clone)]
pub struct LcsanTrace {
    layers: Vec<LayerTrace>,
}

impl LcsanTrace {
    /// Final-layer representation of local node `v`.
    pub fn output(&self, v: usize) -> &[f64] {
        let last = self.layers.last().expect("at least one layer");
        &last.output[v * last.fout..(v + 1) * last.fout]
    }

    /// Conditional attention of every local edge at `layer`; NaN where the head was inactive.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].alpha
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

fn check_layer_shapes(store: &ParameterStore, j: usize, fin: usize, target_dim: usize) -> Result<()> {
    let wt = store.get(ParamId::AttnTarget(j));
    let we = store.get(ParamId::AttnEntity(j));
    let a = store.get(ParamId::AttnVector(j));
    let w = store.get(ParamId::LocalWeight(j));
    let b = store.get(ParamId::LocalBias(j));
    if wt.cols != target_dim
        || we.cols != fin
        || wt.rows != we.rows
        || a.cols != 2 * wt.rows
        || w.cols != 2 * fin
        || b.cols != w.rows
    {
        return Err(KcanError::Shape(format!("LCSAN layer {j} parameters are inconsistent")));
    }
    Ok(())
}

/// Runs the `K` stacked layers. `h0` holds `e^(1)` rows (local index, width `F1`);
/// only rows active at level 0 are read.
pub fn lcsan_forward(
    store: &ParameterStore,
    local: &LocalGraph,
    h0: &[f64],
    target: &[f64],
    full: bool,
    dropout: Option<Dropout>,
) -> Result<LcsanTrace> {
    let dims = store.dims();
    let hops = dims.hops();
    let n = local.len();
    let levels = local.active_levels(hops, full);
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(hops);
    for j in 0..hops {
        let (fin, fout, att) = (dims.tower[j], dims.tower[j + 1], dims.attention_dim(j));
        let input: &[f64] = match layers.last() {
            Some(prev) => &prev.output,
            None => h0,
        };
        if input.len() != n * fin {
            return Err(KcanError::Shape(format!("layer {j} input has wrong width")));
        }
        check_layer_shapes(store, j, fin, target.len())?;
        let wt = store.get(ParamId::AttnTarget(j));
        let we = store.get(ParamId::AttnEntity(j));
        let a = &store.get(ParamId::AttnVector(j)).data;
        let w = store.get(ParamId::LocalWeight(j));
        let b = &store.get(ParamId::LocalBias(j)).data;
        let outs: Vec<usize> = (0..n).filter(|&v| levels[j + 1][v]).collect();

        let mut s_target = vec![0.0; att];
        matvec(&wt.data, att, 2 * dims.global_dim(), target, &mut s_target);
        let target_term = dot(&a[..att], &s_target);
        let mut u = vec![0.0; fin];
        matvec_t_acc(&we.data, att, fin, &a[att..], &mut u);

        let mut alpha2 = vec![0.0; n];
        for v in (0..n).filter(|&v| levels[j][v]) {
            alpha2[v] = target_term + dot(&u, &input[v * fin..(v + 1) * fin]);
        }

        let mut products = vec![f64::NAN; local.edge_count()];
        let mut alpha = vec![f64::NAN; local.edge_count()];
        let mut concat = vec![0.0; outs.len() * 2 * fin];
        let mut pre = vec![0.0; outs.len() * fout];
        let mut mask = vec![1.0; outs.len() * fout];
        let mut output = vec![0.0; n * fout];
        for (s, &v) in outs.iter().enumerate() {
            let range = local.edge_range(v);
            for e in range.clone() {
                products[e] = local.alpha1[e] * alpha2[local.tails[e]];
                alpha[e] = leaky_relu(products[e]);
            }
            softmax_in_place(&mut alpha[range.clone()]);
            let cat = &mut concat[s * 2 * fin..(s + 1) * 2 * fin];
            cat[..fin].copy_from_slice(&input[v * fin..(v + 1) * fin]);
            for e in range {
                let t = local.tails[e];
                axpy(alpha[e], &input[t * fin..(t + 1) * fin], &mut cat[fin..]);
            }
            let z = &mut pre[s * fout..(s + 1) * fout];
            matvec(&w.data, fout, 2 * fin, cat, z);
            axpy(1.0, b, z);
            let mv = &mut mask[s * fout..(s + 1) * fout];
            if let Some(d) = dropout {
                d.fill_row(j + 1, local.nodes[v], mv);
            }
            for k in 0..fout {
                output[v * fout + k] = leaky_relu(z[k]) * mv[k];
            }
        }
        layers.push(LayerTrace {
            fin,
            fout,
            att,
            outs,
            s_target,
            u,
            products,
            alpha,
            concat,
            pre,
            mask,
            output,
        });
    }
    Ok(LcsanTrace { layers })
}

/// Backprop from final-layer gradients (`n x F_{K+1}`) to parameter gradients.
/// `h0` must be the input the trace was built from. Returns the gradient
/// w.r.t. `h0` (`n x F1`) and w.r.t. the target representation.
pub fn lcsan_backward(
    store: &ParameterStore,
    local: &LocalGraph,
    trace: &LcsanTrace,
    h0: &[f64],
    target: &[f64],
    grad_final: &[f64],
    grads: &mut GradientSet,
) -> (Vec<f64>, Vec<f64>) {
    let n = local.len();
    let mut gout = grad_final.to_vec();
    let mut g_target = vec![0.0; target.len()];
    for (j, lt) in trace.layers.iter().enumerate().rev() {
        let (fin, fout, att) = (lt.fin, lt.fout, lt.att);
        let input: &[f64] = if j == 0 { h0 } else { &trace.layers[j - 1].output };
        let w = store.get(ParamId::LocalWeight(j));
        let we = store.get(ParamId::AttnEntity(j));
        let wt = store.get(ParamId::AttnTarget(j));
        let a = &store.get(ParamId::AttnVector(j)).data;
        let mut gin = vec![0.0; n * fin];
        let mut g_alpha2 = vec![0.0; n];
        let mut gw = vec![0.0; fout * 2 * fin];
        let mut gb = vec![0.0; fout];
        let mut gz = vec![0.0; fout];
        let mut gcat = vec![0.0; 2 * fin];
        let mut g_alpha = Vec::new();
        let mut g_logit = Vec::new();
        for (s, &v) in lt.outs.iter().enumerate() {
            let gy = &gout[v * fout..(v + 1) * fout];
            if gy.iter().all(|&g| g == 0.0) {
                continue;
            }
            for k in 0..fout {
                let idx = s * fout + k;
                gz[k] = gy[k] * lt.mask[idx] * leaky_relu_grad(lt.pre[idx]);
            }
            let cat = &lt.concat[s * 2 * fin..(s + 1) * 2 * fin];
            outer_acc(&mut gw, fout, 2 * fin, &gz, cat);
            axpy(1.0, &gz, &mut gb);
            gcat.fill(0.0);
            matvec_t_acc(&w.data, fout, 2 * fin, &gz, &mut gcat);
            axpy(1.0, &gcat[..fin], &mut gin[v * fin..(v + 1) * fin]);
            let gn = &gcat[fin..];

            let range = local.edge_range(v);
            if range.is_empty() {
                continue;
            }
            g_alpha.clear();
            for e in range.clone() {
                let t = local.tails[e];
                axpy(lt.alpha[e], gn, &mut gin[t * fin..(t + 1) * fin]);
                g_alpha.push(dot(gn, &input[t * fin..(t + 1) * fin]));
            }
            g_logit.resize(g_alpha.len(), 0.0);
            softmax_backward(&lt.alpha[range.clone()], &g_alpha, &mut g_logit);
            for (k, e) in range.enumerate() {
                let gc = g_logit[k] * leaky_relu_grad(lt.products[e]);
                g_alpha2[local.tails[e]] += gc * local.alpha1[e];
            }
        }

        // α₂(t) = a_T · s_T + u · h_t: every parameter sees the α₂ gradients
        // only through their sum and the g₂-weighted sum of inputs.
        let mut g2_sum = 0.0;
        let mut h_sum = vec![0.0; fin];
        for (t, &g2) in g_alpha2.iter().enumerate() {
            if g2 == 0.0 {
                continue;
            }
            g2_sum += g2;
            axpy(g2, &input[t * fin..(t + 1) * fin], &mut h_sum);
            axpy(g2, &lt.u, &mut gin[t * fin..(t + 1) * fin]);
        }
        let g_s: Vec<f64> = a[..att].iter().map(|x| g2_sum * x).collect();
        let mut ga = vec![0.0; 2 * att];
        axpy(g2_sum, &lt.s_target, &mut ga[..att]);
        matvec(&we.data, att, fin, &h_sum, &mut ga[att..]);
        outer_acc(grads.dense_mut(ParamId::AttnTarget(j)), att, wt.cols, &g_s, target);
        matvec_t_acc(&wt.data, att, wt.cols, &g_s, &mut g_target);
        outer_acc(grads.dense_mut(ParamId::AttnEntity(j)), att, fin, &a[att..], &h_sum);
        axpy(1.0, &ga, grads.dense_mut(ParamId::AttnVector(j)));
        axpy(1.0, &gw, grads.dense_mut(ParamId::LocalWeight(j)));
        axpy(1.0, &gb, grads.dense_mut(ParamId::LocalBias(j)));
        gout = gin;
    }
    (gout, g_target)
}
