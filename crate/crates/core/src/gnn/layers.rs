use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::nn::{glorot, Activation, BatchNorm, Forward, Linear, Mlp};
use crate::scalar::Scalar;

use super::batch::{column, GraphBatch, META_RELATIONS};
use super::GnnError;

/// Negative slope of the attention LeakyReLU.
pub const ATTENTION_SLOPE: f64 = 0.2;
/// Offset inside the PNA standard deviation, `sqrt(var + eps) - sqrt(eps)`,
/// keeping the gradient finite at zero variance.
pub const PNA_STD_EPS: f64 = 1e-5;

/// The eight layer families (GSN in vertex and edge variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Gcn,
    Rgcn,
    Gin,
    Gat,
    Gatv2,
    Pna,
    GsnV,
    GsnE,
    Gearnet,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Gcn,
        LayerKind::Rgcn,
        LayerKind::Gin,
        LayerKind::Gat,
        LayerKind::Gatv2,
        LayerKind::Pna,
        LayerKind::GsnV,
        LayerKind::GsnE,
        LayerKind::Gearnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Rgcn => "rgcn",
            LayerKind::Gin => "gin",
            LayerKind::Gat => "gat",
            LayerKind::Gatv2 => "gatv2",
            LayerKind::Pna => "pna",
            LayerKind::GsnV => "gsn_v",
            LayerKind::GsnE => "gsn_e",
            LayerKind::Gearnet => "gearnet",
        }
    }

    /// Accepts the canonical names plus `gsn` as an alias of `gsn_v`.
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "gsn" | "gsn-v" => Some(LayerKind::GsnV),
            "gsn-e" => Some(LayerKind::GsnE),
            other => Self::ALL.into_iter().find(|k| k.name() == other),
        }
    }

    pub fn uses_motifs(self) -> bool {
        matches!(self, LayerKind::GsnV | LayerKind::GsnE)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, LayerKind::Gat | LayerKind::Gatv2)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Attention heads (gat/gatv2).
    pub heads: usize,
    /// Bond relations (rgcn/gearnet).
    pub relation_count: usize,
    /// Motif vector length (gsn).
    pub motif_dim: usize,
    /// Width of the projected edge features concatenated into messages;
    /// 0 disables edge features. For gearnet this is the width of the
    /// incoming edge embeddings of the edge pass.
    pub edge_dim: usize,
    /// PNA mean log-degree `delta`.
    pub pna_delta: f64,
}

/// A layer's weights.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Gcn {
        w: Linear,
        w_edge: Option<Linear>,
        bias: ParamId,
    },
    Rgcn {
        w_self: Linear,
        w_rel: Vec<Linear>,
        w_rel_edge: Vec<Option<Linear>>,
    },
    Gin {
        eps: ParamId,
        mlp: Mlp,
    },
    Gat {
        w: Linear,
        w_edge: Option<Linear>,
        a_dst: ParamId,
        a_src: ParamId,
        bias: ParamId,
    },
    Gatv2 {
        /// Left block of `W`, applied to the target node.
        w_left: Linear,
        /// Right block of `W`, applied to the source node; also the message.
        w_right: Linear,
        w_edge: Option<Linear>,
        a: ParamId,
        bias: ParamId,
    },
    Pna {
        psi: Mlp,
        phi: Mlp,
    },
    Gsn {
        psi: Mlp,
        phi: Mlp,
    },
    Gearnet {
        w_rel: Vec<Linear>,
        bn: BatchNorm,
        edge: Option<GearnetEdge>,
    },
}

/// Weights of the GearNet edge pass and the edge-to-node FC.
#[derive(Debug, Clone)]
pub struct GearnetEdge {
    pub w_meta: Vec<Linear>,
    pub bn: BatchNorm,
    pub fc: Linear,
}

/// One message-passing layer.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// Per-layer forward inputs besides node features.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeInputs {
    /// Projected edge features per directed edge (`2|E| x edge_dim`).
    pub projected: Option<Var>,
    /// GearNet edge embeddings per directed edge.
    pub gearnet: Option<Var>,
}

fn block_indicator<T: Scalar>(dim: usize, heads: usize) -> Tensor<T> {
    let width = dim / heads;
    let mut b = Tensor::zeros(dim, heads);
    for c in 0..dim {
        b.set(c, c / width, T::one());
    }
    b
}

impl Layer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let (i, o, ed) = (spec.in_dim, spec.out_dim, spec.edge_dim);
        let edge_lin = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, nm: &str| {
            (ed > 0).then(|| Linear::new(store, &format!("{name}.{nm}"), ed, o, false, rng))
        };
        let params = match spec.kind {
            LayerKind::Gcn => LayerParams::Gcn {
                w: Linear::new(store, &format!("{name}.w"), i, o, false, rng),
                w_edge: edge_lin(store, rng, "w_edge"),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(1, o)),
            },
            LayerKind::Rgcn => {
                let w_self = Linear::new(store, &format!("{name}.w_self"), i, o, true, rng);
                let mut w_rel = Vec::new();
                let mut w_rel_edge = Vec::new();
                for r in 0..spec.relation_count {
                    w_rel.push(Linear::new(store, &format!("{name}.w_rel{r}"), i, o, false, rng));
                    w_rel_edge.push(edge_lin(store, rng, &format!("w_rel{r}_edge")));
                }
                LayerParams::Rgcn {
                    w_self,
                    w_rel,
                    w_rel_edge,
                }
            }
            LayerKind::Gin => LayerParams::Gin {
                eps: store.add(format!("{name}.eps"), Tensor::scalar(T::zero())),
                mlp: Mlp::new(store, &format!("{name}.mlp"), &[i + ed, o, o], Activation::Relu, rng),
            },
            LayerKind::Gat => LayerParams::Gat {
                w: Linear::new(store, &format!("{name}.w"), i, o, false, rng),
                w_edge: edge_lin(store, rng, "w_edge"),
                a_dst: store.add(format!("{name}.a_dst"), glorot(rng, 1, o)),
                a_src: store.add(format!("{name}.a_src"), glorot(rng, 1, o)),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(1, o)),
            },
            LayerKind::Gatv2 => LayerParams::Gatv2 {
                w_left: Linear::new(store, &format!("{name}.w_left"), i, o, false, rng),
                w_right: Linear::new(store, &format!("{name}.w_right"), i, o, false, rng),
                w_edge: edge_lin(store, rng, "w_edge"),
                a: store.add(format!("{name}.a"), glorot(rng, 1, o)),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(1, o)),
            },
            LayerKind::Pna => LayerParams::Pna {
                psi: Mlp::new(store, &format!("{name}.psi"), &[2 * i + ed, o, o], Activation::Relu, rng),
                phi: Mlp::new(store, &format!("{name}.phi"), &[i + 12 * o, o, o], Activation::Relu, rng),
            },
            LayerKind::GsnV | LayerKind::GsnE => {
                let motif_in = if spec.kind == LayerKind::GsnV {
                    2 * spec.motif_dim
                } else {
                    spec.motif_dim
                };
                LayerParams::Gsn {
                    psi: Mlp::new(store, &format!("{name}.psi"), &[2 * i + motif_in + ed, o, o], Activation::Relu, rng),
                    phi: Mlp::new(store, &format!("{name}.phi"), &[i + o, o, o], Activation::Relu, rng),
                }
            }
            LayerKind::Gearnet => {
                let w_rel = (0..spec.relation_count)
                    .map(|r| Linear::new(store, &format!("{name}.w_rel{r}"), i, o, false, rng))
                    .collect();
                let bn = BatchNorm::new(store, &format!("{name}.bn"), o);
                let edge = (ed > 0).then(|| GearnetEdge {
                    w_meta: (0..META_RELATIONS)
                        .map(|r| Linear::new(store, &format!("{name}.w_meta{r}"), ed, o, false, rng))
                        .collect(),
                    bn: BatchNorm::new(store, &format!("{name}.bn_edge"), o),
                    fc: Linear::new(store, &format!("{name}.fc"), o, i, true, rng),
                });
                LayerParams::Gearnet { w_rel, bn, edge }
            }
        };
        Layer { spec, params }
    }

    /// Applies the layer; returns new node features and, for the GearNet
    /// edge pass, new edge embeddings.
    pub fn forward<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &GraphBatch,
        h: Var,
        edges: EdgeInputs,
    ) -> Result<(Var, Option<Var>), GnnError> {
        let t = f.tape;
        let n = batch.num_nodes;
        let has_edges = batch.num_directed_edges() > 0;
        let projected = if self.spec.edge_dim > 0 && self.spec.kind != LayerKind::Gearnet {
            Some(edges.projected.ok_or(GnnError::MissingEdgeFeatures)?)
        } else {
            None
        };
        let out = match &self.params {
            LayerParams::Gcn { w, w_edge, bias } => {
                let hw = w.forward(f, h)?;
                let dhat: Vec<f64> = batch.degree.iter().map(|&d| d as f64 + 1.0).collect();
                let coef: Vec<f64> = batch
                    .loop_src
                    .iter()
                    .zip(batch.loop_dst.iter())
                    .map(|(&s, &d)| 1.0 / (dhat[s] * dhat[d]).sqrt())
                    .collect();
                let msgs = t.index_select(hw, batch.loop_src.clone())?;
                let scaled = t.mul(msgs, t.constant(column(&coef))?)?;
                let mut agg = t.scatter_add(scaled, batch.loop_dst.clone(), n)?;
                if let (Some(we), Some(e), true) = (w_edge, projected, has_edges) {
                    let ew = we.forward(f, e)?;
                    let ecoef = t.constant(column(&coef[..batch.num_directed_edges()]))?;
                    agg = t.add(agg, t.scatter_add(t.mul(ew, ecoef)?, batch.dst.clone(), n)?)?;
                }
                t.add(agg, f.param(*bias))?
            }
            LayerParams::Rgcn {
                w_self,
                w_rel,
                w_rel_edge,
            } => {
                let mut out = w_self.forward(f, h)?;
                for (r, rel) in batch.relations.iter().enumerate().take(w_rel.len()) {
                    if rel.edges.is_empty() {
                        continue;
                    }
                    let mut msgs = t.index_select(w_rel[r].forward(f, h)?, rel.src.clone())?;
                    if let (Some(we), Some(e)) = (&w_rel_edge[r], projected) {
                        let ew = we.forward(f, t.index_select(e, rel.edges.clone())?)?;
                        msgs = t.add(msgs, ew)?;
                    }
                    let scaled = t.mul(msgs, t.constant(column(&rel.mean_coef))?)?;
                    out = t.add(out, t.scatter_add(scaled, rel.dst.clone(), n)?)?;
                }
                out
            }
            LayerParams::Gin { eps, mlp } => {
                let one = t.constant(Tensor::scalar(T::one()))?;
                let self_w = t.add(one, f.param(*eps))?;
                let mut pre = t.mul(h, self_w)?;
                if has_edges {
                    let nb = t.scatter_add(t.index_select(h, batch.src.clone())?, batch.dst.clone(), n)?;
                    pre = t.add(pre, nb)?;
                }
                if let Some(e) = projected {
                    let es = t.scatter_add(e, batch.dst.clone(), n)?;
                    pre = t.concat(&[pre, es], 1)?;
                }
                mlp.forward(f, pre)?
            }
            LayerParams::Gat {
                w,
                w_edge,
                a_dst,
                a_src,
                bias,
            } => {
                let hw = w.forward(f, h)?;
                let z = self.loop_messages(f, batch, hw, w_edge.as_ref(), projected)?;
                let b = t.constant(block_indicator::<T>(self.spec.out_dim, self.spec.heads))?;
                let s_dst = t.matmul(t.mul(hw, f.param(*a_dst))?, b)?;
                let s_src = t.matmul(t.mul(z, f.param(*a_src))?, b)?;
                let pre = t.add(t.index_select(s_dst, batch.loop_dst.clone())?, s_src)?;
                let scores = t.leaky_relu(pre, T::of(ATTENTION_SLOPE))?;
                let out = self.attend(t, batch, scores, z, b)?;
                t.add(out, f.param(*bias))?
            }
            LayerParams::Gatv2 {
                w_left,
                w_right,
                w_edge,
                a,
                bias,
            } => {
                let left = w_left.forward(f, h)?;
                let right = w_right.forward(f, h)?;
                let z = self.loop_messages(f, batch, right, w_edge.as_ref(), projected)?;
                let b = t.constant(block_indicator::<T>(self.spec.out_dim, self.spec.heads))?;
                let pre = t.add(t.index_select(left, batch.loop_dst.clone())?, z)?;
                let act = t.leaky_relu(pre, T::of(ATTENTION_SLOPE))?;
                let scores = t.matmul(t.mul(act, f.param(*a))?, b)?;
                let out = self.attend(t, batch, scores, z, b)?;
                t.add(out, f.param(*bias))?
            }
            LayerParams::Pna { psi, phi } => {
                let o = self.spec.out_dim;
                let agg = if has_edges {
                    let mut parts = vec![
                        t.index_select(h, batch.dst.clone())?,
                        t.index_select(h, batch.src.clone())?,
                    ];
                    parts.extend(projected);
                    let msgs = psi.forward(f, t.concat(&parts, 1)?)?;
                    pna_stack(t, batch, msgs, self.spec.pna_delta)?
                } else {
                    t.constant(Tensor::zeros(n, 12 * o))?
                };
                phi.forward(f, t.concat(&[h, agg], 1)?)?
            }
            LayerParams::Gsn { psi, phi } => {
                let o = self.spec.out_dim;
                let m = if has_edges {
                    let mut parts = vec![
                        t.index_select(h, batch.dst.clone())?,
                        t.index_select(h, batch.src.clone())?,
                    ];
                    if self.spec.kind == LayerKind::GsnV {
                        let x = t.constant(batch.vertex_motif_features().ok_or(GnnError::MissingMotifFeatures)?)?;
                        parts.push(t.index_select(x, batch.dst.clone())?);
                        parts.push(t.index_select(x, batch.src.clone())?);
                    } else {
                        let x = batch.edge_motif_features().ok_or(GnnError::MissingMotifFeatures)?;
                        parts.push(t.constant(x)?);
                    }
                    parts.extend(projected);
                    let msgs = psi.forward(f, t.concat(&parts, 1)?)?;
                    t.scatter_add(msgs, batch.dst.clone(), n)?
                } else {
                    if batch.vertex_motifs.is_none() {
                        return Err(GnnError::MissingMotifFeatures);
                    }
                    t.constant(Tensor::zeros(n, o))?
                };
                phi.forward(f, t.concat(&[h, m], 1)?)?
            }
            LayerParams::Gearnet { w_rel, bn, edge } => {
                let o = self.spec.out_dim;
                let new_edges = match edge {
                    Some(ge) if has_edges => {
                        let e_in = edges.gearnet.ok_or(GnnError::MissingEdgeGraph)?;
                        Some(gearnet_edge_pass(f, batch, ge, e_in, o)?)
                    }
                    _ => None,
                };
                let fc_e = match (edge, new_edges) {
                    (Some(ge), Some(e)) => Some(ge.fc.forward(f, e)?),
                    _ => None,
                };
                let mut u = t.constant(Tensor::zeros(n, o))?;
                for (r, rel) in batch.relations.iter().enumerate().take(w_rel.len()) {
                    if rel.edges.is_empty() {
                        continue;
                    }
                    let mut inp = t.index_select(h, rel.src.clone())?;
                    if let Some(fe) = fc_e {
                        inp = t.add(inp, t.index_select(fe, rel.edges.clone())?)?;
                    }
                    let msgs = w_rel[r].forward(f, inp)?;
                    u = t.add(u, t.scatter_add(msgs, rel.dst.clone(), n)?)?;
                }
                let mut out = t.relu(bn.forward(f, u)?)?;
                if self.spec.in_dim == self.spec.out_dim {
                    out = t.add(out, h)?;
                }
                return Ok((out, new_edges));
            }
        };
        Ok((out, None))
    }

    /// Messages along directed edges followed by self loops:
    /// `hw[src] (+ e W_e)` then `hw[i]`.
    fn loop_messages<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &GraphBatch,
        hw: Var,
        w_edge: Option<&Linear>,
        projected: Option<Var>,
    ) -> Result<Var, GnnError> {
        let t = f.tape;
        if batch.num_directed_edges() == 0 {
            return Ok(hw);
        }
        let mut along = t.index_select(hw, batch.src.clone())?;
        if let (Some(we), Some(e)) = (w_edge, projected) {
            along = t.add(along, we.forward(f, e)?)?;
        }
        Ok(t.concat(&[along, hw], 0)?)
    }

    /// Softmax of per-head scores over each node's incoming loop edges, then
    /// the head-wise weighted sum of messages (heads concatenated).
    fn attend<T: Scalar>(&self, t: &Tape<T>, batch: &GraphBatch, scores: Var, z: Var, b: Var) -> Result<Var, GnnError> {
        let alpha = crate::nn::segment_softmax(t, scores, batch.loop_dst.clone(), batch.num_nodes)?;
        let wide = t.matmul(alpha, t.transpose(b)?)?;
        Ok(t.scatter_add(t.mul(wide, z)?, batch.loop_dst.clone(), batch.num_nodes)?)
    }

    /// Attention coefficients (`loop edges x heads`) as computed inside the
    /// layer; rows follow `batch.loop_dst`.
    pub fn attention<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &GraphBatch,
        h: Var,
        edges: EdgeInputs,
    ) -> Result<Var, GnnError> {
        let t = f.tape;
        let b = t.constant(block_indicator::<T>(self.spec.out_dim, self.spec.heads))?;
        let scores = match &self.params {
            LayerParams::Gat {
                w, w_edge, a_dst, a_src, ..
            } => {
                let hw = w.forward(f, h)?;
                let z = self.loop_messages(f, batch, hw, w_edge.as_ref(), edges.projected)?;
                let s_dst = t.matmul(t.mul(hw, f.param(*a_dst))?, b)?;
                let s_src = t.matmul(t.mul(z, f.param(*a_src))?, b)?;
                let pre = t.add(t.index_select(s_dst, batch.loop_dst.clone())?, s_src)?;
                t.leaky_relu(pre, T::of(ATTENTION_SLOPE))?
            }
            LayerParams::Gatv2 {
                w_left,
                w_right,
                w_edge,
                a,
                ..
            } => {
                let left = w_left.forward(f, h)?;
                let z = self.loop_messages(f, batch, w_right.forward(f, h)?, w_edge.as_ref(), edges.projected)?;
                let pre = t.add(t.index_select(left, batch.loop_dst.clone())?, z)?;
                let act = t.leaky_relu(pre, T::of(ATTENTION_SLOPE))?;
                t.matmul(t.mul(act, f.param(*a))?, b)?
            }
            _ => return Err(GnnError::NotAttention(self.spec.kind)),
        };
        Ok(crate::nn::segment_softmax(t, scores, batch.loop_dst.clone(), batch.num_nodes)?)
    }
}

/// `[mean, max, min, std] x [1, amplification, attenuation]` per node.
fn pna_stack<T: Scalar>(t: &Tape<T>, batch: &GraphBatch, msgs: Var, delta: f64) -> Result<Var, GnnError> {
    let n = batch.num_nodes;
    let inv_deg: Vec<f64> = batch
        .degree
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
        .collect();
    let inv_deg = t.constant(column(&inv_deg))?;
    let sum = t.scatter_add(msgs, batch.dst.clone(), n)?;
    let mean = t.mul(sum, inv_deg)?;
    let max = t.scatter_max(msgs, batch.dst.clone(), n)?;
    let min = t.neg(t.scatter_max(t.neg(msgs)?, batch.dst.clone(), n)?)?;
    let centered = t.sub(msgs, t.index_select(mean, batch.dst.clone())?)?;
    let var = t.mul(t.scatter_add(t.mul(centered, centered)?, batch.dst.clone(), n)?, inv_deg)?;
    let eps = T::of(PNA_STD_EPS);
    let shifted = t.add(var, t.constant(Tensor::scalar(eps))?)?;
    let std = t.sub(t.sqrt(shifted)?, t.constant(Tensor::scalar(eps.sqrt()))?)?;
    let agg = t.concat(&[mean, max, min, std], 1)?;
    let (amp, att): (Vec<f64>, Vec<f64>) = batch.degree.iter().map(|&d| degree_scalers(d, delta)).unzip();
    let amp = t.mul(agg, t.constant(column(&amp))?)?;
    let att = t.mul(agg, t.constant(column(&att))?)?;
    Ok(t.concat(&[agg, amp, att], 1)?)
}

/// PNA amplification and attenuation scalers for degree `d`.
pub fn degree_scalers(d: usize, delta: f64) -> (f64, f64) {
    let l = (d as f64 + 1.0).ln();
    let att = if d == 0 { 0.0 } else { delta / l };
    (l / delta, att)
}

/// One GearNet edge-pass step: per meta-relation weighted sums of incoming
/// edge embeddings, batch norm, ReLU.
pub fn gearnet_edge_pass<T: Scalar>(
    f: &Forward<'_, T>,
    batch: &GraphBatch,
    ge: &GearnetEdge,
    e: Var,
    out_dim: usize,
) -> Result<Var, GnnError> {
    let t = f.tape;
    let meta = batch.meta_edges.as_ref().ok_or(GnnError::MissingEdgeGraph)?;
    let m = batch.num_directed_edges();
    let mut acc = t.constant(Tensor::zeros(m, out_dim))?;
    for (label, w) in ge.w_meta.iter().enumerate() {
        let (from, to): (Vec<usize>, Vec<usize>) = meta
            .iter()
            .filter(|&&(_, _, l)| l == label)
            .map(|&(a, b, _)| (a, b))
            .unzip();
        if from.is_empty() {
            continue;
        }
        let from: Rc<[usize]> = from.into();
        let msgs = w.forward(f, t.index_select(e, from)?)?;
        acc = t.add(acc, t.scatter_add(msgs, to.into(), m)?)?;
    }
    Ok(t.relu(ge.bn.forward(f, acc)?)?)
}
