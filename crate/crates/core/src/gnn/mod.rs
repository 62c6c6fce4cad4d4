//! Message-passing networks: the layer zoo, the edge-feature projection, and
//! the model that stacks layers with batch norm, ReLU and a sum readout.

mod batch;
mod layers;

pub use batch::{
    build_edge_relational_graph, column, meta_relation, BatchOptions, EdgeRelationalGraph, GraphBatch, GraphInput,
    Relation, META_RELATIONS,
};
pub use layers::{
    degree_scalers, gearnet_edge_pass, EdgeInputs, GearnetEdge, Layer, LayerKind, LayerParams, LayerSpec,
    ATTENTION_SLOPE, PNA_STD_EPS,
};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tensor, Var};
use crate::expressiveness::DEFAULT_CYCLES;
use crate::molgraph::{MolecularGraph, NUM_ATOM_TYPES, NUM_BOND_TYPES};
use crate::nn::{BatchNorm, Forward, Linear};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GnnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("gsn layer needs motif features but the batch carries none")]
    MissingMotifFeatures,
    #[error("gearnet edge pass needs the edge-relational graph")]
    MissingEdgeGraph,
    #[error("layer expects projected edge features")]
    MissingEdgeFeatures,
    #[error("attention over an empty neighborhood")]
    EmptyNeighborhood,
    #[error("{0} is not an attention layer")]
    NotAttention(LayerKind),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

/// PNA `delta` used when no corpus statistic is supplied: `ln 3`, the mean
/// log-degree of a graph whose nodes all have degree 2.
pub fn default_pna_delta() -> f64 {
    3f64.ln()
}

/// Mean of `log(d + 1)` over every node of a corpus.
pub fn corpus_pna_delta<'a>(graphs: impl IntoIterator<Item = &'a MolecularGraph>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for g in graphs {
        for i in 0..g.num_nodes() {
            sum += (g.degree(i) as f64 + 1.0).ln();
            count += 1;
        }
    }
    if count == 0 || sum <= 0.0 {
        default_pna_delta()
    } else {
        sum / count as f64
    }
}

/// Architecture of a [`GnnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GnnConfig {
    pub kind: LayerKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub edge_features: bool,
    pub pna_delta: f64,
    pub cycles: Vec<usize>,
}

impl GnnConfig {
    pub fn new(kind: LayerKind, hidden: usize) -> Self {
        GnnConfig {
            kind,
            layers: 3,
            hidden,
            heads: 3,
            edge_features: false,
            pna_delta: default_pna_delta(),
            cycles: DEFAULT_CYCLES.to_vec(),
        }
    }

    pub fn with_edge_features(mut self, on: bool) -> Self {
        self.edge_features = on;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        if self.hidden == 0 {
            return Err(GnnError::InvalidConfig("hidden must be positive".into()));
        }
        if self.kind.is_attention() && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
            return Err(GnnError::InvalidConfig(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.kind == LayerKind::Pna && !(self.pna_delta > 0.0) {
            return Err(GnnError::InvalidConfig("pna delta must be positive".into()));
        }
        if self.kind.uses_motifs() && self.cycles.iter().any(|&k| !(3..=8).contains(&k)) {
            return Err(GnnError::InvalidConfig("motif cycle sizes must lie in 3..=8".into()));
        }
        Ok(())
    }

    /// Width of the node embeddings the model emits.
    pub fn out_dim(&self) -> usize {
        if self.layers == 0 {
            NUM_ATOM_TYPES
        } else {
            self.hidden
        }
    }

    /// What a [`GraphBatch`] must precompute for this model.
    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            cycles: self.kind.uses_motifs().then(|| self.cycles.clone()),
            edge_graph: self.kind == LayerKind::Gearnet && self.edge_features,
        }
    }
}

/// Node and graph embeddings of a batch.
#[derive(Debug, Clone, Copy)]
pub struct GnnOutput {
    /// `num_nodes x out_dim`.
    pub nodes: Var,
    /// `num_graphs x out_dim` (sum readout).
    pub graphs: Var,
}

/// Layer stack, each layer followed by batch norm and ReLU, then a
/// summation readout.
#[derive(Debug, Clone)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub layers: Vec<Layer>,
    pub norms: Vec<BatchNorm>,
    /// Single dense layer mapping one-hot bond types to `hidden`.
    pub edge_proj: Option<Linear>,
}

impl GnnModel {
    pub fn new<T: Scalar>(
        config: GnnConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, GnnError> {
        config.validate()?;
        let gearnet = config.kind == LayerKind::Gearnet;
        let edge_proj = (config.edge_features && !gearnet)
            .then(|| Linear::new(store, &format!("{prefix}.edge_proj"), NUM_BOND_TYPES, config.hidden, true, rng));
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut in_dim = NUM_ATOM_TYPES;
        let mut gear_edge_dim = NUM_BOND_TYPES;
        for l in 0..config.layers {
            let edge_dim = match (config.edge_features, gearnet) {
                (false, _) => 0,
                (true, false) => config.hidden,
                (true, true) => gear_edge_dim,
            };
            let spec = LayerSpec {
                kind: config.kind,
                in_dim,
                out_dim: config.hidden,
                heads: config.heads,
                relation_count: NUM_BOND_TYPES,
                motif_dim: config.cycles.len(),
                edge_dim,
                pna_delta: config.pna_delta,
            };
            layers.push(Layer::new(store, &format!("{prefix}.layer{l}"), spec, rng));
            norms.push(BatchNorm::new(store, &format!("{prefix}.norm{l}"), config.hidden));
            in_dim = config.hidden;
            gear_edge_dim = config.hidden;
        }
        Ok(GnnModel {
            config,
            layers,
            norms,
            edge_proj,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim()
    }

    pub fn batch_options(&self) -> BatchOptions {
        self.config.batch_options()
    }

    pub fn batch<'a>(&self, graphs: impl IntoIterator<Item = GraphInput<'a>>) -> GraphBatch {
        GraphBatch::new(graphs, &self.batch_options())
    }

    /// Applies the layers to the one-hot atom features of `batch`, then sums
    /// node embeddings per graph.
    pub fn message_pass<T: Scalar>(&self, f: &Forward<'_, T>, batch: &GraphBatch) -> Result<GnnOutput, GnnError> {
        let h0 = f.tape.constant(batch.atom_features())?;
        self.message_pass_from(f, batch, h0)
    }

    /// As [`GnnModel::message_pass`] with caller-supplied input features
    /// (`num_nodes x 9`).
    pub fn message_pass_from<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &GraphBatch,
        h0: Var,
    ) -> Result<GnnOutput, GnnError> {
        let t = f.tape;
        if batch.num_nodes == 0 {
            let nodes = t.constant(Tensor::zeros(0, self.out_dim()))?;
            let graphs = t.constant(Tensor::zeros(batch.num_graphs, self.out_dim()))?;
            return Ok(GnnOutput { nodes, graphs });
        }
        let has_edges = batch.num_directed_edges() > 0;
        let edge_onehot = if has_edges && self.config.edge_features {
            Some(t.constant(batch.edge_features())?)
        } else {
            None
        };
        let mut inputs = EdgeInputs::default();
        if let Some(proj) = &self.edge_proj {
            // Edge-free batches still get a (0 x hidden) tensor so that the
            // message widths stay fixed.
            let e = match edge_onehot {
                Some(e) => e,
                None => t.constant(batch.edge_features())?,
            };
            inputs.projected = Some(proj.forward(f, e)?);
        }
        if self.config.kind == LayerKind::Gearnet {
            inputs.gearnet = edge_onehot;
        }
        let mut h = h0;
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            let (out, new_edges) = layer.forward(f, batch, h, inputs)?;
            if new_edges.is_some() {
                inputs.gearnet = new_edges;
            }
            h = t.relu(norm.forward(f, out)?)?;
        }
        let graphs = t.scatter_add(h, batch.node_graph.clone(), batch.num_graphs)?;
        Ok(GnnOutput { nodes: h, graphs })
    }

    /// Convenience: embeddings of one graph.
    pub fn embed<T: Scalar>(&self, f: &Forward<'_, T>, g: &MolecularGraph) -> Result<GnnOutput, GnnError> {
        self.message_pass(f, &self.batch([GraphInput::from(g)]))
    }
}

/// Projects one-hot edge features through the model's edge projection.
pub fn project_edge_features<T: Scalar>(f: &Forward<'_, T>, model: &GnnModel, e: Var) -> Result<Var, GnnError> {
    let proj = model
        .edge_proj
        .as_ref()
        .ok_or_else(|| GnnError::InvalidConfig("edge features are disabled".into()))?;
    let [_, c] = f.tape.shape(e);
    if c != proj.in_dim {
        return Err(AutodiffError::ShapeMismatch {
            op: "project_edge_features",
            lhs: f.tape.shape(e),
            rhs: [proj.in_dim, proj.out_dim],
        }
        .into());
    }
    Ok(proj.forward(f, e)?)
}

/// Attention variant for [`attention_coeffs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Gat,
    Gatv2,
}

fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(ATTENTION_SLOPE)
    }
}

fn row_times<T: Scalar>(x: &[T], w: &Tensor<T>, row_offset: usize) -> Vec<T> {
    (0..w.cols())
        .map(|c| x.iter().enumerate().map(|(r, &v)| v * w.get(row_offset + r, c)).sum())
        .collect()
}

/// Single-head attention weights of node `h_i` over `neighbors`.
///
/// * GAT: `W` is `in x d`, `a` has length `2d`, score
///   `LeakyReLU(a . [W h_i || W h_j])`.
/// * GATv2: `W` is `2in x d` acting on `[h_i || h_j]`, `a` has length `d`,
///   score `a . LeakyReLU(W [h_i || h_j])`.
pub fn attention_coeffs<T: Scalar>(
    variant: AttentionVariant,
    h_i: &[T],
    neighbors: &[Vec<T>],
    a: &[T],
    w: &Tensor<T>,
) -> Result<Vec<T>, GnnError> {
    if neighbors.is_empty() {
        return Err(GnnError::EmptyNeighborhood);
    }
    let d = w.cols();
    let scores: Vec<T> = match variant {
        AttentionVariant::Gat => {
            let wi = row_times(h_i, w, 0);
            let si: T = wi.iter().zip(&a[..d]).map(|(&x, &y)| x * y).sum();
            neighbors
                .iter()
                .map(|hj| {
                    let wj = row_times(hj, w, 0);
                    let sj: T = wj.iter().zip(&a[d..]).map(|(&x, &y)| x * y).sum();
                    leaky(si + sj)
                })
                .collect()
        }
        AttentionVariant::Gatv2 => {
            let wi = row_times(h_i, w, 0);
            neighbors
                .iter()
                .map(|hj| {
                    let wj = row_times(hj, w, h_i.len());
                    wi.iter().zip(&wj).zip(a).map(|((&x, &y), &av)| av * leaky(x + y)).sum()
                })
                .collect()
        }
    };
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// PNA aggregation of one node's incoming messages: `[mean, max, min, std]`
/// scaled by `[1, log(d+1)/delta, delta/log(d+1)]`, concatenated
/// scaler-major. Empty neighborhoods give the zero vector.
pub fn pna_aggregate<T: Scalar>(messages: &[Vec<T>], d: usize, delta: T) -> Vec<T> {
    let width = messages.first().map_or(0, Vec::len);
    if messages.is_empty() || d == 0 {
        return vec![T::zero(); 12 * width];
    }
    let k = T::of_usize(messages.len());
    let mut mean = vec![T::zero(); width];
    let mut max = vec![T::neg_infinity(); width];
    let mut min = vec![T::infinity(); width];
    for m in messages {
        for c in 0..width {
            mean[c] += m[c];
            max[c] = max[c].max(m[c]);
            min[c] = min[c].min(m[c]);
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    let std: Vec<T> = (0..width)
        .map(|c| {
            let var: T = messages.iter().map(|m| (m[c] - mean[c]).powi(2)).sum::<T>() / k;
            var.sqrt()
        })
        .collect();
    let base: Vec<T> = [mean, max, min, std].concat();
    let (amp, att) = degree_scalers(d, delta.as_f64());
    let mut out = base.clone();
    out.extend(base.iter().map(|&v| v * T::of(amp)));
    out.extend(base.iter().map(|&v| v * T::of(att)));
    out
}

#[cfg(test)]
mod tests;
