//! GraphAF-style autoregressive flow: every node-type and edge-type decision
//! is an affine transform of Gaussian noise conditioned on GNN embeddings of
//! the partial graph, decoded by argmax.
//!
//! Node decisions have 9 classes (atom types); edge decisions between the
//! new node `i` and each earlier node `j` have 4 (three bond types and
//! no-edge). Generation stops when a new node receives no edge, or at the
//! size limit.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Adam, ParamStore, Tape, Tensor, Var};
use crate::expressiveness::MotifFeatures;
use crate::generation::{argmax, shared_states, GenError, Generator, TrajStep, Trajectory, DEFAULT_RESAMPLE};
use crate::gnn::{GnnConfig, GnnModel, GraphInput};
use crate::molgraph::{AtomType, BondType, MolecularGraph, DEFAULT_MAX_NODES, NUM_ATOM_TYPES, NUM_BOND_TYPES};
use crate::nn::{Activation, Forward, Mlp};
use crate::scalar::Scalar;

/// Parameter-name prefix of GraphAF checkpoints.
pub const PREFIX: &str = "graphaf";
pub const NODE_CLASSES: usize = NUM_ATOM_TYPES;
/// Three bond types plus no-edge.
pub const EDGE_CLASSES: usize = NUM_BOND_TYPES + 1;
pub const NO_EDGE: usize = NUM_BOND_TYPES;
/// `log σ` is clamped to `[-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND]`.
pub const LOG_SIGMA_BOUND: f64 = 5.0;
/// Dequantization: `x = onehot + DEQUANT_SCALE * u`, `u ~ U[0, 1)^k`.
pub const DEQUANT_SCALE: f64 = 0.9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphafConfig {
    pub gnn: GnnConfig,
    pub max_size: usize,
    /// Resamplings of a valence-violating edge decision before no-edge is
    /// forced.
    pub resample: usize,
    /// Base-noise scale at sampling time (`z ~ N(0, t² I)`).
    pub temperature: f64,
}

impl GraphafConfig {
    pub fn new(gnn: GnnConfig) -> Self {
        GraphafConfig {
            gnn,
            max_size: DEFAULT_MAX_NODES,
            resample: DEFAULT_RESAMPLE,
            temperature: 1.0,
        }
    }
}

/// What a decision chooses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionKind {
    /// Atom type of the next node.
    Node,
    /// Bond (or no-edge) between new node `i` and earlier node `j`.
    Edge { i: usize, j: usize },
}

impl DecisionKind {
    pub fn classes(self) -> usize {
        match self {
            DecisionKind::Node => NODE_CLASSES,
            DecisionKind::Edge { .. } => EDGE_CLASSES,
        }
    }
}

/// One flow evaluation: `x = μ + σ∘z`, `logdet = Σ log σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub logdet: f64,
    pub decision: usize,
}

/// Recorded GraphAF decision; `x` is re-scored by PPO.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphafAction {
    pub kind: DecisionKind,
    pub x: Vec<f64>,
    pub decision: usize,
}

/// The two conditioning MLPs, each producing `(μ, log σ)`.
#[derive(Debug, Clone)]
pub struct AffineFlowParams {
    /// `h_G -> 2·9`.
    pub node_mlp: Mlp,
    /// `[h_G ‖ h_i ‖ h_j] -> 2·4`.
    pub edge_mlp: Mlp,
}

impl AffineFlowParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineFlowParams {
            node_mlp: Mlp::new(store, &format!("{prefix}.node_flow"), &[d, d, 2 * NODE_CLASSES], Activation::Tanh, rng),
            edge_mlp: Mlp::new(store, &format!("{prefix}.edge_flow"), &[3 * d, d, 2 * EDGE_CLASSES], Activation::Tanh, rng),
        }
    }

    pub fn mlp(&self, kind: DecisionKind) -> &Mlp {
        match kind {
            DecisionKind::Node => &self.node_mlp,
            DecisionKind::Edge { .. } => &self.edge_mlp,
        }
    }
}

/// `(μ, clamped log σ)` rows for the conditioning rows `cond`.
pub fn flow_params<T: Scalar>(f: &Forward<'_, T>, cond: Var, mlp: &Mlp) -> Result<(Var, Var), GenError> {
    let t = f.tape;
    let k = mlp.out_dim() / 2;
    let out = mlp.forward(f, cond)?;
    let mu = t.narrow(out, 1, 0, k)?;
    let bound = T::of(LOG_SIGMA_BOUND);
    let log_sigma = t.clamp(t.narrow(out, 1, k, k)?, -bound, bound)?;
    Ok((mu, log_sigma))
}

fn check_finite<T: Scalar>(t: &Tape<T>, v: Var, op: &'static str) -> Result<(), GenError> {
    if t.value(v).is_finite() {
        Ok(())
    } else {
        Err(GenError::NonFiniteValue(op))
    }
}

/// `x = μ(cond) + σ(cond)∘z` and `logdet = Σ log σ(cond)` (a column).
pub fn flow_forward<T: Scalar>(f: &Forward<'_, T>, z: Var, cond: Var, mlp: &Mlp) -> Result<(Var, Var), GenError> {
    let t = f.tape;
    check_finite(t, z, "flow_forward input")?;
    let (mu, log_sigma) = flow_params(f, cond, mlp)?;
    let x = t.add(mu, t.mul(t.exp(log_sigma)?, z)?)?;
    let logdet = t.sum(log_sigma, 1)?;
    check_finite(t, x, "flow_forward")?;
    Ok((x, logdet))
}

/// `z = (x − μ(cond)) / σ(cond)` and the negated log-determinant.
pub fn flow_inverse<T: Scalar>(f: &Forward<'_, T>, x: Var, cond: Var, mlp: &Mlp) -> Result<(Var, Var), GenError> {
    let t = f.tape;
    check_finite(t, x, "flow_inverse input")?;
    let (mu, log_sigma) = flow_params(f, cond, mlp)?;
    let z = t.mul(t.sub(x, mu)?, t.exp(t.neg(log_sigma)?)?)?;
    let neg_logdet = t.neg(t.sum(log_sigma, 1)?)?;
    check_finite(t, z, "flow_inverse")?;
    Ok((z, neg_logdet))
}

/// Row-wise `log N(z; 0, I)`.
pub fn standard_normal_log_density<T: Scalar>(t: &Tape<T>, z: Var) -> Result<Var, GenError> {
    let k = t.shape(z)[1];
    let sq = t.sum(t.mul(z, z)?, 1)?;
    let rows = t.shape(z)[0];
    let offset = t.constant(Tensor::filled(rows, 1, T::of(-0.5 * k as f64 * LN_2PI)))?;
    Ok(t.add(t.scale(sq, T::of(-0.5))?, offset)?)
}

/// Exact flow log-likelihood `log N(flow_inverse(x); 0, I) − logdet`, as a
/// column.
pub fn flow_log_density<T: Scalar>(f: &Forward<'_, T>, x: Var, cond: Var, mlp: &Mlp) -> Result<Var, GenError> {
    let (z, neg_logdet) = flow_inverse(f, x, cond, mlp)?;
    Ok(f.tape.add(standard_normal_log_density(f.tape, z)?, neg_logdet)?)
}

fn log_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// One decision of a teacher-forcing decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowDecision {
    pub kind: DecisionKind,
    /// Index into [`FlowDecomposition::graphs`] of the conditioning graph.
    pub state: usize,
    pub target: usize,
}

/// BFS construction sequence of a molecule for the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDecomposition {
    /// Distinct partial graphs, starting with the empty graph.
    pub graphs: Vec<MolecularGraph>,
    pub motifs: Option<Vec<MotifFeatures>>,
    pub decisions: Vec<FlowDecision>,
}

impl FlowDecomposition {
    pub fn inputs(&self) -> Vec<GraphInput<'_>> {
        self.graphs
            .iter()
            .enumerate()
            .map(|(k, graph)| GraphInput {
                graph,
                motifs: self.motifs.as_ref().map(|m| &m[k]),
            })
            .collect()
    }

    pub fn node_decisions(&self) -> usize {
        self.decisions.iter().filter(|d| d.kind == DecisionKind::Node).count()
    }
}

/// Decomposes `g` in BFS order from node 0 (neighbors in index order): each
/// node's type, then its edge classes to every earlier node in index order.
/// Node decisions condition on the graph before the node; edge decisions on
/// the graph with the node and its earlier edges.
pub fn flow_decomposition(g: &MolecularGraph, max_size: usize) -> Result<FlowDecomposition, GenError> {
    if g.num_nodes() > max_size {
        return Err(GenError::SizeLimit {
            nodes: g.num_nodes(),
            limit: max_size,
        });
    }
    if g.is_empty() {
        return Err(GenError::EmptyGraph);
    }
    if !g.is_connected() {
        return Err(GenError::Disconnected);
    }
    let (order, _) = g.bfs_order(0);
    let mut cur = MolecularGraph::with_max_nodes(max_size);
    let mut graphs = Vec::new();
    let mut decisions = Vec::new();
    let mut dirty = true;
    let state = |cur: &MolecularGraph, dirty: &mut bool, graphs: &mut Vec<MolecularGraph>| {
        if *dirty {
            graphs.push(cur.clone());
            *dirty = false;
        }
        graphs.len() - 1
    };
    for (k, &v) in order.iter().enumerate() {
        let s = state(&cur, &mut dirty, &mut graphs);
        decisions.push(FlowDecision {
            kind: DecisionKind::Node,
            state: s,
            target: g.atom(v).index(),
        });
        cur.add_atom(g.atom(v))?;
        dirty = true;
        for (j, &u) in order.iter().enumerate().take(k) {
            let s = state(&cur, &mut dirty, &mut graphs);
            let bond = g.bond(v, u);
            decisions.push(FlowDecision {
                kind: DecisionKind::Edge { i: k, j },
                state: s,
                target: bond.map_or(NO_EDGE, BondType::index),
            });
            if let Some(b) = bond {
                cur.add_bond(k, j, b)?;
                dirty = true;
            }
        }
    }
    Ok(FlowDecomposition {
        graphs,
        motifs: None,
        decisions,
    })
}

/// Per-decision mean NLLs (Table 6 semantics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllStats {
    pub nll_n: f64,
    pub nll_e: f64,
}

impl NllStats {
    pub fn total(&self) -> f64 {
        self.nll_n + self.nll_e
    }
}

/// Outcome of [`GraphafModel::sample_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Every draw with its log-density and whether it was rejected.
    pub draws: Vec<(FlowStep, f64, bool)>,
    /// Final decision; no-edge when the resample budget ran out.
    pub decision: usize,
}

/// Embeddings of one graph, reused across decisions until it changes.
#[derive(Debug, Clone)]
pub struct Conditioning<T> {
    pub nodes: Tensor<T>,
    pub graph: Tensor<T>,
}

/// GNN plus the two affine flows.
#[derive(Debug, Clone)]
pub struct GraphafModel {
    pub config: GraphafConfig,
    pub model: GnnModel,
    pub flows: AffineFlowParams,
}

impl GraphafModel {
    pub fn new<T: Scalar>(config: GraphafConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self, GenError> {
        let model = GnnModel::new(config.gnn.clone(), store, &format!("{PREFIX}.gnn"), rng)?;
        let flows = AffineFlowParams::new(store, PREFIX, model.out_dim(), rng);
        Ok(GraphafModel { config, model, flows })
    }

    /// Embeds `graph` with eval-mode batch norm.
    pub fn conditioning<T: Scalar>(&self, store: &ParamStore<T>, graph: &MolecularGraph) -> Result<Conditioning<T>, GenError> {
        let tape = Tape::new();
        let f = Forward::eval(&tape, store);
        let out = self.model.embed(&f, graph)?;
        let nodes = tape.value(out.nodes).clone();
        let graph = tape.value(out.graphs).clone();
        Ok(Conditioning { nodes, graph })
    }

    fn cond_row<T: Scalar>(cond: &Conditioning<T>, kind: DecisionKind) -> Tensor<T> {
        let mut row = cond.graph.data().to_vec();
        if let DecisionKind::Edge { i, j } = kind {
            row.extend_from_slice(cond.nodes.row_slice(i));
            row.extend_from_slice(cond.nodes.row_slice(j));
        }
        Tensor::row(row)
    }

    /// `(μ, log σ)` of one decision as plain vectors.
    pub fn decision_params<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond: &Conditioning<T>,
        kind: DecisionKind,
    ) -> Result<(Vec<f64>, Vec<f64>), GenError> {
        let tape = Tape::new();
        let f = Forward::eval(&tape, store);
        let c = tape.constant(Self::cond_row(cond, kind))?;
        let (mu, ls) = flow_params(&f, c, self.flows.mlp(kind))?;
        let v = |x: Var| tape.value(x).data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        Ok((v(mu), v(ls)))
    }

    /// Samples one decision on `graph` given its embeddings. Edge classes
    /// that would violate valence are resampled up to the budget, after
    /// which no-edge is forced.
    pub fn sample_with<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond: &Conditioning<T>,
        graph: &MolecularGraph,
        kind: DecisionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleOutcome, GenError> {
        let (mu, log_sigma) = self.decision_params(store, cond, kind)?;
        let logdet: f64 = log_sigma.iter().sum();
        let mut draws = Vec::new();
        loop {
            let z: Vec<f64> = (0..mu.len())
                .map(|_| self.config.temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x: Vec<f64> = z
                .iter()
                .zip(mu.iter().zip(&log_sigma))
                .map(|(z, (m, ls))| m + ls.exp() * z)
                .collect();
            let decision = argmax(&x);
            let valid = match kind {
                DecisionKind::Node => true,
                DecisionKind::Edge { i, j } => {
                    decision == NO_EDGE || graph.can_bond(i, j, BondType::from_index(decision).expect("bond class"))
                }
            };
            let log_density = log_normal(&z) - logdet;
            draws.push((FlowStep { z, x, logdet, decision }, log_density, !valid));
            if valid {
                return Ok(SampleOutcome { draws, decision });
            }
            if draws.len() > self.config.resample {
                return Ok(SampleOutcome { draws, decision: NO_EDGE });
            }
        }
    }

    /// [`GraphafModel::sample_with`] after embedding `graph`.
    pub fn sample_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        graph: &MolecularGraph,
        kind: DecisionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleOutcome, GenError> {
        let cond = self.conditioning(store, graph)?;
        self.sample_with(store, &cond, graph, kind, rng)
    }

    /// Generates one molecule.
    pub fn rollout<T: Scalar>(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Trajectory<GraphafAction>, GenError> {
        let max_size = self.config.max_size;
        let mut graph = MolecularGraph::with_max_nodes(max_size);
        let mut steps = Vec::new();
        let record = |steps: &mut Vec<TrajStep<GraphafAction>>, state: &Arc<MolecularGraph>, kind, outcome: SampleOutcome| {
            for (flow, log_prob, rejected) in outcome.draws {
                steps.push(TrajStep {
                    state: state.clone(),
                    action: GraphafAction {
                        kind,
                        x: flow.x,
                        decision: flow.decision,
                    },
                    log_prob,
                    rejected,
                });
            }
        };
        while graph.num_nodes() < max_size {
            let state = Arc::new(graph.clone());
            let cond = self.conditioning(store, &state)?;
            let outcome = self.sample_with(store, &cond, &state, DecisionKind::Node, rng)?;
            let atom = AtomType::from_index(outcome.decision).expect("atom class");
            record(&mut steps, &state, DecisionKind::Node, outcome);
            let i = graph.add_atom(atom)?;
            if i == 0 {
                continue;
            }
            let mut added = false;
            let mut state = Arc::new(graph.clone());
            let mut cond = self.conditioning(store, &state)?;
            for j in 0..i {
                let kind = DecisionKind::Edge { i, j };
                let outcome = self.sample_with(store, &cond, &state, kind, rng)?;
                let decision = outcome.decision;
                record(&mut steps, &state, kind, outcome);
                if decision != NO_EDGE {
                    graph.add_bond(i, j, BondType::from_index(decision).expect("bond class"))?;
                    added = true;
                    state = Arc::new(graph.clone());
                    cond = self.conditioning(store, &state)?;
                }
            }
            if !added {
                graph.pop_isolated_atom()?;
                break;
            }
        }
        graph.set_max_nodes(DEFAULT_MAX_NODES.max(max_size));
        Ok(Trajectory {
            steps,
            graph,
            penalized: false,
        })
    }

    /// Decomposes a corpus molecule, caching motif counts for GSN models.
    pub fn prepare(&self, g: &MolecularGraph) -> Result<FlowDecomposition, GenError> {
        let mut d = flow_decomposition(g, self.config.max_size)?;
        if let Some(cycles) = self.model.batch_options().cycles {
            d.motifs = Some(d.graphs.iter().map(|s| MotifFeatures::compute(s, &cycles)).collect());
        }
        Ok(d)
    }

    /// Log-densities of decision rows: `x_rows[k]` for `kinds[k]` on
    /// `states[state_of[k]]`, as a column in input order.
    fn decision_log_densities<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        states: &[GraphInput<'_>],
        state_of: &[usize],
        kinds: &[DecisionKind],
        xs: &[&[f64]],
    ) -> Result<Var, GenError> {
        let t = f.tape;
        let batch = self.model.batch(states.iter().copied());
        let out = self.model.message_pass(f, &batch)?;
        let mut node_rows = Vec::new();
        let mut edge_rows = Vec::new();
        for (k, kind) in kinds.iter().enumerate() {
            match kind {
                DecisionKind::Node => node_rows.push(k),
                DecisionKind::Edge { .. } => edge_rows.push(k),
            }
        }
        let x_tensor = |rows: &[usize], width: usize| -> Result<Var, GenError> {
            let mut data = Vec::with_capacity(rows.len() * width);
            for &k in rows {
                if xs[k].len() != width {
                    return Err(GenError::NonFiniteValue("decision width"));
                }
                data.extend(xs[k].iter().map(|&v| T::of(v)));
            }
            Ok(t.constant(Tensor::from_vec(rows.len(), width, data)?)?)
        };
        let mut parts = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        if !node_rows.is_empty() {
            let g_rows: Vec<usize> = node_rows.iter().map(|&k| state_of[k]).collect();
            let cond = t.index_select(out.graphs, g_rows.into())?;
            let x = x_tensor(&node_rows, NODE_CLASSES)?;
            parts.push(flow_log_density(f, x, cond, &self.flows.node_mlp)?);
            order.extend(&node_rows);
        }
        if !edge_rows.is_empty() {
            let (mut g_rows, mut i_rows, mut j_rows) = (Vec::new(), Vec::new(), Vec::new());
            for &k in &edge_rows {
                let s = state_of[k];
                let DecisionKind::Edge { i, j } = kinds[k] else { unreachable!() };
                g_rows.push(s);
                i_rows.push(batch.node_offsets[s] + i);
                j_rows.push(batch.node_offsets[s] + j);
            }
            let cond = t.concat(
                &[
                    t.index_select(out.graphs, g_rows.into())?,
                    t.index_select(out.nodes, i_rows.into())?,
                    t.index_select(out.nodes, j_rows.into())?,
                ],
                1,
            )?;
            let x = x_tensor(&edge_rows, EDGE_CLASSES)?;
            parts.push(flow_log_density(f, x, cond, &self.flows.edge_mlp)?);
            order.extend(&edge_rows);
        }
        let stacked = t.concat(&parts, 0)?;
        // Row `r` of `stacked` belongs to input `order[r]`; invert.
        let mut inverse = vec![0; order.len()];
        for (r, &k) in order.iter().enumerate() {
            inverse[k] = r;
        }
        Ok(t.index_select(stacked, inverse.into())?)
    }

    /// Teacher-forced flow NLL over a batch; the loss `NLL_n + NLL_e` is
    /// recorded on the tape of `f`. Dequantization noise is drawn from `rng`
    /// in decision order.
    pub fn nll_loss<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &[&FlowDecomposition],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, NllStats), GenError> {
        let t = f.tape;
        let mut inputs = Vec::new();
        let mut state_of = Vec::new();
        let mut kinds = Vec::new();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        for d in batch {
            let offset = inputs.len();
            inputs.extend(d.inputs());
            for dec in &d.decisions {
                let k = dec.kind.classes();
                let x: Vec<f64> = (0..k)
                    .map(|c| f64::from(u8::from(c == dec.target)) + DEQUANT_SCALE * rng.random::<f64>())
                    .collect();
                state_of.push(offset + dec.state);
                kinds.push(dec.kind);
                xs.push(x);
            }
        }
        let x_refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let lp = self.decision_log_densities(f, &inputs, &state_of, &kinds, &x_refs)?;
        let node_mask: Vec<f64> = kinds.iter().map(|k| f64::from(u8::from(*k == DecisionKind::Node))).collect();
        let num_nodes = node_mask.iter().sum::<f64>();
        let num_edges = kinds.len() as f64 - num_nodes;
        let masked_sum = |mask: Vec<f64>| -> Result<Var, GenError> {
            let m = t.constant(Tensor::column(mask.into_iter().map(T::of).collect()))?;
            Ok(t.sum_all(t.mul(lp, m)?)?)
        };
        let mut loss = t.constant(Tensor::scalar(T::zero()))?;
        let mut stats = NllStats { nll_n: 0.0, nll_e: 0.0 };
        if num_nodes > 0.0 {
            let nll_n = t.scale(masked_sum(node_mask.clone())?, T::of(-1.0 / num_nodes))?;
            stats.nll_n = t.scalar(nll_n).as_f64();
            loss = t.add(loss, nll_n)?;
        }
        if num_edges > 0.0 {
            let edge_mask = node_mask.iter().map(|m| 1.0 - m).collect();
            let nll_e = t.scale(masked_sum(edge_mask)?, T::of(-1.0 / num_edges))?;
            stats.nll_e = t.scalar(nll_e).as_f64();
            loss = t.add(loss, nll_e)?;
        }
        Ok((loss, stats))
    }

    /// `(NLL_n, NLL_e)` of one molecule (eval-mode batch norm).
    pub fn nll<T: Scalar>(&self, store: &ParamStore<T>, molecule: &MolecularGraph, rng: &mut ChaCha8Rng) -> Result<NllStats, GenError> {
        let d = self.prepare(molecule)?;
        let tape = Tape::new();
        let f = Forward::eval(&tape, store);
        Ok(self.nll_loss(&f, &[&d], rng)?.1)
    }

    /// One Adam step on `NLL_n + NLL_e` (train-mode batch norm).
    pub fn pretrain_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        adam: &mut Adam<T>,
        batch: &[&FlowDecomposition],
        rng: &mut ChaCha8Rng,
    ) -> Result<NllStats, GenError> {
        let tape = Tape::new();
        let f = Forward::new(&tape, store, true);
        let (loss, stats) = self.nll_loss(&f, batch, rng)?;
        if !stats.total().is_finite() {
            return Err(GenError::NonFiniteValue("graphaf pretraining loss"));
        }
        let grads = tape.backward(loss)?;
        // `f` borrows `store`, so the update is assembled on a copy.
        let mut updated = store.clone();
        tape.accumulate_param_grads(&grads, &mut updated);
        f.apply_bn_updates(&mut updated);
        adam.step(&mut updated);
        *store = updated;
        Ok(stats)
    }
}

impl<T: Scalar> Generator<T> for GraphafModel {
    type Action = GraphafAction;

    fn rollout(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Trajectory<GraphafAction>, GenError> {
        GraphafModel::rollout(self, store, rng)
    }

    fn log_probs(&self, f: &Forward<'_, T>, steps: &[&TrajStep<GraphafAction>]) -> Result<Var, GenError> {
        let (graphs, state_of) = shared_states(steps);
        let states: Vec<GraphInput<'_>> = graphs.into_iter().map(GraphInput::from).collect();
        let kinds: Vec<DecisionKind> = steps.iter().map(|s| s.action.kind).collect();
        let xs: Vec<&[f64]> = steps.iter().map(|s| s.action.x.as_slice()).collect();
        self.decision_log_densities(f, &states, &state_of, &kinds, &xs)
    }
}
