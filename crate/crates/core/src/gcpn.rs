//! GCPN-style sequential generation: a policy over link-prediction actions
//! on the intermediate graph, conditioned on a scaffold set, plus
//! teacher-forced pretraining on BFS construction trajectories.
//!
//! An action is factored as `stop`, then `first` (a node of `G_t`), then
//! `second` (another node of `G_t` or a node of a scaffold copy), then the
//! bond type. The joint log-probability is the sum of the component terms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
use crate::expressiveness::MotifFeatures;
use crate::generation::{argmax, sample_weighted, shared_states, GenError, Generator, TrajStep, Trajectory, DEFAULT_RESAMPLE};
use crate::gnn::{GnnConfig, GnnModel, GraphBatch, GraphInput};
use crate::molgraph::{check_valence, AtomType, BondType, MolecularGraph, DEFAULT_MAX_NODES, NUM_ATOM_TYPES, NUM_BOND_TYPES};
use crate::nn::{segment_log_softmax, Activation, Forward, Mlp};
use crate::scalar::Scalar;
use crate::smiles::parse_smiles;

/// Parameter-name prefix of GCPN checkpoints.
pub const PREFIX: &str = "gcpn";

/// Fragments offered as attachment candidates. The 9 single-atom fragments
/// always come first (in atom-type order), followed by any user fragments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldSet {
    graphs: Vec<MolecularGraph>,
    /// Flattened index of the first node of every fragment.
    offsets: Vec<usize>,
    total_nodes: usize,
}

impl Default for ScaffoldSet {
    fn default() -> Self {
        Self::single_atoms()
    }
}

impl ScaffoldSet {
    /// The default set: one fragment per atom type.
    pub fn single_atoms() -> Self {
        Self::with_fragments(Vec::new()).expect("single atoms are valid fragments")
    }

    /// Single atoms followed by `fragments`, each of which must be non-empty,
    /// connected and valence-valid.
    pub fn with_fragments(fragments: Vec<MolecularGraph>) -> Result<Self, GenError> {
        let mut graphs: Vec<MolecularGraph> = AtomType::ALL
            .iter()
            .map(|&a| MolecularGraph::from_parts(&[a], &[]).expect("single atom"))
            .collect();
        for (k, frag) in fragments.into_iter().enumerate() {
            if frag.is_empty() || !frag.is_connected() || !check_valence(&frag).is_empty() {
                return Err(GenError::InvalidScaffold(format!(
                    "fragment {k} must be non-empty, connected and valence-valid"
                )));
            }
            graphs.push(frag);
        }
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut total_nodes = 0;
        for g in &graphs {
            offsets.push(total_nodes);
            total_nodes += g.num_nodes();
        }
        Ok(ScaffoldSet {
            graphs,
            offsets,
            total_nodes,
        })
    }

    /// Parses a scaffold file: one SMILES fragment per line, blank lines and
    /// `#` comments ignored.
    pub fn parse_fragments(text: &str) -> Result<Vec<MolecularGraph>, GenError> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| parse_smiles(l).map_err(|e| GenError::InvalidScaffold(format!("{l}: {e}"))))
            .collect()
    }

    pub fn graphs(&self) -> &[MolecularGraph] {
        &self.graphs
    }

    /// Fragments beyond the built-in single atoms.
    pub fn extra_fragments(&self) -> &[MolecularGraph] {
        &self.graphs[NUM_ATOM_TYPES..]
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        self.total_nodes
    }

    /// `(fragment, node)` of a flattened scaffold-node index.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        if flat >= self.total_nodes {
            return None;
        }
        let frag = self.offsets.partition_point(|&o| o <= flat) - 1;
        Some((frag, flat - self.offsets[frag]))
    }

    /// Flattened index of the single-atom fragment of `atom`.
    pub fn single_atom(&self, atom: AtomType) -> usize {
        atom.index()
    }
}

/// One link-prediction action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GcpnAction {
    /// Node of `G_t`.
    pub first: usize,
    /// Node of `G_t`, or `|G_t| + k` for flattened scaffold node `k`.
    pub second: usize,
    pub bond: BondType,
    /// Ends the episode; the other fields are ignored.
    pub stop: bool,
}

impl GcpnAction {
    pub fn stop() -> Self {
        GcpnAction {
            first: 0,
            second: 0,
            bond: BondType::Single,
            stop: true,
        }
    }

    pub fn add(first: usize, second: usize, bond: BondType) -> Self {
        GcpnAction {
            first,
            second,
            bond,
            stop: false,
        }
    }
}

/// Intermediate graph of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    pub graph: MolecularGraph,
    /// Successful transitions so far.
    pub step: usize,
    pub done: bool,
    /// Set when the episode ended because the resample budget ran out.
    pub penalized: bool,
}

impl GenerationState {
    /// Single-atom seed state with node capacity `max_size`.
    pub fn seeded(atom: AtomType, max_size: usize) -> Self {
        let mut graph = MolecularGraph::with_max_nodes(max_size);
        graph.add_atom(atom).expect("capacity of at least one node");
        GenerationState {
            graph,
            step: 0,
            done: max_size <= 1,
            penalized: false,
        }
    }
}

/// Result of [`apply_action`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionOutcome {
    Stopped,
    Applied,
    /// Valence violation, duplicate pair, self loop, out-of-range index, or
    /// a scaffold copy that would exceed the size limit. State unchanged.
    Rejected,
}

/// Applies one action. Successful additions keep the graph valence-valid;
/// reaching `max_size` nodes ends the episode.
pub fn apply_action(
    state: &mut GenerationState,
    action: &GcpnAction,
    scaffolds: &ScaffoldSet,
    max_size: usize,
) -> ActionOutcome {
    if action.stop {
        state.done = true;
        return ActionOutcome::Stopped;
    }
    let g = &mut state.graph;
    let n = g.num_nodes();
    let order = action.bond.order();
    if action.first >= n || g.free_valence(action.first) < order {
        return ActionOutcome::Rejected;
    }
    if action.second < n {
        if !g.can_bond(action.first, action.second, action.bond) {
            return ActionOutcome::Rejected;
        }
        g.add_bond(action.first, action.second, action.bond).expect("checked by can_bond");
    } else {
        let Some((frag, node)) = scaffolds.locate(action.second - n) else {
            return ActionOutcome::Rejected;
        };
        let fragment = &scaffolds.graphs[frag];
        if n + fragment.num_nodes() > max_size.min(g.max_nodes()) || fragment.free_valence(node) < order {
            return ActionOutcome::Rejected;
        }
        let offset = g.append_disjoint(fragment).expect("size checked");
        g.add_bond(action.first, offset + node, action.bond).expect("fresh pair");
    }
    state.step += 1;
    if state.graph.num_nodes() >= max_size {
        state.done = true;
    }
    ActionOutcome::Applied
}

/// Draws actions from `sample` until one is accepted, allowing `budget`
/// resamplings. Every draw is returned as `(action, log_prob, rejected)`.
/// When the budget runs out the episode ends with the penalty flag set.
pub fn apply_with_budget<E>(
    state: &mut GenerationState,
    scaffolds: &ScaffoldSet,
    max_size: usize,
    budget: usize,
    mut sample: impl FnMut() -> Result<(GcpnAction, f64), E>,
) -> Result<Vec<(GcpnAction, f64, bool)>, E> {
    let mut draws = Vec::new();
    loop {
        let (action, log_prob) = sample()?;
        let outcome = apply_action(state, &action, scaffolds, max_size);
        let rejected = outcome == ActionOutcome::Rejected;
        draws.push((action, log_prob, rejected));
        if !rejected {
            return Ok(draws);
        }
        if draws.len() > budget {
            state.done = true;
            state.penalized = true;
            return Ok(draws);
        }
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GcpnConfig {
    pub gnn: GnnConfig,
    pub max_size: usize,
    /// Resamplings allowed after a rejected action.
    pub resample: usize,
    /// Cap on successful transitions per episode.
    pub max_steps: usize,
}

impl GcpnConfig {
    pub fn new(gnn: GnnConfig) -> Self {
        GcpnConfig {
            gnn,
            max_size: DEFAULT_MAX_NODES,
            resample: DEFAULT_RESAMPLE,
            max_steps: 4 * DEFAULT_MAX_NODES,
        }
    }
}

/// The four action heads, ReLU MLPs over node and graph embeddings.
#[derive(Debug, Clone)]
pub struct PolicyHeads {
    /// `[Z_i ‖ h_G] -> 1`.
    pub first: Mlp,
    /// `[Z_first ‖ Z_k ‖ h_G] -> 1`.
    pub second: Mlp,
    /// `[Z_first ‖ Z_second ‖ h_G] -> 3`.
    pub bond: Mlp,
    /// `h_G -> 1`; `p(stop) = sigmoid(logit)`.
    pub stop: Mlp,
}

impl PolicyHeads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mlp = |store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut ChaCha8Rng| {
            Mlp::new(store, &format!("{prefix}.{name}"), dims, Activation::Relu, rng)
        };
        PolicyHeads {
            first: mlp(store, "f_first", &[2 * d, d, 1], rng),
            second: mlp(store, "f_second", &[3 * d, d, 1], rng),
            bond: mlp(store, "f_bond", &[3 * d, d, NUM_BOND_TYPES], rng),
            stop: mlp(store, "f_stop", &[d, d, 1], rng),
        }
    }
}

/// GNN plus action heads. The weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GcpnPolicy {
    pub config: GcpnConfig,
    pub model: GnnModel,
    pub heads: PolicyHeads,
    /// Buffer `1 x 9`: seed-atom distribution.
    pub seed_marginal: ParamId,
    pub scaffolds: ScaffoldSet,
}

/// Embeddings of a batch of states followed by the scaffold fragments.
struct Embedded {
    batch: GraphBatch,
    nodes: Var,
    graphs: Var,
    states: usize,
}

impl Embedded {
    /// Batch node of candidate `k` for state `s` with `n` nodes.
    fn node(&self, s: usize, n: usize, k: usize) -> usize {
        if k < n {
            self.batch.node_offsets[s] + k
        } else {
            self.batch.node_offsets[self.states] + (k - n)
        }
    }
}

/// Position of `second` in the candidate list of `first` (which skips
/// `first` itself).
fn second_position(first: usize, second: usize) -> usize {
    if second > first {
        second - 1
    } else {
        second
    }
}

fn second_candidate(first: usize, position: usize) -> usize {
    if position >= first {
        position + 1
    } else {
        position
    }
}

/// Number of segments whose argmax row is the target row.
fn segment_hits<T: Scalar>(values: &Tensor<T>, seg: &[usize], segments: usize, targets: &[usize]) -> usize {
    let mut best: Vec<Option<usize>> = vec![None; segments];
    for (row, &s) in seg.iter().enumerate() {
        let v = values.get(row, 0);
        if best[s].is_none_or(|b| v > values.get(b, 0)) {
            best[s] = Some(row);
        }
    }
    targets.iter().enumerate().filter(|&(s, &t)| best[s] == Some(t)).count()
}

fn row_hits<T: Scalar>(values: &Tensor<T>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row: Vec<f64> = values.row_slice(r).iter().map(|v| v.as_f64()).collect();
            argmax(&row) == t
        })
        .count()
}

/// Log-probabilities of a batch of actions.
pub struct ActionScores {
    /// Joint log-probability per action, `actions x 1`.
    pub log_probs: Var,
    /// Every individual head decision, `decisions x 1`.
    pub decisions: Var,
    pub num_decisions: usize,
    /// Decisions whose target is the head's argmax.
    pub correct: usize,
}

/// A BFS construction trajectory of a corpus molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub seed: AtomType,
    pub actions: Vec<GcpnAction>,
    /// `states[k]` is the graph `actions[k]` is applied to.
    pub states: Vec<MolecularGraph>,
    /// Motif counts of every state, cached for GSN models.
    pub motifs: Option<Vec<MotifFeatures>>,
}

impl Decomposition {
    pub fn inputs(&self) -> Vec<GraphInput<'_>> {
        self.states
            .iter()
            .enumerate()
            .map(|(k, graph)| GraphInput {
                graph,
                motifs: self.motifs.as_ref().map(|m| &m[k]),
            })
            .collect()
    }
}

/// Teacher-forcing trajectory of `g`: BFS from node 0 with neighbors in
/// index order. Each new atom is attached to its BFS parent through its
/// single-atom scaffold, then its ring closures to already placed atoms
/// follow in placement order; the sequence ends with stop.
pub fn bfs_decomposition(g: &MolecularGraph, scaffolds: &ScaffoldSet, max_size: usize) -> Result<Decomposition, GenError> {
    if g.is_empty() {
        return Err(GenError::EmptyGraph);
    }
    if g.num_nodes() > max_size {
        return Err(GenError::SizeLimit {
            nodes: g.num_nodes(),
            limit: max_size,
        });
    }
    if !g.is_connected() {
        return Err(GenError::Disconnected);
    }
    let (order, parent) = g.bfs_order(0);
    let mut pos = vec![usize::MAX; g.num_nodes()];
    pos[order[0]] = 0;
    let mut state = GenerationState::seeded(g.atom(order[0]), max_size.max(2));
    let mut actions = Vec::new();
    let mut states = Vec::new();
    let mut push = |state: &mut GenerationState, action: GcpnAction| {
        states.push(state.graph.clone());
        actions.push(action);
        let outcome = apply_action(state, &action, scaffolds, max_size);
        debug_assert_ne!(outcome, ActionOutcome::Rejected, "valid molecule replays");
    };
    for (k, (&v, p)) in order.iter().zip(&parent).enumerate().skip(1) {
        let p = p.expect("non-root has a parent");
        let n = state.graph.num_nodes();
        let bond = g.bond(p, v).expect("BFS tree edge");
        push(&mut state, GcpnAction::add(pos[p], n + scaffolds.single_atom(g.atom(v)), bond));
        pos[v] = k;
        let mut closures: Vec<(usize, BondType)> = g
            .neighbors(v)
            .iter()
            .filter(|&&(u, _)| u != p && pos[u] < k)
            .map(|&(u, b)| (pos[u], b))
            .collect();
        closures.sort_unstable_by_key(|&(u, _)| u);
        for (u, b) in closures {
            push(&mut state, GcpnAction::add(k, u, b));
        }
    }
    push(&mut state, GcpnAction::stop());
    Ok(Decomposition {
        seed: g.atom(order[0]),
        actions,
        states,
        motifs: None,
    })
}

/// Replays actions from a single-atom seed; every action must be accepted.
pub fn replay(seed: AtomType, actions: &[GcpnAction], scaffolds: &ScaffoldSet, max_size: usize) -> Result<MolecularGraph, GenError> {
    let mut state = GenerationState::seeded(seed, max_size);
    for a in actions {
        if apply_action(&mut state, a, scaffolds, max_size) == ActionOutcome::Rejected {
            return Err(GenError::InvalidScaffold(format!("action {a:?} rejected during replay")));
        }
    }
    Ok(state.graph)
}

/// Pretraining metrics of one batch (Table 6 semantics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainStats {
    /// Mean negative log-likelihood over all head decisions.
    pub nll: f64,
    /// Fraction of decisions where the target is the argmax.
    pub acc: f64,
}

impl GcpnPolicy {
    pub fn new<T: Scalar>(
        config: GcpnConfig,
        scaffolds: ScaffoldSet,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, GenError> {
        let model = GnnModel::new(config.gnn.clone(), store, &format!("{PREFIX}.gnn"), rng)?;
        let heads = PolicyHeads::new(store, PREFIX, model.out_dim(), rng);
        let uniform = Tensor::filled(1, NUM_ATOM_TYPES, T::of(1.0 / NUM_ATOM_TYPES as f64));
        let seed_marginal = store.add_buffer(format!("{PREFIX}.seed_marginal"), uniform);
        Ok(GcpnPolicy {
            config,
            model,
            heads,
            seed_marginal,
            scaffolds,
        })
    }

    /// Sets the seed-atom distribution to the atom-type marginal of `corpus`.
    pub fn set_seed_marginal<'a, T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        corpus: impl IntoIterator<Item = &'a MolecularGraph>,
    ) {
        let mut counts = [0usize; NUM_ATOM_TYPES];
        for g in corpus {
            for a in g.atoms() {
                counts[a.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return;
        }
        let row = counts.iter().map(|&c| T::of(c as f64 / total as f64)).collect();
        store.set_value(self.seed_marginal, Tensor::row(row));
    }

    fn embed<T: Scalar>(&self, f: &Forward<'_, T>, states: &[GraphInput<'_>]) -> Result<Embedded, GenError> {
        let inputs = states
            .iter()
            .copied()
            .chain(self.scaffolds.graphs.iter().map(GraphInput::from));
        let batch = self.model.batch(inputs);
        let out = self.model.message_pass(f, &batch)?;
        Ok(Embedded {
            batch,
            nodes: out.nodes,
            graphs: out.graphs,
            states: states.len(),
        })
    }

    /// `[nodes[a] ‖ nodes[b] ‖ .. ‖ graphs[g]]` row-wise.
    fn head_input<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        emb: &Embedded,
        node_lists: &[Vec<usize>],
        graph_rows: Vec<usize>,
    ) -> Result<Var, GenError> {
        let t = f.tape;
        let mut parts = Vec::with_capacity(node_lists.len() + 1);
        for list in node_lists {
            parts.push(t.index_select(emb.nodes, list.clone().into())?);
        }
        parts.push(t.index_select(emb.graphs, graph_rows.into())?);
        Ok(t.concat(&parts, 1)?)
    }

    /// `states x 2` log-probabilities of (continue, stop).
    fn stop_log_probs<T: Scalar>(&self, f: &Forward<'_, T>, emb: &Embedded, states: Vec<usize>) -> Result<Var, GenError> {
        let t = f.tape;
        let count = states.len();
        let hg = t.index_select(emb.graphs, states.into())?;
        let logit = self.heads.stop.forward(f, hg)?;
        let zeros = t.constant(Tensor::zeros(count, 1))?;
        Ok(t.log_softmax(t.concat(&[zeros, logit], 1)?, 1)?)
    }

    /// Log-softmax of the first-node head for each `(state, n)` query, with
    /// the segment of every row.
    fn first_log_probs<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        emb: &Embedded,
        queries: &[(usize, usize)],
    ) -> Result<(Var, Vec<usize>), GenError> {
        let (mut nodes, mut graphs, mut seg) = (Vec::new(), Vec::new(), Vec::new());
        for (q, &(s, n)) in queries.iter().enumerate() {
            for k in 0..n {
                nodes.push(emb.node(s, n, k));
                graphs.push(s);
                seg.push(q);
            }
        }
        let x = self.head_input(f, emb, &[nodes], graphs)?;
        let logits = self.heads.first.forward(f, x)?;
        let lp = segment_log_softmax(f.tape, logits, seg.clone().into(), queries.len())?;
        Ok((lp, seg))
    }

    /// Log-softmax of the second-node head for `(state, n, first)` queries.
    fn second_log_probs<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        emb: &Embedded,
        queries: &[(usize, usize, usize)],
    ) -> Result<(Var, Vec<usize>), GenError> {
        let total = self.scaffolds.total_nodes();
        let (mut firsts, mut cands, mut graphs, mut seg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (q, &(s, n, first)) in queries.iter().enumerate() {
            let first_node = emb.node(s, n, first);
            for c in (0..n + total).filter(|&c| c != first) {
                firsts.push(first_node);
                cands.push(emb.node(s, n, c));
                graphs.push(s);
                seg.push(q);
            }
        }
        let x = self.head_input(f, emb, &[firsts, cands], graphs)?;
        let logits = self.heads.second.forward(f, x)?;
        let lp = segment_log_softmax(f.tape, logits, seg.clone().into(), queries.len())?;
        Ok((lp, seg))
    }

    /// `queries x 3` bond log-probabilities for `(state, n, first, second)`.
    fn bond_log_probs<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        emb: &Embedded,
        queries: &[(usize, usize, usize, usize)],
    ) -> Result<Var, GenError> {
        let firsts = queries.iter().map(|&(s, n, a, _)| emb.node(s, n, a)).collect();
        let seconds = queries.iter().map(|&(s, n, _, b)| emb.node(s, n, b)).collect();
        let graphs = queries.iter().map(|&(s, ..)| s).collect();
        let x = self.head_input(f, emb, &[firsts, seconds], graphs)?;
        let logits = self.heads.bond.forward(f, x)?;
        Ok(f.tape.log_softmax(logits, 1)?)
    }

    fn check_action(&self, n: usize, a: &GcpnAction) -> Result<(), GenError> {
        if n == 0 {
            return Err(GenError::EmptyGraph);
        }
        if !a.stop && (a.first >= n || a.second == a.first || a.second >= n + self.scaffolds.total_nodes()) {
            return Err(GenError::Graph(crate::molgraph::GraphError::NodeOutOfRange {
                index: a.first.max(a.second),
                len: n + self.scaffolds.total_nodes(),
            }));
        }
        Ok(())
    }

    /// Scores `actions[k]` taken in `states[k]`, batched into one pass.
    pub fn evaluate_actions<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        states: &[GraphInput<'_>],
        actions: &[GcpnAction],
    ) -> Result<ActionScores, GenError> {
        assert_eq!(states.len(), actions.len(), "one action per state");
        let identity: Vec<usize> = (0..states.len()).collect();
        self.evaluate_actions_on(f, states, &identity, actions)
    }

    /// Scores `actions[k]` taken in `states[state_of[k]]`; several actions
    /// may share one state, which is then embedded once.
    pub fn evaluate_actions_on<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        states: &[GraphInput<'_>],
        state_of: &[usize],
        actions: &[GcpnAction],
    ) -> Result<ActionScores, GenError> {
        assert_eq!(state_of.len(), actions.len(), "one state index per action");
        let n_of = |k: usize| states[state_of[k]].graph.num_nodes();
        for (k, a) in actions.iter().enumerate() {
            self.check_action(n_of(k), a)?;
        }
        let t = f.tape;
        let count = actions.len();
        let emb = self.embed(f, states)?;

        let stop_lp = self.stop_log_probs(f, &emb, state_of.to_vec())?;
        let stop_targets: Vec<usize> = actions.iter().map(|a| a.stop as usize).collect();
        let mut correct = row_hits(&t.value(stop_lp), &stop_targets);
        let at: Rc<[(usize, usize)]> = stop_targets.iter().enumerate().map(|(k, &c)| (k, c)).collect();
        let mut pieces = vec![t.gather(stop_lp, at)?];
        let mut owner: Vec<usize> = (0..count).collect();

        let adds: Vec<usize> = (0..count).filter(|&k| !actions[k].stop).collect();
        if !adds.is_empty() {
            let first_q: Vec<(usize, usize)> = adds.iter().map(|&k| (state_of[k], n_of(k))).collect();
            let (lp, seg) = self.first_log_probs(f, &emb, &first_q)?;
            let mut targets = Vec::with_capacity(adds.len());
            let mut base = 0;
            for &k in &adds {
                targets.push(base + actions[k].first);
                base += n_of(k);
            }
            correct += segment_hits(&t.value(lp), &seg, adds.len(), &targets);
            pieces.push(t.gather(lp, targets.iter().map(|&r| (r, 0)).collect())?);
            owner.extend(&adds);

            let second_q: Vec<(usize, usize, usize)> =
                adds.iter().map(|&k| (state_of[k], n_of(k), actions[k].first)).collect();
            let (lp, seg) = self.second_log_probs(f, &emb, &second_q)?;
            targets.clear();
            base = 0;
            for &k in &adds {
                targets.push(base + second_position(actions[k].first, actions[k].second));
                base += n_of(k) + self.scaffolds.total_nodes() - 1;
            }
            correct += segment_hits(&t.value(lp), &seg, adds.len(), &targets);
            pieces.push(t.gather(lp, targets.iter().map(|&r| (r, 0)).collect())?);
            owner.extend(&adds);

            let bond_q: Vec<(usize, usize, usize, usize)> = adds
                .iter()
                .map(|&k| (state_of[k], n_of(k), actions[k].first, actions[k].second))
                .collect();
            let lp = self.bond_log_probs(f, &emb, &bond_q)?;
            let bond_targets: Vec<usize> = adds.iter().map(|&k| actions[k].bond.index()).collect();
            correct += row_hits(&t.value(lp), &bond_targets);
            pieces.push(t.gather(lp, bond_targets.iter().enumerate().map(|(q, &b)| (q, b)).collect())?);
            owner.extend(&adds);
        }
        let num_decisions = owner.len();
        let decisions = t.concat(&pieces, 0)?;
        let log_probs = t.scatter_add(decisions, owner.into(), count)?;
        Ok(ActionScores {
            log_probs,
            decisions,
            num_decisions,
            correct,
        })
    }

    /// Factored action distribution at `graph`.
    pub fn policy_distribution<'a, T: Scalar>(
        &'a self,
        f: &'a Forward<'a, T>,
        graph: &'a MolecularGraph,
    ) -> Result<PolicyDistribution<'a, T>, GenError> {
        if graph.is_empty() {
            return Err(GenError::EmptyGraph);
        }
        let emb = self.embed(f, &[GraphInput::from(graph)])?;
        let stop = self.stop_log_probs(f, &emb, vec![0])?;
        let stop = f.tape.value(stop).row_slice(0).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        let n = graph.num_nodes();
        let (first, _) = self.first_log_probs(f, &emb, &[(0, n)])?;
        let first = to_f64(&f.tape.value(first));
        Ok(PolicyDistribution {
            policy: self,
            f,
            emb,
            n,
            stop: [stop[0], stop[1]],
            first,
            second: RefCell::new(HashMap::new()),
            bond: RefCell::new(HashMap::new()),
        })
    }

    /// Samples one molecule from a single-atom seed.
    pub fn rollout<T: Scalar>(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Trajectory<GcpnAction>, GenError> {
        let cfg = &self.config;
        let marginal = to_f64(store.value(self.seed_marginal));
        let seed = AtomType::from_index(sample_weighted(rng, &marginal)).expect("atom index");
        let mut state = GenerationState::seeded(seed, cfg.max_size);
        let mut steps = Vec::new();
        while !state.done {
            if state.step >= cfg.max_steps {
                state.done = true;
                break;
            }
            let tape = Tape::new();
            let f = Forward::eval(&tape, store);
            let snapshot = Arc::new(state.graph.clone());
            let dist = self.policy_distribution(&f, &snapshot)?;
            let draws = apply_with_budget(&mut state, &self.scaffolds, cfg.max_size, cfg.resample, || dist.sample(rng))?;
            for (action, log_prob, rejected) in draws {
                steps.push(TrajStep {
                    state: snapshot.clone(),
                    action,
                    log_prob,
                    rejected,
                });
            }
        }
        let mut graph = state.graph;
        graph.set_max_nodes(DEFAULT_MAX_NODES.max(cfg.max_size));
        Ok(Trajectory {
            steps,
            graph,
            penalized: state.penalized,
        })
    }

    /// Decomposes a corpus molecule, caching motif counts when the GNN needs
    /// them.
    pub fn prepare(&self, g: &MolecularGraph) -> Result<Decomposition, GenError> {
        let mut d = bfs_decomposition(g, &self.scaffolds, self.config.max_size)?;
        if let Some(cycles) = self.model.batch_options().cycles {
            d.motifs = Some(d.states.iter().map(|s| MotifFeatures::compute(s, &cycles)).collect());
        }
        Ok(d)
    }

    /// Teacher-forced NLL over a batch of decompositions; records the loss
    /// on the tape of `f`.
    pub fn pretrain_loss<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        batch: &[&Decomposition],
    ) -> Result<(Var, PretrainStats), GenError> {
        let mut inputs = Vec::new();
        let mut actions = Vec::new();
        for d in batch {
            inputs.extend(d.inputs());
            actions.extend_from_slice(&d.actions);
        }
        let scores = self.evaluate_actions(f, &inputs, &actions)?;
        let t = f.tape;
        let loss = t.scale(t.sum_all(scores.decisions)?, T::of(-1.0 / scores.num_decisions as f64))?;
        let stats = PretrainStats {
            nll: t.scalar(loss).as_f64(),
            acc: scores.correct as f64 / scores.num_decisions as f64,
        };
        Ok((loss, stats))
    }

    /// One Adam step of teacher-forced pretraining (train-mode batch norm).
    pub fn pretrain_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        adam: &mut Adam<T>,
        batch: &[&Decomposition],
    ) -> Result<PretrainStats, GenError> {
        let tape = Tape::new();
        let f = Forward::new(&tape, store, true);
        let (loss, stats) = self.pretrain_loss(&f, batch)?;
        if !stats.nll.is_finite() {
            return Err(GenError::NonFiniteValue("gcpn pretraining loss"));
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

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Lazily evaluated factored distribution of one state. The embeddings are
/// computed once; second-node and bond distributions are cached per prefix.
pub struct PolicyDistribution<'a, T: Scalar> {
    policy: &'a GcpnPolicy,
    f: &'a Forward<'a, T>,
    emb: Embedded,
    n: usize,
    /// Log-probabilities of (continue, stop).
    stop: [f64; 2],
    first: Vec<f64>,
    second: RefCell<HashMap<usize, Rc<Vec<f64>>>>,
    bond: RefCell<HashMap<(usize, usize), Rc<Vec<f64>>>>,
}

impl<T: Scalar> PolicyDistribution<'_, T> {
    pub fn stop_prob(&self) -> f64 {
        self.stop[1].exp()
    }

    /// Log-probabilities of `first` over the nodes of `G_t`.
    pub fn first_log_probs(&self) -> &[f64] {
        &self.first
    }

    /// Log-probabilities over the candidates of `second` given `first`, in
    /// candidate order (`G_t` nodes except `first`, then scaffold nodes).
    pub fn second_log_probs(&self, first: usize) -> Result<Rc<Vec<f64>>, GenError> {
        if let Some(v) = self.second.borrow().get(&first) {
            return Ok(v.clone());
        }
        let (lp, _) = self.policy.second_log_probs(self.f, &self.emb, &[(0, self.n, first)])?;
        let v = Rc::new(to_f64(&self.f.tape.value(lp)));
        self.second.borrow_mut().insert(first, v.clone());
        Ok(v)
    }

    pub fn bond_log_probs(&self, first: usize, second: usize) -> Result<Rc<Vec<f64>>, GenError> {
        if let Some(v) = self.bond.borrow().get(&(first, second)) {
            return Ok(v.clone());
        }
        let lp = self.policy.bond_log_probs(self.f, &self.emb, &[(0, self.n, first, second)])?;
        let v = Rc::new(to_f64(&self.f.tape.value(lp)));
        self.bond.borrow_mut().insert((first, second), v.clone());
        Ok(v)
    }

    /// Joint log-probability: the sum of the component log-probabilities.
    pub fn log_prob(&self, a: &GcpnAction) -> Result<f64, GenError> {
        self.policy.check_action(self.n, a)?;
        if a.stop {
            return Ok(self.stop[1]);
        }
        let second = self.second_log_probs(a.first)?;
        let bond = self.bond_log_probs(a.first, a.second)?;
        Ok(self.stop[0] + self.first[a.first] + second[second_position(a.first, a.second)] + bond[a.bond.index()])
    }

    /// Draws an action and returns it with its joint log-probability.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(GcpnAction, f64), GenError> {
        let probs = |lp: &[f64]| lp.iter().map(|v| v.exp()).collect::<Vec<_>>();
        if sample_weighted(rng, &probs(&self.stop)) == 1 {
            return Ok((GcpnAction::stop(), self.stop[1]));
        }
        let first = sample_weighted(rng, &probs(&self.first));
        let second_lp = self.second_log_probs(first)?;
        let pos = sample_weighted(rng, &probs(&second_lp));
        let second = second_candidate(first, pos);
        let bond_lp = self.bond_log_probs(first, second)?;
        let b = sample_weighted(rng, &probs(&bond_lp));
        let action = GcpnAction::add(first, second, BondType::from_index(b).expect("bond index"));
        let log_prob = self.stop[0] + self.first[first] + second_lp[pos] + bond_lp[b];
        Ok((action, log_prob))
    }
}

impl<T: Scalar> Generator<T> for GcpnPolicy {
    type Action = GcpnAction;

    fn rollout(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Trajectory<GcpnAction>, GenError> {
        GcpnPolicy::rollout(self, store, rng)
    }

    fn log_probs(&self, f: &Forward<'_, T>, steps: &[&TrajStep<GcpnAction>]) -> Result<Var, GenError> {
        let (graphs, state_of) = shared_states(steps);
        let states: Vec<GraphInput<'_>> = graphs.into_iter().map(GraphInput::from).collect();
        let actions: Vec<GcpnAction> = steps.iter().map(|s| s.action).collect();
        Ok(self.evaluate_actions_on(f, &states, &state_of, &actions)?.log_probs)
    }
}

#[cfg(test)]
mod tests;
