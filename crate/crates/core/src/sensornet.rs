//! In-process sensor-network simulation with a fusion center.
//!
//! Every vertex holds a copy of the meta-parameters and a node-local
//! sinusoid task distribution. In each round the reachable vertices run the
//! inner adaptation on one local episode and upload their meta-gradient;
//! the fusion center (co-located with vertex 0) sums the uploads in node-id
//! order, applies one outer step and broadcasts the result. Because the
//! per-node work and the reduction are the same functions the centralized
//! trainer uses, a fully connected network reproduces centralized training
//! bit for bit.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::ParamRole;
use crate::meta::{EpisodeGradient, MetaLearner, MetaState, TaskSource};
use crate::par;
use crate::sparsity::prune;
use crate::tasks::{SinusoidDistribution, SinusoidSource, TaskEpisode};

/// Bytes per transmitted parameter value.
pub const VALUE_WIDTH: usize = 8;

/// Task distribution owned by one vertex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NodeTasks {
    /// The full sinusoid distribution.
    Uniform,
    /// Amplitudes restricted to `[lo, hi]`.
    Band { lo: f64, hi: f64 },
}

impl NodeTasks {
    pub fn distribution(&self) -> Result<SinusoidDistribution> {
        match *self {
            NodeTasks::Uniform => Ok(SinusoidDistribution::default()),
            NodeTasks::Band { lo, hi } => SinusoidDistribution::band(lo, hi),
        }
    }
}

/// Undirected graph over vertices `0..n` with a task assignment per vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorGraph {
    adjacency: Vec<BTreeSet<usize>>,
    tasks: Vec<NodeTasks>,
}

impl SensorGraph {
    pub fn new(edges: &[(usize, usize)], tasks: Vec<NodeTasks>) -> Result<Self> {
        let n = tasks.len();
        if n == 0 {
            return Err(Error::InvalidConfig(
                "graph needs at least one vertex".into(),
            ));
        }
        let mut adjacency = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidConfig(format!(
                    "edge ({a}, {b}) leaves 0..{n}"
                )));
            }
            if a != b {
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
        for t in &tasks {
            t.distribution()?;
        }
        Ok(SensorGraph { adjacency, tasks })
    }

    /// Every pair of vertices connected.
    pub fn complete(tasks: Vec<NodeTasks>) -> Result<Self> {
        let n = tasks.len();
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        Self::new(&edges, tasks)
    }

    /// Complete graph whose vertices split the amplitude range into bands.
    pub fn complete_banded(n: usize) -> Result<Self> {
        let tasks = SinusoidDistribution::partition(n)
            .into_iter()
            .map(|d| NodeTasks::Band {
                lo: d.amplitude.0,
                hi: d.amplitude.1,
            })
            .collect();
        Self::complete(tasks)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[v].iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn tasks(&self, v: usize) -> NodeTasks {
        self.tasks[v]
    }

    /// Vertices connected to the fusion center at vertex 0, ascending.
    pub fn reachable(&self) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        (0..self.len()).filter(|&v| seen[v]).collect()
    }

    /// Parse the text format:
    ///
    /// ```text
    /// # adjacency, one vertex per line
    /// 0: 1 2
    /// 1: 0
    /// 2: 0
    /// # task assignment
    /// 0 = uniform
    /// 1 = band 0.1 2.5
    /// 2 = band 2.5 5.0
    /// ```
    ///
    /// Edges may be listed from either end. Vertices without an assignment
    /// line get the full distribution.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut assigned: Vec<(usize, NodeTasks)> = Vec::new();
        let mut max_id = None::<usize>;
        let bad = |line: usize, msg: &str| Error::Parse(format!("graph line {line}: {msg}"));
        let id = |s: &str, line: usize| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| bad(line, &format!("bad vertex id {s:?}")))
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some((v, rest)) = body.split_once(':') {
                let v = id(v, line)?;
                max_id = max_id.max(Some(v));
                for u in rest.split_whitespace() {
                    let u = id(u, line)?;
                    max_id = max_id.max(Some(u));
                    edges.push((v, u));
                }
            } else if let Some((v, rest)) = body.split_once('=') {
                let v = id(v, line)?;
                max_id = max_id.max(Some(v));
                let words: Vec<&str> = rest.split_whitespace().collect();
                let tasks = match words.as_slice() {
                    ["uniform"] => NodeTasks::Uniform,
                    ["band", lo, hi] => {
                        let num = |s: &str| {
                            s.parse::<f64>()
                                .map_err(|_| bad(line, &format!("bad number {s:?}")))
                        };
                        NodeTasks::Band {
                            lo: num(lo)?,
                            hi: num(hi)?,
                        }
                    }
                    _ => return Err(bad(line, "expected `uniform` or `band <lo> <hi>`")),
                };
                assigned.push((v, tasks));
            } else {
                return Err(bad(
                    line,
                    "expected `<id>: <neighbors>` or `<id> = <tasks>`",
                ));
            }
        }
        let n = max_id.map_or(0, |m| m + 1);
        let mut tasks = vec![NodeTasks::Uniform; n];
        for (v, t) in assigned {
            tasks[v] = t;
        }
        Self::new(&edges, tasks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inverse of [`SensorGraph::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in 0..self.len() {
            let ns: Vec<String> = self.neighbors(v).map(|u| u.to_string()).collect();
            let _ = writeln!(out, "{v}: {}", ns.join(" "));
        }
        for (v, t) in self.tasks.iter().enumerate() {
            let _ = match t {
                NodeTasks::Uniform => writeln!(out, "{v} = uniform"),
                NodeTasks::Band { lo, hi } => writeln!(out, "{v} = band {lo} {hi}"),
            };
        }
        out
    }
}

/// One simulated vertex.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    /// Local copy of the meta-parameters, as last broadcast.
    pub params: Vec<Tensor>,
    /// Node-local episode stream.
    pub source: SinusoidSource,
    /// Upload computed this round and not yet drained by the fusion center.
    pub pending: Option<EpisodeGradient>,
}

impl NodeState {
    fn episode(&self, round: usize) -> Result<TaskEpisode> {
        self.source.train_episode(round, self.id)
    }
}

/// Centralized view of the network's episode streams: slot `i` of a
/// meta-batch is vertex `i`'s episode. Used as the equivalence oracle.
#[derive(Clone, Debug)]
pub struct NetworkSource {
    pub nodes: Vec<SinusoidSource>,
}

impl TaskSource for NetworkSource {
    fn train_episode(&self, step: usize, slot: usize) -> Result<TaskEpisode> {
        self.nodes[slot].train_episode(step, slot)
    }

    fn val_episode(&self, index: usize) -> Result<TaskEpisode> {
        let n = self.nodes.len();
        self.nodes[index % n].val_episode(index / n)
    }
}

/// Message accounting and diagnostics for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Upload size per vertex in id order (0 for silent vertices).
    pub upload_bytes: Vec<usize>,
    /// Broadcast size per vertex in id order (0 for unreachable vertices).
    pub broadcast_bytes: Vec<usize>,
    /// Broadcast size if only unpruned weights, biases and normalization
    /// parameters were sent, summed over receiving vertices.
    pub pruned_broadcast_bytes: usize,
    pub total_bytes: usize,
    /// Vertices whose upload was lost this round.
    pub failed: Vec<usize>,
    pub unreachable: Vec<usize>,
    /// Global norm of the aggregated meta-gradient before clipping.
    pub aggregate_norm: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub rounds: usize,
    /// `(round, vertex)` pairs whose upload is dropped.
    pub failures: Vec<(usize, usize)>,
    /// Validate per vertex every this many rounds (0 disables).
    pub validate_every: usize,
}

/// Per-vertex validation loss at a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub node_val_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub state: MetaState,
    pub nodes: Vec<NodeState>,
    pub traces: Vec<RoundTrace>,
    pub metrics: Vec<RoundMetrics>,
}

impl Simulation {
    pub fn total_bytes(&self) -> usize {
        self.traces.iter().map(|t| t.total_bytes).sum()
    }
}

/// Vertices with their initial parameter copies and episode streams.
pub fn init_nodes(
    graph: &SensorGraph,
    learner: &MetaLearner,
    state: &MetaState,
    seed: u64,
    k: usize,
    q: usize,
) -> Result<Vec<NodeState>> {
    (0..graph.len())
        .map(|id| {
            let dist = graph.tasks(id).distribution()?;
            Ok(NodeState {
                id,
                params: state.params.clone(),
                source: SinusoidSource::new(seed, k, q).with_distribution(dist),
                pending: None,
            })
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|nodes| {
            if learner.model.params().len() != state.params.len() {
                return Err(Error::InvalidConfig(
                    "state does not match the model".into(),
                ));
            }
            Ok(nodes)
        })
}

/// Bytes needed to ship the weights that survive pruning plus all biases
/// and normalization parameters. Without variational layers, everything.
fn pruned_param_count(learner: &MetaLearner, params: &[Tensor]) -> Result<usize> {
    let model = learner.model.with_params(params.to_vec())?;
    if !model.is_variational() {
        return Ok(model.num_params());
    }
    let pruned = prune(&model, learner.config.eta)?;
    Ok(pruned
        .param_info()
        .iter()
        .zip(pruned.params())
        .map(|(info, p)| match info.role {
            ParamRole::Theta => p.data().iter().filter(|&&v| v != 0.0).count(),
            ParamRole::LogSigma2 => 0,
            _ => p.numel(),
        })
        .sum())
}

/// One round: local adaptation at every reachable vertex, summed
/// meta-gradient at the fusion center, one outer step, broadcast.
pub fn run_round(
    graph: &SensorGraph,
    learner: &MetaLearner,
    nodes: &mut [NodeState],
    fusion: &mut MetaState,
    failed: &[usize],
) -> Result<RoundTrace> {
    if nodes.len() != graph.len() {
        return Err(Error::InvalidConfig(
            "one node state per vertex required".into(),
        ));
    }
    let round = fusion.step;
    let reachable = graph.reachable();
    for &v in &reachable {
        if nodes[v].params != fusion.params {
            return Err(Error::InvalidConfig(format!(
                "vertex {v} is out of sync with the fusion center"
            )));
        }
    }
    let lambda = learner.config.lambda_at(round);
    let results = par::try_map(reachable.len(), learner.config.execution, |j| {
        let node = &nodes[reachable[j]];
        let episode = node.episode(round)?;
        let mut noise = learner.noise_stream(fusion.seed, round, node.id);
        learner.episode_gradient(&node.params, &episode, lambda, &mut noise)
    })?;
    for (&v, g) in reachable.iter().zip(results) {
        nodes[v].pending = Some(g);
    }
    // the fusion center drains uploads in vertex order
    let mut delivered = Vec::with_capacity(reachable.len());
    let mut lost = Vec::new();
    for &v in &reachable {
        let msg = nodes[v].pending.take().expect("computed above");
        if failed.contains(&v) {
            lost.push(v);
        } else {
            delivered.push(msg);
        }
    }
    if delivered.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no contributions reached the fusion center in round {round}"
        )));
    }
    let report = learner.apply_gradients(fusion, &delivered)?;

    let param_bytes = fusion.params.iter().map(Tensor::numel).sum::<usize>() * VALUE_WIDTH;
    let mut upload_bytes = vec![0; graph.len()];
    let mut broadcast_bytes = vec![0; graph.len()];
    for &v in &reachable {
        if !lost.contains(&v) {
            upload_bytes[v] = param_bytes;
        }
        broadcast_bytes[v] = param_bytes;
        nodes[v].params.clone_from(&fusion.params);
    }
    let pruned_broadcast_bytes =
        pruned_param_count(learner, &fusion.params)? * VALUE_WIDTH * reachable.len();
    Ok(RoundTrace {
        round,
        total_bytes: upload_bytes.iter().sum::<usize>() + broadcast_bytes.iter().sum::<usize>(),
        upload_bytes,
        broadcast_bytes,
        pruned_broadcast_bytes,
        failed: lost,
        unreachable: (0..graph.len())
            .filter(|v| !reachable.contains(v))
            .collect(),
        aggregate_norm: report.grad_norm,
        train_loss: report.data_loss,
    })
}

/// `config.rounds` rounds from `state`, with optional per-vertex validation.
pub fn run_simulation(
    graph: &SensorGraph,
    learner: &MetaLearner,
    state: MetaState,
    config: &SimulationConfig,
    k: usize,
    q: usize,
) -> Result<Simulation> {
    if config.rounds == 0 {
        return Err(Error::InvalidConfig(
            "a simulation needs at least one round".into(),
        ));
    }
    let mut nodes = init_nodes(graph, learner, &state, config.seed, k, q)?;
    let mut state = state;
    let mut traces = Vec::with_capacity(config.rounds);
    let mut metrics = Vec::new();
    for r in 0..config.rounds {
        let round = state.step;
        let failed: Vec<usize> = config
            .failures
            .iter()
            .filter(|(fr, _)| *fr == r)
            .map(|&(_, v)| v)
            .collect();
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let trace = run_round(graph, learner, &mut nodes, &mut state, &failed).map_err(wrap)?;
        if config.validate_every > 0
            && ((r + 1) % config.validate_every == 0 || r + 1 == config.rounds)
        {
            let node_val_loss = nodes
                .iter()
                .map(|n| learner.validate(&state, &n.source).map(|(loss, _)| loss))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            metrics.push(RoundMetrics {
                round,
                train_loss: trace.train_loss,
                node_val_loss,
            });
        }
        traces.push(trace);
    }
    Ok(Simulation {
        state,
        nodes,
        traces,
        metrics,
    })
}

/// Centralized training over the same episode streams a fully connected
/// network would see: `rounds` outer steps with one slot per vertex.
pub fn centralized_reference(
    graph: &SensorGraph,
    learner: &MetaLearner,
    mut state: MetaState,
    seed: u64,
    rounds: usize,
    k: usize,
    q: usize,
) -> Result<MetaState> {
    let nodes = (0..graph.len())
        .map(|v| {
            Ok(SinusoidSource::new(seed, k, q).with_distribution(graph.tasks(v).distribution()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let source = NetworkSource { nodes };
    for _ in 0..rounds {
        let step = state.step;
        let episodes = (0..graph.len())
            .map(|slot| source.train_episode(step, slot))
            .collect::<Result<Vec<_>>>()?;
        learner.outer_step(&mut state, &episodes)?;
    }
    Ok(state)
}
