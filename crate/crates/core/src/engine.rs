//! Synchronous-round simulation.
//!
//! In round `T` every online node receives the messages composed in round
//! `T - 1`, updates its history database, infers its neighbors' trained
//! models, aggregates, records metrics, trains, and composes one message per
//! neighbor. The adversary runs the same loop once for all its Sybils.
//! Messages travel in their binary wire form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, fedavg, Contribution, ContributionSet};
use crate::config::{DatasetConfig, SimulationConfig, TrainSettings};
use crate::data::{attack_segment, dirichlet_partition, load_idx, synth_blobs, AttackSpec, LabeledDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::gossip::{
    compose_with, filter_db, receive_message, select_gossip, HistoryDb, KeyRing, Round, RoundMessage, SignedHistory,
    Signer, Verifier,
};
use crate::numerics::{evaluate_accuracy, train_sgd, Arch, Model, ParamVector, TrainConfig};
use crate::rng::{self, Stream};
use crate::topology::{attach_sybils, cap_degrees, plan_ssp_attack, random_geometric_graph, NodeId, SspPlan, Topology};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: Round,
    pub mean_accuracy: f64,
    /// `None` when the run has no attack.
    pub mean_attack_score: Option<f64>,
    /// Honest nodes that aggregated this round.
    pub aggregating_nodes: usize,
    /// Aggregations with a single history and hence no similarity baseline.
    pub degenerate_aggregations: usize,
    pub messages: usize,
}

/// Everything derived from the config before round 0.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub topology: Topology,
    pub plan: SspPlan,
    pub partitions: Vec<LabeledDataset>,
    pub test: LabeledDataset,
    pub attack: Option<AttackSpec>,
    /// Already transformed by the attack.
    pub adversary_data: Option<LabeledDataset>,
    pub init: Model,
}

fn sub_seed(seed: u64, stream: Stream) -> u64 {
    rng::derive_seed(seed, &[stream as u64])
}

fn load_dataset(cfg: &SimulationConfig, adversary_per_class: usize) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetConfig::Blobs {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => {
            let all = synth_blobs(
                *classes,
                train_per_class + test_per_class + adversary_per_class,
                *dim,
                *spread,
                sub_seed(cfg.seed, Stream::Dataset),
            )?;
            let (rest, test) = all.split_per_class(*test_per_class);
            let (pool, adversary) = rest.split_per_class(adversary_per_class);
            Ok((pool, test, adversary))
        }
        DatasetConfig::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            let limit = |d: LabeledDataset, n: Option<usize>| match n {
                Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
                _ => d,
            };
            let (pool, adversary) = limit(train, *train_limit).split_per_class(adversary_per_class);
            Ok((pool, limit(test, *test_limit), adversary))
        }
    }
}

/// Honest graph capped to its degree bound, with Sybils attached when the
/// config has an attack.
pub fn build_topology(cfg: &SimulationConfig) -> Result<(Topology, SspPlan)> {
    let n = cfg.network.honest_nodes;
    let topo_seed = sub_seed(cfg.seed, Stream::Topology);
    let honest = random_geometric_graph(n, cfg.network.radius, topo_seed)?;
    let honest = cap_degrees(&honest, cfg.honest_degree_bound(), topo_seed)?.with_degree_bound(cfg.network.degree_bound)?;
    if cfg.attack.is_none() {
        return Ok((honest, SspPlan::empty(n)));
    }
    let plan = plan_ssp_attack(&honest, cfg.phi(), sub_seed(cfg.seed, Stream::Attack))?;
    Ok((attach_sybils(&honest, &plan)?, plan))
}

/// Builds data, topology, attack plan and the shared initial model.
pub fn prepare(cfg: &SimulationConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = cfg.network.honest_nodes;
    let attack = cfg.attack_spec()?;
    let classes = cfg.classes();
    let adversary_per_class = match &cfg.attack {
        None => 0,
        Some(a) => {
            let pool_size = match &cfg.dataset {
                DatasetConfig::Blobs { train_per_class, .. } => train_per_class * classes,
                DatasetConfig::Mnist { train_limit, .. } => train_limit.unwrap_or(60_000),
            };
            a.adversary_samples.unwrap_or(pool_size / n).max(1).div_ceil(classes)
        }
    };
    let (pool, test, adversary) = load_dataset(cfg, adversary_per_class)?;
    let partitions = dirichlet_partition(
        &pool,
        &PartitionSpec {
            node_count: n,
            alpha: cfg.partition.alpha,
            seed: sub_seed(cfg.seed, Stream::Partition),
        },
    )?;

    let (topology, plan) = build_topology(cfg)?;
    let adversary_data = match &attack {
        Some(spec) => Some(spec.apply(&adversary)?),
        None => None,
    };
    let init = Model::init(cfg.arch(), sub_seed(cfg.seed, Stream::Init))?;
    Ok(Prepared {
        topology,
        plan,
        partitions,
        test,
        attack,
        adversary_data,
        init,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub receiver: NodeId,
    pub sender: NodeId,
    pub round: Round,
    pub model: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GossipEvent {
    pub round: Round,
    pub from: NodeId,
    pub to: NodeId,
    pub origin: NodeId,
    /// Who `from` received the record from.
    pub via: NodeId,
    pub distance: u32,
}

/// Ground truth kept when tracing is enabled.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Trained model of every honest node per round it trained.
    pub trained: BTreeMap<(NodeId, Round), ParamVector>,
    /// Own history after training, per honest node and round.
    pub histories: BTreeMap<(NodeId, Round), ParamVector>,
    pub reconstructions: Vec<Reconstruction>,
    /// Rounds in which each honest node aggregated.
    pub aggregated: BTreeMap<NodeId, Vec<Round>>,
    pub gossip: Vec<GossipEvent>,
    /// `(round, from, to, encoded message)` for every delivered message.
    pub messages: Vec<(Round, NodeId, NodeId, Vec<u8>)>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub metrics: Vec<RoundMetrics>,
    pub topology: Topology,
    pub plan: SspPlan,
    pub trace: Option<Trace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

struct Shared<'a> {
    cfg: &'a SimulationConfig,
    topology: &'a Topology,
    verifier: &'a dyn Verifier,
    /// Dataset size per node id, Sybils included.
    samples: Vec<usize>,
    arch: Arch,
}

impl Shared<'_> {
    fn oldest(&self, round: Round) -> Option<Round> {
        self.cfg.gossip.max_age.map(|age| round.saturating_sub(age))
    }
}

/// One network identity: its database and what it knows of its neighbors.
struct Port {
    id: NodeId,
    db: HistoryDb,
    /// Latest history seen from each direct neighbor.
    known: BTreeMap<NodeId, (Round, ParamVector)>,
    signer: Arc<dyn Signer>,
}

type Inferred = BTreeMap<NodeId, (ParamVector, ParamVector)>;
type Outgoing = Vec<(NodeId, RoundMessage, Option<GossipEvent>)>;

impl Port {
    fn new(id: NodeId, capacity: Option<usize>, signer: Arc<dyn Signer>) -> Self {
        Port {
            id,
            db: HistoryDb::new(capacity),
            known: BTreeMap::new(),
            signer,
        }
    }

    /// Stores every message, then drops records older than `oldest`. Returns
    /// `(trained model, history)` by sender for senders whose previous round
    /// is known.
    fn receive(&mut self, inbox: &[RoundMessage], verifier: &dyn Verifier, oldest: Option<Round>) -> Result<Inferred> {
        let mut models = BTreeMap::new();
        for msg in inbox {
            let sender = msg.sender();
            let prev = self.known.get(&sender).map(|(r, h)| (*r, h));
            let got = receive_message(self.id, msg, &mut self.db, prev, verifier)?;
            if let Some(m) = got.trained_model {
                models.insert(sender, (m, msg.own.history.clone()));
            }
            self.known.insert(sender, (msg.own.round, msg.own.history.clone()));
        }
        if let Some(oldest) = oldest {
            self.db.drop_outdated(oldest);
        }
        Ok(models)
    }

    /// One message per neighbor, each with an independently drawn gossip record.
    fn compose(&self, own: &SignedHistory, neighbors: &BTreeSet<NodeId>, forward: bool, lambda: f64, seed: u64) -> Result<Outgoing> {
        let round = own.round;
        let mut rng = rng::stream(seed, Stream::Gossip, self.id as u64, round as u64);
        neighbors
            .iter()
            .map(|&j| {
                let selected = if forward {
                    select_gossip(&filter_db(&self.db, self.id, j), lambda, &mut rng)?
                } else {
                    None
                };
                let event = selected.map(|r| GossipEvent {
                    round,
                    from: self.id,
                    to: j,
                    origin: r.origin(),
                    via: r.forwarder,
                    distance: r.distance + 1,
                });
                Ok((j, compose_with(own.clone(), selected), event))
            })
            .collect()
    }
}

/// Adds `raw` to `history` and returns the trained model that subtracting
/// consecutive histories recovers bit for bit.
fn absorb(history: &mut ParamVector, raw: &ParamVector) -> Result<ParamVector> {
    let mut next = history.clone();
    next.add_assign(raw);
    let effective = next.sub(history)?;
    *history = next;
    Ok(effective)
}

fn local_training(model: &ParamVector, data: &LabeledDataset, arch: Arch, settings: &TrainSettings, epochs: usize, seed: u64) -> Result<ParamVector> {
    if data.is_empty() {
        return Ok(model.clone());
    }
    let tc = TrainConfig {
        learning_rate: settings.learning_rate,
        local_epochs: epochs,
        batch_size: settings.batch_size,
        seed,
    };
    Ok(train_sgd(&Model::new(arch, model.clone())?, data, &tc)?.into_params())
}

struct NodeState {
    port: Port,
    data: LabeledDataset,
    /// Post-aggregation model, the one metrics are taken on.
    model: ParamVector,
    trained: Option<ParamVector>,
    history: ParamVector,
    returning: bool,
}

#[derive(Default)]
struct StepOutput {
    outgoing: Outgoing,
    aggregated: bool,
    degenerate: bool,
    trained: Option<ParamVector>,
    reconstructions: Vec<Reconstruction>,
}

impl NodeState {
    fn step(&mut self, round: Round, inbox: &[RoundMessage], env: &Shared<'_>) -> Result<StepOutput> {
        let cfg = env.cfg;
        let id = self.port.id;
        let mut out = StepOutput::default();
        if cfg.downtime.iter().any(|o| o.node == id && o.covers(round)) {
            self.returning = true;
            return Ok(out);
        }
        let models = self.port.receive(inbox, env.verifier, env.oldest(round))?;
        out.reconstructions = models
            .iter()
            .filter(|(s, _)| !env.topology.is_sybil(**s))
            .map(|(&sender, (m, _))| Reconstruction {
                receiver: id,
                sender,
                round: round - 1,
                model: m.clone(),
            })
            .collect();
        if self.returning {
            // one round of listening rebuilds consecutive histories
            self.returning = false;
            return Ok(out);
        }

        if round > 0 {
            let mut c = ContributionSet::new(Contribution {
                id,
                model: self.trained.clone().unwrap_or_else(|| self.model.clone()),
                history: self.history.clone(),
                samples: self.data.len(),
            });
            for (&sender, (m, h)) in &models {
                c.direct.push(Contribution {
                    id: sender,
                    model: m.clone(),
                    history: h.clone(),
                    samples: env.samples[sender],
                });
            }
            if cfg.aggregator.uses_histories() {
                c.indirect = self
                    .port
                    .db
                    .records()
                    .filter(|r| r.origin() != id && !models.contains_key(&r.origin()))
                    .map(|r| (r.origin(), r.history().clone()))
                    .collect();
            }
            let agg = aggregate(cfg.aggregator, &c, &cfg.aggregation)?;
            self.model = agg.model;
            out.degenerate = agg.degenerate;
            out.aggregated = true;
        }

        let seed = rng::derive_seed(cfg.seed, &[Stream::Train as u64, id as u64, round as u64]);
        let raw = local_training(&self.model, &self.data, env.arch, &cfg.train, cfg.train.local_epochs, seed)?;
        let trained = absorb(&mut self.history, &raw)?;
        self.trained = Some(trained.clone());
        out.trained = Some(trained);
        let own = SignedHistory::sign(id, round, self.history.clone(), self.port.signer.as_ref())?;
        out.outgoing = self.port.compose(&own, env.topology.neighbors(id), true, cfg.gossip.lambda, cfg.seed)?;
        Ok(out)
    }
}

/// All Sybils act through one shared model and history.
struct Adversary {
    ports: Vec<Port>,
    data: LabeledDataset,
    model: ParamVector,
    trained: Option<ParamVector>,
    history: ParamVector,
    epochs: usize,
    forward: bool,
}

impl Adversary {
    fn step(&mut self, round: Round, inboxes: &[Vec<RoundMessage>], env: &Shared<'_>) -> Result<Outgoing> {
        let cfg = env.cfg;
        let mut designated = Inferred::new();
        for (k, port) in self.ports.iter_mut().enumerate() {
            let got = port.receive(&inboxes[port.id], env.verifier, env.oldest(round))?;
            if k == 0 {
                designated = got;
            }
        }
        if round > 0 {
            let own = self.trained.clone().unwrap_or_else(|| self.model.clone());
            let mut parts: Vec<(&ParamVector, usize)> = vec![(&own, self.data.len().max(1))];
            parts.extend(designated.iter().map(|(&s, (m, _))| (m, env.samples[s].max(1))));
            self.model = fedavg(&parts)?;
        }
        let seed = rng::derive_seed(cfg.seed, &[Stream::Adversary as u64, round as u64]);
        let raw = local_training(&self.model, &self.data, env.arch, &cfg.train, self.epochs, seed)?;
        self.trained = Some(absorb(&mut self.history, &raw)?);
        let mut outgoing = Vec::new();
        for port in &self.ports {
            let own = SignedHistory::sign(port.id, round, self.history.clone(), port.signer.as_ref())?;
            outgoing.extend(port.compose(&own, env.topology.neighbors(port.id), self.forward, cfg.gossip.lambda, cfg.seed)?);
        }
        Ok(outgoing)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Means of accuracy and attack score over the given models.
pub fn collect_metrics(models: &[&Model], test: &LabeledDataset, attack_set: Option<&LabeledDataset>) -> Result<(f64, Option<f64>)> {
    if models.is_empty() {
        return Err(Error::invalid("no models to measure"));
    }
    let acc = models.iter().map(|m| evaluate_accuracy(m, test)).collect::<Result<Vec<_>>>()?;
    let attack = attack_set
        .map(|set| models.iter().map(|m| evaluate_accuracy(m, set)).collect::<Result<Vec<_>>>())
        .transpose()?;
    Ok((mean(acc.into_iter()), attack.map(|a| mean(a.into_iter()))))
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationResult> {
    run_prepared(cfg, prepare(cfg)?, RunOptions::default())
}

/// Runs all rounds on prepared inputs. Output depends only on the config
/// and inputs, never on the worker count.
pub fn run_prepared(cfg: &SimulationConfig, prepared: Prepared, options: RunOptions) -> Result<SimulationResult> {
    cfg.validate()?;
    let Prepared {
        topology,
        plan,
        partitions,
        test,
        attack,
        adversary_data,
        init,
    } = prepared;
    topology.validate()?;
    let n = topology.honest_count();
    if partitions.len() != n {
        return Err(Error::invalid(format!("{} partitions for {n} honest nodes", partitions.len())));
    }
    let arch = init.arch();
    let keys = KeyRing::generate(cfg.gossip.signature, sub_seed(cfg.seed, Stream::Keys), topology.node_count());
    let attack_set = match &attack {
        Some(spec) => Some(attack_segment(&test, spec)?),
        None => None,
    };
    let adversary_len = adversary_data.as_ref().map_or(0, LabeledDataset::len);
    let samples: Vec<usize> = (0..topology.node_count())
        .map(|i| if i < n { partitions[i].len() } else { adversary_len })
        .collect();
    let zeros = ParamVector::zeros(init.params().len());
    let mut nodes: Vec<NodeState> = partitions
        .into_iter()
        .enumerate()
        .map(|(i, data)| NodeState {
            port: Port::new(i, cfg.gossip.capacity, keys.signers[i].clone()),
            data,
            model: init.params().clone(),
            trained: None,
            history: zeros.clone(),
            returning: false,
        })
        .collect();
    let mut adversary = match (topology.sybil_count(), adversary_data) {
        (0, _) | (_, None) => None,
        (_, Some(data)) => {
            let a = cfg.attack.as_ref().expect("attack data implies attack config");
            Some(Adversary {
                ports: topology
                    .sybil_nodes()
                    .map(|s| Port::new(s, cfg.gossip.capacity, keys.signers[s].clone()))
                    .collect(),
                data,
                model: init.params().clone(),
                trained: None,
                history: zeros.clone(),
                epochs: a.adversary_epochs.unwrap_or(cfg.train.local_epochs),
                forward: a.sybils_forward_gossip,
            })
        }
    };
    let env = Shared {
        cfg,
        topology: &topology,
        verifier: keys.verifier.as_ref(),
        samples,
        arch,
    };
    let pool = thread_pool(cfg.workers.filter(|&w| w > 0))?;
    let mut trace = options.trace.then(Trace::default);
    let mut inboxes: Vec<Vec<RoundMessage>> = vec![Vec::new(); topology.node_count()];
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let delivered: usize = inboxes.iter().map(Vec::len).sum();
        let (honest_out, adversary_out) = pool.install(|| {
            rayon::join(
                || {
                    nodes
                        .par_iter_mut()
                        .zip(inboxes[..n].par_iter())
                        .map(|(node, inbox)| node.step(round, inbox, &env))
                        .collect::<Result<Vec<_>>>()
                },
                || adversary.as_mut().map(|a| a.step(round, &inboxes, &env)).transpose(),
            )
        });
        let honest_out = honest_out?;
        let adversary_out = adversary_out?.unwrap_or_default();

        let models = nodes
            .iter()
            .map(|node| Model::new(arch, node.model.clone()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Model> = models.iter().collect();
        let (mean_accuracy, mean_attack_score) = pool.install(|| collect_metrics(&refs, &test, attack_set.as_ref()))?;
        metrics.push(RoundMetrics {
            round,
            mean_accuracy,
            mean_attack_score,
            aggregating_nodes: honest_out.iter().filter(|o| o.aggregated).count(),
            degenerate_aggregations: honest_out.iter().filter(|o| o.degenerate).count(),
            messages: delivered,
        });

        let mut next: Vec<Vec<RoundMessage>> = vec![Vec::new(); topology.node_count()];
        let senders = honest_out
            .iter()
            .enumerate()
            .flat_map(|(i, o)| o.outgoing.iter().map(move |m| (i, m)))
            .chain(adversary_out.iter().map(|m| (m.1.sender(), m)));
        for (from, (to, msg, event)) in senders {
            let bytes = msg.encode()?;
            next[*to].push(RoundMessage::decode(&bytes)?);
            if let Some(t) = trace.as_mut() {
                t.messages.push((round, from, *to, bytes));
                t.gossip.extend(event.clone());
            }
        }
        for inbox in &mut next {
            inbox.sort_by_key(RoundMessage::sender);
        }
        inboxes = next;

        if let Some(t) = trace.as_mut() {
            for (i, o) in honest_out.into_iter().enumerate() {
                if o.aggregated {
                    t.aggregated.entry(i).or_default().push(round);
                }
                if let Some(w) = o.trained {
                    t.trained.insert((i, round), w);
                    t.histories.insert((i, round), nodes[i].history.clone());
                }
                t.reconstructions.extend(o.reconstructions);
            }
        }
    }
    Ok(SimulationResult {
        metrics,
        topology,
        plan,
        trace,
    })
}

pub const CSV_HEADER: &str = "round,mean_accuracy,mean_attack_score";

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let attack = m.mean_attack_score.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "{},{:.6},{}", m.round, m.mean_accuracy, attack);
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub config: &'a SimulationConfig,
    pub seed: u64,
    pub git_describe: String,
    pub version: &'static str,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub manifest: PathBuf,
}

pub fn write_outputs(cfg: &SimulationConfig, metrics: &[RoundMetrics], dir: &Path) -> Result<OutputPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = OutputPaths {
        metrics: dir.join(&cfg.output.metrics),
        manifest: dir.join(&cfg.output.manifest),
    };
    std::fs::write(&paths.metrics, metrics_csv(metrics))?;
    let manifest = Manifest {
        config: cfg,
        seed: cfg.seed,
        git_describe: git_describe(),
        version: env!("CARGO_PKG_VERSION"),
    };
    std::fs::write(&paths.manifest, serde_json::to_string_pretty(&manifest)?)?;
    Ok(paths)
}
