//! Single-threaded discrete-event simulation world.
//!
//! The world owns every node's volatile state, every node's durable store,
//! the one seeded RNG that produces GUIDs and node identifiers, and the
//! fault-injection plan. All "network" interaction is a synchronous call
//! gated on liveness: delivery to a dead node fails visibly at the caller,
//! delivery between live nodes completes within the current event step.

use crate::error::{Error, Result};
use crate::keyspace::{Aid, Guid, Key};
use crate::object_model::{ClassDescriptor, ObjectNode};
use crate::policy::{PolicyRegistry, TxnLedger};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

/// Where a node's durable store lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Durability {
    Mem,
    Dir(PathBuf),
}

/// Data Store placement strategy. Directories always co-locate entries with
/// the responsible node; only the Data Store may record external locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreStrategy {
    CoLocated,
    LocationRecording,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub initial_nodes: usize,
    pub replication: usize,
    pub durability: Durability,
    pub strategy: StoreStrategy,
    pub classes: BTreeMap<String, ClassDescriptor>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            initial_nodes: 1,
            replication: 3,
            durability: Durability::Mem,
            strategy: StoreStrategy::CoLocated,
            classes: BTreeMap::new(),
        }
    }
}

impl SimConfig {
    /// Successor-list length: enough to survive bursts of failures between
    /// stabilization rounds and to host every replica target.
    pub fn successor_len(&self) -> usize {
        self.replication.max(3)
    }
}

/// One durably stored record. Stamps are world-unique logical times used to
/// order conflicting writes during repair; append logs are ordered and only
/// ever grow; tombstones keep removals from resurrecting via stale replicas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DurableEntry {
    Value { data: Vec<u8>, stamp: u64 },
    /// Append-only log; each element keeps the logical time of its append.
    Log { items: Vec<(Vec<u8>, u64)> },
    Tombstone { stamp: u64 },
}

impl DurableEntry {
    pub fn kind_str(&self) -> &'static str {
        match self {
            DurableEntry::Value { .. } => "VALUE",
            DurableEntry::Log { .. } => "APPEND_LOG",
            DurableEntry::Tombstone { .. } => "TOMBSTONE",
        }
    }

    /// Logical time of the entry's latest mutation, for last-writer-wins
    /// comparisons during repair.
    pub fn stamp(&self) -> u64 {
        match self {
            DurableEntry::Value { stamp, .. } => *stamp,
            DurableEntry::Log { items } => items.last().map(|(_, s)| *s).unwrap_or(0),
            DurableEntry::Tombstone { stamp } => *stamp,
        }
    }
}

pub type NodeDurable = BTreeMap<(u8, Key), DurableEntry>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopologyChange {
    Join,
    Fail,
}

/// Up-call describing a membership change to a storage service whose
/// replica-placement obligations may have moved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyEvent {
    pub kind: TopologyChange,
    pub subject: Key,
    /// The receiving node's responsibility interval after the change,
    /// as a clockwise half-open `(lo, hi]` pair.
    pub new_responsibility: (Key, Key),
}

/// Volatile per-node state; destroyed on failure, rebuilt empty on re-join.
#[derive(Debug)]
pub struct NodeState {
    pub id: Key,
    pub incarnation: u64,
    pub successors: Vec<Key>,
    pub predecessor: Option<Key>,
    pub fingers: Vec<Key>,
    pub heap: BTreeMap<u64, ObjectNode>,
    pub guid_instances: BTreeMap<Guid, u64>,
    pub next_instance: u64,
    pub dirty: BTreeSet<Guid>,
    pub ledger: TxnLedger,
    pub pending_events: Vec<TopologyEvent>,
}

impl NodeState {
    fn new(id: Key, incarnation: u64) -> NodeState {
        NodeState {
            id,
            incarnation,
            successors: Vec::new(),
            predecessor: None,
            fingers: Vec::new(),
            heap: BTreeMap::new(),
            guid_instances: BTreeMap::new(),
            next_instance: 0,
            dirty: BTreeSet::new(),
            ledger: TxnLedger::default(),
            pending_events: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Metrics {
    pub dol_calls: u64,
    pub dol_hops_total: u64,
    pub dol_hops_max: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitFaultMode {
    /// Count the internal steps of the armed commit without interfering.
    Observe,
    /// Crash the committing node once the given number of internal steps
    /// has completed (0 crashes before any step).
    CrashAfter(u32),
}

#[derive(Debug, Default)]
pub struct FaultPlan {
    armed: bool,
    mode: Option<CommitFaultMode>,
    steps_done: u32,
    pub observed_steps: Option<u32>,
    pub crash_after_replica_writes: Option<u32>,
    replica_writes_done: u32,
}

/// State carried across a full shutdown/restart cycle. Node identities and
/// RNG position persist so a restarted run stays deterministic; everything
/// volatile is deliberately absent.
#[derive(Clone, Debug)]
pub struct RestartCarry {
    pub seed: u64,
    pub rng_word_pos: u128,
    pub lamport: u64,
    pub node_ids: Vec<Key>,
    pub incarnations: Vec<u64>,
    pub live_indices: Vec<usize>,
    pub allocated: BTreeSet<Key>,
}

pub struct World {
    pub cfg: SimConfig,
    pub rng: ChaCha8Rng,
    lamport: u64,
    allocated: BTreeSet<Key>,
    pub node_ids: Vec<Key>,
    pub incarnations: Vec<u64>,
    pub live: BTreeSet<Key>,
    pub nodes: BTreeMap<Key, NodeState>,
    pub durable: BTreeMap<Key, NodeDurable>,
    pub external_repos: Vec<BTreeMap<Key, Vec<u8>>>,
    pub policies: PolicyRegistry,
    pub metrics: Metrics,
    pub fault: FaultPlan,
}

impl World {
    /// Builds a fresh world with the configured number of initial nodes,
    /// already at routing quiescence.
    pub fn new(cfg: SimConfig) -> World {
        let mut world = World {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            lamport: 0,
            allocated: BTreeSet::new(),
            node_ids: Vec::new(),
            incarnations: Vec::new(),
            live: BTreeSet::new(),
            nodes: BTreeMap::new(),
            durable: BTreeMap::new(),
            external_repos: Vec::new(),
            policies: crate::policy::builtin_registry(),
            metrics: Metrics::default(),
            fault: FaultPlan::default(),
        };
        for _ in 0..world.cfg.initial_nodes {
            let id = world.fresh_ring_key();
            let idx = world.node_ids.len();
            world.node_ids.push(id);
            world.incarnations.push(0);
            world.boot_node(idx);
        }
        crate::overlay::refresh_all_views(&mut world);
        world
    }

    /// Rebuilds a world over existing durable directories after a full
    /// shutdown, bumping every node's incarnation.
    pub fn reboot(cfg: SimConfig, carry: RestartCarry) -> Result<World> {
        let dir = match &cfg.durability {
            Durability::Dir(d) => d.clone(),
            Durability::Mem => {
                return Err(Error::Usage(
                    "restart requires dir durability; run with --durable dir:<path>".into(),
                ))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(carry.seed);
        rng.set_word_pos(carry.rng_word_pos);
        let mut world = World {
            cfg,
            rng,
            lamport: carry.lamport,
            allocated: carry.allocated,
            node_ids: carry.node_ids.clone(),
            incarnations: carry.incarnations.iter().map(|i| i + 1).collect(),
            live: BTreeSet::new(),
            nodes: BTreeMap::new(),
            durable: BTreeMap::new(),
            external_repos: Vec::new(),
            policies: crate::policy::builtin_registry(),
            metrics: Metrics::default(),
            fault: FaultPlan::default(),
        };
        world.load_durable(&dir)?;
        for idx in carry.live_indices {
            world.boot_node(idx);
        }
        crate::overlay::refresh_all_views(&mut world);
        // every node effectively re-joined: queue repair work so the first
        // stabilization re-establishes placement (e.g. after a wiped disk)
        for id in world.live_sorted() {
            let interval = crate::overlay::responsibility_interval(&world, id);
            let event = TopologyEvent {
                kind: TopologyChange::Join,
                subject: id,
                new_responsibility: interval,
            };
            world.node_mut(id)?.pending_events.push(event);
        }
        Ok(world)
    }

    pub fn carry(&self) -> RestartCarry {
        RestartCarry {
            seed: self.cfg.seed,
            rng_word_pos: self.rng.get_word_pos(),
            lamport: self.lamport,
            node_ids: self.node_ids.clone(),
            incarnations: self.incarnations.clone(),
            live_indices: (0..self.node_ids.len())
                .filter(|i| self.live.contains(&self.node_ids[*i]))
                .collect(),
            allocated: self.allocated.clone(),
        }
    }

    pub(crate) fn boot_node(&mut self, idx: usize) {
        let id = self.node_ids[idx];
        let inc = self.incarnations[idx];
        self.live.insert(id);
        self.nodes.insert(id, NodeState::new(id, inc));
        self.durable.entry(id).or_default();
    }

    /// Monotone logical time; every call advances it.
    pub fn next_stamp(&mut self) -> u64 {
        self.lamport += 1;
        self.lamport
    }

    pub fn lamport(&self) -> u64 {
        self.lamport
    }

    fn fresh_ring_key(&mut self) -> Key {
        loop {
            let k = Key::random(&mut self.rng);
            if self.allocated.insert(k) {
                return k;
            }
        }
    }

    /// Draws a fresh GUID from the simulation RNG. A collision with an
    /// already-allocated identity means the RNG discipline is broken and is
    /// a hard error.
    pub fn new_guid(&mut self) -> Result<Guid> {
        let k = Key::random(&mut self.rng);
        if !self.allocated.insert(k) {
            return Err(Error::GuidCollision);
        }
        Ok(Guid(k))
    }

    /// Fresh ring identifier for a joining node.
    pub fn new_node_id(&mut self) -> Key {
        self.fresh_ring_key()
    }

    pub fn is_live(&self, id: Key) -> bool {
        self.live.contains(&id)
    }

    pub fn node(&self, id: Key) -> Result<&NodeState> {
        self.nodes.get(&id).ok_or(Error::NodeNotLive(id))
    }

    pub fn node_mut(&mut self, id: Key) -> Result<&mut NodeState> {
        self.nodes.get_mut(&id).ok_or(Error::NodeNotLive(id))
    }

    /// Liveness gate for one simulated message from `from` to `to`.
    pub fn deliver(&self, from: Key, to: Key) -> Result<()> {
        if !self.is_live(from) {
            return Err(Error::NodeNotLive(from));
        }
        if !self.is_live(to) {
            return Err(Error::DeliveryFailure(to));
        }
        Ok(())
    }

    pub fn live_sorted(&self) -> Vec<Key> {
        self.live.iter().copied().collect()
    }

    pub fn index_of(&self, id: Key) -> Option<usize> {
        self.node_ids.iter().position(|k| *k == id)
    }

    pub fn durable_of(&self, id: Key) -> &NodeDurable {
        static EMPTY: std::sync::OnceLock<NodeDurable> = std::sync::OnceLock::new();
        self.durable
            .get(&id)
            .unwrap_or_else(|| EMPTY.get_or_init(NodeDurable::new))
    }

    pub fn durable_mut(&mut self, id: Key) -> &mut NodeDurable {
        self.durable.entry(id).or_default()
    }

    pub fn class(&self, class_id: &str) -> Result<&ClassDescriptor> {
        self.cfg
            .classes
            .get(class_id)
            .ok_or_else(|| Error::SchemaError(format!("unknown class {class_id}")))
    }

    // ----- fault injection ---------------------------------------------

    pub fn arm_commit_fault(&mut self, mode: CommitFaultMode) {
        self.fault.armed = true;
        self.fault.mode = Some(mode);
        self.fault.steps_done = 0;
        self.fault.observed_steps = None;
    }

    pub fn disarm_commit_fault(&mut self) {
        if self.fault.armed {
            self.fault.observed_steps = Some(self.fault.steps_done);
        }
        self.fault.armed = false;
        self.fault.mode = None;
    }

    /// Called by the commit sequence when it starts; honors "crash before
    /// any step" plans.
    pub fn commit_begin(&mut self, committing: Key) -> Result<()> {
        if self.fault.armed && self.fault.mode == Some(CommitFaultMode::CrashAfter(0)) {
            return self.trigger_crash(committing);
        }
        Ok(())
    }

    /// Called by the commit sequence after each completed internal step.
    pub fn commit_checkpoint(&mut self, committing: Key) -> Result<()> {
        if !self.fault.armed {
            return Ok(());
        }
        self.fault.steps_done += 1;
        if let Some(CommitFaultMode::CrashAfter(step)) = self.fault.mode {
            if self.fault.steps_done == step {
                return self.trigger_crash(committing);
            }
        }
        Ok(())
    }

    /// Store-level hook: crash the writing node after a budget of
    /// individual replica writes. Used to show that a crash mid-replication
    /// never tears an individual replica.
    pub fn replica_write_checkpoint(&mut self, writer: Key) -> Result<()> {
        if let Some(budget) = self.fault.crash_after_replica_writes {
            self.fault.replica_writes_done += 1;
            if self.fault.replica_writes_done >= budget {
                self.fault.crash_after_replica_writes = None;
                return self.trigger_crash(writer);
            }
        }
        Ok(())
    }

    fn trigger_crash(&mut self, node: Key) -> Result<()> {
        self.fault.armed = false;
        self.fault.mode = None;
        crate::overlay::fail_by_id(self, node)?;
        Err(Error::Crashed(node))
    }

    // ----- durable store persistence ------------------------------------

    /// Serializes every node's durable store under `dir`, one directory per
    /// node named by its hex key, one file per service tag. Records are
    /// `hex-key TAB kind TAB base64-data TAB stamp` lines; append logs emit
    /// one line per element in order.
    pub fn flush_durable(&self) -> Result<()> {
        let dir = match &self.cfg.durability {
            Durability::Dir(d) => d.clone(),
            Durability::Mem => return Ok(()),
        };
        for (node, store) in &self.durable {
            let node_dir = dir.join(node.to_hex());
            std::fs::create_dir_all(&node_dir)?;
            let mut per_aid: BTreeMap<u8, String> = BTreeMap::new();
            for aid in Aid::ALL {
                per_aid.insert(aid.tag(), String::new());
            }
            for ((tag, key), entry) in store {
                let buf = per_aid.entry(*tag).or_default();
                match entry {
                    DurableEntry::Value { data, stamp } => {
                        buf.push_str(&format!(
                            "{}\tVALUE\t{}\t{}\n",
                            key.to_hex(),
                            BASE64.encode(data),
                            stamp
                        ));
                    }
                    DurableEntry::Log { items } => {
                        for (item, stamp) in items {
                            buf.push_str(&format!(
                                "{}\tAPPEND_LOG\t{}\t{}\n",
                                key.to_hex(),
                                BASE64.encode(item),
                                stamp
                            ));
                        }
                    }
                    DurableEntry::Tombstone { stamp } => {
                        buf.push_str(&format!("{}\tTOMBSTONE\t\t{}\n", key.to_hex(), stamp));
                    }
                }
            }
            for (tag, content) in per_aid {
                std::fs::write(node_dir.join(format!("{tag}.store")), content)?;
            }
        }
        Ok(())
    }

    fn load_durable(&mut self, dir: &PathBuf) -> Result<()> {
        for id in self.node_ids.clone() {
            let node_dir = dir.join(id.to_hex());
            if !node_dir.is_dir() {
                continue;
            }
            let mut store = NodeDurable::new();
            for aid in Aid::ALL {
                let path = node_dir.join(format!("{}.store", aid.tag()));
                if !path.is_file() {
                    continue;
                }
                let text = std::fs::read_to_string(&path)?;
                for (lineno, line) in text.lines().enumerate() {
                    if line.is_empty() {
                        continue;
                    }
                    let parts: Vec<&str> = line.split('\t').collect();
                    if parts.len() != 4 {
                        return Err(Error::DecodeError(format!(
                            "{}:{}: expected 4 tab-separated fields",
                            path.display(),
                            lineno + 1
                        )));
                    }
                    let key = Key::from_hex(parts[0])?;
                    let stamp: u64 = parts[3]
                        .parse()
                        .map_err(|_| Error::DecodeError("bad stamp".into()))?;
                    match parts[1] {
                        "VALUE" => {
                            let data = BASE64
                                .decode(parts[2])
                                .map_err(|e| Error::DecodeError(e.to_string()))?;
                            store.insert((aid.tag(), key), DurableEntry::Value { data, stamp });
                        }
                        "APPEND_LOG" => {
                            let item = BASE64
                                .decode(parts[2])
                                .map_err(|e| Error::DecodeError(e.to_string()))?;
                            match store
                                .entry((aid.tag(), key))
                                .or_insert_with(|| DurableEntry::Log { items: Vec::new() })
                            {
                                DurableEntry::Log { items } => items.push((item, stamp)),
                                _ => {
                                    return Err(Error::DecodeError(
                                        "append-log line for a non-log key".into(),
                                    ))
                                }
                            }
                        }
                        "TOMBSTONE" => {
                            store.insert((aid.tag(), key), DurableEntry::Tombstone { stamp });
                        }
                        other => {
                            return Err(Error::DecodeError(format!("unknown entry kind {other}")))
                        }
                    }
                }
            }
            self.durable.insert(id, store);
        }
        Ok(())
    }

    /// Destroys a node's durable state, on disk included. Models a disk
    /// failure as opposed to the crash-stop FAIL event.
    pub fn wipe_durable(&mut self, id: Key) -> Result<()> {
        self.durable.insert(id, NodeDurable::new());
        if let Durability::Dir(dir) = &self.cfg.durability {
            let node_dir = dir.join(id.to_hex());
            if node_dir.is_dir() {
                std::fs::remove_dir_all(node_dir)?;
            }
        }
        Ok(())
    }

    pub fn record_dol(&mut self, hops: u64) {
        self.metrics.dol_calls += 1;
        self.metrics.dol_hops_total += hops;
        self.metrics.dol_hops_max = self.metrics.dol_hops_max.max(hops);
    }
}
