//! Scenario execution, crash-point sweeps and full restarts.

use super::report::*;
use super::scenario::*;
use crate::directories::{self, PolicyScope};
use crate::error::{Error, Result};
use crate::keyspace::{Aid, Guid, Key};
use crate::middleware::{self, AbstractRef};
use crate::object_model::Value;
use crate::overlay;
use crate::policy::PolicyParams;
use crate::sim::{CommitFaultMode, Durability, SimConfig, World};
use crate::store;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub struct RunOutcome {
    pub report: Report,
    pub assert_failures: u32,
}

/// Loads a scenario from a file path or by builtin name.
pub fn load_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario");
        return super::scenario::parse_scenario(name, &text);
    }
    for (name, text) in super::BUILTIN_SCENARIOS {
        if *name == arg {
            return super::scenario::parse_scenario(name, text);
        }
    }
    Err(Error::Usage(format!(
        "no scenario file or builtin named {arg:?} (builtins: {})",
        super::BUILTIN_SCENARIOS
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", ")
    )))
}

/// Resolves the effective durability: an explicit command-line choice wins,
/// otherwise the scenario header decides (dir requires a path).
pub fn resolve_durability(scenario: &Scenario, cli: Option<Durability>) -> Result<Durability> {
    match (scenario.durability, cli) {
        (_, Some(d)) => Ok(d),
        (DurabilitySpec::Mem, None) => Ok(Durability::Mem),
        (DurabilitySpec::Dir, None) => Err(Error::Usage(
            "scenario requires dir durability; pass --durable dir:<path>".into(),
        )),
    }
}

struct Runner {
    world: World,
    labels: BTreeMap<String, Guid>,
    label_instance: BTreeMap<String, (usize, u64)>,
    refs: BTreeMap<(usize, String), AbstractRef>,
    pending_object_policies: BTreeMap<String, (String, PolicyParams)>,
    events: Vec<EventOutcome>,
    asserts: AssertSummary,
}

impl Runner {
    fn new(scenario: &Scenario, durability: Durability) -> Result<Runner> {
        let cfg = SimConfig {
            seed: scenario.seed,
            initial_nodes: scenario.nodes,
            replication: scenario.replication,
            durability,
            strategy: scenario.strategy,
            classes: scenario.classes.clone(),
        };
        let mut world = World::new(cfg);
        let mut pending_object_policies = BTreeMap::new();
        for decl in &scenario.policies {
            if !world.policies.contains_key(&decl.policy_name) {
                return Err(Error::Usage(format!(
                    "scenario references unregistered policy {:?}",
                    decl.policy_name
                )));
            }
            match &decl.scope {
                PolicyScopeDecl::Class(class_id) => {
                    let node = world.live_sorted()[0];
                    directories::set_resilience_policy(
                        &mut world,
                        node,
                        PolicyScope::Class(class_id.clone()),
                        &decl.policy_name,
                        decl.params.clone(),
                    )?;
                }
                PolicyScopeDecl::Object(root_name) => {
                    pending_object_policies.insert(
                        root_name.clone(),
                        (decl.policy_name.clone(), decl.params.clone()),
                    );
                }
            }
        }
        Ok(Runner {
            world,
            labels: BTreeMap::new(),
            label_instance: BTreeMap::new(),
            refs: BTreeMap::new(),
            pending_object_policies,
            events: Vec::new(),
            asserts: AssertSummary::default(),
        })
    }

    /// Lowest-index live node, the default locus for events.
    fn default_index(&self) -> Result<usize> {
        (0..self.world.node_ids.len())
            .find(|i| self.world.is_live(self.world.node_ids[*i]))
            .ok_or(Error::EmptyRing)
    }

    fn node_at(&self, on: Option<usize>) -> Result<(usize, Key)> {
        let idx = match on {
            Some(i) => i,
            None => self.default_index()?,
        };
        let id = *self.world.node_ids.get(idx).ok_or(Error::UnknownNode(idx))?;
        if !self.world.is_live(id) {
            return Err(Error::NodeNotLive(id));
        }
        Ok((idx, id))
    }

    fn label_guid(&self, label: &str) -> Result<Guid> {
        self.labels
            .get(label)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown object label {label:?}")))
    }

    fn lit_to_value(&self, lit: &ValueLit) -> Result<Value> {
        Ok(match lit {
            ValueLit::Int(v) => Value::Int(*v),
            ValueLit::Str(s) => Value::Str(s.clone()),
            ValueLit::Null => Value::Ref(None),
            ValueLit::RefLabel(label) => Value::Ref(Some(self.label_guid(label)?)),
        })
    }

    fn execute(&mut self, event: &ScheduledEvent) -> String {
        let outcome = match self.try_execute(&event.action) {
            Ok(s) => s,
            Err(e) => format!("error: {e}"),
        };
        self.events.push(EventOutcome {
            tick: event.tick,
            action: event.action.describe(),
            outcome: outcome.clone(),
        });
        outcome
    }

    fn try_execute(&mut self, action: &Action) -> Result<String> {
        match action {
            Action::Create { label, class_id, on, fields } => {
                if self.labels.contains_key(label) {
                    return Err(Error::Usage(format!("label {label:?} already bound")));
                }
                let (idx, node) = self.node_at(*on)?;
                let instance = middleware::create_object(&mut self.world, node, class_id)?;
                let class = self.world.class(class_id)?.clone();
                for (field, lit) in fields {
                    let value = self.lit_to_value(lit)?;
                    self.world
                        .node_mut(node)?
                        .heap
                        .get_mut(&instance)
                        .ok_or(Error::NotFound)?
                        .set(&class, field, value)?;
                }
                let guid = middleware::publish_object(&mut self.world, node, instance)?;
                self.labels.insert(label.clone(), guid);
                self.label_instance.insert(label.clone(), (idx, instance));
                Ok(format!("ok guid={guid}"))
            }
            Action::Set { label, field, value, on, txn } => {
                let (_, node) = self.node_at(*on)?;
                let guid = self.label_guid(label)?;
                let value = self.lit_to_value(value)?;
                let mut r = AbstractRef::bare(guid);
                middleware::write_field(&mut self.world, node, &mut r, field, value, *txn)?;
                Ok("ok".to_string())
            }
            Action::Transfer { from, to, amount, field, txn, leg, on } => {
                let (_, node) = self.node_at(*on)?;
                let mut parts = Vec::new();
                if matches!(leg, Leg::Debit | Leg::Both) {
                    let balance = self.adjust(node, from, field, -amount, *txn)?;
                    parts.push(format!("{from}={balance}"));
                }
                if matches!(leg, Leg::Credit | Leg::Both) {
                    let balance = self.adjust(node, to, field, *amount, *txn)?;
                    parts.push(format!("{to}={balance}"));
                }
                Ok(format!("ok {}", parts.join(" ")))
            }
            Action::Associate { name, label, on } => {
                let (host_idx, instance) = *self
                    .label_instance
                    .get(label)
                    .ok_or_else(|| Error::Usage(format!("unknown object label {label:?}")))?;
                if let Some(requested) = on {
                    if *requested != host_idx {
                        return Err(Error::Usage(format!(
                            "object {label:?} is hosted on node {host_idx}"
                        )));
                    }
                }
                let (_, node) = self.node_at(Some(host_idx))?;
                let guid = middleware::associate_name(&mut self.world, node, name, instance)?;
                if let Some((policy_name, params)) = self.pending_object_policies.remove(name) {
                    directories::set_resilience_policy(
                        &mut self.world,
                        node,
                        PolicyScope::Object(guid),
                        &policy_name,
                        params,
                    )?;
                }
                Ok(format!("ok guid={guid}"))
            }
            Action::Commit { name, on, txn, crash_after_step } => {
                let (_, node) = self.node_at(*on)?;
                if let Some(step) = crash_after_step {
                    self.world.arm_commit_fault(CommitFaultMode::CrashAfter(*step));
                }
                let result = middleware::commit(&mut self.world, node, name, *txn);
                self.world.disarm_commit_fault();
                match result {
                    Ok(pid) => Ok(format!("ok pid={pid}")),
                    Err(Error::Crashed(id)) => Ok(format!(
                        "crashed node={}",
                        self.world.index_of(id).map(|i| i.to_string()).unwrap_or_default()
                    )),
                    Err(Error::CommitAborted) => Ok("aborted".to_string()),
                    Err(e) => Err(e),
                }
            }
            Action::Get { name, on } => {
                let (idx, node) = self.node_at(*on)?;
                let r = middleware::get_object_by_name(&mut self.world, node, name)?;
                let guid = r.guid;
                self.refs.insert((idx, name.clone()), r);
                Ok(format!("ok guid={guid}"))
            }
            Action::Read { name, path, on } => {
                let (idx, node) = self.node_at(*on)?;
                if !self.refs.contains_key(&(idx, name.clone())) {
                    let r = middleware::get_object_by_name(&mut self.world, node, name)?;
                    self.refs.insert((idx, name.clone()), r);
                }
                let mut root = self
                    .refs
                    .get(&(idx, name.clone()))
                    .cloned()
                    .expect("just inserted");
                let (value, kind) = self.walk_path(node, &mut root, path)?;
                self.refs.insert((idx, name.clone()), root);
                Ok(format!("ok value={value} kind={kind}"))
            }
            Action::Fail { node } => {
                overlay::fail(&mut self.world, *node)?;
                Ok("ok".to_string())
            }
            Action::Join { node } => {
                overlay::join(&mut self.world, *node)?;
                Ok("ok".to_string())
            }
            Action::DiskWipe { node } => {
                overlay::disk_wipe(&mut self.world, *node)?;
                Ok("ok".to_string())
            }
            Action::Stabilize => {
                let rounds = overlay::stabilize(&mut self.world);
                Ok(format!("ok rounds={rounds}"))
            }
            Action::Assert(expr) => {
                let verdict = self.run_assert(expr);
                match verdict {
                    Ok(None) => {
                        self.asserts.passed += 1;
                        Ok("pass".to_string())
                    }
                    Ok(Some(msg)) => {
                        self.asserts.failed += 1;
                        Ok(format!("fail: {msg}"))
                    }
                    Err(e) => {
                        self.asserts.failed += 1;
                        Ok(format!("fail: {e}"))
                    }
                }
            }
        }
    }

    /// Read-modify-write of an integer field through the middleware.
    fn adjust(&mut self, node: Key, label: &str, field: &str, delta: i64, txn: Option<u64>) -> Result<i64> {
        let guid = self.label_guid(label)?;
        let mut r = AbstractRef::bare(guid);
        let (value, _) = middleware::read_field(&mut self.world, node, &mut r, field)?;
        let Value::Int(current) = value else {
            return Err(Error::SchemaError(format!("field {field} is not an integer")));
        };
        let next = current + delta;
        middleware::write_field(&mut self.world, node, &mut r, field, Value::Int(next), txn)?;
        Ok(next)
    }

    /// Follows a dotted field path from a named root, reporting the final
    /// value and the resolution kind of the root access.
    fn walk_path(&mut self, node: Key, root: &mut AbstractRef, path: &[String]) -> Result<(Value, String)> {
        let mut kind_of_root = None;
        let mut current = root.clone();
        for (i, segment) in path.iter().enumerate() {
            let (value, kind) = middleware::read_field(&mut self.world, node, &mut current, segment)?;
            if i == 0 {
                kind_of_root = Some(kind);
                *root = current.clone();
            }
            if i + 1 == path.len() {
                let kind = kind_of_root.expect("path is non-empty");
                return Ok((value, kind.to_string()));
            }
            match value {
                Value::Ref(Some(child)) => {
                    current = AbstractRef::new(child, current.snapshot_root);
                }
                Value::Ref(None) => {
                    return Err(Error::SchemaError(format!("{segment} is null")));
                }
                other => {
                    return Err(Error::SchemaError(format!(
                        "{segment} is a scalar ({other}) but the path continues"
                    )));
                }
            }
        }
        Err(Error::SchemaError("empty field path".into()))
    }

    /// Middleware-only closure read: every member's class and values,
    /// discovered by following reference fields from the named root.
    fn read_closure(&mut self, node: Key, name: &str) -> Result<BTreeMap<Guid, (String, Vec<Value>)>> {
        let root = middleware::get_object_by_name(&mut self.world, node, name)?;
        let mut out = BTreeMap::new();
        let mut visited = BTreeSet::new();
        let mut stack = vec![root];
        while let Some(mut r) = stack.pop() {
            if !visited.insert(r.guid) {
                continue;
            }
            let (class, values, _) = middleware::read_object(&mut self.world, node, &mut r)?;
            for value in values.iter().rev() {
                if let Value::Ref(Some(child)) = value {
                    if !visited.contains(child) {
                        stack.push(AbstractRef::new(*child, r.snapshot_root));
                    }
                }
            }
            out.insert(r.guid, (class.class_id, values));
        }
        Ok(out)
    }

    fn run_assert(&mut self, expr: &AssertExpr) -> Result<Option<String>> {
        match expr {
            AssertExpr::Field { name, path, expected, on } => {
                let (_, node) = self.node_at(*on)?;
                let mut root = middleware::get_object_by_name(&mut self.world, node, name)?;
                let (value, _) = self.walk_path(node, &mut root, path)?;
                let expected = self.lit_to_value(expected)?;
                if value == expected {
                    Ok(None)
                } else {
                    Ok(Some(format!("expected {expected} got {value}")))
                }
            }
            AssertExpr::Sum { name, class_id, field, expected, on } => {
                let (_, node) = self.node_at(*on)?;
                let closure = self.read_closure(node, name)?;
                let mut sum = 0i64;
                for (guid, (class, values)) in &closure {
                    if class != class_id {
                        continue;
                    }
                    let descriptor = self.world.class(class)?;
                    let idx = descriptor
                        .field_index(field)
                        .ok_or_else(|| Error::SchemaError(format!("no field {field}")))?;
                    match &values[idx] {
                        Value::Int(v) => sum += v,
                        other => {
                            return Ok(Some(format!("{guid} field {field} is not an int: {other}")))
                        }
                    }
                }
                if sum == *expected {
                    Ok(None)
                } else {
                    Ok(Some(format!("expected sum {expected} got {sum}")))
                }
            }
            AssertExpr::Replicas { name, expected } => {
                let (_, node) = self.node_at(None)?;
                let guid = directories::get_guid_by_name(&mut self.world, node, name)?;
                let manifest = directories::get_manifest(&mut self.world, node, guid)?;
                let census = store::census(&self.world);
                for (member, pid) in &manifest.snapshot {
                    let copies = census
                        .iter()
                        .find(|r| r.aid == Aid::DataStore && r.key == pid.0)
                        .map(|r| r.holders.len())
                        .unwrap_or(0);
                    if copies != *expected {
                        return Ok(Some(format!(
                            "state of {member} has {copies} copies, expected {expected}"
                        )));
                    }
                }
                Ok(None)
            }
            AssertExpr::PlacementOk => {
                let violations = store::placement_violations(&self.world);
                if violations.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(violations.join("; ")))
                }
            }
            AssertExpr::Resolution { name, expected, on } => {
                let (_, node) = self.node_at(*on)?;
                let guid = directories::get_guid_by_name(&mut self.world, node, name)?;
                let target = middleware::resolve(&mut self.world, node, guid, Some(guid))?;
                let kind = target.kind.to_string();
                if kind == *expected {
                    Ok(None)
                } else {
                    Ok(Some(format!("expected {expected} got {kind}")))
                }
            }
        }
    }

    fn finish(self, scenario: &Scenario) -> Result<RunOutcome> {
        self.world.flush_durable()?;
        let census = census_report(&self.world);
        let report = Report {
            v: 1,
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            events: self.events,
            asserts: self.asserts.clone(),
            census,
            routing: RoutingReport {
                dol_calls: self.world.metrics.dol_calls,
                hops_total: self.world.metrics.dol_hops_total,
                hops_max: self.world.metrics.dol_hops_max,
            },
        };
        Ok(RunOutcome {
            assert_failures: report.asserts.failed,
            report,
        })
    }
}

fn census_report(world: &World) -> CensusReport {
    let records = store::census(world);
    let mut distinct = BTreeSet::new();
    let mut entries = Vec::new();
    let mut log_lengths = BTreeMap::new();
    for rec in &records {
        distinct.insert(rec.key);
        entries.push(CensusLine {
            service: rec.aid.to_string(),
            key: rec.key.to_hex(),
            kind: rec.kind.to_string(),
            copies: rec.holders.len(),
        });
        if rec.aid == Aid::VersionDir && rec.kind == "APPEND_LOG" {
            let len = rec
                .holders
                .iter()
                .filter_map(|h| match world.durable_of(*h).get(&(rec.aid.tag(), rec.key)) {
                    Some(crate::sim::DurableEntry::Log { items }) => Some(items.len()),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            log_lengths.insert(rec.key.to_hex(), len);
        }
    }
    CensusReport {
        live_nodes: world.live.len(),
        distinct_keys: distinct.len(),
        entries,
        version_log_lengths: log_lengths,
    }
}

/// Runs a scenario start to finish.
pub fn run_scenario(scenario: &Scenario, durability: Option<Durability>) -> Result<RunOutcome> {
    let durability = resolve_durability(scenario, durability)?;
    let mut runner = Runner::new(scenario, durability)?;
    let schedule = scenario.schedule.clone();
    for event in &schedule {
        runner.execute(event);
    }
    runner.finish(scenario)
}

/// Committed state of a named root, read through its manifest: every member
/// GUID mapped to the field values of its committed version. `None` when the
/// root has never been committed.
pub fn committed_state(
    world: &mut World,
    reader: Key,
    name: &str,
) -> Result<Option<BTreeMap<Guid, Vec<Value>>>> {
    let guid = match directories::get_guid_by_name(world, reader, name) {
        Ok(guid) => guid,
        Err(Error::NotFound) => return Ok(None),
        Err(e) => return Err(e),
    };
    let manifest = match directories::get_manifest(world, reader, guid) {
        Ok(m) => m,
        Err(Error::NotFound) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut out = BTreeMap::new();
    for (member, pid) in &manifest.snapshot {
        let obj = middleware::materialize_version(world, reader, *member, *pid)?;
        out.insert(*member, obj.values);
    }
    Ok(Some(out))
}

/// All order-preserving interleavings of two step sequences.
pub fn interleavings<T: Clone>(a: &[T], b: &[T]) -> Vec<Vec<T>> {
    fn go<T: Clone>(a: &[T], b: &[T], cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if a.is_empty() && b.is_empty() {
            out.push(cur.clone());
            return;
        }
        if let Some((head, rest)) = a.split_first() {
            cur.push(head.clone());
            go(rest, b, cur, out);
            cur.pop();
        }
        if let Some((head, rest)) = b.split_first() {
            cur.push(head.clone());
            go(a, rest, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(a, b, &mut Vec::new(), &mut out);
    out
}

/// Re-runs a scenario once per internal step of the chosen commit event,
/// crashing the committing node after that step, and classifies what a
/// subsequent full-closure read observes: the old committed state, the new
/// one, or (never, if commits are atomic) a mixture.
pub fn sweep_crash_points(
    scenario: &Scenario,
    commit_index: usize,
    durability: Option<Durability>,
) -> Result<SweepReport> {
    let durability = resolve_durability(scenario, durability)?;
    let event = scenario
        .schedule
        .get(commit_index)
        .ok_or_else(|| Error::Usage(format!("no event at index {commit_index}")))?
        .clone();
    let Action::Commit { name, on, .. } = &event.action else {
        return Err(Error::Usage(format!(
            "event {commit_index} is not a COMMIT: {}",
            event.action.describe()
        )));
    };

    // probe run: count the commit's internal steps
    let total_steps = {
        let mut runner = Runner::new(scenario, durability.clone())?;
        for e in &scenario.schedule[..commit_index] {
            runner.execute(e);
        }
        runner.world.arm_commit_fault(CommitFaultMode::Observe);
        runner.execute(&event);
        runner.world.disarm_commit_fault();
        runner.world.fault.observed_steps.unwrap_or(0)
    };

    let mut outcomes = Vec::new();
    for step in 0..=total_steps {
        let mut runner = Runner::new(scenario, durability.clone())?;
        for e in &scenario.schedule[..commit_index] {
            runner.execute(e);
        }
        let (_, commit_node) = runner.node_at(*on)?;
        let reader = runner.world.live_sorted()[0];
        let old = committed_state(&mut runner.world, reader, name)?;
        let root_guid = directories::get_guid_by_name(&mut runner.world, commit_node, name)?;
        let new: BTreeMap<Guid, Vec<Value>> =
            middleware::collect_closure_snapshots(&mut runner.world, commit_node, root_guid, None)?
                .into_iter()
                .map(|(g, obj)| (g, obj.values))
                .collect();

        runner.world.arm_commit_fault(CommitFaultMode::CrashAfter(step));
        let commit_outcome = runner.execute(&event);
        runner.world.disarm_commit_fault();
        overlay::stabilize(&mut runner.world);

        let classification = classify_closure_read(&mut runner, name, &old, &new);
        outcomes.push(SweepOutcome {
            crash_after_step: step,
            commit_outcome,
            classification,
        });
    }
    Ok(SweepReport {
        v: 1,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        commit_index,
        total_steps,
        outcomes,
    })
}

fn classify_closure_read(
    runner: &mut Runner,
    name: &str,
    old: &Option<BTreeMap<Guid, Vec<Value>>>,
    new: &BTreeMap<Guid, Vec<Value>>,
) -> String {
    let reader = match runner.world.live_sorted().first().copied() {
        Some(n) => n,
        None => return "LOST".to_string(),
    };
    match runner.read_closure(reader, name) {
        Err(_) => {
            if old.is_none() {
                "OLD".to_string()
            } else {
                "LOST".to_string()
            }
        }
        Ok(actual) => {
            let actual: BTreeMap<Guid, Vec<Value>> =
                actual.into_iter().map(|(g, (_, values))| (g, values)).collect();
            if let Some(old) = old {
                if actual == *old {
                    return "OLD".to_string();
                }
            }
            if actual == *new {
                "NEW".to_string()
            } else {
                "MIXED".to_string()
            }
        }
    }
}

/// Runs the schedule prefix (ticks below `split`), shuts every node down
/// retaining the durable directories, boots fresh nodes over them, and runs
/// the suffix. `between` can manipulate the durable directory while
/// everything is down (e.g. delete one node's files).
pub fn restart_all(
    scenario: &Scenario,
    split: u64,
    durable_dir: PathBuf,
    between: Option<&dyn Fn(&Path)>,
) -> Result<RunOutcome> {
    let durability = Durability::Dir(durable_dir.clone());
    let mut runner = Runner::new(scenario, durability)?;
    let (prefix, suffix): (Vec<_>, Vec<_>) = scenario
        .schedule
        .iter()
        .cloned()
        .partition(|e| e.tick < split);
    for event in &prefix {
        runner.execute(event);
    }
    runner.world.flush_durable()?;
    let carry = runner.world.carry();
    let cfg = runner.world.cfg.clone();

    if let Some(between) = between {
        between(&durable_dir);
    }

    runner.world = World::reboot(cfg, carry)?;
    runner.labels.clear();
    runner.label_instance.clear();
    runner.refs.clear();
    runner.events.push(EventOutcome {
        tick: split,
        action: "RESTART".to_string(),
        outcome: format!("ok live={}", runner.world.live.len()),
    });

    for event in &suffix {
        runner.execute(event);
    }
    runner.finish(scenario)
}
