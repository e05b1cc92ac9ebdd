//! Programmer-facing middleware: named roots, abstract references with
//! cached targets and transparent fail-over, the resolution procedure, and
//! atomic commit of object closures.
//!
//! Resolution first consults the object directory for an extant instance —
//! preferring one in the calling address space, then the earliest
//! registered live remote instance — and only then re-instantiates from
//! replicated state under the resilience policy in effect. Commits write
//! every member state and version first and publish the commit manifest
//! last, as one atomic update; readers treat only manifest-reachable
//! versions as committed, which makes a half-finished commit invisible.

use crate::directories::{self, ObjectLocation};
use crate::error::{Error, Result};
use crate::keyspace::{generate_pid, Guid, Key, Pid};
use crate::object_model::{self, ClassDescriptor, CommitManifest, ObjectNode, Value};
use crate::policy::{PolicyParams, ReifyHook, TxnId};
use crate::sim::World;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolvedKind {
    Local,
    Remote,
    Reinstantiated,
}

impl fmt::Display for ResolvedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResolvedKind::Local => "LOCAL",
            ResolvedKind::Remote => "REMOTE",
            ResolvedKind::Reinstantiated => "REINSTANTIATED",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedTarget {
    pub kind: ResolvedKind,
    pub location: ObjectLocation,
}

/// Location-independent reference: a GUID, the root whose committed
/// snapshot governs re-instantiation, and an advisory target cache. The
/// cache is revalidated on every access, so staleness never reaches the
/// caller.
#[derive(Clone, Debug)]
pub struct AbstractRef {
    pub guid: Guid,
    pub snapshot_root: Option<Guid>,
    cache: Option<ObjectLocation>,
}

impl AbstractRef {
    pub fn new(guid: Guid, snapshot_root: Option<Guid>) -> AbstractRef {
        AbstractRef {
            guid,
            snapshot_root,
            cache: None,
        }
    }

    /// A reference outside any named-root snapshot context; version lookups
    /// fall back to the latest published version.
    pub fn bare(guid: Guid) -> AbstractRef {
        AbstractRef::new(guid, None)
    }

    pub fn cached_target(&self) -> Option<ObjectLocation> {
        self.cache
    }
}

// ----- object lifecycle ------------------------------------------------------

/// Creates an in-heap object of a registered class on the given node.
pub fn create_object(world: &mut World, node: Key, class_id: &str) -> Result<u64> {
    let class = world.class(class_id)?.clone();
    let state = world.node_mut(node)?;
    let instance = state.next_instance;
    state.next_instance += 1;
    state.heap.insert(instance, ObjectNode::new(&class));
    Ok(instance)
}

/// Returns the object's GUID, allocating one on first use and recording the
/// allocation time in the object directory.
pub fn get_guid(world: &mut World, node: Key, instance: u64) -> Result<Guid> {
    let existing = world
        .node(node)?
        .heap
        .get(&instance)
        .ok_or(Error::NotFound)?
        .guid;
    if let Some(guid) = existing {
        return Ok(guid);
    }
    let guid = world.new_guid()?;
    world
        .node_mut(node)?
        .heap
        .get_mut(&instance)
        .ok_or(Error::NotFound)?
        .guid = Some(guid);
    directories::register_creation(world, node, guid)?;
    Ok(guid)
}

/// Makes an object globally reachable: allocates its GUID if needed,
/// registers its class, and advertises the instance in the object
/// directory. State stays volatile until a commit.
pub fn publish_object(world: &mut World, node: Key, instance: u64) -> Result<Guid> {
    let guid = get_guid(world, node, instance)?;
    let class_id = world
        .node(node)?
        .heap
        .get(&instance)
        .ok_or(Error::NotFound)?
        .class_id
        .clone();
    directories::register_class(world, node, guid, &class_id)?;
    let location = ObjectLocation {
        node,
        incarnation: world.node(node)?.incarnation,
        instance,
        registered: world.next_stamp(),
    };
    directories::publish_instance(world, node, guid, location)?;
    Ok(guid)
}

/// Binds a logical name to an object hosted on the calling node.
pub fn associate_name(world: &mut World, node: Key, name: &str, instance: u64) -> Result<Guid> {
    let guid = publish_object(world, node, instance)?;
    directories::associate_name(world, node, name, guid)?;
    Ok(guid)
}

/// Looks a name up and returns a reference whose dereference follows the
/// resolution procedure under the named root's snapshot context.
pub fn get_object_by_name(world: &mut World, node: Key, name: &str) -> Result<AbstractRef> {
    let guid = directories::get_guid_by_name(world, node, name)?;
    Ok(AbstractRef::new(guid, Some(guid)))
}

// ----- resolution ------------------------------------------------------------

/// Resolves a GUID to a target: an extant instance when one is live
/// (local preferred, then the earliest-registered remote, ties broken by
/// node id), otherwise a fresh instance recovered under the resilience
/// policy in effect.
pub fn resolve(world: &mut World, node: Key, guid: Guid, snapshot_root: Option<Guid>) -> Result<ResolvedTarget> {
    let locations = directories::get_objects(world, node, guid)?;
    if let Some(local) = locations.iter().find(|l| l.node == node) {
        return Ok(ResolvedTarget {
            kind: ResolvedKind::Local,
            location: *local,
        });
    }
    if let Some(remote) = locations.iter().min_by_key(|l| (l.registered, l.node)) {
        return Ok(ResolvedTarget {
            kind: ResolvedKind::Remote,
            location: *remote,
        });
    }

    let class_id = match directories::get_class(world, node, guid) {
        Ok(class) => Some(class.class_id),
        Err(Error::NotFound) => None,
        Err(e) => return Err(e),
    };
    let record = directories::lookup_policy(world, node, guid, class_id.as_deref())?;
    let instantiate_hook = match &record {
        Some(rec) => world
            .policies
            .get(&rec.policy_name)
            .ok_or_else(|| Error::UnknownPolicy(rec.policy_name.clone()))?
            .instantiate
            .clone(),
        None => None,
    };
    let location = match instantiate_hook {
        Some(hook) => hook(world, node, guid, snapshot_root)?,
        None => instantiate_default(world, node, guid, snapshot_root)?,
    };
    Ok(ResolvedTarget {
        kind: ResolvedKind::Reinstantiated,
        location,
    })
}

/// Default re-instantiation: select the version, fetch its state and class,
/// decode, and advertise the new instance in the calling address space.
///
/// Version selection is snapshot-consistent: inside a named root's context
/// the PID comes from the root's committed manifest; a bare reference uses
/// the latest published version.
pub fn instantiate_default(
    world: &mut World,
    node: Key,
    guid: Guid,
    snapshot_root: Option<Guid>,
) -> Result<ObjectLocation> {
    let pid = match snapshot_root {
        Some(root) => match directories::get_manifest(world, node, root) {
            Ok(manifest) => manifest.pid_of(guid).ok_or(Error::Unresolvable(guid))?,
            Err(Error::NotFound) => return Err(Error::Unresolvable(guid)),
            Err(e) => return Err(e),
        },
        None => match directories::get_latest_version(world, node, guid) {
            Ok(pid) => pid,
            Err(Error::NotFound) => return Err(Error::Unresolvable(guid)),
            Err(e) => return Err(e),
        },
    };
    instantiate_version(world, node, guid, pid)
}

/// Instantiates a specific committed version and registers the instance.
pub fn instantiate_version(world: &mut World, node: Key, guid: Guid, pid: Pid) -> Result<ObjectLocation> {
    let data = match directories::get_object_data(world, node, pid) {
        Ok(data) => data,
        Err(Error::NotFound) => return Err(Error::DataLoss(pid)),
        Err(e) => return Err(e),
    };
    let class = match directories::get_class(world, node, guid) {
        Ok(class) => class,
        Err(Error::NotFound) => return Err(Error::Unresolvable(guid)),
        Err(e) => return Err(e),
    };
    let mut obj = object_model::instantiate_object(&data, &class)?;
    obj.guid = Some(guid);
    let state = world.node_mut(node)?;
    let instance = state.next_instance;
    state.next_instance += 1;
    state.heap.insert(instance, obj);
    let location = ObjectLocation {
        node,
        incarnation: world.node(node)?.incarnation,
        instance,
        registered: world.next_stamp(),
    };
    directories::publish_instance(world, node, guid, location)?;
    Ok(location)
}

/// Read-only reconstruction of a historical state; nothing is registered.
pub fn materialize_version(world: &mut World, node: Key, guid: Guid, pid: Pid) -> Result<ObjectNode> {
    let data = match directories::get_object_data(world, node, pid) {
        Ok(data) => data,
        Err(Error::NotFound) => return Err(Error::DataLoss(pid)),
        Err(e) => return Err(e),
    };
    let class = directories::get_class(world, node, guid)?;
    let mut obj = object_model::instantiate_object(&data, &class)?;
    obj.guid = Some(guid);
    Ok(obj)
}

fn cache_is_fresh(world: &World, loc: &ObjectLocation) -> bool {
    world.is_live(loc.node)
        && world
            .node(loc.node)
            .map(|n| n.incarnation == loc.incarnation && n.heap.contains_key(&loc.instance))
            .unwrap_or(false)
}

fn ensure_target(world: &mut World, node: Key, r: &mut AbstractRef) -> Result<(ResolvedKind, ObjectLocation)> {
    if let Some(loc) = r.cache {
        if cache_is_fresh(world, &loc) {
            let kind = if loc.node == node {
                ResolvedKind::Local
            } else {
                ResolvedKind::Remote
            };
            return Ok((kind, loc));
        }
        r.cache = None;
    }
    let target = resolve(world, node, r.guid, r.snapshot_root)?;
    r.cache = Some(target.location);
    Ok((target.kind, target.location))
}

// ----- field access with transparent fail-over -------------------------------

fn read_attempt(world: &mut World, node: Key, r: &mut AbstractRef, field: &str) -> Result<(Value, ResolvedKind)> {
    let (kind, loc) = ensure_target(world, node, r)?;
    world.deliver(node, loc.node)?;
    let state = world.node(loc.node)?;
    let obj = state
        .heap
        .get(&loc.instance)
        .ok_or(Error::DeliveryFailure(loc.node))?;
    let class = world.class(&obj.class_id)?;
    Ok((obj.get(class, field)?.clone(), kind))
}

/// Reads a field through an abstract reference. A dead cached target is
/// re-resolved once; the caller sees only the value (or the resolution
/// error), never the failure.
pub fn read_field(world: &mut World, node: Key, r: &mut AbstractRef, field: &str) -> Result<(Value, ResolvedKind)> {
    match read_attempt(world, node, r, field) {
        Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
            r.cache = None;
            match read_attempt(world, node, r, field) {
                Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
                    Err(Error::Unresolvable(r.guid))
                }
                other => other,
            }
        }
        other => other,
    }
}

fn write_attempt(
    world: &mut World,
    node: Key,
    r: &mut AbstractRef,
    field: &str,
    value: &Value,
    txn: Option<TxnId>,
) -> Result<ResolvedKind> {
    let (kind, loc) = ensure_target(world, node, r)?;
    world.deliver(node, loc.node)?;
    let class = {
        let state = world.node(loc.node)?;
        let obj = state
            .heap
            .get(&loc.instance)
            .ok_or(Error::DeliveryFailure(loc.node))?;
        world.class(&obj.class_id)?.clone()
    };
    let guid = r.guid;
    let state = world.node_mut(loc.node)?;
    let obj = state
        .heap
        .get_mut(&loc.instance)
        .ok_or(Error::DeliveryFailure(loc.node))?;
    obj.set(&class, field, value.clone())?;
    state.dirty.insert(guid);
    if let Some(t) = txn {
        state.ledger.record(guid, t);
    }
    world.next_stamp();
    Ok(kind)
}

/// Writes a field on the resolved target's hosting node, recording the
/// modification for dirty tracking and, when tagged, the transaction ledger.
pub fn write_field(
    world: &mut World,
    node: Key,
    r: &mut AbstractRef,
    field: &str,
    value: Value,
    txn: Option<TxnId>,
) -> Result<ResolvedKind> {
    match write_attempt(world, node, r, field, &value, txn) {
        Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
            r.cache = None;
            match write_attempt(world, node, r, field, &value, txn) {
                Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
                    Err(Error::Unresolvable(r.guid))
                }
                other => other,
            }
        }
        other => other,
    }
}

fn read_object_attempt(
    world: &mut World,
    node: Key,
    r: &mut AbstractRef,
) -> Result<(ClassDescriptor, Vec<Value>, ResolvedKind)> {
    let (kind, loc) = ensure_target(world, node, r)?;
    world.deliver(node, loc.node)?;
    let state = world.node(loc.node)?;
    let obj = state
        .heap
        .get(&loc.instance)
        .ok_or(Error::DeliveryFailure(loc.node))?;
    let class = world.class(&obj.class_id)?.clone();
    Ok((class, obj.values.clone(), kind))
}

/// Class and current field values of the referenced object, under the same
/// targeting and fail-over rules as field access.
pub fn read_object(
    world: &mut World,
    node: Key,
    r: &mut AbstractRef,
) -> Result<(ClassDescriptor, Vec<Value>, ResolvedKind)> {
    match read_object_attempt(world, node, r) {
        Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
            r.cache = None;
            match read_object_attempt(world, node, r) {
                Err(Error::DeliveryFailure(_)) | Err(Error::NodeNotLive(_)) => {
                    Err(Error::Unresolvable(r.guid))
                }
                other => other,
            }
        }
        other => other,
    }
}

// ----- commit ----------------------------------------------------------------

/// Snapshot of an object's current state, resolved under a snapshot context.
pub fn snapshot_object(world: &mut World, node: Key, guid: Guid, snapshot_root: Option<Guid>) -> Result<ObjectNode> {
    let target = resolve(world, node, guid, snapshot_root)?;
    world.deliver(node, target.location.node)?;
    let state = world.node(target.location.node)?;
    let mut obj = state
        .heap
        .get(&target.location.instance)
        .ok_or(Error::DeliveryFailure(target.location.node))?
        .clone();
    obj.guid = Some(guid);
    Ok(obj)
}

/// Resolves and snapshots the closure of a root in deterministic traversal
/// order. With an exclusion set, objects of those classes and anything
/// reachable only through them are left out (their references are not
/// followed).
pub fn collect_closure_snapshots(
    world: &mut World,
    node: Key,
    root: Guid,
    excluded: Option<&BTreeSet<String>>,
) -> Result<Vec<(Guid, ObjectNode)>> {
    let root_obj = snapshot_object(world, node, root, Some(root))
        .map_err(|_| Error::ResolutionError(root))?;
    let members = object_model::closure(root, root_obj, |g| {
        let mut obj = snapshot_object(world, node, g, Some(root))?;
        if let Some(excluded) = excluded {
            if excluded.contains(&obj.class_id) {
                // prune: keep the node but do not follow its references
                obj.values.clear();
            }
        }
        Ok(obj)
    })?;
    Ok(match excluded {
        Some(excluded) => members
            .into_iter()
            .filter(|(_, obj)| !excluded.contains(&obj.class_id))
            .collect(),
        None => members,
    })
}

/// Runs the store/publish sequence for the planned members and publishes
/// the commit manifest last. Members outside `store_set` keep their
/// previously committed version in the manifest.
pub fn execute_commit(
    world: &mut World,
    node: Key,
    root: Guid,
    members: &[(Guid, ObjectNode)],
    store_set: &BTreeSet<Guid>,
    reify_hook: Option<&ReifyHook>,
    params: &PolicyParams,
) -> Result<Pid> {
    let replicas = params.replicas().unwrap_or(world.cfg.replication);
    let previous = match directories::get_manifest(world, node, root) {
        Ok(m) => Some(m),
        Err(Error::NotFound) => None,
        Err(e) => return Err(e),
    };
    let mut manifest = CommitManifest::new(root);
    for (guid, obj) in members {
        if store_set.contains(guid) {
            let class = world.class(&obj.class_id)?.clone();
            let data = match reify_hook {
                Some(hook) => hook(obj, &class)?,
                None => object_model::reify(obj, &class)?,
            };
            let pid = generate_pid(&data);
            directories::store_data_with_replication(world, node, pid, data, replicas)?;
            world.commit_checkpoint(node)?;
            directories::publish_version(world, node, *guid, pid)?;
            world.commit_checkpoint(node)?;
            manifest.snapshot.insert(*guid, pid);
        } else if let Some(pid) = previous.as_ref().and_then(|m| m.pid_of(*guid)) {
            manifest.snapshot.insert(*guid, pid);
        }
    }
    directories::publish_manifest(world, node, &manifest)?;
    world.commit_checkpoint(node)?;

    let state = world.node_mut(node)?;
    for guid in store_set {
        state.dirty.remove(guid);
        state.ledger.clear_for(*guid);
    }
    manifest.pid_of(root).ok_or(Error::ResolutionError(root))
}

/// Default makeResilient: reify, hash, store and publish every object in
/// the root's transitive closure, then publish the manifest. Returns the
/// root object's PID.
pub fn make_resilient_default(
    world: &mut World,
    node: Key,
    root: Guid,
    params: &PolicyParams,
    reify_hook: Option<&ReifyHook>,
) -> Result<Pid> {
    let members = collect_closure_snapshots(world, node, root, None)?;
    let store_set: BTreeSet<Guid> = members.iter().map(|(g, _)| *g).collect();
    execute_commit(world, node, root, &members, &store_set, reify_hook, params)
}

/// Commits the named root under the resilience policy in effect for it
/// (object scope beats class scope beats the system default). The overall
/// effect is atomic: either the full closure becomes the committed state or
/// nothing visible changes.
pub fn commit(world: &mut World, node: Key, name: &str, txn: Option<TxnId>) -> Result<Pid> {
    world.commit_begin(node)?;
    let guid = directories::get_guid_by_name(world, node, name)?;
    let class_id = match directories::get_class(world, node, guid) {
        Ok(class) => Some(class.class_id),
        Err(Error::NotFound) => None,
        Err(e) => return Err(e),
    };
    let record = directories::lookup_policy(world, node, guid, class_id.as_deref())?;
    let (behavior, params) = match record {
        Some(rec) => {
            let behavior = world
                .policies
                .get(&rec.policy_name)
                .cloned()
                .ok_or_else(|| Error::UnknownPolicy(rec.policy_name.clone()))?;
            (behavior, rec.params)
        }
        None => (
            world
                .policies
                .get(crate::policy::DEFAULT_POLICY)
                .cloned()
                .expect("default policy is always registered"),
            PolicyParams::default(),
        ),
    };
    match behavior.make_resilient.clone() {
        Some(hook) => hook(world, node, guid, &params, txn),
        None => make_resilient_default(world, node, guid, &params, behavior.reify.as_ref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::Aid;
    use crate::object_model::FieldKind;
    use crate::overlay::{fail, stabilize};
    use crate::sim::SimConfig;
    use crate::store::census;
    use std::collections::BTreeMap;

    fn classes() -> BTreeMap<String, ClassDescriptor> {
        let mut map = BTreeMap::new();
        map.insert(
            "Account".to_string(),
            ClassDescriptor::new("Account", vec![("balance", FieldKind::Int)]),
        );
        map.insert(
            "Bank".to_string(),
            ClassDescriptor::new(
                "Bank",
                vec![
                    ("tag", FieldKind::Str),
                    ("a", FieldKind::Ref),
                    ("b", FieldKind::Ref),
                    ("c", FieldKind::Ref),
                    ("d", FieldKind::Ref),
                ],
            ),
        );
        map
    }

    fn world_with(n: usize) -> World {
        let mut w = World::new(SimConfig {
            seed: 21,
            initial_nodes: n,
            replication: 3,
            classes: classes(),
            ..SimConfig::default()
        });
        stabilize(&mut w);
        w
    }

    /// Builds the four-account bank graph on `host` and names it.
    /// Balances are distinct so every state has a distinct PID.
    fn build_bank(world: &mut World, host: Key) -> (Guid, Vec<u64>) {
        let bank = create_object(world, host, "Bank").unwrap();
        let mut accounts = Vec::new();
        for (field, balance) in [("a", 100i64), ("b", 200), ("c", 300), ("d", 400)] {
            let acct = create_object(world, host, "Account").unwrap();
            let class = world.class("Account").unwrap().clone();
            world
                .node_mut(host)
                .unwrap()
                .heap
                .get_mut(&acct)
                .unwrap()
                .set(&class, "balance", Value::Int(balance))
                .unwrap();
            let guid = publish_object(world, host, acct).unwrap();
            let bank_class = world.class("Bank").unwrap().clone();
            world
                .node_mut(host)
                .unwrap()
                .heap
                .get_mut(&bank)
                .unwrap()
                .set(&bank_class, field, Value::Ref(Some(guid)))
                .unwrap();
            accounts.push(acct);
        }
        let root = associate_name(world, host, "bank root", bank).unwrap();
        (root, accounts)
    }

    #[test]
    fn associate_then_lookup_resolves_locally() {
        let mut w = world_with(3);
        let host = w.live_sorted()[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        associate_name(&mut w, host, "acct", obj).unwrap();
        let mut r = get_object_by_name(&mut w, host, "acct").unwrap();
        let (value, kind) = read_field(&mut w, host, &mut r, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Local);
        assert_eq!(value, Value::Int(0));

        // a second lookup returns a ref with the same identity
        let r2 = get_object_by_name(&mut w, host, "acct").unwrap();
        assert_eq!(r2.guid, r.guid);
        assert_eq!(get_object_by_name(&mut w, host, "nothing").err(), Some(Error::NotFound));
    }

    #[test]
    fn remote_access_reads_and_writes_the_same_instance() {
        let mut w = world_with(3);
        let nodes = w.live_sorted();
        let (host, other) = (nodes[0], nodes[1]);
        let obj = create_object(&mut w, host, "Account").unwrap();
        associate_name(&mut w, host, "acct", obj).unwrap();

        let mut remote = get_object_by_name(&mut w, other, "acct").unwrap();
        let kind = write_field(&mut w, other, &mut remote, "balance", Value::Int(55), None).unwrap();
        assert_eq!(kind, ResolvedKind::Remote);

        let mut local = get_object_by_name(&mut w, host, "acct").unwrap();
        let (value, kind) = read_field(&mut w, host, &mut local, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Local);
        assert_eq!(value, Value::Int(55));
    }

    #[test]
    fn resolve_never_instantiates_while_an_instance_is_live() {
        let mut w = world_with(3);
        let nodes = w.live_sorted();
        let host = nodes[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        let guid = associate_name(&mut w, host, "acct", obj).unwrap();
        commit(&mut w, host, "acct", None).unwrap();

        let heap_sizes: Vec<usize> = nodes.iter().map(|n| w.node(*n).unwrap().heap.len()).collect();
        let target = resolve(&mut w, nodes[1], guid, None).unwrap();
        assert_eq!(target.kind, ResolvedKind::Remote);
        assert_eq!(target.location.node, host);
        let after: Vec<usize> = nodes.iter().map(|n| w.node(*n).unwrap().heap.len()).collect();
        assert_eq!(heap_sizes, after, "no new instance was created");
    }

    #[test]
    fn uncommitted_objects_do_not_survive_their_host() {
        let mut w = world_with(3);
        let host = w.live_sorted()[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        let guid = associate_name(&mut w, host, "acct", obj).unwrap();
        // no commit: associate alone does not make state durable
        let host_idx = w.index_of(host).unwrap();
        fail(&mut w, host_idx).unwrap();
        stabilize(&mut w);
        let reader = w.live_sorted()[0];
        let mut r = get_object_by_name(&mut w, reader, "acct").unwrap();
        assert_eq!(
            read_field(&mut w, reader, &mut r, "balance"),
            Err(Error::Unresolvable(guid))
        );
    }

    #[test]
    fn never_published_guid_is_unresolvable() {
        let mut w = world_with(2);
        let node = w.live_sorted()[0];
        let guid = w.new_guid().unwrap();
        assert_eq!(resolve(&mut w, node, guid, None), Err(Error::Unresolvable(guid)));
    }

    #[test]
    fn default_commit_writes_five_states_five_versions_one_manifest() {
        let mut w = world_with(5);
        let host = w.live_sorted()[0];
        let (root, _) = build_bank(&mut w, host);
        let root_pid = commit(&mut w, host, "bank root", None).unwrap();

        // five data states, each replicated three times
        let data_records: Vec<_> = census(&w)
            .into_iter()
            .filter(|r| r.aid == Aid::DataStore)
            .collect();
        assert_eq!(data_records.len(), 5);
        for rec in &data_records {
            assert_eq!(rec.holders.len(), 3);
        }
        // five version logs with one entry each
        let version_logs: Vec<_> = census(&w)
            .into_iter()
            .filter(|r| r.aid == Aid::VersionDir && r.kind == "APPEND_LOG")
            .collect();
        assert_eq!(version_logs.len(), 5);
        // one manifest, mapping all five members
        let manifest = directories::get_manifest(&mut w, host, root).unwrap();
        assert_eq!(manifest.snapshot.len(), 5);
        assert_eq!(manifest.pid_of(root), Some(root_pid));

        // the returned pid is the bank's, not an account's
        let bank_state = snapshot_object(&mut w, host, root, Some(root)).unwrap();
        let class = w.class("Bank").unwrap().clone();
        let expected = generate_pid(&object_model::reify(&bank_state, &class).unwrap());
        assert_eq!(root_pid, expected);
    }

    #[test]
    fn recommit_of_unchanged_closure_reuses_all_pids() {
        let mut w = world_with(5);
        let host = w.live_sorted()[0];
        let (root, _) = build_bank(&mut w, host);
        commit(&mut w, host, "bank root", None).unwrap();
        let first = directories::get_manifest(&mut w, host, root).unwrap();
        commit(&mut w, host, "bank root", None).unwrap();
        let second = directories::get_manifest(&mut w, host, root).unwrap();
        assert_eq!(first, second, "unchanged closure yields an identical manifest");

        // version logs grew: the history is a log, not a set
        let guid = first.snapshot.keys().next().copied().unwrap();
        assert_eq!(directories::version_iterator(&mut w, host, guid).unwrap().len(), 2);
    }

    #[test]
    fn only_changed_objects_get_new_pids() {
        let mut w = world_with(5);
        let host = w.live_sorted()[0];
        let (root, _) = build_bank(&mut w, host);
        commit(&mut w, host, "bank root", None).unwrap();
        let before = directories::get_manifest(&mut w, host, root).unwrap();

        let mut r = get_object_by_name(&mut w, host, "bank root").unwrap();
        let (a_ref, _) = read_field(&mut w, host, &mut r, "a").unwrap();
        let Value::Ref(Some(a_guid)) = a_ref else { panic!() };
        let mut a = AbstractRef::new(a_guid, Some(root));
        write_field(&mut w, host, &mut a, "balance", Value::Int(150), None).unwrap();

        commit(&mut w, host, "bank root", None).unwrap();
        let after = directories::get_manifest(&mut w, host, root).unwrap();
        for (guid, pid) in &before.snapshot {
            if *guid == a_guid {
                assert_ne!(after.pid_of(*guid), Some(*pid), "modified object re-hashed");
            } else {
                assert_eq!(after.pid_of(*guid), Some(*pid), "unchanged object kept its pid");
            }
        }
    }

    #[test]
    fn failover_read_rolls_back_to_the_last_commit() {
        let mut w = world_with(4);
        let nodes = w.live_sorted();
        let host = nodes[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        associate_name(&mut w, host, "acct", obj).unwrap();
        let mut local = get_object_by_name(&mut w, host, "acct").unwrap();
        write_field(&mut w, host, &mut local, "balance", Value::Int(41), None).unwrap();
        commit(&mut w, host, "acct", None).unwrap();
        // uncommitted write after the commit
        write_field(&mut w, host, &mut local, "balance", Value::Int(42), None).unwrap();

        // warm a remote cache so the failure actually exercises fail-over
        let reader = nodes[1];
        let mut remote = get_object_by_name(&mut w, reader, "acct").unwrap();
        let (live_value, kind) = read_field(&mut w, reader, &mut remote, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Remote);
        assert_eq!(live_value, Value::Int(42));

        let host_idx = w.index_of(host).unwrap();
        fail(&mut w, host_idx).unwrap();
        let (value, kind) = read_field(&mut w, reader, &mut remote, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Reinstantiated);
        assert_eq!(value, Value::Int(41), "uncommitted write is rolled back");

        // the recovered instance is now a live local object for the reader
        let (value, kind) = read_field(&mut w, reader, &mut remote, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Local);
        assert_eq!(value, Value::Int(41));
    }

    #[test]
    fn failover_without_any_commit_surfaces_unresolvable() {
        let mut w = world_with(3);
        let nodes = w.live_sorted();
        let host = nodes[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        let guid = associate_name(&mut w, host, "acct", obj).unwrap();
        let reader = nodes[1];
        let mut remote = get_object_by_name(&mut w, reader, "acct").unwrap();
        read_field(&mut w, reader, &mut remote, "balance").unwrap();
        let host_idx = w.index_of(host).unwrap();
        fail(&mut w, host_idx).unwrap();
        assert_eq!(
            read_field(&mut w, reader, &mut remote, "balance"),
            Err(Error::Unresolvable(guid))
        );
    }

    #[test]
    fn snapshot_context_pins_children_to_the_manifest() {
        let mut w = world_with(5);
        let host = w.live_sorted()[0];
        let (root, _) = build_bank(&mut w, host);
        commit(&mut w, host, "bank root", None).unwrap();
        let manifest = directories::get_manifest(&mut w, host, root).unwrap();

        // find account a's guid and publish a divergent newer version for it
        let mut r = get_object_by_name(&mut w, host, "bank root").unwrap();
        let (a_ref, _) = read_field(&mut w, host, &mut r, "a").unwrap();
        let Value::Ref(Some(a_guid)) = a_ref else { panic!() };
        let class = w.class("Account").unwrap().clone();
        let mut divergent = ObjectNode::new(&class);
        divergent.set(&class, "balance", Value::Int(999_999)).unwrap();
        let data = object_model::reify(&divergent, &class).unwrap();
        let pid = generate_pid(&data);
        directories::store_data(&mut w, host, pid, data).unwrap();
        directories::publish_version(&mut w, host, a_guid, pid).unwrap();
        assert_eq!(directories::get_latest_version(&mut w, host, a_guid).unwrap(), pid);

        // kill every live instance, then re-resolve through the named root
        let host_idx = w.index_of(host).unwrap();
        fail(&mut w, host_idx).unwrap();
        stabilize(&mut w);
        let reader = w.live_sorted()[0];
        let mut root_ref = get_object_by_name(&mut w, reader, "bank root").unwrap();
        let (a_ref, _) = read_field(&mut w, reader, &mut root_ref, "a").unwrap();
        let Value::Ref(Some(a_guid2)) = a_ref else { panic!() };
        assert_eq!(a_guid2, a_guid);
        let mut a = AbstractRef::new(a_guid, root_ref.snapshot_root);
        let (value, kind) = read_field(&mut w, reader, &mut a, "balance").unwrap();
        assert_eq!(kind, ResolvedKind::Reinstantiated);
        assert_eq!(
            value,
            Value::Int(100),
            "manifest pid wins over the divergent latest version"
        );
        assert_ne!(manifest.pid_of(a_guid), Some(pid));

        // a bare reference outside the snapshot context sees the latest version
        let reader2 = w.live_sorted()[1];
        let mut bare = AbstractRef::bare(a_guid);
        let (value, _) = read_field(&mut w, reader2, &mut bare, "balance").unwrap();
        assert_eq!(value, Value::Int(999_999));
    }

    #[test]
    fn multiple_instances_resolve_by_registration_order() {
        let mut w = world_with(4);
        let nodes = w.live_sorted();
        let host = nodes[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        let guid = associate_name(&mut w, host, "acct", obj).unwrap();
        commit(&mut w, host, "acct", None).unwrap();
        let host_idx = w.index_of(host).unwrap();
        fail(&mut w, host_idx).unwrap();
        stabilize(&mut w);

        // instantiate on two different nodes; both get registered
        let survivors = w.live_sorted();
        instantiate_default(&mut w, survivors[0], guid, None).unwrap();
        instantiate_default(&mut w, survivors[1], guid, None).unwrap();
        let locations = directories::get_objects(&mut w, survivors[2], guid).unwrap();
        assert_eq!(locations.len(), 2);

        // a third node resolves to the earliest-registered live instance
        let target = resolve(&mut w, survivors[2], guid, None).unwrap();
        assert_eq!(target.kind, ResolvedKind::Remote);
        let earliest = locations.iter().min_by_key(|l| (l.registered, l.node)).unwrap();
        assert_eq!(target.location, *earliest);

        // while a local instance exists, it wins
        let target = resolve(&mut w, survivors[0], guid, None).unwrap();
        assert_eq!(target.kind, ResolvedKind::Local);
    }

    #[test]
    fn get_guid_is_lazy_and_idempotent() {
        let mut w = world_with(2);
        let host = w.live_sorted()[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        assert_eq!(w.node(host).unwrap().heap.get(&obj).unwrap().guid, None);
        let g1 = get_guid(&mut w, host, obj).unwrap();
        let g2 = get_guid(&mut w, host, obj).unwrap();
        assert_eq!(g1, g2);
        let created = directories::object_creation_time(&mut w, host, g1).unwrap();
        assert!(created > 0);
    }

    #[test]
    fn version_history_supports_rollback_reads() {
        let mut w = world_with(4);
        let host = w.live_sorted()[0];
        let obj = create_object(&mut w, host, "Account").unwrap();
        let guid = associate_name(&mut w, host, "acct", obj).unwrap();
        let mut r = get_object_by_name(&mut w, host, "acct").unwrap();
        // four commits over three distinct states
        for balance in [10i64, 20, 20, 30] {
            write_field(&mut w, host, &mut r, "balance", Value::Int(balance), None).unwrap();
            commit(&mut w, host, "acct", None).unwrap();
        }
        let history = directories::version_iterator(&mut w, host, guid).unwrap();
        assert_eq!(history.len(), 4);
        let (pid2, _) = history[1];
        let old = materialize_version(&mut w, host, guid, pid2).unwrap();
        let class = w.class("Account").unwrap();
        assert_eq!(old.get(class, "balance").unwrap(), &Value::Int(20));
    }
}
