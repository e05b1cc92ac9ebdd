//! The six storage services: name directory, version directory, object
//! directory, data store, code store and policy store.
//!
//! Each is a thin typed façade over replicated generic-store entries,
//! addressed through `dol` with the service's application identifier. A
//! service read from any live node lands on the key's responsible node and
//! therefore returns the same answer everywhere once the ring is quiescent.

use crate::error::{Error, Result};
use crate::keyspace::{generate_pid, Aid, Guid, Key, Pid, KEY_BYTES};
use crate::object_model::{ClassDescriptor, CommitManifest};
use crate::overlay::dol;
use crate::policy::PolicyParams;
use crate::sim::{DurableEntry, StoreStrategy, World};
use crate::store;
use std::collections::BTreeMap;

// ----- name directory ------------------------------------------------------

fn name_key(name: &str) -> Key {
    Key::digest(name.as_bytes())
}

/// Associates a logical name with a GUID, replacing any previous binding.
pub fn associate_name(world: &mut World, from: Key, name: &str, guid: Guid) -> Result<()> {
    let key = name_key(name);
    let svc = dol(world, from, key, Aid::NameDir)?;
    match store::get(world, from, svc, key) {
        Ok(_) => {
            store::update(world, from, svc, key, guid.0.as_bytes().to_vec())?;
        }
        Err(Error::NotFound) => {
            store::put(world, from, svc, key, guid.0.as_bytes().to_vec())?;
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn get_guid_by_name(world: &mut World, from: Key, name: &str) -> Result<Guid> {
    let key = name_key(name);
    let svc = dol(world, from, key, Aid::NameDir)?;
    let raw = store::get(world, from, svc, key)?;
    let bytes: [u8; KEY_BYTES] = raw
        .as_slice()
        .try_into()
        .map_err(|_| Error::DecodeError("name record has wrong length".into()))?;
    Ok(Guid(Key::from_bytes(bytes)))
}

// ----- version directory ---------------------------------------------------

fn version_item(pid: Pid, time: u64) -> Vec<u8> {
    let mut out = pid.0.as_bytes().to_vec();
    out.extend_from_slice(&time.to_be_bytes());
    out
}

fn decode_version_item(item: &[u8]) -> Result<(Pid, u64)> {
    if item.len() != KEY_BYTES + 8 {
        return Err(Error::DecodeError("version item has wrong length".into()));
    }
    let pid = Pid(Key::from_bytes(item[..KEY_BYTES].try_into().unwrap()));
    let time = u64::from_be_bytes(item[KEY_BYTES..].try_into().unwrap());
    Ok((pid, time))
}

/// Appends a PID to the GUID's version history with the current logical
/// time. The history is a log, not a set: re-publishing a PID appends again.
pub fn publish_version(world: &mut World, from: Key, guid: Guid, pid: Pid) -> Result<()> {
    let svc = dol(world, from, guid.0, Aid::VersionDir)?;
    let time = world.lamport();
    store::append(world, from, svc, guid.0, version_item(pid, time))
}

pub fn get_latest_version(world: &mut World, from: Key, guid: Guid) -> Result<Pid> {
    let history = version_iterator(world, from, guid)?;
    history.last().map(|(pid, _)| *pid).ok_or(Error::NotFound)
}

/// Full publish-ordered history of a GUID as (PID, logical time) pairs.
pub fn version_iterator(world: &mut World, from: Key, guid: Guid) -> Result<Vec<(Pid, u64)>> {
    let svc = dol(world, from, guid.0, Aid::VersionDir)?;
    let items = match store::get_log(world, from, svc, guid.0) {
        Ok(items) => items,
        Err(Error::NotFound) => Vec::new(),
        Err(e) => return Err(e),
    };
    items.iter().map(|(item, _)| decode_version_item(item)).collect()
}

/// Storage key of a root's committed-snapshot record. Derived from the root
/// GUID so the manifest rides the same replication machinery as any entry
/// without colliding with the root's version log.
fn manifest_key(root: Guid) -> Key {
    let mut buf = b"manifest:".to_vec();
    buf.extend_from_slice(root.0.as_bytes());
    Key::digest(&buf)
}

/// Publishes the commit manifest as one atomic value update; this is the
/// single step that makes a commit visible.
pub fn publish_manifest(world: &mut World, from: Key, manifest: &CommitManifest) -> Result<()> {
    let key = manifest_key(manifest.root);
    let svc = dol(world, from, key, Aid::VersionDir)?;
    let bytes = manifest.encode();
    match store::get(world, from, svc, key) {
        Ok(_) => {
            store::update(world, from, svc, key, bytes)?;
        }
        Err(Error::NotFound) => store::put(world, from, svc, key, bytes)?,
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn get_manifest(world: &mut World, from: Key, root: Guid) -> Result<CommitManifest> {
    let key = manifest_key(root);
    let svc = dol(world, from, key, Aid::VersionDir)?;
    CommitManifest::decode(&store::get(world, from, svc, key)?)
}

// ----- object directory ----------------------------------------------------

/// One registered extant instance of an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectLocation {
    pub node: Key,
    pub incarnation: u64,
    pub instance: u64,
    pub registered: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct InstanceRecord {
    created: u64,
    locations: Vec<ObjectLocation>,
}

impl InstanceRecord {
    fn encode(&self) -> Vec<u8> {
        let mut out = self.created.to_be_bytes().to_vec();
        out.extend_from_slice(&(self.locations.len() as u32).to_be_bytes());
        for loc in &self.locations {
            out.extend_from_slice(loc.node.as_bytes());
            out.extend_from_slice(&loc.incarnation.to_be_bytes());
            out.extend_from_slice(&loc.instance.to_be_bytes());
            out.extend_from_slice(&loc.registered.to_be_bytes());
        }
        out
    }

    fn decode(data: &[u8]) -> Result<InstanceRecord> {
        if data.len() < 12 {
            return Err(Error::DecodeError("short instance record".into()));
        }
        let created = u64::from_be_bytes(data[0..8].try_into().unwrap());
        let count = u32::from_be_bytes(data[8..12].try_into().unwrap()) as usize;
        let entry_len = KEY_BYTES + 24;
        if data.len() != 12 + count * entry_len {
            return Err(Error::DecodeError("instance record length mismatch".into()));
        }
        let mut locations = Vec::with_capacity(count);
        for i in 0..count {
            let base = 12 + i * entry_len;
            locations.push(ObjectLocation {
                node: Key::from_bytes(data[base..base + KEY_BYTES].try_into().unwrap()),
                incarnation: u64::from_be_bytes(
                    data[base + KEY_BYTES..base + KEY_BYTES + 8].try_into().unwrap(),
                ),
                instance: u64::from_be_bytes(
                    data[base + KEY_BYTES + 8..base + KEY_BYTES + 16].try_into().unwrap(),
                ),
                registered: u64::from_be_bytes(
                    data[base + KEY_BYTES + 16..base + KEY_BYTES + 24].try_into().unwrap(),
                ),
            });
        }
        Ok(InstanceRecord { created, locations })
    }
}

fn read_instance_record(world: &mut World, from: Key, guid: Guid) -> Result<Option<InstanceRecord>> {
    let svc = dol(world, from, guid.0, Aid::ObjectDir)?;
    match store::get(world, from, svc, guid.0) {
        Ok(raw) => Ok(Some(InstanceRecord::decode(&raw)?)),
        Err(Error::NotFound) => Ok(None),
        Err(e) => Err(e),
    }
}

fn write_instance_record(world: &mut World, from: Key, guid: Guid, rec: &InstanceRecord, exists: bool) -> Result<()> {
    let svc = dol(world, from, guid.0, Aid::ObjectDir)?;
    if exists {
        store::update(world, from, svc, guid.0, rec.encode())?;
    } else {
        store::put(world, from, svc, guid.0, rec.encode())?;
    }
    Ok(())
}

/// Creates the directory record for a freshly allocated GUID, fixing its
/// creation time.
pub fn register_creation(world: &mut World, from: Key, guid: Guid) -> Result<()> {
    if read_instance_record(world, from, guid)?.is_none() {
        let rec = InstanceRecord {
            created: world.next_stamp(),
            locations: Vec::new(),
        };
        write_instance_record(world, from, guid, &rec, false)?;
    }
    Ok(())
}

/// Advertises a live instance in the object directory.
pub fn publish_instance(world: &mut World, from: Key, guid: Guid, location: ObjectLocation) -> Result<()> {
    let existing = read_instance_record(world, from, guid)?;
    let exists = existing.is_some();
    let mut rec = match existing {
        Some(rec) => rec,
        None => InstanceRecord {
            created: world.next_stamp(),
            locations: Vec::new(),
        },
    };
    // prune entries that can never be live again while we are here
    let live_filter = |loc: &ObjectLocation, world: &World| {
        world.is_live(loc.node)
            && world
                .node(loc.node)
                .map(|n| n.incarnation == loc.incarnation)
                .unwrap_or(false)
    };
    rec.locations.retain(|loc| live_filter(loc, world));
    rec.locations.retain(|loc| {
        !(loc.node == location.node && loc.instance == location.instance)
    });
    rec.locations.push(location);
    write_instance_record(world, from, guid, &rec, exists)
}

/// Extant instances of a GUID, stale locations filtered out. Unknown GUIDs
/// yield an empty list.
pub fn get_objects(world: &mut World, from: Key, guid: Guid) -> Result<Vec<ObjectLocation>> {
    let Some(rec) = read_instance_record(world, from, guid)? else {
        return Ok(Vec::new());
    };
    Ok(rec
        .locations
        .into_iter()
        .filter(|loc| {
            world.is_live(loc.node)
                && world
                    .node(loc.node)
                    .map(|n| n.incarnation == loc.incarnation)
                    .unwrap_or(false)
        })
        .collect())
}

/// Logical time at which the GUID was allocated.
pub fn object_creation_time(world: &mut World, from: Key, guid: Guid) -> Result<u64> {
    match read_instance_record(world, from, guid)? {
        Some(rec) => Ok(rec.created),
        None => Err(Error::NotFound),
    }
}

/// Drops stale locations from every object-directory record hosted on a live
/// home. Runs as part of stabilization; stale entries are already invisible
/// to readers, this reclaims them.
pub fn purge_stale_instances(world: &mut World) -> usize {
    let mut purged = 0;
    let live = world.live_sorted();
    for node in live {
        let records: Vec<Key> = world
            .durable_of(node)
            .keys()
            .filter(|(tag, _)| *tag == Aid::ObjectDir.tag())
            .map(|(_, key)| *key)
            .collect();
        for key in records {
            // only the responsible node rewrites, so each record is purged once
            match crate::overlay::responsible_node(world, key) {
                Ok(home) if home == node => {}
                _ => continue,
            }
            let Some(DurableEntry::Value { data, .. }) =
                world.durable_of(node).get(&(Aid::ObjectDir.tag(), key)).cloned()
            else {
                continue;
            };
            let Ok(mut rec) = InstanceRecord::decode(&data) else {
                continue;
            };
            let before = rec.locations.len();
            rec.locations.retain(|loc| {
                world.is_live(loc.node)
                    && world
                        .node(loc.node)
                        .map(|n| n.incarnation == loc.incarnation)
                        .unwrap_or(false)
            });
            if rec.locations.len() != before {
                let guid = Guid(key);
                if write_instance_record(world, node, guid, &rec, true).is_ok() {
                    purged += 1;
                }
            }
        }
    }
    purged
}

// ----- data store -----------------------------------------------------------

/// Stores one immutable object state under its PID, replicated according to
/// the configured strategy. The PID must be the content hash of the data.
pub fn store_data(world: &mut World, from: Key, pid: Pid, data: Vec<u8>) -> Result<()> {
    let r = world.cfg.replication;
    store_data_with_replication(world, from, pid, data, r)
}

pub fn store_data_with_replication(
    world: &mut World,
    from: Key,
    pid: Pid,
    data: Vec<u8>,
    r: usize,
) -> Result<()> {
    if generate_pid(&data) != pid {
        return Err(Error::IntegrityError(pid));
    }
    match world.cfg.strategy {
        StoreStrategy::CoLocated => {
            let svc = dol(world, from, pid.0, Aid::DataStore)?;
            store::put_with_replication(world, from, svc, pid.0, data, r)
        }
        StoreStrategy::LocationRecording => {
            while world.external_repos.len() < r {
                world.external_repos.push(BTreeMap::new());
            }
            let repos: Vec<usize> = (0..r).collect();
            for repo in &repos {
                world.external_repos[*repo].insert(pid.0, data.clone());
            }
            let svc = dol(world, from, pid.0, Aid::DataStore)?;
            store::record_data_locations(world, from, svc, pid, &repos)
        }
    }
}

/// Retrieves the state for a PID, via replicas or recorded repositories.
pub fn get_object_data(world: &mut World, from: Key, pid: Pid) -> Result<Vec<u8>> {
    let data = match world.cfg.strategy {
        StoreStrategy::CoLocated => {
            let svc = dol(world, from, pid.0, Aid::DataStore)?;
            store::get(world, from, svc, pid.0)?
        }
        StoreStrategy::LocationRecording => {
            let svc = dol(world, from, pid.0, Aid::DataStore)?;
            let repos = store::get_store(world, from, svc, pid)?;
            repos
                .iter()
                .find_map(|r| world.external_repos.get(*r).and_then(|m| m.get(&pid.0)).cloned())
                .ok_or(Error::NotFound)?
        }
    };
    if generate_pid(&data) != pid {
        return Err(Error::IntegrityError(pid));
    }
    Ok(data)
}

/// Logical time at which a PID was first stored.
pub fn data_creation_time(world: &mut World, from: Key, pid: Pid) -> Result<u64> {
    let svc = dol(world, from, pid.0, Aid::DataStore)?;
    Ok(store::lookup_entry(world, from, svc, pid.0)?.stamp())
}

// ----- code store ------------------------------------------------------------

/// Binds a GUID to its class. The binding is write-once: re-registering the
/// same class is a no-op, a different class is an error.
pub fn register_class(world: &mut World, from: Key, guid: Guid, class_id: &str) -> Result<()> {
    let svc = dol(world, from, guid.0, Aid::CodeStore)?;
    match store::get(world, from, svc, guid.0) {
        Ok(existing) => {
            if existing != class_id.as_bytes() {
                return Err(Error::ImmutableViolation(guid));
            }
            Ok(())
        }
        Err(Error::NotFound) => store::put(world, from, svc, guid.0, class_id.as_bytes().to_vec()),
        Err(e) => Err(e),
    }
}

pub fn get_class(world: &mut World, from: Key, guid: Guid) -> Result<ClassDescriptor> {
    let svc = dol(world, from, guid.0, Aid::CodeStore)?;
    let raw = store::get(world, from, svc, guid.0)?;
    let class_id = String::from_utf8(raw)
        .map_err(|_| Error::DecodeError("class id is not UTF-8".into()))?;
    world.class(&class_id).cloned()
}

// ----- policy store -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicyScope {
    Object(Guid),
    Class(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyRecord {
    pub policy_name: String,
    pub params: PolicyParams,
}

fn policy_scope_key(scope: &PolicyScope) -> Key {
    match scope {
        PolicyScope::Object(guid) => guid.0,
        PolicyScope::Class(class_id) => {
            let mut buf = b"policy-class:".to_vec();
            buf.extend_from_slice(class_id.as_bytes());
            Key::digest(&buf)
        }
    }
}

fn encode_policy(rec: &PolicyRecord) -> Vec<u8> {
    let mut out = Vec::new();
    let name = rec.policy_name.as_bytes();
    out.extend_from_slice(&(name.len() as u32).to_be_bytes());
    out.extend_from_slice(name);
    let entries = rec.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for (k, v) in entries {
        out.extend_from_slice(&(k.len() as u32).to_be_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_be_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    out
}

fn decode_policy(data: &[u8]) -> Result<PolicyRecord> {
    fn take<'a>(data: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *pos + n > data.len() {
            return Err(Error::DecodeError("short policy record".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    }
    fn take_str(data: &[u8], pos: &mut usize) -> Result<String> {
        let len = u32::from_be_bytes(take(data, pos, 4)?.try_into().unwrap()) as usize;
        String::from_utf8(take(data, pos, len)?.to_vec())
            .map_err(|_| Error::DecodeError("policy record is not UTF-8".into()))
    }
    let mut pos = 0;
    let policy_name = take_str(data, &mut pos)?;
    let count = u32::from_be_bytes(take(data, &mut pos, 4)?.try_into().unwrap()) as usize;
    let mut params = PolicyParams::default();
    for _ in 0..count {
        let k = take_str(data, &mut pos)?;
        let v = take_str(data, &mut pos)?;
        params.set(k, v);
    }
    Ok(PolicyRecord { policy_name, params })
}

/// Persists a policy association for a class or a specific object.
pub fn set_resilience_policy(
    world: &mut World,
    from: Key,
    scope: PolicyScope,
    policy_name: &str,
    params: PolicyParams,
) -> Result<()> {
    let key = policy_scope_key(&scope);
    let svc = dol(world, from, key, Aid::PolicyStore)?;
    let bytes = encode_policy(&PolicyRecord {
        policy_name: policy_name.to_string(),
        params,
    });
    match store::get(world, from, svc, key) {
        Ok(_) => {
            store::update(world, from, svc, key, bytes)?;
        }
        Err(Error::NotFound) => store::put(world, from, svc, key, bytes)?,
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Policy in effect for an object: object-scoped beats class-scoped beats
/// the system default (None).
pub fn lookup_policy(
    world: &mut World,
    from: Key,
    guid: Guid,
    class_id: Option<&str>,
) -> Result<Option<PolicyRecord>> {
    let object_key = policy_scope_key(&PolicyScope::Object(guid));
    let svc = dol(world, from, object_key, Aid::PolicyStore)?;
    match store::get(world, from, svc, object_key) {
        Ok(raw) => return Ok(Some(decode_policy(&raw)?)),
        Err(Error::NotFound) => {}
        Err(e) => return Err(e),
    }
    if let Some(class_id) = class_id {
        let class_key = policy_scope_key(&PolicyScope::Class(class_id.to_string()));
        let svc = dol(world, from, class_key, Aid::PolicyStore)?;
        match store::get(world, from, svc, class_key) {
            Ok(raw) => return Ok(Some(decode_policy(&raw)?)),
            Err(Error::NotFound) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::{fail, responsible_node, stabilize};
    use crate::sim::SimConfig;

    fn world_with(n: usize) -> World {
        let mut w = World::new(SimConfig {
            seed: 9,
            initial_nodes: n,
            replication: 3,
            ..SimConfig::default()
        });
        stabilize(&mut w);
        w
    }

    fn caller(world: &World) -> Key {
        world.live_sorted()[0]
    }

    fn fresh_guid(world: &mut World) -> Guid {
        world.new_guid().unwrap()
    }

    #[test]
    fn name_directory_round_trip_replace_and_failover() {
        let mut w = world_with(5);
        let from = caller(&w);
        let g1 = fresh_guid(&mut w);
        let g2 = fresh_guid(&mut w);
        associate_name(&mut w, from, "bank root", g1).unwrap();
        assert_eq!(get_guid_by_name(&mut w, from, "bank root").unwrap(), g1);
        assert_eq!(get_guid_by_name(&mut w, from, "missing"), Err(Error::NotFound));
        associate_name(&mut w, from, "bank root", g2).unwrap();
        assert_eq!(get_guid_by_name(&mut w, from, "bank root").unwrap(), g2);

        // survives failure of the record's home after repair
        let key = Key::digest(b"bank root");
        let home = responsible_node(&w, key).unwrap();
        let home_idx = w.index_of(home).unwrap();
        fail(&mut w, home_idx).unwrap();
        stabilize(&mut w);
        let reader = caller(&w);
        assert_eq!(get_guid_by_name(&mut w, reader, "bank root").unwrap(), g2);
    }

    #[test]
    fn version_history_is_append_only_and_ordered() {
        let mut w = world_with(4);
        let from = caller(&w);
        let g = fresh_guid(&mut w);
        assert_eq!(get_latest_version(&mut w, from, g), Err(Error::NotFound));
        assert!(version_iterator(&mut w, from, g).unwrap().is_empty());

        let p1 = Pid(Key::digest(b"v1"));
        let p2 = Pid(Key::digest(b"v2"));
        publish_version(&mut w, from, g, p1).unwrap();
        publish_version(&mut w, from, g, p2).unwrap();
        publish_version(&mut w, from, g, p2).unwrap(); // duplicates appear: log, not set
        let history: Vec<Pid> = version_iterator(&mut w, from, g)
            .unwrap()
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        assert_eq!(history, vec![p1, p2, p2]);
        assert_eq!(get_latest_version(&mut w, from, g).unwrap(), p2);

        // times are non-decreasing
        let times: Vec<u64> = version_iterator(&mut w, from, g)
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn version_history_survives_home_failure_and_repair() {
        let mut w = world_with(5);
        let from = caller(&w);
        let g = fresh_guid(&mut w);
        let pids: Vec<Pid> = (0u8..3).map(|i| Pid(Key::digest(&[i]))).collect();
        for p in &pids {
            publish_version(&mut w, from, g, *p).unwrap();
        }
        let before: Vec<(Pid, u64)> = version_iterator(&mut w, from, g).unwrap();
        let home = responsible_node(&w, g.0).unwrap();
        let home_idx = w.index_of(home).unwrap();
        fail(&mut w, home_idx).unwrap();
        stabilize(&mut w);
        let reader = caller(&w);
        assert_eq!(version_iterator(&mut w, reader, g).unwrap(), before);
        assert_eq!(get_latest_version(&mut w, reader, g).unwrap(), pids[2]);
    }

    #[test]
    fn manifest_publish_and_fetch() {
        let mut w = world_with(4);
        let from = caller(&w);
        let root = fresh_guid(&mut w);
        assert_eq!(get_manifest(&mut w, from, root), Err(Error::NotFound));
        let mut m = CommitManifest::new(root);
        m.snapshot.insert(root, Pid(Key::digest(b"state")));
        publish_manifest(&mut w, from, &m).unwrap();
        assert_eq!(get_manifest(&mut w, from, root).unwrap(), m);
        // replaced atomically by the next commit's manifest
        let mut m2 = m.clone();
        m2.snapshot.insert(fresh_guid(&mut w), Pid(Key::digest(b"child")));
        publish_manifest(&mut w, from, &m2).unwrap();
        assert_eq!(get_manifest(&mut w, from, root).unwrap(), m2);
    }

    #[test]
    fn object_directory_registers_and_liveness_filters() {
        let mut w = world_with(3);
        let from = caller(&w);
        let other = w.live_sorted()[1];
        let g = fresh_guid(&mut w);
        register_creation(&mut w, from, g).unwrap();
        let created = object_creation_time(&mut w, from, g).unwrap();
        assert!(created > 0);
        assert!(get_objects(&mut w, from, g).unwrap().is_empty());

        let inc = w.node(other).unwrap().incarnation;
        let loc = ObjectLocation {
            node: other,
            incarnation: inc,
            instance: 0,
            registered: w.lamport(),
        };
        publish_instance(&mut w, from, g, loc).unwrap();
        assert_eq!(get_objects(&mut w, from, g).unwrap(), vec![loc]);

        // failing the hosting node filters the stale location at read time
        let other_idx = w.index_of(other).unwrap();
        fail(&mut w, other_idx).unwrap();
        let reader = caller(&w);
        assert!(get_objects(&mut w, reader, g).unwrap().is_empty());
        // creation time is unchanged by instance churn
        assert_eq!(object_creation_time(&mut w, reader, g).unwrap(), created);
        // unknown guid yields an empty list, not an error
        let unknown = fresh_guid(&mut w);
        assert!(get_objects(&mut w, reader, unknown).unwrap().is_empty());
    }

    #[test]
    fn stale_instances_are_purged_during_stabilization() {
        let mut w = world_with(4);
        let from = caller(&w);
        let victim = w.live_sorted()[2];
        let g = fresh_guid(&mut w);
        let inc = w.node(victim).unwrap().incarnation;
        publish_instance(
            &mut w,
            from,
            g,
            ObjectLocation { node: victim, incarnation: inc, instance: 7, registered: 1 },
        )
        .unwrap();
        let victim_idx = w.index_of(victim).unwrap();
        fail(&mut w, victim_idx).unwrap();
        let purged = purge_stale_instances(&mut w);
        assert_eq!(purged, 1);
        assert_eq!(purge_stale_instances(&mut w), 0, "purge is idempotent");
        stabilize(&mut w);
        // the durable record itself no longer lists the dead location
        let reader = caller(&w);
        let rec = read_instance_record(&mut w, reader, g).unwrap().unwrap();
        assert!(rec.locations.is_empty());
    }

    #[test]
    fn data_store_enforces_content_addressing() {
        let mut w = world_with(4);
        let from = caller(&w);
        let data = b"object state".to_vec();
        let pid = generate_pid(&data);
        store_data(&mut w, from, pid, data.clone()).unwrap();
        assert_eq!(get_object_data(&mut w, from, pid).unwrap(), data);
        assert!(data_creation_time(&mut w, from, pid).unwrap() > 0);

        let wrong = Pid(Key::digest(b"something else"));
        assert_eq!(
            store_data(&mut w, from, wrong, data.clone()),
            Err(Error::IntegrityError(wrong))
        );
        assert_eq!(get_object_data(&mut w, from, wrong), Err(Error::NotFound));
    }

    #[test]
    fn data_survives_home_failure_via_replica_fallback() {
        let mut w = world_with(5);
        let from = caller(&w);
        let data = b"replicated".to_vec();
        let pid = generate_pid(&data);
        store_data(&mut w, from, pid, data.clone()).unwrap();
        let home = responsible_node(&w, pid.0).unwrap();
        let home_idx = w.index_of(home).unwrap();
        fail(&mut w, home_idx).unwrap();
        // before repair: replica fallback serves the read
        let reader = caller(&w);
        assert_eq!(get_object_data(&mut w, reader, pid).unwrap(), data);
        stabilize(&mut w);
        assert_eq!(get_object_data(&mut w, reader, pid).unwrap(), data);
    }

    #[test]
    fn code_store_is_write_once() {
        let mut w = world_with(3);
        w.cfg.classes.insert(
            "Account".into(),
            ClassDescriptor::new("Account", vec![("balance", crate::object_model::FieldKind::Int)]),
        );
        let from = caller(&w);
        let g = fresh_guid(&mut w);
        assert_eq!(get_class(&mut w, from, g), Err(Error::NotFound));
        register_class(&mut w, from, g, "Account").unwrap();
        register_class(&mut w, from, g, "Account").unwrap(); // idempotent
        assert_eq!(
            register_class(&mut w, from, g, "Other"),
            Err(Error::ImmutableViolation(g))
        );
        assert_eq!(get_class(&mut w, from, g).unwrap().class_id, "Account");
    }

    #[test]
    fn policy_lookup_prefers_object_scope_over_class_scope() {
        let mut w = world_with(3);
        let from = caller(&w);
        let g = fresh_guid(&mut w);
        assert_eq!(lookup_policy(&mut w, from, g, Some("Account")).unwrap(), None);

        let mut class_params = PolicyParams::default();
        class_params.set("replicas".into(), "2".into());
        set_resilience_policy(
            &mut w,
            from,
            PolicyScope::Class("Account".into()),
            "none",
            class_params,
        )
        .unwrap();
        let rec = lookup_policy(&mut w, from, g, Some("Account")).unwrap().unwrap();
        assert_eq!(rec.policy_name, "none");
        assert_eq!(rec.params.get("replicas"), Some("2"));

        set_resilience_policy(
            &mut w,
            from,
            PolicyScope::Object(g),
            "optimistic-txn",
            PolicyParams::default(),
        )
        .unwrap();
        let rec = lookup_policy(&mut w, from, g, Some("Account")).unwrap().unwrap();
        assert_eq!(rec.policy_name, "optimistic-txn");

        // other instances of the class still see the class-scoped policy
        let g2 = fresh_guid(&mut w);
        let rec = lookup_policy(&mut w, from, g2, Some("Account")).unwrap().unwrap();
        assert_eq!(rec.policy_name, "none");
    }
}
