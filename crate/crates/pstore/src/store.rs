//! Per-node, per-service replicated storage substrate.
//!
//! Writes land durably on the responsible node and are synchronously copied
//! to its replica targets (the next `r - 1` live successors). Every
//! individual replica write is atomic: a crash between writes leaves some
//! holders with the complete record and the rest with nothing, never a torn
//! entry. Reads fall back to the successor list while a failure has not yet
//! been repaired. Topology up-calls queue repair work; stabilization rounds
//! execute it until every key again sits on exactly its target set.

use crate::error::{Error, Result};
use crate::keyspace::{Aid, Key, Pid};
use crate::overlay::{route, ServiceRef};
use crate::sim::{DurableEntry, TopologyEvent, World};

/// Externally stored data repositories are addressed by index; they stand in
/// for arbitrary hosts outside the overlay.
pub type RepoHandle = usize;

/// True when `a` should replace `b` during repair or replication.
/// Append-only logs compare by length (a stale copy is always a prefix);
/// everything else is last-writer-wins on the mutation stamp.
fn newer(a: &DurableEntry, b: &DurableEntry) -> bool {
    match (a, b) {
        (DurableEntry::Log { items: ia }, DurableEntry::Log { items: ib }) => ia.len() > ib.len(),
        _ => a.stamp() > b.stamp(),
    }
}

fn write_if_newer(world: &mut World, node: Key, aid_tag: u8, key: Key, entry: &DurableEntry) -> bool {
    let store = world.durable_mut(node);
    match store.get(&(aid_tag, key)) {
        Some(existing) if !newer(entry, existing) => false,
        _ => {
            store.insert((aid_tag, key), entry.clone());
            true
        }
    }
}

/// Live replica targets of a home node, read from its own successor list.
fn replica_targets(world: &World, home: Key, r: usize) -> Vec<Key> {
    let Ok(view) = world.node(home) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for s in &view.successors {
        if *s != home && world.is_live(*s) && !out.contains(s) {
            out.push(*s);
            if out.len() + 1 >= r {
                break;
            }
        }
    }
    out
}

/// Writes the entry at the home node and synchronously at every currently
/// computed replica target, each write atomic.
fn replicate(world: &mut World, home: Key, aid_tag: u8, key: Key, entry: DurableEntry, r: usize) -> Result<()> {
    write_if_newer(world, home, aid_tag, key, &entry);
    world.replica_write_checkpoint(home)?;
    for target in replica_targets(world, home, r) {
        if world.deliver(home, target).is_err() {
            continue; // repaired at the next stabilize
        }
        write_if_newer(world, target, aid_tag, key, &entry);
        world.replica_write_checkpoint(home)?;
    }
    Ok(())
}

pub fn put(world: &mut World, from: Key, svc: ServiceRef, key: Key, data: Vec<u8>) -> Result<()> {
    let r = world.cfg.replication;
    put_with_replication(world, from, svc, key, data, r)
}

/// `put` with an explicit replica count, for policy-controlled data writes.
pub fn put_with_replication(
    world: &mut World,
    from: Key,
    svc: ServiceRef,
    key: Key,
    data: Vec<u8>,
    r: usize,
) -> Result<()> {
    world.deliver(from, svc.node)?;
    let tag = svc.aid.tag();
    let stamp = match world.durable_of(svc.node).get(&(tag, key)) {
        Some(DurableEntry::Log { .. }) => return Err(Error::WrongKind),
        Some(DurableEntry::Value { data: d, stamp }) if *d == data => *stamp,
        _ => world.next_stamp(),
    };
    replicate(world, svc.node, tag, key, DurableEntry::Value { data, stamp }, r)
}

fn read_at(world: &World, node: Key, aid_tag: u8, key: Key) -> Option<DurableEntry> {
    world.durable_of(node).get(&(aid_tag, key)).cloned()
}

/// Looks the entry up at the service node, falling back to its successor
/// list while the home copy is missing (the post-failure window).
fn lookup(world: &World, svc: ServiceRef, key: Key) -> Result<DurableEntry> {
    let tag = svc.aid.tag();
    if let Some(entry) = read_at(world, svc.node, tag, key) {
        return match entry {
            DurableEntry::Tombstone { .. } => Err(Error::NotFound),
            found => Ok(found),
        };
    }
    let view = world.node(svc.node)?;
    for cand in view.successors.clone() {
        if cand == svc.node || !world.is_live(cand) {
            continue;
        }
        if let Some(entry) = read_at(world, cand, tag, key) {
            return match entry {
                DurableEntry::Tombstone { .. } => Err(Error::NotFound),
                found => Ok(found),
            };
        }
    }
    Err(Error::NotFound)
}

pub fn get(world: &mut World, from: Key, svc: ServiceRef, key: Key) -> Result<Vec<u8>> {
    world.deliver(from, svc.node)?;
    match lookup(world, svc, key)? {
        DurableEntry::Value { data, .. } => Ok(data),
        DurableEntry::Log { .. } => Err(Error::WrongKind),
        DurableEntry::Tombstone { .. } => Err(Error::NotFound),
    }
}

/// Raw entry lookup with the same fallback semantics as `get`; lets the
/// directory layer read mutation stamps (creation times) without decoding.
pub(crate) fn lookup_entry(world: &mut World, from: Key, svc: ServiceRef, key: Key) -> Result<DurableEntry> {
    world.deliver(from, svc.node)?;
    lookup(world, svc, key)
}

/// Full contents of an append-log entry, oldest first.
pub fn get_log(world: &mut World, from: Key, svc: ServiceRef, key: Key) -> Result<Vec<(Vec<u8>, u64)>> {
    world.deliver(from, svc.node)?;
    match lookup(world, svc, key)? {
        DurableEntry::Log { items } => Ok(items),
        _ => Err(Error::WrongKind),
    }
}

pub fn update(world: &mut World, from: Key, svc: ServiceRef, key: Key, data: Vec<u8>) -> Result<Vec<u8>> {
    world.deliver(from, svc.node)?;
    let prev = match lookup(world, svc, key)? {
        DurableEntry::Value { data, .. } => data,
        DurableEntry::Log { .. } => return Err(Error::WrongKind),
        DurableEntry::Tombstone { .. } => return Err(Error::NotFound),
    };
    let stamp = world.next_stamp();
    let r = world.cfg.replication;
    replicate(world, svc.node, svc.aid.tag(), key, DurableEntry::Value { data, stamp }, r)?;
    Ok(prev)
}

pub fn append(world: &mut World, from: Key, svc: ServiceRef, key: Key, data: Vec<u8>) -> Result<()> {
    world.deliver(from, svc.node)?;
    let tag = svc.aid.tag();
    let stamp = world.next_stamp();
    let mut items = match world.durable_of(svc.node).get(&(tag, key)) {
        Some(DurableEntry::Value { .. }) => return Err(Error::WrongKind),
        Some(DurableEntry::Log { items }) => items.clone(),
        Some(DurableEntry::Tombstone { .. }) | None => Vec::new(),
    };
    items.push((data, stamp));
    let r = world.cfg.replication;
    replicate(world, svc.node, tag, key, DurableEntry::Log { items }, r)
}

pub fn remove(world: &mut World, from: Key, svc: ServiceRef, key: Key) -> Result<Vec<u8>> {
    world.deliver(from, svc.node)?;
    let prev = match lookup(world, svc, key)? {
        DurableEntry::Value { data, .. } => data,
        DurableEntry::Log { items } => items.last().map(|(d, _)| d.clone()).unwrap_or_default(),
        DurableEntry::Tombstone { .. } => return Err(Error::NotFound),
    };
    let stamp = world.next_stamp();
    let r = world.cfg.replication;
    replicate(world, svc.node, svc.aid.tag(), key, DurableEntry::Tombstone { stamp }, r)?;
    Ok(prev)
}

/// This node's local entries (home and replica copies alike), tombstones
/// excluded. Repair and the census build on it.
pub fn get_all(world: &World, node: Key) -> Vec<(Aid, Key, DurableEntry)> {
    world
        .durable_of(node)
        .iter()
        .filter(|(_, e)| !matches!(e, DurableEntry::Tombstone { .. }))
        .filter_map(|((tag, key), entry)| Aid::from_tag(*tag).map(|aid| (aid, *key, entry.clone())))
        .collect()
}

/// Queues a topology up-call; the repair work itself runs as an explicit
/// stabilization task.
pub fn on_topology_change(world: &mut World, node: Key, event: TopologyEvent) -> Result<()> {
    world.node_mut(node)?.pending_events.push(event);
    Ok(())
}

// ----- location-recording data store strategy ---------------------------

fn encode_repos(repos: &[RepoHandle]) -> Vec<u8> {
    let mut out = (repos.len() as u32).to_be_bytes().to_vec();
    for r in repos {
        out.extend_from_slice(&(*r as u32).to_be_bytes());
    }
    out
}

fn decode_repos(data: &[u8]) -> Result<Vec<RepoHandle>> {
    if data.len() < 4 {
        return Err(Error::DecodeError("short repository record".into()));
    }
    let n = u32::from_be_bytes(data[0..4].try_into().unwrap()) as usize;
    if data.len() != 4 + 4 * n {
        return Err(Error::DecodeError("repository record length mismatch".into()));
    }
    Ok((0..n)
        .map(|i| u32::from_be_bytes(data[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect())
}

/// Durably records which external repositories hold the data for a PID. The
/// location record itself replicates like any overlay entry.
pub fn record_data_locations(
    world: &mut World,
    from: Key,
    svc: ServiceRef,
    pid: Pid,
    repos: &[RepoHandle],
) -> Result<()> {
    if world.cfg.strategy != crate::sim::StoreStrategy::LocationRecording {
        return Err(Error::StrategyMismatch);
    }
    put(world, from, svc, pid.0, encode_repos(repos))
}

/// Currently recorded repository handles for a PID.
pub fn get_store(world: &mut World, from: Key, svc: ServiceRef, pid: Pid) -> Result<Vec<RepoHandle>> {
    if world.cfg.strategy != crate::sim::StoreStrategy::LocationRecording {
        return Err(Error::StrategyMismatch);
    }
    decode_repos(&get(world, from, svc, pid.0)?)
}

// ----- repair ------------------------------------------------------------

/// Executes queued repair work on every up-called node. Returns the number
/// of data movements performed; stabilization loops until this reaches zero.
pub fn run_repairs(world: &mut World) -> usize {
    let mut total = 0;
    for node in world.live_sorted() {
        let pending = match world.node(node) {
            Ok(n) if !n.pending_events.is_empty() => true,
            _ => false,
        };
        if !pending {
            continue;
        }
        let actions = repair_node(world, node);
        total += actions;
        if actions == 0 {
            if let Ok(n) = world.node_mut(node) {
                n.pending_events.clear();
            }
        }
    }
    total
}

/// Reconfigures the data one node holds: adopts newer copies from the home,
/// ships copies to targets that miss them, and drops entries this node is no
/// longer responsible for.
fn repair_node(world: &mut World, node: Key) -> usize {
    let mut actions = 0;
    let r = world.cfg.replication;
    let keys: Vec<(u8, Key)> = world.durable_of(node).keys().copied().collect();
    for (tag, key) in keys {
        let Some(mut mine) = read_at(world, node, tag, key) else {
            continue;
        };
        let Ok((home, _)) = route(world, node, key) else {
            continue;
        };
        let mut targets = vec![home];
        targets.extend(replica_targets(world, home, r));

        if node != home {
            match read_at(world, home, tag, key) {
                Some(theirs) if newer(&theirs, &mine) => {
                    if targets.contains(&node) {
                        write_if_newer(world, node, tag, key, &theirs);
                        actions += 1;
                    }
                    mine = theirs;
                }
                Some(theirs) if newer(&mine, &theirs) => {
                    write_if_newer(world, home, tag, key, &mine);
                    actions += 1;
                }
                Some(_) => {}
                None => {
                    write_if_newer(world, home, tag, key, &mine);
                    actions += 1;
                }
            }
        }

        for target in targets.iter().copied().filter(|t| *t != node) {
            let missing_or_older = match read_at(world, target, tag, key) {
                Some(theirs) => newer(&mine, &theirs),
                None => true,
            };
            if missing_or_older && write_if_newer(world, target, tag, key, &mine) {
                actions += 1;
            }
        }

        if !targets.contains(&node) {
            world.durable_mut(node).remove(&(tag, key));
            actions += 1;
        }
    }
    actions
}

// ----- census (privileged test and report instrumentation) ---------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusRecord {
    pub aid: Aid,
    pub key: Key,
    pub kind: &'static str,
    pub holders: Vec<Key>,
}

/// Global census over live nodes' durable stores, sorted by service and key.
/// This inspects storage directly and is kept apart from application reads.
pub fn census(world: &World) -> Vec<CensusRecord> {
    let mut map: std::collections::BTreeMap<(u8, Key), CensusRecord> = Default::default();
    for node in world.live_sorted() {
        for ((tag, key), entry) in world.durable_of(node).iter() {
            if matches!(entry, DurableEntry::Tombstone { .. }) {
                continue;
            }
            let rec = map.entry((*tag, *key)).or_insert_with(|| CensusRecord {
                aid: Aid::from_tag(*tag).expect("valid tag"),
                key: *key,
                kind: entry.kind_str(),
                holders: Vec::new(),
            });
            rec.holders.push(node);
        }
    }
    map.into_values().collect()
}

/// Placement violations at quiescence: every stored key must sit on exactly
/// the first `min(r, live)` successors of its home, and append-log replicas
/// must be byte-identical.
pub fn placement_violations(world: &World) -> Vec<String> {
    let mut violations = Vec::new();
    for rec in census(world) {
        let mut expected = crate::overlay::placement_targets(world, rec.key);
        expected.sort();
        let mut holders = rec.holders.clone();
        holders.sort();
        if holders != expected {
            violations.push(format!(
                "{}/{}: held by {:?}, expected {:?}",
                rec.aid,
                rec.key,
                holders.iter().map(|k| k.to_hex()).collect::<Vec<_>>(),
                expected.iter().map(|k| k.to_hex()).collect::<Vec<_>>()
            ));
        }
        if rec.kind == "APPEND_LOG" {
            let logs: Vec<Option<DurableEntry>> = rec
                .holders
                .iter()
                .map(|h| read_at(world, *h, rec.aid.tag(), rec.key))
                .collect();
            if logs.windows(2).any(|w| w[0] != w[1]) {
                violations.push(format!("{}/{}: replica logs diverge", rec.aid, rec.key));
            }
        }
    }
    violations
}
