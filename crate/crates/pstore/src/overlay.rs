//! Simulated key-based routing overlay.
//!
//! Node membership follows the successor rule: the node responsible for a
//! key is the first live node clockwise from it. Every node keeps a routing
//! view (successor list, predecessor, fingers) that can go stale when the
//! membership changes; explicit stabilization rounds drive views and data
//! placement back to a fixpoint, so tests can assert post-quiescence
//! properties deterministically. Lookups route greedily over the views and
//! never consult global state.

use crate::error::{Error, Result};
use crate::keyspace::{in_ring, Aid, Key};
use crate::sim::{TopologyChange, TopologyEvent, World};
use std::collections::BTreeSet;

/// Handle to one service object on the node responsible for a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServiceRef {
    pub node: Key,
    pub aid: Aid,
}

/// First node in `membership` clockwise from `k` (the successor rule).
pub fn successor_in(membership: &BTreeSet<Key>, k: Key) -> Option<Key> {
    membership
        .range(k..)
        .next()
        .or_else(|| membership.iter().next())
        .copied()
}

/// Ground-truth responsible node for `k`; the oracle routing must agree with.
pub fn responsible_node(world: &World, k: Key) -> Result<Key> {
    successor_in(&world.live, k).ok_or(Error::EmptyRing)
}

/// Replica target set for `k` under the given membership: the responsible
/// node followed by its `r - 1` distinct live successors.
pub fn targets_in(membership: &BTreeSet<Key>, k: Key, r: usize) -> Vec<Key> {
    let Some(home) = successor_in(membership, k) else {
        return Vec::new();
    };
    let mut targets = vec![home];
    let mut cur = home;
    while targets.len() < r.min(membership.len()) {
        let next = membership
            .range((std::ops::Bound::Excluded(cur), std::ops::Bound::Unbounded))
            .next()
            .or_else(|| membership.iter().next())
            .copied()
            .expect("membership is non-empty");
        if next == home {
            break;
        }
        targets.push(next);
        cur = next;
    }
    targets
}

/// Current ground-truth placement for a key: home plus replicas.
pub fn placement_targets(world: &World, k: Key) -> Vec<Key> {
    targets_in(&world.live, k, world.cfg.replication)
}

/// The clockwise responsibility interval `(pred, id]` owned by a live node.
pub fn responsibility_interval(world: &World, id: Key) -> (Key, Key) {
    let pred = world
        .live
        .range(..id)
        .next_back()
        .or_else(|| world.live.iter().next_back())
        .copied()
        .unwrap_or(id);
    (pred, id)
}

fn next_live_clockwise(membership: &BTreeSet<Key>, from: Key) -> Option<Key> {
    membership
        .range((std::ops::Bound::Excluded(from), std::ops::Bound::Unbounded))
        .next()
        .or_else(|| membership.iter().next())
        .copied()
}

/// Recomputes every live node's routing view from the current membership.
/// Returns true if any view changed. One call brings all views to their
/// quiescent values; stabilization loops until this reports no change.
pub fn refresh_all_views(world: &mut World) -> bool {
    let live = world.live.clone();
    let s = world.cfg.successor_len();
    let mut changed = false;
    for id in live.iter().copied() {
        let mut successors = Vec::new();
        let mut cur = id;
        for _ in 0..s {
            match next_live_clockwise(&live, cur) {
                Some(next) if next != id => {
                    successors.push(next);
                    cur = next;
                }
                _ => break,
            }
        }
        if successors.is_empty() {
            successors.push(id); // alone on the ring
        }
        let predecessor = live
            .range(..id)
            .next_back()
            .or_else(|| live.iter().next_back())
            .copied();
        let mut fingers = Vec::new();
        for i in 0..160 {
            if let Some(f) = successor_in(&live, id.add_pow2(i)) {
                if f != id && fingers.last() != Some(&f) {
                    fingers.push(f);
                }
            }
        }
        let node = world.node_mut(id).expect("live node has state");
        if node.successors != successors
            || node.predecessor != predecessor
            || node.fingers != fingers
        {
            node.successors = successors;
            node.predecessor = predecessor;
            node.fingers = fingers;
            changed = true;
        }
    }
    changed
}

/// Routes a lookup for `k` from `from` using only per-node views, counting
/// one hop per traversed node. At quiescence the result always equals the
/// successor-rule answer.
pub fn route(world: &World, from: Key, k: Key) -> Result<(Key, u64)> {
    if !world.is_live(from) {
        return Err(Error::NodeNotLive(from));
    }
    let mut cur = from;
    let mut hops = 0u64;
    let limit = 2 * world.live.len() as u64 + 170;
    loop {
        if hops > limit {
            return Err(Error::DeliveryFailure(cur));
        }
        let view = world.node(cur)?;
        let succ = view
            .successors
            .iter()
            .copied()
            .find(|s| world.is_live(*s))
            .or_else(|| view.fingers.iter().copied().find(|f| world.is_live(*f)));
        let succ = match succ {
            Some(s) => s,
            None => {
                if world.live.len() == 1 {
                    return Ok((cur, hops));
                }
                return Err(Error::DeliveryFailure(cur));
            }
        };
        if succ == cur {
            return Ok((cur, hops));
        }
        if in_ring(k, cur, succ) {
            return Ok((succ, hops + 1));
        }
        // closest preceding live node of k among fingers and successors
        let mut best: Option<Key> = None;
        for cand in view
            .fingers
            .iter()
            .chain(view.successors.iter())
            .copied()
            .filter(|c| *c != cur && world.is_live(*c))
        {
            if in_ring(cand, cur, k) && cand != k {
                best = match best {
                    None => Some(cand),
                    Some(b) if in_ring(cand, b, k) => Some(cand),
                    keep => keep,
                };
            }
        }
        cur = best.unwrap_or(succ);
        hops += 1;
    }
}

/// Decentralized object location: returns a handle to the service object of
/// the given category on the node responsible for `k`.
pub fn dol(world: &mut World, from: Key, k: Key, aid: Aid) -> Result<ServiceRef> {
    if world.live.is_empty() {
        return Err(Error::EmptyRing);
    }
    let (node, hops) = route(world, from, k)?;
    world.record_dol(hops);
    Ok(ServiceRef { node, aid })
}

/// Adds a node to the ring. A new index draws a fresh identifier from the
/// simulation RNG; an existing index re-joins with its original identifier
/// and whatever durable state it retained (crash-stop semantics).
pub fn join(world: &mut World, idx: usize) -> Result<Key> {
    if idx > world.node_ids.len() {
        return Err(Error::UnknownNode(idx));
    }
    let rejoin = idx < world.node_ids.len();
    let id = if rejoin {
        let id = world.node_ids[idx];
        if world.is_live(id) {
            return Err(Error::DuplicateNode(id));
        }
        world.incarnations[idx] += 1;
        id
    } else {
        let id = world.new_node_id();
        world.node_ids.push(id);
        world.incarnations.push(0);
        id
    };
    let before = world.live.clone();
    world.boot_node(idx);

    // Bootstrap the joiner's view through an existing node's (pre-join) view.
    if let Some(bootstrap) = before.iter().next().copied() {
        let (old_succ, _) = route(world, bootstrap, id)?;
        let succ_view = world.node(old_succ)?;
        let mut successors = vec![old_succ];
        successors.extend(succ_view.successors.iter().copied().filter(|s| *s != id));
        successors.truncate(world.cfg.successor_len());
        let predecessor = succ_view.predecessor;
        let node = world.node_mut(id)?;
        node.successors = successors;
        node.predecessor = predecessor;
    } else {
        world.node_mut(id)?.successors = vec![id];
    }

    deliver_upcalls(world, TopologyChange::Join, id, &before);
    Ok(id)
}

/// Crash-stop failure: volatile state destroyed, durable state retained but
/// unreachable while the node is down.
pub fn fail(world: &mut World, idx: usize) -> Result<()> {
    let id = *world.node_ids.get(idx).ok_or(Error::UnknownNode(idx))?;
    fail_by_id(world, id)
}

pub fn fail_by_id(world: &mut World, id: Key) -> Result<()> {
    if !world.is_live(id) {
        return Err(Error::NodeNotLive(id));
    }
    if world.live.len() == 1 {
        return Err(Error::LastNode);
    }
    let before = world.live.clone();
    world.live.remove(&id);
    world.nodes.remove(&id);
    deliver_upcalls(world, TopologyChange::Fail, id, &before);
    Ok(())
}

/// Disk failure: the node crashes (if live) and its durable state is gone.
pub fn disk_wipe(world: &mut World, idx: usize) -> Result<()> {
    let id = *world.node_ids.get(idx).ok_or(Error::UnknownNode(idx))?;
    if world.is_live(id) {
        fail_by_id(world, id)?;
    }
    world.wipe_durable(id)
}

/// Computes which live nodes' storage obligations were touched by a
/// membership change and enqueues the up-call on each, exactly once.
///
/// The affected set is the union of the nodes whose responsibility interval
/// changed and, for every stored key whose replica target set changed, the
/// surviving old targets plus all new targets.
pub fn deliver_upcalls(world: &mut World, kind: TopologyChange, subject: Key, before: &BTreeSet<Key>) {
    let after = world.live.clone();
    if after.is_empty() {
        return;
    }
    let r = world.cfg.replication;
    let mut affected: BTreeSet<Key> = BTreeSet::new();

    match kind {
        TopologyChange::Join => {
            affected.insert(subject);
            if let Some(succ) = next_live_clockwise(&after, subject) {
                affected.insert(succ);
            }
        }
        TopologyChange::Fail => {
            if let Some(heir) = successor_in(&after, subject) {
                affected.insert(heir);
            }
        }
    }

    let mut stored_keys: BTreeSet<Key> = BTreeSet::new();
    for id in after.iter() {
        for (_, key) in world.durable_of(*id).keys() {
            stored_keys.insert(*key);
        }
    }
    for k in stored_keys {
        let old_targets = targets_in(before, k, r);
        let new_targets = targets_in(&after, k, r);
        if old_targets != new_targets {
            for t in new_targets {
                affected.insert(t);
            }
            for t in old_targets {
                if after.contains(&t) {
                    affected.insert(t);
                }
            }
        }
    }

    for m in affected {
        if !after.contains(&m) {
            continue;
        }
        let interval = responsibility_interval(world, m);
        let event = TopologyEvent {
            kind,
            subject,
            new_responsibility: interval,
        };
        if let Ok(node) = world.node_mut(m) {
            node.pending_events.push(event);
        }
    }
}

/// Runs stabilization rounds (view refresh, data repair, directory purge)
/// until none makes progress. Returns the number of rounds taken.
pub fn stabilize(world: &mut World) -> u64 {
    let mut rounds = 0;
    loop {
        rounds += 1;
        assert!(rounds < 1000, "stabilization failed to reach a fixpoint");
        let views_changed = refresh_all_views(world);
        let repair_actions = crate::store::run_repairs(world);
        let purged = crate::directories::purge_stale_instances(world);
        if !views_changed && repair_actions == 0 && purged == 0 {
            return rounds;
        }
    }
}

#[cfg(test)]
pub(crate) fn join_with_id(world: &mut World, id: Key) -> Result<()> {
    if world.is_live(id) {
        return Err(Error::DuplicateNode(id));
    }
    let before = world.live.clone();
    let idx = match world.index_of(id) {
        Some(idx) => {
            world.incarnations[idx] += 1;
            idx
        }
        None => {
            world.node_ids.push(id);
            world.incarnations.push(0);
            world.node_ids.len() - 1
        }
    };
    world.boot_node(idx);
    refresh_all_views(world);
    deliver_upcalls(world, TopologyChange::Join, id, &before);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(v: u64) -> Key {
        Key::from_u64(v)
    }

    fn toy_world(ids: &[u64]) -> World {
        let mut world = World::new(SimConfig {
            initial_nodes: 0,
            ..SimConfig::default()
        });
        for id in ids {
            join_with_id(&mut world, k(*id)).unwrap();
        }
        stabilize(&mut world);
        world
    }

    /// Linear-scan successor oracle over a sorted id list.
    fn oracle(ids: &[Key], key: Key) -> Key {
        let mut sorted = ids.to_vec();
        sorted.sort();
        *sorted
            .iter()
            .find(|id| **id >= key)
            .unwrap_or(&sorted[0])
    }

    #[test]
    fn single_node_owns_the_entire_space() {
        let world = toy_world(&[100]);
        for key in [0u64, 50, 100, 101, u64::MAX] {
            assert_eq!(responsible_node(&world, k(key)).unwrap(), k(100));
        }
    }

    #[test]
    fn responsible_node_matches_linear_scan_on_toy_ring() {
        let world = toy_world(&[10, 20, 30]);
        assert_eq!(responsible_node(&world, k(15)).unwrap(), k(20));
        assert_eq!(responsible_node(&world, k(20)).unwrap(), k(20));
        assert_eq!(responsible_node(&world, k(31)).unwrap(), k(10));
        assert_eq!(responsible_node(&world, k(5)).unwrap(), k(10));
    }

    #[test]
    fn join_shrinks_the_successor_interval() {
        let mut world = toy_world(&[10, 20, 30]);
        join_with_id(&mut world, k(25)).unwrap();
        stabilize(&mut world);
        assert_eq!(responsibility_interval(&world, k(30)), (k(25), k(30)));
        assert_eq!(responsibility_interval(&world, k(25)), (k(20), k(25)));
        assert_eq!(responsible_node(&world, k(22)).unwrap(), k(25));
        assert_eq!(responsible_node(&world, k(27)).unwrap(), k(30));
    }

    #[test]
    fn fail_merges_the_interval_into_the_successor() {
        let mut world = toy_world(&[10, 20, 30]);
        let idx = world.index_of(k(20)).unwrap();
        fail(&mut world, idx).unwrap();
        stabilize(&mut world);
        assert_eq!(responsibility_interval(&world, k(30)), (k(10), k(30)));
        assert_eq!(responsible_node(&world, k(15)).unwrap(), k(30));
    }

    #[test]
    fn fail_then_rejoin_restores_responsibility() {
        let mut world = toy_world(&[10, 20, 30]);
        let idx = world.index_of(k(20)).unwrap();
        fail(&mut world, idx).unwrap();
        stabilize(&mut world);
        join(&mut world, idx).unwrap();
        stabilize(&mut world);
        assert_eq!(responsible_node(&world, k(15)).unwrap(), k(20));
        assert_eq!(world.incarnations[idx], 1);
    }

    #[test]
    fn fail_all_but_one_leaves_a_full_ring_owner() {
        let mut world = toy_world(&[10, 20, 30]);
        let idx10 = world.index_of(k(10)).unwrap();
        let idx30 = world.index_of(k(30)).unwrap();
        fail(&mut world, idx10).unwrap();
        fail(&mut world, idx30).unwrap();
        stabilize(&mut world);
        for key in [0u64, 15, 20, 25, 255] {
            assert_eq!(responsible_node(&world, k(key)).unwrap(), k(20));
        }
        let idx20 = world.index_of(k(20)).unwrap();
        assert_eq!(fail(&mut world, idx20), Err(Error::LastNode));
    }

    #[test]
    fn duplicate_join_is_rejected() {
        let mut world = toy_world(&[10]);
        assert_eq!(join_with_id(&mut world, k(10)), Err(Error::DuplicateNode(k(10))));
    }

    #[test]
    fn responsibility_intervals_partition_the_ring_after_random_joins() {
        let mut world = World::new(SimConfig {
            initial_nodes: 1,
            ..SimConfig::default()
        });
        for idx in 1..50 {
            join(&mut world, idx).unwrap();
        }
        stabilize(&mut world);
        // Walking (pred, id] intervals around the sorted ring must cover it
        // exactly: each node's pred is the previous live node.
        let live = world.live_sorted();
        assert_eq!(live.len(), 50);
        for (i, id) in live.iter().enumerate() {
            let (lo, hi) = responsibility_interval(&world, *id);
            assert_eq!(hi, *id);
            let expected_pred = if i == 0 { live[live.len() - 1] } else { live[i - 1] };
            assert_eq!(lo, expected_pred);
        }
    }

    #[test]
    fn routed_lookup_matches_oracle_under_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut world = World::new(SimConfig {
            seed: 3,
            initial_nodes: 24,
            ..SimConfig::default()
        });
        stabilize(&mut world);
        let live = world.live_sorted();
        for _ in 0..2000 {
            let key = Key::random(&mut rng);
            let from = live[(rng.next_u32() as usize) % live.len()];
            let (found, _) = route(&world, from, key).unwrap();
            assert_eq!(found, oracle(&live, key));
        }
    }

    #[test]
    fn dol_returns_services_for_every_category_on_the_same_node() {
        let mut world = World::new(SimConfig {
            seed: 5,
            initial_nodes: 8,
            ..SimConfig::default()
        });
        stabilize(&mut world);
        let from = world.live_sorted()[0];
        let key = Key::digest(b"somewhere");
        let nodes: BTreeSet<Key> = Aid::ALL
            .iter()
            .map(|aid| dol(&mut world, from, key, *aid).unwrap().node)
            .collect();
        assert_eq!(nodes.len(), 1);
        assert!(nodes.contains(&responsible_node(&world, key).unwrap()));
    }

    #[test]
    fn hop_count_stays_within_log_bound_on_quiescent_rings() {
        for n in [4usize, 16, 64] {
            let mut world = World::new(SimConfig {
                seed: n as u64,
                initial_nodes: n,
                ..SimConfig::default()
            });
            stabilize(&mut world);
            let bound = (n as f64).log2().ceil() as u64 + world.cfg.successor_len() as u64;
            let live = world.live_sorted();
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            for _ in 0..500 {
                let key = Key::random(&mut rng);
                let from = live[(rng.next_u32() as usize) % live.len()];
                let (found, hops) = route(&world, from, key).unwrap();
                assert_eq!(found, oracle(&live, key));
                assert!(hops <= bound, "{hops} hops exceeds bound {bound} at n={n}");
            }
        }
    }

    #[test]
    fn upcalls_reach_the_placement_diff_after_a_failure() {
        let mut world = toy_world(&[10, 20, 30, 40, 50]);
        // place an entry homed at 20 with replicas on 30 and 40
        let key = k(15);
        let targets = targets_in(&world.live, key, 3);
        for target in targets {
            world.durable_mut(target).insert(
                (Aid::DataStore.tag(), key),
                crate::sim::DurableEntry::Value { data: vec![1], stamp: 1 },
            );
        }
        for id in world.live_sorted() {
            world.node_mut(id).unwrap().pending_events.clear();
        }
        let idx = world.index_of(k(20)).unwrap();
        fail(&mut world, idx).unwrap();
        // new targets are {30, 40, 50}: 50 gains, 30/40 survive, 10 stays out
        let pending: Vec<(u64, usize)> = world
            .live_sorted()
            .iter()
            .map(|id| {
                let n = world.node(*id).unwrap();
                (u64::from_be_bytes(id.as_bytes()[12..].try_into().unwrap()), n.pending_events.len())
            })
            .collect();
        let got: std::collections::BTreeMap<u64, usize> = pending.into_iter().collect();
        assert_eq!(got[&30], 1, "surviving replica is notified");
        assert_eq!(got[&40], 1, "surviving replica is notified");
        assert_eq!(got[&50], 1, "new target is notified");
        assert_eq!(got[&10], 0, "uninvolved node is not notified");
    }

    #[test]
    fn upcall_affected_set_is_empty_for_an_uninvolved_failure() {
        let mut world = toy_world(&[10, 20, 30, 40, 50]);
        // entry homed at 20, replicas 30, 40; node 50 is neither home nor replica
        let key = k(15);
        for target in targets_in(&world.live, key, 3) {
            world.durable_mut(target).insert(
                (Aid::DataStore.tag(), key),
                crate::sim::DurableEntry::Value { data: vec![1], stamp: 1 },
            );
        }
        for id in world.live_sorted() {
            world.node_mut(id).unwrap().pending_events.clear();
        }
        let idx50 = world.index_of(k(50)).unwrap();
        fail(&mut world, idx50).unwrap();
        // placement of the stored key did not change; only the heir of the
        // empty interval hears about it, and repairing moves no data.
        let with_events: Vec<Key> = world
            .live_sorted()
            .into_iter()
            .filter(|id| !world.node(*id).unwrap().pending_events.is_empty())
            .collect();
        assert_eq!(with_events, vec![k(10)]); // 10 inherits (50, 10], no data there
        let moved = crate::store::run_repairs(&mut world);
        assert_eq!(moved, 0);
    }
}
