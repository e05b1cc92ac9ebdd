//! Resilience policy framework: a registry of named behaviors, the system
//! default, a no-replication policy, a volatile-part policy, and an
//! optimistic transactional policy.
//!
//! Policies are named behaviors compiled into every node's registry; the
//! policy store persists only (name, params) associations, never code. A
//! behavior can override any of the three hooks — reify, instantiate,
//! makeResilient — and leaves the rest to the defaults.

use crate::error::{Error, Result};
use crate::keyspace::{Guid, Key, Pid};
use crate::object_model::{ClassDescriptor, ObjectNode};
use crate::sim::World;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

pub type TxnId = u64;

/// Records which uncommitted transactions touched which objects since the
/// last successful commit. Lives on the node hosting the committed root, so
/// the conflict check is atomic within one event.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TxnLedger {
    per_object: BTreeMap<Guid, BTreeSet<TxnId>>,
}

impl TxnLedger {
    pub fn record(&mut self, guid: Guid, txn: TxnId) {
        self.per_object.entry(guid).or_default().insert(txn);
    }

    pub fn txns_of(&self, guid: Guid) -> BTreeSet<TxnId> {
        self.per_object.get(&guid).cloned().unwrap_or_default()
    }

    /// Clears the tracking for objects a successful commit just covered.
    pub fn clear_for(&mut self, guid: Guid) {
        self.per_object.remove(&guid);
    }

    pub fn is_empty(&self) -> bool {
        self.per_object.is_empty()
    }
}

/// String key-value parameters attached to a policy association, e.g.
/// `replicas=2` or `exclude=Cache;Metrics`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolicyParams(BTreeMap<String, String>);

impl PolicyParams {
    pub fn set(&mut self, key: String, value: String) {
        self.0.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    pub fn entries(&self) -> Vec<(&String, &String)> {
        self.0.iter().collect()
    }

    pub fn replicas(&self) -> Option<usize> {
        self.get("replicas").and_then(|v| v.parse().ok())
    }

    /// Classes excluded from persistence by the volatile-part policy,
    /// semicolon-separated in the `exclude` parameter.
    pub fn excluded_classes(&self) -> BTreeSet<String> {
        self.get("exclude")
            .map(|v| v.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    /// Parses `k=v,k=v` as found in scenario files.
    pub fn parse(text: &str) -> Result<PolicyParams> {
        let mut params = PolicyParams::default();
        for pair in text.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("bad policy param {pair:?}")))?;
            params.set(k.to_string(), v.to_string());
        }
        Ok(params)
    }
}

pub type ReifyHook = Rc<dyn Fn(&ObjectNode, &ClassDescriptor) -> Result<Vec<u8>>>;
pub type InstantiateHook =
    Rc<dyn Fn(&mut World, Key, Guid, Option<Guid>) -> Result<crate::directories::ObjectLocation>>;
pub type MakeResilientHook =
    Rc<dyn Fn(&mut World, Key, Guid, &PolicyParams, Option<TxnId>) -> Result<Pid>>;

/// A named resilience behavior. `None` hooks mean the system default.
pub struct PolicyBehavior {
    pub name: String,
    pub reify: Option<ReifyHook>,
    pub instantiate: Option<InstantiateHook>,
    pub make_resilient: Option<MakeResilientHook>,
}

impl PolicyBehavior {
    pub fn named(name: &str) -> PolicyBehavior {
        PolicyBehavior {
            name: name.to_string(),
            reify: None,
            instantiate: None,
            make_resilient: None,
        }
    }
}

pub type PolicyRegistry = BTreeMap<String, Rc<PolicyBehavior>>;

/// Registers a behavior under a new name, on every node at once (the
/// registry is identical everywhere by construction).
pub fn register_policy(world: &mut World, behavior: PolicyBehavior) -> Result<()> {
    if world.policies.contains_key(&behavior.name) {
        return Err(Error::DuplicatePolicy(behavior.name));
    }
    world.policies.insert(behavior.name.clone(), Rc::new(behavior));
    Ok(())
}

pub const DEFAULT_POLICY: &str = "default";
pub const NO_REPLICATION_POLICY: &str = "none";
pub const VOLATILE_PART_POLICY: &str = "volatile-part";
pub const OPTIMISTIC_TXN_POLICY: &str = "optimistic-txn";

/// The registry every node starts with.
pub fn builtin_registry() -> PolicyRegistry {
    let mut registry = PolicyRegistry::new();
    registry.insert(
        DEFAULT_POLICY.to_string(),
        Rc::new(PolicyBehavior::named(DEFAULT_POLICY)),
    );
    registry.insert(
        NO_REPLICATION_POLICY.to_string(),
        Rc::new(PolicyBehavior {
            name: NO_REPLICATION_POLICY.to_string(),
            reify: None,
            instantiate: None,
            make_resilient: Some(Rc::new(no_replication_make_resilient)),
        }),
    );
    registry.insert(
        VOLATILE_PART_POLICY.to_string(),
        Rc::new(PolicyBehavior {
            name: VOLATILE_PART_POLICY.to_string(),
            reify: None,
            instantiate: None,
            make_resilient: Some(Rc::new(volatile_part_make_resilient)),
        }),
    );
    registry.insert(
        OPTIMISTIC_TXN_POLICY.to_string(),
        Rc::new(PolicyBehavior {
            name: OPTIMISTIC_TXN_POLICY.to_string(),
            reify: None,
            instantiate: None,
            make_resilient: Some(Rc::new(optimistic_make_resilient)),
        }),
    );
    registry
}

/// Replication disabled: nothing is stored or published. The returned PID is
/// computed from the root's current state so callers still get a handle.
fn no_replication_make_resilient(
    world: &mut World,
    node: Key,
    root: Guid,
    _params: &PolicyParams,
    _txn: Option<TxnId>,
) -> Result<Pid> {
    let obj = crate::middleware::snapshot_object(world, node, root, Some(root))?;
    let class = world.class(&obj.class_id)?.clone();
    let data = crate::object_model::reify(&obj, &class)?;
    Ok(crate::keyspace::generate_pid(&data))
}

/// Skips objects of the excluded classes and everything reachable only
/// through them; the rest commits as under the default policy.
fn volatile_part_make_resilient(
    world: &mut World,
    node: Key,
    root: Guid,
    params: &PolicyParams,
    _txn: Option<TxnId>,
) -> Result<Pid> {
    let excluded = params.excluded_classes();
    let members =
        crate::middleware::collect_closure_snapshots(world, node, root, Some(&excluded))?;
    let store_set: BTreeSet<Guid> = members.iter().map(|(g, _)| *g).collect();
    crate::middleware::execute_commit(world, node, root, &members, &store_set, None, params)
}

/// Optimistic application-level transactions: commit only the objects the
/// committing transaction modified, and abort if any of them was also
/// modified by another uncommitted transaction. Untagged commits behave
/// like the default policy.
fn optimistic_make_resilient(
    world: &mut World,
    node: Key,
    root: Guid,
    params: &PolicyParams,
    txn: Option<TxnId>,
) -> Result<Pid> {
    let members = crate::middleware::collect_closure_snapshots(world, node, root, None)?;
    let all: BTreeSet<Guid> = members.iter().map(|(g, _)| *g).collect();
    let store_set = match txn {
        None => all,
        Some(t) => {
            let ledger = world.node(node)?.ledger.clone();
            let modified: BTreeSet<Guid> = all
                .iter()
                .copied()
                .filter(|g| ledger.txns_of(*g).contains(&t))
                .collect();
            if modified.iter().any(|g| ledger.txns_of(*g).len() >= 2) {
                return Err(Error::CommitAborted);
            }
            let prev = crate::directories::get_manifest(world, node, root).ok();
            let mut set = modified;
            for g in &all {
                let committed_before = prev.as_ref().and_then(|m| m.pid_of(*g)).is_some();
                let touched_by_others = ledger.txns_of(*g).iter().any(|x| *x != t);
                if !committed_before && !touched_by_others {
                    set.insert(*g);
                }
            }
            set
        }
    };
    crate::middleware::execute_commit(world, node, root, &members, &store_set, None, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    #[test]
    fn registry_round_trip_and_duplicate_rejection() {
        let mut world = World::new(SimConfig::default());
        assert!(world.policies.contains_key(DEFAULT_POLICY));
        assert!(world.policies.contains_key(NO_REPLICATION_POLICY));
        assert!(world.policies.contains_key(VOLATILE_PART_POLICY));
        assert!(world.policies.contains_key(OPTIMISTIC_TXN_POLICY));

        register_policy(&mut world, PolicyBehavior::named("custom")).unwrap();
        assert!(world.policies.contains_key("custom"));
        assert_eq!(
            register_policy(&mut world, PolicyBehavior::named("custom")),
            Err(Error::DuplicatePolicy("custom".into()))
        );
    }

    #[test]
    fn ledger_tracks_and_clears_per_object() {
        let mut ledger = TxnLedger::default();
        let g1 = Guid(Key::from_u64(1));
        let g2 = Guid(Key::from_u64(2));
        ledger.record(g1, 10);
        ledger.record(g1, 11);
        ledger.record(g2, 10);
        assert_eq!(ledger.txns_of(g1).len(), 2);
        ledger.clear_for(g1);
        assert!(ledger.txns_of(g1).is_empty());
        assert_eq!(ledger.txns_of(g2).len(), 1);
    }

    #[test]
    fn params_parse_and_accessors() {
        let params = PolicyParams::parse("replicas=2,exclude=Cache;Scratch").unwrap();
        assert_eq!(params.replicas(), Some(2));
        assert_eq!(
            params.excluded_classes(),
            ["Cache", "Scratch"].iter().map(|s| s.to_string()).collect()
        );
        assert!(PolicyParams::parse("oops").is_err());
        assert_eq!(PolicyParams::parse("").unwrap(), PolicyParams::default());
    }
}
