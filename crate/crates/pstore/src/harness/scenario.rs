//! Scenario file model and parser.

use crate::error::{Error, Result};
use crate::object_model::{ClassDescriptor, FieldDef, FieldKind};
use crate::policy::PolicyParams;
use crate::sim::StoreStrategy;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DurabilitySpec {
    Mem,
    /// Durable directory; the path comes from the command line.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicyScopeDecl {
    Class(String),
    /// Scoped to the object later associated with this root name.
    Object(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyDecl {
    pub policy_name: String,
    pub scope: PolicyScopeDecl,
    pub params: PolicyParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueLit {
    Int(i64),
    Str(String),
    RefLabel(String),
    Null,
}

impl std::fmt::Display for ValueLit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValueLit::Int(v) => write!(f, "{v}"),
            ValueLit::Str(s) => write!(f, "{s:?}"),
            ValueLit::RefLabel(l) => write!(f, "ref:{l}"),
            ValueLit::Null => write!(f, "null"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leg {
    Debit,
    Credit,
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AssertExpr {
    Field {
        name: String,
        path: Vec<String>,
        expected: ValueLit,
        on: Option<usize>,
    },
    Sum {
        name: String,
        class_id: String,
        field: String,
        expected: i64,
        on: Option<usize>,
    },
    Replicas {
        name: String,
        expected: usize,
    },
    PlacementOk,
    Resolution {
        name: String,
        expected: String,
        on: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Create {
        label: String,
        class_id: String,
        on: Option<usize>,
        fields: Vec<(String, ValueLit)>,
    },
    Set {
        label: String,
        field: String,
        value: ValueLit,
        on: Option<usize>,
        txn: Option<u64>,
    },
    Transfer {
        from: String,
        to: String,
        amount: i64,
        field: String,
        txn: Option<u64>,
        leg: Leg,
        on: Option<usize>,
    },
    Associate {
        name: String,
        label: String,
        on: Option<usize>,
    },
    Commit {
        name: String,
        on: Option<usize>,
        txn: Option<u64>,
        crash_after_step: Option<u32>,
    },
    Get {
        name: String,
        on: Option<usize>,
    },
    Read {
        name: String,
        path: Vec<String>,
        on: Option<usize>,
    },
    Fail {
        node: usize,
    },
    Join {
        node: usize,
    },
    DiskWipe {
        node: usize,
    },
    Stabilize,
    Assert(AssertExpr),
}

impl Action {
    /// Short stable rendering used in reports.
    pub fn describe(&self) -> String {
        match self {
            Action::Create { label, class_id, .. } => format!("CREATE {label} {class_id}"),
            Action::Set { label, field, value, .. } => format!("SET {label} {field} {value}"),
            Action::Transfer { from, to, amount, leg, .. } => {
                let leg = match leg {
                    Leg::Debit => " leg=debit",
                    Leg::Credit => " leg=credit",
                    Leg::Both => "",
                };
                format!("TRANSFER {from} {to} {amount}{leg}")
            }
            Action::Associate { name, label, .. } => format!("ASSOCIATE {name} {label}"),
            Action::Commit { name, crash_after_step, .. } => match crash_after_step {
                Some(k) => format!("COMMIT {name} crashAfterStep={k}"),
                None => format!("COMMIT {name}"),
            },
            Action::Get { name, .. } => format!("GET {name}"),
            Action::Read { name, path, .. } => format!("READ {name} {}", path.join(".")),
            Action::Fail { node } => format!("FAIL {node}"),
            Action::Join { node } => format!("JOIN {node}"),
            Action::DiskWipe { node } => format!("DISK_WIPE {node}"),
            Action::Stabilize => "STABILIZE".to_string(),
            Action::Assert(expr) => match expr {
                AssertExpr::Field { name, path, expected, .. } => {
                    format!("ASSERT field {name} {} == {expected}", path.join("."))
                }
                AssertExpr::Sum { name, class_id, field, expected, .. } => {
                    format!("ASSERT sum {name} {class_id} {field} == {expected}")
                }
                AssertExpr::Replicas { name, expected } => {
                    format!("ASSERT replicas {name} == {expected}")
                }
                AssertExpr::PlacementOk => "ASSERT placement == ok".to_string(),
                AssertExpr::Resolution { name, expected, .. } => {
                    format!("ASSERT resolution {name} == {expected}")
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledEvent {
    pub tick: u64,
    pub line: usize,
    pub action: Action,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub nodes: usize,
    pub replication: usize,
    pub durability: DurabilitySpec,
    pub strategy: StoreStrategy,
    pub classes: BTreeMap<String, ClassDescriptor>,
    pub policies: Vec<PolicyDecl>,
    pub schedule: Vec<ScheduledEvent>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Splits a line into tokens. Double quotes group spaces into one token and
/// may appear after `=`; an unquoted `#` starts a comment.
fn tokenize(line: &str, lineno: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_quote = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                in_quote = !in_quote;
                cur.push(c);
            }
            '\\' if in_quote => match chars.next() {
                Some(e @ ('"' | '\\')) => cur.push(e),
                _ => return Err(parse_err(lineno, "bad escape in string")),
            },
            '#' if !in_quote => break,
            c if c.is_whitespace() && !in_quote => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if in_quote {
        return Err(parse_err(lineno, "unterminated string"));
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    Ok(tokens)
}

fn parse_value(token: &str, lineno: usize) -> Result<ValueLit> {
    if token == "null" {
        return Ok(ValueLit::Null);
    }
    if let Some(label) = token.strip_prefix("ref:") {
        return Ok(ValueLit::RefLabel(label.to_string()));
    }
    if token.starts_with('"') {
        if token.len() < 2 || !token.ends_with('"') {
            return Err(parse_err(lineno, format!("bad string literal {token}")));
        }
        return Ok(ValueLit::Str(token[1..token.len() - 1].to_string()));
    }
    token
        .parse::<i64>()
        .map(ValueLit::Int)
        .map_err(|_| parse_err(lineno, format!("bad value literal {token:?}")))
}

/// Splits the tokens into leading positional arguments and trailing `k=v`
/// options (any token containing `=` that is not a quoted value).
struct Args<'a> {
    positional: Vec<&'a str>,
    options: BTreeMap<&'a str, &'a str>,
}

fn split_args<'a>(tokens: &'a [String], lineno: usize) -> Result<Args<'a>> {
    let mut positional = Vec::new();
    let mut options = BTreeMap::new();
    for token in tokens {
        match token.split_once('=') {
            Some((k, v)) if !k.is_empty() && !k.starts_with('"') && k != "=" => {
                if options.insert(k, v).is_some() {
                    return Err(parse_err(lineno, format!("duplicate option {k}")));
                }
            }
            _ => positional.push(token.as_str()),
        }
    }
    Ok(Args { positional, options })
}

fn opt_usize(args: &Args, key: &str, lineno: usize) -> Result<Option<usize>> {
    args.options
        .get(key)
        .map(|v| v.parse().map_err(|_| parse_err(lineno, format!("bad {key}"))))
        .transpose()
}

fn opt_u64(args: &Args, key: &str, lineno: usize) -> Result<Option<u64>> {
    args.options
        .get(key)
        .map(|v| v.parse().map_err(|_| parse_err(lineno, format!("bad {key}"))))
        .transpose()
}

/// Parses scenario text. `name` is recorded in reports, so callers pass a
/// stable identifier (builtin name or file stem), never a full path.
pub fn parse_scenario(name: &str, text: &str) -> Result<Scenario> {
    let mut scenario = Scenario {
        name: name.to_string(),
        seed: 0,
        nodes: 1,
        replication: 3,
        durability: DurabilitySpec::Mem,
        strategy: StoreStrategy::CoLocated,
        classes: BTreeMap::new(),
        policies: Vec::new(),
        schedule: Vec::new(),
    };
    let mut last_tick: Option<u64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let tokens = tokenize(raw, lineno)?;
        if tokens.is_empty() {
            continue;
        }
        let head = tokens[0].as_str();

        if let Some(rest) = head.strip_prefix('@') {
            let tick: u64 = rest
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad tick {head:?}")))?;
            if let Some(prev) = last_tick {
                if tick <= prev {
                    return Err(parse_err(lineno, format!("tick {tick} not after {prev}")));
                }
            }
            last_tick = Some(tick);
            if tokens.len() < 2 {
                return Err(parse_err(lineno, "missing action"));
            }
            let action = parse_action(&tokens[1], &tokens[2..], lineno, &scenario)?;
            scenario.schedule.push(ScheduledEvent { tick, line: lineno, action });
            continue;
        }

        match head {
            "class" => {
                if tokens.len() < 2 {
                    return Err(parse_err(lineno, "class needs a name"));
                }
                let class_id = tokens[1].clone();
                let mut fields = Vec::new();
                for spec in &tokens[2..] {
                    let (fname, fkind) = spec
                        .split_once(':')
                        .ok_or_else(|| parse_err(lineno, format!("bad field spec {spec:?}")))?;
                    let kind = FieldKind::parse(fkind)
                        .ok_or_else(|| parse_err(lineno, format!("unknown field kind {fkind:?}")))?;
                    fields.push(FieldDef { name: fname.to_string(), kind });
                }
                if scenario
                    .classes
                    .insert(class_id.clone(), ClassDescriptor { class_id: class_id.clone(), fields })
                    .is_some()
                {
                    return Err(parse_err(lineno, format!("duplicate class {class_id}")));
                }
            }
            "policy" => {
                if tokens.len() < 3 {
                    return Err(parse_err(lineno, "policy needs a name and a scope"));
                }
                let policy_name = tokens[1].clone();
                let mut scope = None;
                let mut params = PolicyParams::default();
                for token in &tokens[2..] {
                    if let Some(s) = token.strip_prefix("scope=") {
                        scope = Some(if let Some(class) = s.strip_prefix("class:") {
                            PolicyScopeDecl::Class(class.to_string())
                        } else if let Some(obj) = s.strip_prefix("object:") {
                            PolicyScopeDecl::Object(obj.to_string())
                        } else {
                            return Err(parse_err(lineno, format!("bad scope {s:?}")));
                        });
                    } else if let Some(p) = token.strip_prefix("params") {
                        let spec = p.strip_prefix('=').unwrap_or(p);
                        params = PolicyParams::parse(spec)
                            .map_err(|e| parse_err(lineno, e.to_string()))?;
                    } else {
                        return Err(parse_err(lineno, format!("unexpected token {token:?}")));
                    }
                }
                let scope = scope.ok_or_else(|| parse_err(lineno, "policy needs scope="))?;
                if let PolicyScopeDecl::Class(class) = &scope {
                    if !scenario.classes.contains_key(class) {
                        return Err(parse_err(lineno, format!("unknown class {class}")));
                    }
                }
                scenario.policies.push(PolicyDecl { policy_name, scope, params });
            }
            _ if head.contains('=') => {
                let (key, value) = head.split_once('=').unwrap();
                match key {
                    "seed" => {
                        scenario.seed = value
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad seed"))?;
                    }
                    "nodes" => {
                        scenario.nodes = value
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad nodes"))?;
                        if scenario.nodes == 0 {
                            return Err(parse_err(lineno, "nodes must be at least 1"));
                        }
                    }
                    "replication" => {
                        scenario.replication = value
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad replication"))?;
                        if scenario.replication == 0 {
                            return Err(parse_err(lineno, "replication must be at least 1"));
                        }
                    }
                    "durability" => {
                        scenario.durability = match value {
                            "mem" => DurabilitySpec::Mem,
                            "dir" => DurabilitySpec::Dir,
                            other => {
                                return Err(parse_err(lineno, format!("bad durability {other:?}")))
                            }
                        };
                    }
                    "datastore" => {
                        scenario.strategy = match value {
                            "colocated" => StoreStrategy::CoLocated,
                            "location" => StoreStrategy::LocationRecording,
                            other => {
                                return Err(parse_err(lineno, format!("bad datastore {other:?}")))
                            }
                        };
                    }
                    other => return Err(parse_err(lineno, format!("unknown header {other:?}"))),
                }
            }
            other => return Err(parse_err(lineno, format!("unrecognized line {other:?}"))),
        }
    }
    Ok(scenario)
}

fn parse_action(verb: &str, rest: &[String], lineno: usize, scenario: &Scenario) -> Result<Action> {
    let args = split_args(rest, lineno)?;
    let on = opt_usize(&args, "on", lineno)?;
    let txn = opt_u64(&args, "txn", lineno)?;
    let need = |n: usize| -> Result<()> {
        if args.positional.len() != n {
            return Err(parse_err(
                lineno,
                format!("{verb} expects {n} positional arguments"),
            ));
        }
        Ok(())
    };
    match verb {
        "CREATE" => {
            if args.positional.len() != 2 {
                return Err(parse_err(lineno, "CREATE expects <label> <class>"));
            }
            let label = args.positional[0].to_string();
            let class_id = args.positional[1].to_string();
            let class = scenario
                .classes
                .get(&class_id)
                .ok_or_else(|| parse_err(lineno, format!("unknown class {class_id}")))?;
            let mut fields = Vec::new();
            for (k, v) in &args.options {
                if *k == "on" || *k == "txn" {
                    continue;
                }
                if class.field_index(k).is_none() {
                    return Err(parse_err(lineno, format!("class {class_id} has no field {k}")));
                }
                fields.push((k.to_string(), parse_value(v, lineno)?));
            }
            Ok(Action::Create { label, class_id, on, fields })
        }
        "SET" => {
            need(3)?;
            Ok(Action::Set {
                label: args.positional[0].to_string(),
                field: args.positional[1].to_string(),
                value: parse_value(args.positional[2], lineno)?,
                on,
                txn,
            })
        }
        "TRANSFER" => {
            need(3)?;
            let amount = args.positional[2]
                .parse()
                .map_err(|_| parse_err(lineno, "bad amount"))?;
            let leg = match args.options.get("leg").copied() {
                None | Some("both") => Leg::Both,
                Some("debit") => Leg::Debit,
                Some("credit") => Leg::Credit,
                Some(other) => return Err(parse_err(lineno, format!("bad leg {other:?}"))),
            };
            let field = args
                .options
                .get("field")
                .map(|s| s.to_string())
                .unwrap_or_else(|| "balance".to_string());
            Ok(Action::Transfer {
                from: args.positional[0].to_string(),
                to: args.positional[1].to_string(),
                amount,
                field,
                txn,
                leg,
                on,
            })
        }
        "ASSOCIATE" => {
            need(2)?;
            Ok(Action::Associate {
                name: args.positional[0].to_string(),
                label: args.positional[1].to_string(),
                on,
            })
        }
        "COMMIT" => {
            need(1)?;
            let crash_after_step = args
                .options
                .get("crashAfterStep")
                .map(|v| v.parse().map_err(|_| parse_err(lineno, "bad crashAfterStep")))
                .transpose()?;
            Ok(Action::Commit {
                name: args.positional[0].to_string(),
                on,
                txn,
                crash_after_step,
            })
        }
        "GET" => {
            need(1)?;
            Ok(Action::Get { name: args.positional[0].to_string(), on })
        }
        "READ" => {
            need(2)?;
            Ok(Action::Read {
                name: args.positional[0].to_string(),
                path: args.positional[1].split('.').map(str::to_string).collect(),
                on,
            })
        }
        "FAIL" | "JOIN" | "DISK_WIPE" => {
            need(1)?;
            let node = args.positional[0]
                .parse()
                .map_err(|_| parse_err(lineno, "bad node index"))?;
            Ok(match verb {
                "FAIL" => Action::Fail { node },
                "JOIN" => Action::Join { node },
                _ => Action::DiskWipe { node },
            })
        }
        "STABILIZE" => {
            need(0)?;
            Ok(Action::Stabilize)
        }
        "ASSERT" => parse_assert(&args, lineno).map(Action::Assert),
        other => Err(parse_err(lineno, format!("unknown action {other:?}"))),
    }
}

fn parse_assert(args: &Args, lineno: usize) -> Result<AssertExpr> {
    let pos = &args.positional;
    let on = opt_usize(args, "on", lineno)?;
    let eq_at = |i: usize| -> Result<()> {
        if pos.get(i).copied() != Some("==") {
            return Err(parse_err(lineno, "ASSERT needs =="));
        }
        Ok(())
    };
    match pos.first().copied() {
        Some("field") => {
            if pos.len() != 5 {
                return Err(parse_err(lineno, "ASSERT field <name> <path> == <value>"));
            }
            eq_at(3)?;
            Ok(AssertExpr::Field {
                name: pos[1].to_string(),
                path: pos[2].split('.').map(str::to_string).collect(),
                expected: parse_value(pos[4], lineno)?,
                on,
            })
        }
        Some("sum") => {
            if pos.len() != 6 {
                return Err(parse_err(lineno, "ASSERT sum <name> <class> <field> == <int>"));
            }
            eq_at(4)?;
            Ok(AssertExpr::Sum {
                name: pos[1].to_string(),
                class_id: pos[2].to_string(),
                field: pos[3].to_string(),
                expected: pos[5].parse().map_err(|_| parse_err(lineno, "bad sum"))?,
                on,
            })
        }
        Some("replicas") => {
            if pos.len() != 4 {
                return Err(parse_err(lineno, "ASSERT replicas <name> == <int>"));
            }
            eq_at(2)?;
            Ok(AssertExpr::Replicas {
                name: pos[1].to_string(),
                expected: pos[3].parse().map_err(|_| parse_err(lineno, "bad count"))?,
            })
        }
        Some("placement") => {
            if pos.len() != 3 || pos[1] != "==" || pos[2] != "ok" {
                return Err(parse_err(lineno, "ASSERT placement == ok"));
            }
            Ok(AssertExpr::PlacementOk)
        }
        Some("resolution") => {
            if pos.len() != 4 {
                return Err(parse_err(lineno, "ASSERT resolution <name> == <kind>"));
            }
            eq_at(2)?;
            let expected = pos[3].to_string();
            if !["LOCAL", "REMOTE", "REINSTANTIATED"].contains(&expected.as_str()) {
                return Err(parse_err(lineno, format!("bad resolution kind {expected:?}")));
            }
            Ok(AssertExpr::Resolution { name: pos[1].to_string(), expected, on })
        }
        other => Err(parse_err(lineno, format!("unknown assert kind {other:?}"))),
    }
}
