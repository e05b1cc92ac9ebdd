//! The application-visible object graph: typed objects with scalar and
//! reference fields, a canonical byte encoding for content hashing, and
//! deterministic closure traversal.
//!
//! Objects never hold direct memory links to each other; reference fields
//! carry GUIDs. The canonical encoding is what gives every object state a
//! stable PID: class id as a 4-byte big-endian length plus UTF-8 bytes,
//! then the fields in schema order — ints as 8-byte big-endian two's
//! complement, strings as 4-byte big-endian length plus UTF-8, references
//! as one presence byte followed by the 20-byte GUID when present.

use crate::error::{Error, Result};
use crate::keyspace::{Guid, Key, KEY_BYTES};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FieldKind {
    Int,
    Str,
    Ref,
}

impl FieldKind {
    pub fn parse(s: &str) -> Option<FieldKind> {
        match s {
            "int" => Some(FieldKind::Int),
            "string" => Some(FieldKind::Str),
            "ref" => Some(FieldKind::Ref),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
}

/// Immutable schema for one class: an id plus an ordered field list.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClassDescriptor {
    pub class_id: String,
    pub fields: Vec<FieldDef>,
}

impl ClassDescriptor {
    pub fn new(class_id: impl Into<String>, fields: Vec<(&str, FieldKind)>) -> ClassDescriptor {
        ClassDescriptor {
            class_id: class_id.into(),
            fields: fields
                .into_iter()
                .map(|(name, kind)| FieldDef {
                    name: name.to_string(),
                    kind,
                })
                .collect(),
        }
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Value {
    Int(i64),
    Str(String),
    Ref(Option<Guid>),
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Int(_) => FieldKind::Int,
            Value::Str(_) => FieldKind::Str,
            Value::Ref(_) => FieldKind::Ref,
        }
    }

    fn default_for(kind: FieldKind) -> Value {
        match kind {
            FieldKind::Int => Value::Int(0),
            FieldKind::Str => Value::Str(String::new()),
            FieldKind::Ref => Value::Ref(None),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Ref(Some(g)) => write!(f, "ref:{g}"),
            Value::Ref(None) => write!(f, "null"),
        }
    }
}

/// One in-memory application object. The GUID is allocated lazily, when the
/// object first takes part in a global interaction.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ObjectNode {
    pub guid: Option<Guid>,
    pub class_id: String,
    pub values: Vec<Value>,
}

impl ObjectNode {
    pub fn new(class: &ClassDescriptor) -> ObjectNode {
        ObjectNode {
            guid: None,
            class_id: class.class_id.clone(),
            values: class
                .fields
                .iter()
                .map(|f| Value::default_for(f.kind))
                .collect(),
        }
    }

    pub fn get(&self, class: &ClassDescriptor, field: &str) -> Result<&Value> {
        let idx = class
            .field_index(field)
            .ok_or_else(|| Error::SchemaError(format!("unknown field {field}")))?;
        Ok(&self.values[idx])
    }

    pub fn set(&mut self, class: &ClassDescriptor, field: &str, value: Value) -> Result<()> {
        let idx = class
            .field_index(field)
            .ok_or_else(|| Error::SchemaError(format!("unknown field {field}")))?;
        if class.fields[idx].kind != value.kind() {
            return Err(Error::SchemaError(format!(
                "field {field} expects {:?}",
                class.fields[idx].kind
            )));
        }
        self.values[idx] = value;
        Ok(())
    }

    /// Present reference targets, in schema field order.
    pub fn refs(&self) -> Vec<Guid> {
        self.values
            .iter()
            .filter_map(|v| match v {
                Value::Ref(Some(g)) => Some(*g),
                _ => None,
            })
            .collect()
    }
}

/// Canonical serialization of an object's state. Pure; rejects nodes that do
/// not conform to the descriptor.
pub fn reify(obj: &ObjectNode, class: &ClassDescriptor) -> Result<Vec<u8>> {
    if obj.class_id != class.class_id {
        return Err(Error::EncodingError(format!(
            "object of class {} reified with descriptor {}",
            obj.class_id, class.class_id
        )));
    }
    if obj.values.len() != class.fields.len() {
        return Err(Error::EncodingError("field count does not match schema".into()));
    }
    let mut out = Vec::new();
    let id = class.class_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_be_bytes());
    out.extend_from_slice(id);
    for (def, value) in class.fields.iter().zip(&obj.values) {
        if def.kind != value.kind() {
            return Err(Error::EncodingError(format!(
                "field {} does not match schema kind",
                def.name
            )));
        }
        match value {
            Value::Int(v) => out.extend_from_slice(&v.to_be_bytes()),
            Value::Str(s) => {
                out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Ref(None) => out.push(0),
            Value::Ref(Some(g)) => {
                out.push(1);
                out.extend_from_slice(g.0.as_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::DecodeError("truncated data".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes canonical state bytes under the given schema. Reference fields
/// stay abstract: no child objects are loaded.
pub fn instantiate_object(data: &[u8], class: &ClassDescriptor) -> Result<ObjectNode> {
    let mut r = Reader { data, pos: 0 };
    let id_len = r.u32()? as usize;
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| Error::DecodeError("class id is not UTF-8".into()))?;
    if id != class.class_id {
        return Err(Error::DecodeError(format!(
            "data encodes class {id}, expected {}",
            class.class_id
        )));
    }
    let mut values = Vec::with_capacity(class.fields.len());
    for def in &class.fields {
        let value = match def.kind {
            FieldKind::Int => Value::Int(r.i64()?),
            FieldKind::Str => {
                let len = r.u32()? as usize;
                let s = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::DecodeError("string field is not UTF-8".into()))?;
                Value::Str(s.to_string())
            }
            FieldKind::Ref => match r.take(1)?[0] {
                0 => Value::Ref(None),
                1 => {
                    let raw: [u8; KEY_BYTES] = r.take(KEY_BYTES)?.try_into().unwrap();
                    Value::Ref(Some(Guid(Key::from_bytes(raw))))
                }
                b => return Err(Error::DecodeError(format!("bad presence byte {b}"))),
            },
        };
        values.push(value);
    }
    if r.pos != data.len() {
        return Err(Error::DecodeError("trailing bytes after last field".into()));
    }
    Ok(ObjectNode {
        guid: None,
        class_id: class.class_id.clone(),
        values,
    })
}

/// Snapshot record published atomically as the last step of a commit: the
/// PID of every object in the committed closure, keyed by GUID. Readers
/// treat only manifest-reachable versions as committed, which is what makes
/// closure reads all-or-nothing.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommitManifest {
    pub root: Guid,
    pub snapshot: std::collections::BTreeMap<Guid, crate::keyspace::Pid>,
}

impl CommitManifest {
    pub fn new(root: Guid) -> CommitManifest {
        CommitManifest {
            root,
            snapshot: Default::default(),
        }
    }

    pub fn pid_of(&self, guid: Guid) -> Option<crate::keyspace::Pid> {
        self.snapshot.get(&guid).copied()
    }

    /// Canonical bytes: root key, entry count, then (guid, pid) pairs in
    /// guid order. Equal manifests always encode to equal bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 40 * self.snapshot.len());
        out.extend_from_slice(self.root.0.as_bytes());
        out.extend_from_slice(&(self.snapshot.len() as u32).to_be_bytes());
        for (guid, pid) in &self.snapshot {
            out.extend_from_slice(guid.0.as_bytes());
            out.extend_from_slice(pid.0.as_bytes());
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<CommitManifest> {
        let mut r = Reader { data, pos: 0 };
        let root = Guid(Key::from_bytes(r.take(KEY_BYTES)?.try_into().unwrap()));
        let count = r.u32()? as usize;
        let mut snapshot = std::collections::BTreeMap::new();
        for _ in 0..count {
            let guid = Guid(Key::from_bytes(r.take(KEY_BYTES)?.try_into().unwrap()));
            let pid = crate::keyspace::Pid(Key::from_bytes(r.take(KEY_BYTES)?.try_into().unwrap()));
            snapshot.insert(guid, pid);
        }
        if r.pos != data.len() {
            return Err(Error::DecodeError("trailing bytes in manifest".into()));
        }
        Ok(CommitManifest { root, snapshot })
    }
}

/// Deterministic depth-first pre-order closure of an object graph.
///
/// Children are visited in schema field order and each object exactly once;
/// cycles terminate via the visited set. An unresolvable child aborts the
/// traversal, reporting the missing GUID.
pub fn closure(
    root_guid: Guid,
    root: ObjectNode,
    mut resolve: impl FnMut(Guid) -> Result<ObjectNode>,
) -> Result<Vec<(Guid, ObjectNode)>> {
    let mut visited = BTreeSet::new();
    let mut order = Vec::new();
    let mut stack = vec![(root_guid, Some(root))];
    while let Some((guid, preloaded)) = stack.pop() {
        if !visited.insert(guid) {
            continue;
        }
        let node = match preloaded {
            Some(node) => node,
            None => resolve(guid).map_err(|_| Error::ResolutionError(guid))?,
        };
        let children = node.refs();
        order.push((guid, node));
        // push in reverse so schema order comes off the stack first
        for child in children.into_iter().rev() {
            if !visited.contains(&child) {
                stack.push((child, None));
            }
        }
    }
    Ok(order)
}
