//! The closed type library, canonical type strings and data layouts.
//!
//! Canonical strings are the unit of exact type matching. Their grammar:
//!
//! ```text
//! scalar, typedef, function pointer, void  ->  name
//! pointer                                  ->  child + " *"
//! array                                    ->  child + "[" + length + "]"
//! struct / union                           ->  kw + " " + tag + " { " + (child + " " + field + " @" + offset)";"... + " }"
//! incomplete struct / union                ->  kw + " " + tag
//! component                                ->  "<Component>"
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

pub const COMPONENT_ID: usize = 0;
pub const UNKNOWN_ID: usize = 1;
pub const COMPONENT: &str = "<Component>";
pub const UNKNOWN: &str = "<Unknown>";
/// Word size of the 64-bit targets the corpus is drawn from.
pub const POINTER_SIZE: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TypeError {
    #[error("malformed type `{ty}`: {reason}")]
    Malformed { ty: String, reason: String },
    #[error("cannot parse type string `{input}`: {reason}")]
    Parse { input: String, reason: String },
    #[error("unknown type name `{0}`")]
    UnknownName(String),
    #[error("type `{0}` has no data layout")]
    NoLayout(String),
    #[error("type `{0}` has no layout signature")]
    NoSignature(String),
}

fn malformed(ty: &str, reason: impl Into<String>) -> TypeError {
    TypeError::Malformed {
        ty: ty.to_string(),
        reason: reason.into(),
    }
}

fn parse_err(input: &str, reason: impl Into<String>) -> TypeError {
    TypeError::Parse {
        input: input.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeKind {
    Scalar,
    Pointer,
    Array,
    Struct,
    Union,
    Typedef,
    Component,
    Void,
    FunctionPointer,
    Unknown,
}

/// A member of an aggregate, or the single child of a pointer or array
/// (unnamed, at offset 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub offset: u64,
    pub ty: TypeEntry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeEntry {
    pub name: String,
    pub kind: TypeKind,
    pub size: u64,
    /// Distinct byte offsets of immediate members, ascending.
    pub member_offsets: Vec<u64>,
    pub fields: Vec<Field>,
}

/// Size and member offsets of a type, independent of where a variable lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeLayout {
    pub size: u64,
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Register(String),
    /// Byte offset below the stack pointer.
    Stack(i64),
}

/// Decompiler-recovered storage of one variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataLayout {
    pub location: Location,
    pub size: u64,
    pub offsets: Vec<u64>,
}

fn natural_align(size: u64) -> u64 {
    match size {
        0 | 1 => 1,
        s => {
            let mut a = 1;
            while a * 2 <= s && a < 16 {
                a *= 2;
            }
            a
        }
    }
}

fn round_up(x: u64, align: u64) -> u64 {
    x.div_ceil(align) * align
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, ';' | '{' | '}' | '@' | '[' | ']' | '*'))
}

impl TypeEntry {
    fn leaf(name: &str, kind: TypeKind, size: u64) -> Self {
        TypeEntry {
            name: name.to_string(),
            kind,
            size,
            member_offsets: if size > 0 { vec![0] } else { Vec::new() },
            fields: Vec::new(),
        }
    }

    pub fn scalar(name: &str, size: u64) -> Self {
        Self::leaf(name, TypeKind::Scalar, size)
    }

    pub fn typedef(name: &str, size: u64) -> Self {
        Self::leaf(name, TypeKind::Typedef, size)
    }

    pub fn function_pointer(name: &str) -> Self {
        Self::leaf(name, TypeKind::FunctionPointer, POINTER_SIZE)
    }

    pub fn void() -> Self {
        Self::leaf("void", TypeKind::Void, 0)
    }

    pub fn component() -> Self {
        Self::leaf(COMPONENT, TypeKind::Component, 0)
    }

    pub fn unknown() -> Self {
        Self::leaf(UNKNOWN, TypeKind::Unknown, 0)
    }

    pub fn pointer(pointee: TypeEntry) -> Self {
        let mut entry = TypeEntry {
            name: String::new(),
            kind: TypeKind::Pointer,
            size: POINTER_SIZE,
            member_offsets: vec![0],
            fields: vec![Field {
                name: String::new(),
                offset: 0,
                ty: pointee,
            }],
        };
        entry.name = entry.canonical();
        entry
    }

    pub fn array(element: TypeEntry, len: u64) -> Result<Self, TypeError> {
        let elem_size = element.size;
        if elem_size == 0 || len == 0 {
            return Err(malformed(
                &format!("{}[{len}]", element.canonical()),
                "arrays need a sized element and a positive length",
            ));
        }
        let mut entry = TypeEntry {
            name: String::new(),
            kind: TypeKind::Array,
            size: elem_size * len,
            member_offsets: (0..len).map(|i| i * elem_size).collect(),
            fields: vec![Field {
                name: String::new(),
                offset: 0,
                ty: element,
            }],
        };
        entry.name = entry.canonical();
        Ok(entry)
    }

    /// A struct with explicit member offsets; the size is the naturally
    /// aligned end of the last member. A `None` tag yields a name derived
    /// from the member list.
    pub fn structure(tag: Option<&str>, members: Vec<(String, u64, TypeEntry)>) -> Result<Self, TypeError> {
        Self::aggregate(TypeKind::Struct, tag, members)
    }

    /// A struct whose members are laid out with natural alignment.
    pub fn packed_naturally(tag: Option<&str>, members: Vec<(String, TypeEntry)>) -> Result<Self, TypeError> {
        let mut offset = 0;
        let mut placed = Vec::with_capacity(members.len());
        for (name, ty) in members {
            offset = round_up(offset, ty.align());
            let next = offset + ty.size;
            placed.push((name, offset, ty));
            offset = next;
        }
        Self::structure(tag, placed)
    }

    pub fn union(tag: Option<&str>, members: Vec<(String, TypeEntry)>) -> Result<Self, TypeError> {
        let members = members.into_iter().map(|(n, t)| (n, 0, t)).collect();
        Self::aggregate(TypeKind::Union, tag, members)
    }

    /// Forward reference to an aggregate by tag only (C incomplete type).
    pub fn incomplete(kind: TypeKind, tag: &str) -> Self {
        TypeEntry {
            name: tag.to_string(),
            kind,
            size: 0,
            member_offsets: Vec::new(),
            fields: Vec::new(),
        }
    }

    fn aggregate(kind: TypeKind, tag: Option<&str>, members: Vec<(String, u64, TypeEntry)>) -> Result<Self, TypeError> {
        let fields: Vec<Field> = members
            .into_iter()
            .map(|(name, offset, ty)| Field { name, offset, ty })
            .collect();
        let name = match tag {
            Some(t) => t.to_string(),
            None => anonymous_tag(&fields),
        };
        let align = fields.iter().map(|f| f.ty.align()).max().unwrap_or(1);
        let end = fields.iter().map(|f| f.offset + f.ty.size).max().unwrap_or(0);
        let mut member_offsets: Vec<u64> = fields.iter().map(|f| f.offset).collect();
        member_offsets.dedup();
        let entry = TypeEntry {
            name,
            kind,
            size: round_up(end, align),
            member_offsets,
            fields,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn is_incomplete(&self) -> bool {
        matches!(self.kind, TypeKind::Struct | TypeKind::Union) && self.fields.is_empty()
    }

    /// Child of a pointer or element of an array.
    pub fn child(&self) -> Option<&TypeEntry> {
        match self.kind {
            TypeKind::Pointer | TypeKind::Array => self.fields.first().map(|f| &f.ty),
            _ => None,
        }
    }

    pub fn align(&self) -> u64 {
        match self.kind {
            TypeKind::Pointer | TypeKind::FunctionPointer => POINTER_SIZE,
            TypeKind::Array => self.child().map_or(1, TypeEntry::align),
            TypeKind::Struct | TypeKind::Union => self.fields.iter().map(|f| f.ty.align()).max().unwrap_or(1),
            _ => natural_align(self.size),
        }
    }

    /// Canonical serialization; equal strings denote equal types.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut String) {
        match self.kind {
            TypeKind::Pointer => {
                if let Some(c) = self.child() {
                    c.write_canonical(out);
                }
                out.push_str(" *");
            }
            TypeKind::Array => {
                if let Some(c) = self.child() {
                    c.write_canonical(out);
                }
                out.push_str(&format!("[{}]", self.member_offsets.len()));
            }
            TypeKind::Struct | TypeKind::Union => {
                out.push_str(if self.kind == TypeKind::Struct { "struct " } else { "union " });
                out.push_str(&self.name);
                if !self.fields.is_empty() {
                    out.push_str(" {");
                    for f in &self.fields {
                        out.push(' ');
                        f.ty.write_canonical(out);
                        out.push_str(&format!(" {} @{};", f.name, f.offset));
                    }
                    out.push_str(" }");
                }
            }
            TypeKind::Component => out.push_str(COMPONENT),
            TypeKind::Unknown => out.push_str(UNKNOWN),
            _ => out.push_str(&self.name),
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let ty = || self.canonical();
        match self.kind {
            TypeKind::Component | TypeKind::Unknown | TypeKind::Void => {
                if self.size != 0 || !self.member_offsets.is_empty() || !self.fields.is_empty() {
                    return Err(malformed(&ty(), "unsized kinds carry no layout"));
                }
                let expected = match self.kind {
                    TypeKind::Component => COMPONENT,
                    TypeKind::Unknown => UNKNOWN,
                    _ => "void",
                };
                if self.name != expected {
                    return Err(malformed(&ty(), format!("must be named {expected}")));
                }
                return Ok(());
            }
            _ => {}
        }
        if self.name == COMPONENT || self.name == UNKNOWN {
            return Err(malformed(&ty(), "reserved name on an ordinary type"));
        }
        if self.is_incomplete() {
            if self.size != 0 || !self.member_offsets.is_empty() || !valid_ident(&self.name) {
                return Err(malformed(&ty(), "incomplete aggregates are size 0 with a plain tag"));
            }
            return Ok(());
        }
        if self.size == 0 {
            return Err(malformed(&ty(), "sized kind with size 0"));
        }
        if self.member_offsets.first() != Some(&0) {
            return Err(malformed(&ty(), "member offsets must start at 0"));
        }
        if self.member_offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed(&ty(), "member offsets must be strictly increasing"));
        }
        if self.member_offsets.iter().any(|&o| o >= self.size) {
            return Err(malformed(&ty(), "member offset beyond type size"));
        }
        match self.kind {
            TypeKind::Scalar | TypeKind::Typedef | TypeKind::FunctionPointer => {
                if self.kind != TypeKind::Typedef && self.member_offsets != [0] {
                    return Err(malformed(&ty(), "scalars have a single member at offset 0"));
                }
                if !self.fields.is_empty() || self.name.trim().is_empty() || self.name.contains(['{', '}', ';', '@']) {
                    return Err(malformed(&ty(), "leaf types carry a plain name and no fields"));
                }
                if self.name.ends_with(" *") || self.name.ends_with(']') {
                    return Err(malformed(&ty(), "leaf name collides with derived type syntax"));
                }
            }
            TypeKind::Pointer => {
                if self.size != POINTER_SIZE || self.member_offsets != [0] || self.fields.len() != 1 {
                    return Err(malformed(&ty(), "pointers are word-sized with one pointee"));
                }
                self.fields[0].ty.validate()?;
                if matches!(self.fields[0].ty.kind, TypeKind::Component | TypeKind::Unknown) {
                    return Err(malformed(&ty(), "pointer to a reserved label"));
                }
            }
            TypeKind::Array => {
                if self.fields.len() != 1 || self.fields[0].offset != 0 {
                    return Err(malformed(&ty(), "arrays have exactly one element type"));
                }
                let elem = &self.fields[0].ty;
                elem.validate()?;
                let n = self.member_offsets.len() as u64;
                if elem.size == 0
                    || self.size != elem.size * n
                    || self.member_offsets.iter().enumerate().any(|(i, &o)| o != i as u64 * elem.size)
                {
                    return Err(malformed(&ty(), "array offsets must step by the element size"));
                }
            }
            TypeKind::Struct | TypeKind::Union => {
                if !valid_ident(&self.name) {
                    return Err(malformed(&ty(), "aggregate tag must be a plain identifier"));
                }
                let mut distinct: Vec<u64> = self.fields.iter().map(|f| f.offset).collect();
                if distinct.windows(2).any(|w| w[0] > w[1]) {
                    return Err(malformed(&ty(), "fields must appear in offset order"));
                }
                distinct.dedup();
                if distinct != self.member_offsets {
                    return Err(malformed(&ty(), "member offsets disagree with field offsets"));
                }
                if self.kind == TypeKind::Union && self.member_offsets != [0] {
                    return Err(malformed(&ty(), "union members all live at offset 0"));
                }
                for f in &self.fields {
                    if !valid_ident(&f.name) {
                        return Err(malformed(&ty(), format!("bad field name `{}`", f.name)));
                    }
                    f.ty.validate()?;
                    if matches!(f.ty.kind, TypeKind::Component | TypeKind::Unknown | TypeKind::Void) || f.ty.is_incomplete() {
                        return Err(malformed(&ty(), format!("field `{}` has no storage", f.name)));
                    }
                    if f.offset + f.ty.size > self.size {
                        return Err(malformed(&ty(), format!("field `{}` overruns the aggregate", f.name)));
                    }
                }
                let mut names: Vec<&str> = self.fields.iter().map(|f| f.name.as_str()).collect();
                names.sort_unstable();
                if names.windows(2).any(|w| w[0] == w[1]) {
                    return Err(malformed(&ty(), "duplicate field name"));
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Size and immediate member offsets, as consumed by the layout encoder.
    pub fn layout(&self) -> Result<TypeLayout, TypeError> {
        if self.size == 0 || self.member_offsets.is_empty() {
            return Err(TypeError::NoLayout(self.canonical()));
        }
        Ok(TypeLayout {
            size: self.size,
            offsets: self.member_offsets.clone(),
        })
    }

    /// Name-free structural rendering used for structure-only comparison.
    pub fn layout_signature(&self) -> Result<String, TypeError> {
        Ok(match self.kind {
            TypeKind::Component | TypeKind::Unknown => return Err(TypeError::NoSignature(self.canonical())),
            TypeKind::Void => "Void".to_string(),
            TypeKind::Scalar => format!("Primitive_{}", self.size),
            TypeKind::Typedef => {
                if self.member_offsets.len() <= 1 {
                    format!("Primitive_{}", self.size)
                } else {
                    let offs: Vec<String> = self.member_offsets.iter().map(u64::to_string).collect();
                    format!("Opaque_{}<{}>", self.size, offs.join(", "))
                }
            }
            TypeKind::FunctionPointer => "Pointer<Function>".to_string(),
            TypeKind::Pointer => {
                let child = self.child().expect("validated pointer");
                format!("Pointer<{}>", child.layout_signature()?)
            }
            TypeKind::Array => {
                let child = self.child().expect("validated array");
                format!("Array<{}, {}>", child.layout_signature()?, self.member_offsets.len())
            }
            TypeKind::Struct | TypeKind::Union => {
                let head = if self.kind == TypeKind::Struct { "Struct" } else { "Union" };
                if self.is_incomplete() {
                    format!("{head}<?>")
                } else {
                    let parts = self
                        .fields
                        .iter()
                        .map(|f| f.ty.layout_signature())
                        .collect::<Result<Vec<_>, _>>()?;
                    format!("{head}<{}>", parts.join(", "))
                }
            }
        })
    }

    /// Aggregates, and pointers or arrays reaching an aggregate.
    pub fn is_struct_related(&self) -> bool {
        match self.kind {
            TypeKind::Struct | TypeKind::Union => true,
            TypeKind::Pointer | TypeKind::Array => self.child().is_some_and(TypeEntry::is_struct_related),
            _ => false,
        }
    }
}

fn anonymous_tag(fields: &[Field]) -> String {
    let mut desc = String::new();
    for f in fields {
        desc.push_str(&format!("{} {} @{};", f.ty.canonical(), f.name, f.offset));
    }
    format!("__anon_{}", &io::sha256_hex(desc.as_bytes())[..8])
}

/// Names of leaf types (scalars, typedefs, function pointers) and their sizes.
#[derive(Debug, Clone)]
pub struct ScalarTable {
    leaves: HashMap<String, (TypeKind, u64)>,
}

const QUALIFIERS: [&str; 3] = ["const ", "volatile ", "restrict "];

impl Default for ScalarTable {
    fn default() -> Self {
        let mut t = ScalarTable { leaves: HashMap::new() };
        let scalars: &[(&str, u64)] = &[
            ("char", 1),
            ("signed char", 1),
            ("unsigned char", 1),
            ("bool", 1),
            ("_Bool", 1),
            ("__int8", 1),
            ("unsigned __int8", 1),
            ("_BYTE", 1),
            ("short", 2),
            ("unsigned short", 2),
            ("__int16", 2),
            ("unsigned __int16", 2),
            ("_WORD", 2),
            ("int", 4),
            ("unsigned int", 4),
            ("__int32", 4),
            ("unsigned __int32", 4),
            ("_DWORD", 4),
            ("float", 4),
            ("wchar_t", 4),
            ("long", 8),
            ("unsigned long", 8),
            ("long long", 8),
            ("unsigned long long", 8),
            ("__int64", 8),
            ("unsigned __int64", 8),
            ("_QWORD", 8),
            ("double", 8),
            ("long double", 16),
            ("__int128", 16),
            ("unsigned __int128", 16),
            ("_OWORD", 16),
        ];
        let typedefs: &[(&str, u64)] = &[
            ("int8_t", 1),
            ("uint8_t", 1),
            ("int16_t", 2),
            ("uint16_t", 2),
            ("int32_t", 4),
            ("uint32_t", 4),
            ("int64_t", 8),
            ("uint64_t", 8),
            ("size_t", 8),
            ("ssize_t", 8),
            ("off_t", 8),
            ("intptr_t", 8),
            ("uintptr_t", 8),
            ("ptrdiff_t", 8),
            ("time_t", 8),
            ("pid_t", 4),
            ("uid_t", 4),
            ("gid_t", 4),
            ("mode_t", 4),
            ("socklen_t", 4),
            ("FILE", 216),
        ];
        for &(n, s) in scalars {
            t.leaves.insert(n.to_string(), (TypeKind::Scalar, s));
        }
        for &(n, s) in typedefs {
            t.leaves.insert(n.to_string(), (TypeKind::Typedef, s));
        }
        t.leaves.insert("void".to_string(), (TypeKind::Void, 0));
        t
    }
}

impl ScalarTable {
    pub fn insert(&mut self, name: &str, kind: TypeKind, size: u64) {
        self.leaves.insert(name.to_string(), (kind, size));
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, TypeKind, u64)> {
        self.leaves.iter().map(|(n, &(k, s))| (n.as_str(), k, s))
    }

    /// Resolves a leaf type name. Qualifiers are kept in the name but ignored
    /// for sizing; `enum` tags are 4 bytes; `(*)` marks a function pointer.
    pub fn resolve(&self, name: &str) -> Option<TypeEntry> {
        if let Some(&(kind, size)) = self.leaves.get(name) {
            return Some(match kind {
                TypeKind::Void => TypeEntry::void(),
                _ => TypeEntry::leaf(name, kind, size),
            });
        }
        let mut base = name;
        let mut qualified = false;
        loop {
            match QUALIFIERS.iter().find_map(|q| base.strip_prefix(q)) {
                Some(rest) => {
                    base = rest;
                    qualified = true;
                }
                None => break,
            }
        }
        if qualified {
            if let Some(&(kind, size)) = self.leaves.get(base) {
                if kind == TypeKind::Void {
                    return None;
                }
                return Some(TypeEntry::leaf(name, kind, size));
            }
        }
        if base.starts_with("enum ") && valid_ident(&base[5..]) {
            return Some(TypeEntry::scalar(name, 4));
        }
        if name.contains("(*)") {
            return Some(TypeEntry::function_pointer(name));
        }
        None
    }
}

/// Parses a canonical string back into a type.
pub fn parse_canonical(input: &str, table: &ScalarTable) -> Result<TypeEntry, TypeError> {
    let s = input;
    if s == COMPONENT {
        return Ok(TypeEntry::component());
    }
    if s == UNKNOWN {
        return Ok(TypeEntry::unknown());
    }
    if s.is_empty() {
        return Err(parse_err(input, "empty"));
    }
    let is_aggregate = s.starts_with("struct ") || s.starts_with("union ");
    if is_aggregate && s.ends_with(" }") {
        return parse_aggregate(s, table);
    }
    if let Some(inner) = s.strip_suffix(" *") {
        let child = parse_canonical(inner, table)?;
        let p = TypeEntry::pointer(child);
        p.validate()?;
        return Ok(p);
    }
    if let Some(body) = s.strip_suffix(']') {
        let open = body.rfind('[').ok_or_else(|| parse_err(input, "unbalanced `]`"))?;
        let len: u64 = body[open + 1..]
            .parse()
            .map_err(|_| parse_err(input, "array length is not a number"))?;
        let elem = parse_canonical(&body[..open], table)?;
        return TypeEntry::array(elem, len);
    }
    if is_aggregate {
        let (kw, tag) = s.split_once(' ').expect("prefix checked");
        if valid_ident(tag) {
            let kind = if kw == "struct" { TypeKind::Struct } else { TypeKind::Union };
            return Ok(TypeEntry::incomplete(kind, tag));
        }
    }
    table.resolve(s).ok_or_else(|| TypeError::UnknownName(s.to_string()))
}

fn parse_aggregate(s: &str, table: &ScalarTable) -> Result<TypeEntry, TypeError> {
    let (kw, rest) = s.split_once(' ').expect("caller checked prefix");
    let (tag, body) = rest.split_once(" { ").ok_or_else(|| parse_err(s, "missing ` { `"))?;
    let body = body.strip_suffix(" }").ok_or_else(|| parse_err(s, "missing ` }`"))?;
    let mut members = Vec::new();
    for part in split_fields(body).map_err(|r| parse_err(s, r))? {
        let (decl, off) = part.rsplit_once(" @").ok_or_else(|| parse_err(s, "field lacks `@offset`"))?;
        let offset: u64 = off.parse().map_err(|_| parse_err(s, "field offset is not a number"))?;
        let (ty, name) = decl.rsplit_once(' ').ok_or_else(|| parse_err(s, "field lacks a name"))?;
        members.push((name.to_string(), offset, parse_canonical(ty, table)?));
    }
    if members.is_empty() {
        return Err(parse_err(s, "aggregate without fields"));
    }
    let entry = match kw {
        "struct" => TypeEntry::structure(Some(tag), members)?,
        _ => {
            if members.iter().any(|m| m.1 != 0) {
                return Err(parse_err(s, "union member at nonzero offset"));
            }
            TypeEntry::union(Some(tag), members.into_iter().map(|(n, _, t)| (n, t)).collect())?
        }
    };
    Ok(entry)
}

/// Splits `a @0; b @4;` into fields, respecting nested braces.
fn split_fields(body: &str) -> Result<Vec<&str>, &'static str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = body.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'{' => depth += 1,
            b'}' => depth -= 1,
            b';' if depth == 0 => {
                out.push(body[start..i].trim_start());
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err("unbalanced braces");
        }
    }
    if depth != 0 || !body[start..].trim().is_empty() {
        return Err("trailing text after last field");
    }
    Ok(out)
}

/// The closed set of predictable types. Ids 0 and 1 are reserved for
/// `<Component>` and the out-of-library sentinel.
#[derive(Debug, Clone)]
pub struct TypeLibrary {
    entries: Vec<TypeEntry>,
    canonicals: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TypeLibrary {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRecord {
    pub id: usize,
    pub name: String,
    pub kind: TypeKind,
    pub size: u64,
    pub member_offsets: Vec<u64>,
    pub fields: Vec<FieldRecord>,
    pub canonical: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub name: String,
    pub offset: u64,
    #[serde(rename = "type")]
    pub ty: String,
}

impl TypeLibrary {
    pub fn new() -> Self {
        let mut lib = TypeLibrary {
            entries: Vec::new(),
            canonicals: Vec::new(),
            index: HashMap::new(),
        };
        lib.push(TypeEntry::component());
        lib.push(TypeEntry::unknown());
        lib
    }

    fn push(&mut self, entry: TypeEntry) -> usize {
        let canonical = entry.canonical();
        let id = self.entries.len();
        self.index.insert(canonical.clone(), id);
        self.canonicals.push(canonical);
        self.entries.push(entry);
        id
    }

    /// Returns the id of `entry`, appending it when its canonical string is new.
    pub fn register(&mut self, entry: TypeEntry) -> Result<usize, TypeError> {
        entry.validate()?;
        if let Some(&id) = self.index.get(&entry.canonical()) {
            return Ok(id);
        }
        Ok(self.push(entry))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TypeEntry> {
        self.entries.get(id)
    }

    pub fn canonical(&self, id: usize) -> Option<&str> {
        self.canonicals.get(id).map(String::as_str)
    }

    pub fn id_of(&self, canonical: &str) -> Option<usize> {
        self.index.get(canonical).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &TypeEntry)> {
        self.entries.iter().enumerate()
    }

    /// Default leaf names extended with every leaf registered here.
    pub fn scalar_table(&self) -> ScalarTable {
        let mut table = ScalarTable::default();
        for e in &self.entries {
            if matches!(e.kind, TypeKind::Scalar | TypeKind::Typedef | TypeKind::FunctionPointer) {
                table.insert(&e.name, e.kind, e.size);
            }
        }
        table
    }

    pub fn record(&self, id: usize) -> Option<TypeRecord> {
        let e = self.entries.get(id)?;
        Some(TypeRecord {
            id,
            name: e.name.clone(),
            kind: e.kind,
            size: e.size,
            member_offsets: e.member_offsets.clone(),
            fields: e
                .fields
                .iter()
                .map(|f| FieldRecord {
                    name: f.name.clone(),
                    offset: f.offset,
                    ty: f.ty.canonical(),
                })
                .collect(),
            canonical: self.canonicals[id].clone(),
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let records: Vec<TypeRecord> = (0..self.len()).filter_map(|id| self.record(id)).collect();
        io::to_jsonl(&records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn from_records(records: &[TypeRecord]) -> Result<Self, TypeError> {
        let mut table = ScalarTable::default();
        for r in records {
            if matches!(r.kind, TypeKind::Scalar | TypeKind::Typedef | TypeKind::FunctionPointer) {
                table.insert(&r.name, r.kind, r.size);
            }
        }
        let mut lib = TypeLibrary::new();
        for (pos, r) in records.iter().enumerate() {
            if r.id != pos {
                return Err(malformed(&r.canonical, format!("record id {} at position {pos}", r.id)));
            }
            let entry = match r.kind {
                TypeKind::Scalar | TypeKind::Typedef | TypeKind::FunctionPointer => TypeEntry {
                    name: r.name.clone(),
                    kind: r.kind,
                    size: r.size,
                    member_offsets: r.member_offsets.clone(),
                    fields: Vec::new(),
                },
                _ => {
                    let mut e = parse_canonical(&r.canonical, &table)?;
                    if matches!(e.kind, TypeKind::Struct | TypeKind::Union) {
                        e.size = r.size;
                    }
                    e
                }
            };
            if entry.canonical() != r.canonical || entry.kind != r.kind || entry.member_offsets != r.member_offsets {
                return Err(malformed(&r.canonical, "record disagrees with its canonical string"));
            }
            let id = lib.register(entry)?;
            if id != r.id {
                return Err(malformed(&r.canonical, "duplicate or misplaced record"));
            }
        }
        Ok(lib)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let records: Vec<TypeRecord> = io::read_jsonl(path)?;
        Ok(Self::from_records(&records)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(io::sha256_hex(self.to_jsonl()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> ScalarTable {
        ScalarTable::default()
    }

    fn point(second: &str) -> TypeEntry {
        TypeEntry::packed_naturally(
            Some("point"),
            vec![
                ("x".into(), TypeEntry::scalar("float", 4)),
                (second.into(), TypeEntry::scalar("float", 4)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn scalar_canonical_is_its_name() {
        assert_eq!(TypeEntry::scalar("int", 4).canonical(), "int");
    }

    #[test]
    fn struct_canonical_format() {
        assert_eq!(point("y").canonical(), "struct point { float x @0; float y @4; }");
        assert_ne!(point("y").canonical(), point("z").canonical());
    }

    #[test]
    fn register_dedups_and_reserves() {
        let mut lib = TypeLibrary::new();
        assert_eq!(lib.register(TypeEntry::component()).unwrap(), COMPONENT_ID);
        let a = lib.register(TypeEntry::scalar("int", 4)).unwrap();
        let b = lib.register(TypeEntry::scalar("int", 4)).unwrap();
        let c = lib.register(TypeEntry::scalar("unsigned int", 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(lib.id_of("int"), Some(a));
        assert_eq!(lib.canonical(UNKNOWN_ID), Some(UNKNOWN));
    }

    #[test]
    fn malformed_entries_are_rejected() {
        let bad = TypeEntry {
            name: "int".into(),
            kind: TypeKind::Scalar,
            size: 4,
            member_offsets: vec![0, 8],
            fields: vec![],
        };
        assert!(matches!(bad.validate(), Err(TypeError::Malformed { .. })));
        let mut lib = TypeLibrary::new();
        assert!(lib.register(bad).is_err());

        let unsorted = TypeEntry {
            name: "s".into(),
            kind: TypeKind::Struct,
            size: 8,
            member_offsets: vec![4, 0],
            fields: vec![
                Field { name: "a".into(), offset: 4, ty: TypeEntry::scalar("int", 4) },
                Field { name: "b".into(), offset: 0, ty: TypeEntry::scalar("int", 4) },
            ],
        };
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn footnote_signatures() {
        let tbl = t();
        let sig = |s: &str| parse_canonical(s, &tbl).unwrap().layout_signature().unwrap();
        assert_eq!(sig("bool"), "Primitive_1");
        assert_eq!(sig("char"), "Primitive_1");
        assert_eq!(sig("const char *"), "Pointer<Primitive_1>");
        assert_eq!(sig("char *"), "Pointer<Primitive_1>");
        let imvec = TypeEntry::packed_naturally(
            Some("ImVec2"),
            vec![
                ("x".into(), TypeEntry::scalar("float", 4)),
                ("y".into(), TypeEntry::scalar("float", 4)),
            ],
        )
        .unwrap();
        assert_eq!(imvec.layout_signature().unwrap(), "Struct<Primitive_4, Primitive_4>");
        assert!(TypeEntry::component().layout_signature().is_err());
    }

    #[test]
    fn layouts_of_arrays_structs_scalars() {
        let int = TypeEntry::scalar("int", 4);
        assert_eq!(TypeEntry::array(int.clone(), 2).unwrap().layout().unwrap().offsets, vec![0, 4]);
        let two_chars = TypeEntry::packed_naturally(
            Some("cc"),
            vec![
                ("a".into(), TypeEntry::scalar("char", 1)),
                ("b".into(), TypeEntry::scalar("char", 1)),
            ],
        )
        .unwrap();
        assert_eq!(two_chars.layout().unwrap().offsets, vec![0, 1]);
        assert_eq!(int.layout().unwrap().offsets, vec![0]);
        assert!(TypeEntry::void().layout().is_err());
        assert!(TypeEntry::component().layout().is_err());
        let p = TypeEntry::pointer(two_chars);
        assert_eq!(p.layout().unwrap(), TypeLayout { size: 8, offsets: vec![0] });
    }

    #[test]
    fn parse_nested_and_incomplete() {
        let tbl = t();
        let s = "struct node { int value @0; struct node * next @8; }";
        let e = parse_canonical(s, &tbl).unwrap();
        assert_eq!(e.size, 16);
        assert_eq!(e.canonical(), s);
        let arr = "struct point { float x @0; float y @4; }[3] *";
        assert_eq!(parse_canonical(arr, &tbl).unwrap().canonical(), arr);
        assert!(matches!(parse_canonical("HWND", &tbl), Err(TypeError::UnknownName(_))));
        assert!(parse_canonical("struct x { int a @0 }", &tbl).is_err());
    }

    #[test]
    fn anonymous_structs_get_stable_tags() {
        let mk = || {
            TypeEntry::packed_naturally(None, vec![("a".into(), TypeEntry::scalar("int", 4))]).unwrap()
        };
        assert_eq!(mk().name, mk().name);
        assert!(mk().name.starts_with("__anon_"));
    }

    #[test]
    fn library_file_round_trip() {
        let mut lib = TypeLibrary::new();
        lib.register(TypeEntry::typedef("HWND", 8)).unwrap();
        lib.register(point("y")).unwrap();
        let s = parse_canonical("struct w { HWND h @0; int n @8; }", &{
            let mut t = t();
            t.insert("HWND", TypeKind::Typedef, 8);
            t
        })
        .unwrap();
        lib.register(s).unwrap();
        let text = lib.to_jsonl().unwrap();
        let records: Vec<TypeRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let back = TypeLibrary::from_records(&records).unwrap();
        assert_eq!(back.len(), lib.len());
        for (id, e) in lib.iter() {
            assert_eq!(back.get(id), Some(e));
        }
    }
}
