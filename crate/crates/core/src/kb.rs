//! Textual knowledge-base format.
//!
//! ```text
//! kb "unlock" {
//!   predicates { facing/1; holding/1; }
//!   operators { goto/1; pick/1; }
//!   objects { key: key; }
//!   node v0 {}
//!   node goal { holding(key) }
//!   edge v0 -> goal : pick(key) add { holding(key) } del {}
//! }
//! ```
//!
//! `#` starts a comment running to the end of the line. Exactly one node must
//! be named `goal`; the initial node is the unique node without incoming
//! edges. Semantic checks beyond node references are left to
//! [`validate_machine`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::symbolic::{validate_machine, Edge, GroundAtom, ObjectRef, StateMachine, Symbol, SymbolicState, Violation};

/// KB text with its origin (file path or inline tag).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbSource {
    pub text: String,
    pub origin: String,
}

impl KbSource {
    pub fn new(text: impl Into<String>, origin: impl Into<String>) -> Self {
        let text: String = text.into();
        Self { text: text.replace("\r\n", "\n").replace('\r', "\n"), origin: origin.into() }
    }

    pub fn inline(text: impl Into<String>) -> Self {
        Self::new(text, "<inline>")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::new(String::from_utf8_lossy(&bytes).into_owned(), path.display().to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl std::fmt::Display for Pos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KbError {
    #[error("{origin}:{pos}: syntax error: {msg}")]
    Syntax { origin: String, pos: Pos, msg: String },
    #[error("{origin}:{pos}: unknown node `{node}`")]
    UnknownNode { origin: String, pos: Pos, node: String },
    #[error("{origin}:{pos}: duplicate node `{node}`")]
    DuplicateNode { origin: String, pos: Pos, node: String },
    #[error("{origin}: no node named `goal`")]
    MissingGoal { origin: String },
    #[error("{origin}: expected exactly one node without incoming edges, found {found:?}")]
    Initial { origin: String, found: Vec<String> },
    #[error("{origin}: invalid machine: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { origin: String, violations: Vec<Violation> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BindError {
    #[error("role `{0}` is not bound")]
    UnboundRole(String),
    #[error("role `{role}` expects type `{expected}`, object {object} is `{found}`")]
    TypeMismatch { role: String, expected: String, object: u32, found: String },
    #[error("binding names undeclared role `{0}`")]
    UnknownRole(String),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(u64),
    Punct(&'static str),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(src: &KbSource) -> Result<Vec<(Tok, Pos)>, KbError> {
    let chars: Vec<char> = src.text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |pos: Pos, msg: String| KbError::Syntax { origin: src.origin.clone(), pos, msg };
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => advance(1, &mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                out.push((Tok::Punct("->"), pos));
                advance(2, &mut i, &mut col);
            }
            '{' | '}' | '(' | ')' | ',' | ';' | ':' | '/' => {
                let p = match c {
                    '{' => "{",
                    '}' => "}",
                    '(' => "(",
                    ')' => ")",
                    ',' => ",",
                    ';' => ";",
                    ':' => ":",
                    _ => "/",
                };
                out.push((Tok::Punct(p), pos));
                advance(1, &mut i, &mut col);
            }
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None | Some('\n') => return Err(err(pos, "unterminated string".into())),
                        Some('"') => break,
                        Some(&ch) => s.push(ch),
                    }
                    j += 1;
                }
                let n = j + 1 - i;
                out.push((Tok::Str(s), pos));
                advance(n, &mut i, &mut col);
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                let text: String = chars[i..j].iter().collect();
                let v = text.parse().map_err(|_| err(pos, format!("integer `{text}` out of range")))?;
                out.push((Tok::Int(v), pos));
                let n = j - i;
                advance(n, &mut i, &mut col);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < chars.len() {
                    let ch = chars[j];
                    // A hyphen continues an identifier only when followed by a word
                    // character, so `v0->goal` still lexes as an arrow.
                    let hyphen_ok = ch == '-' && chars.get(j + 1).is_some_and(|n| n.is_ascii_alphanumeric() || *n == '_');
                    if ch.is_ascii_alphanumeric() || ch == '_' || hyphen_ok {
                        j += 1;
                    } else {
                        break;
                    }
                }
                out.push((Tok::Ident(chars[i..j].iter().collect()), pos));
                let n = j - i;
                advance(n, &mut i, &mut col);
            }
            other => return Err(err(pos, format!("unexpected character {other:?}"))),
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    origin: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, KbError> {
        Err(KbError::Syntax { origin: self.origin.to_string(), pos: self.pos(), msg: msg.into() })
    }

    fn expected<T>(&self, what: &str) -> Result<T, KbError> {
        self.fail(format!("expected {what}, found {}", self.peek().describe()))
    }

    fn punct(&mut self, p: &'static str) -> Result<(), KbError> {
        if *self.peek() == Tok::Punct(p) {
            self.bump();
            Ok(())
        } else {
            self.expected(&format!("`{p}`"))
        }
    }

    fn is_punct(&self, p: &'static str) -> bool {
        *self.peek() == Tok::Punct(p)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), KbError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => self.expected(&format!("`{kw}`")),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn ident(&mut self) -> Result<(String, Pos), KbError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let (_, p) = self.bump();
                Ok((s, p))
            }
            _ => self.expected("identifier"),
        }
    }

    fn int(&mut self) -> Result<u64, KbError> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.expected("integer"),
        }
    }

    fn symbols(&mut self, section: &str) -> Result<Vec<Symbol>, KbError> {
        self.keyword(section)?;
        self.punct("{")?;
        let mut out = Vec::new();
        loop {
            let (name, _) = self.ident()?;
            self.punct("/")?;
            let pos = self.pos();
            let arity = self.int()?;
            if arity == 0 {
                return Err(KbError::Syntax { origin: self.origin.into(), pos, msg: "arity must be at least 1".into() });
            }
            self.punct(";")?;
            out.push(Symbol::new(name, arity as usize));
            if self.is_punct("}") {
                break;
            }
        }
        self.punct("}")?;
        Ok(out)
    }

    fn roles(&mut self) -> Result<Vec<(String, String)>, KbError> {
        self.keyword("objects")?;
        self.punct("{")?;
        let mut out = Vec::new();
        loop {
            let (name, _) = self.ident()?;
            self.punct(":")?;
            let (ty, _) = self.ident()?;
            self.punct(";")?;
            out.push((name, ty));
            if self.is_punct("}") {
                break;
            }
        }
        self.punct("}")?;
        Ok(out)
    }

    fn atom(&mut self) -> Result<GroundAtom, KbError> {
        let (name, _) = self.ident()?;
        self.punct("(")?;
        let mut args = Vec::new();
        loop {
            let arg = match self.peek().clone() {
                Tok::Ident(s) => ObjectRef::Role(s),
                Tok::Int(v) if v <= u32::MAX as u64 => ObjectRef::Id(v as u32),
                _ => return self.expected("object name"),
            };
            self.bump();
            args.push(arg);
            if self.is_punct(",") {
                self.bump();
            } else {
                break;
            }
        }
        self.punct(")")?;
        Ok(GroundAtom::new(name, args))
    }

    fn atom_block(&mut self) -> Result<SymbolicState, KbError> {
        self.punct("{")?;
        let mut out = BTreeSet::new();
        if !self.is_punct("}") {
            loop {
                out.insert(self.atom()?);
                if self.is_punct(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.punct("}")?;
        Ok(out)
    }
}

/// Parses and validates a knowledge base.
pub fn parse_kb(source: &KbSource) -> Result<StateMachine, KbError> {
    let origin = source.origin.as_str();
    let mut p = Parser { toks: lex(source)?, at: 0, origin };
    p.keyword("kb")?;
    let name = match p.peek().clone() {
        Tok::Str(s) => {
            p.bump();
            s
        }
        _ => return p.expected("quoted knowledge-base name"),
    };
    p.punct("{")?;
    let predicates = p.symbols("predicates")?;
    let operators = p.symbols("operators")?;
    let roles = p.roles()?;

    let mut nodes = BTreeMap::new();
    if !p.is_keyword("node") {
        return p.expected("`node`");
    }
    while p.is_keyword("node") {
        p.bump();
        let (id, pos) = p.ident()?;
        let atoms = p.atom_block()?;
        if nodes.insert(id.clone(), atoms).is_some() {
            return Err(KbError::DuplicateNode { origin: origin.into(), pos, node: id });
        }
    }

    let mut edges = Vec::new();
    if !p.is_keyword("edge") {
        return p.expected("`edge`");
    }
    while p.is_keyword("edge") {
        p.bump();
        let (src, spos) = p.ident()?;
        p.punct("->")?;
        let (dst, dpos) = p.ident()?;
        for (n, pos) in [(&src, spos), (&dst, dpos)] {
            if !nodes.contains_key(n) {
                return Err(KbError::UnknownNode { origin: origin.into(), pos, node: n.clone() });
            }
        }
        p.punct(":")?;
        let op = p.atom()?;
        p.keyword("add")?;
        let add = p.atom_block()?;
        p.keyword("del")?;
        let del = p.atom_block()?;
        edges.push(Edge { src, dst, op, add, del });
    }
    p.punct("}")?;
    if *p.peek() != Tok::Eof {
        return p.expected("end of input");
    }

    if !nodes.contains_key("goal") {
        return Err(KbError::MissingGoal { origin: origin.into() });
    }
    let with_incoming: BTreeSet<&str> = edges.iter().map(|e: &Edge| e.dst.as_str()).collect();
    let roots: Vec<String> = nodes.keys().filter(|k| !with_incoming.contains(k.as_str())).cloned().collect();
    if roots.len() != 1 {
        return Err(KbError::Initial { origin: origin.into(), found: roots });
    }
    let machine = StateMachine {
        name,
        predicates,
        operators,
        roles,
        nodes,
        edges,
        initial: roots[0].clone(),
        goal: "goal".into(),
    };
    let violations = validate_machine(&machine);
    if !violations.is_empty() {
        return Err(KbError::Invalid { origin: origin.into(), violations });
    }
    Ok(machine)
}

fn write_atoms(out: &mut String, atoms: &SymbolicState) {
    // BTreeSet iteration is already the canonical lexicographic order.
    let parts: Vec<String> = atoms.iter().map(|a| a.to_string()).collect();
    if parts.is_empty() {
        out.push_str("{}");
    } else {
        let _ = write!(out, "{{ {} }}", parts.join(", "));
    }
}

/// Canonical text for a machine. Comments are not preserved.
pub fn render_kb(m: &StateMachine) -> KbSource {
    let mut out = String::new();
    let _ = writeln!(out, "kb \"{}\" {{", m.name);
    let syms = |xs: &[Symbol]| xs.iter().map(|s| format!("{s};")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "  predicates {{ {} }}", syms(&m.predicates));
    let _ = writeln!(out, "  operators {{ {} }}", syms(&m.operators));
    let roles: Vec<String> = m.roles.iter().map(|(r, t)| format!("{r}: {t};")).collect();
    let _ = writeln!(out, "  objects {{ {} }}", roles.join(" "));
    for (id, atoms) in &m.nodes {
        let _ = write!(out, "  node {id} ");
        write_atoms(&mut out, atoms);
        out.push('\n');
    }
    for e in &m.edges {
        let _ = write!(out, "  edge {} -> {} : {} add ", e.src, e.dst, e.op);
        write_atoms(&mut out, &e.add);
        out.push_str(" del ");
        write_atoms(&mut out, &e.del);
        out.push('\n');
    }
    out.push_str("}\n");
    KbSource::new(out, format!("<render:{}>", m.name))
}

/// Role name → concrete object id, plus the type of each bound object.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoleBinding {
    pub objects: BTreeMap<String, u32>,
    /// Type (kind) of each bound object, keyed by role name.
    pub types: BTreeMap<String, String>,
}

impl RoleBinding {
    pub fn bind(mut self, role: &str, id: u32, ty: &str) -> Self {
        self.objects.insert(role.to_string(), id);
        self.types.insert(role.to_string(), ty.to_string());
        self
    }

    pub fn get(&self, role: &str) -> Option<u32> {
        self.objects.get(role).copied()
    }
}

fn bind_atom(a: &GroundAtom, b: &RoleBinding) -> GroundAtom {
    GroundAtom::new(
        a.predicate.clone(),
        a.args
            .iter()
            .map(|x| match x {
                ObjectRef::Role(r) => b.objects.get(r).map(|&id| ObjectRef::Id(id)).unwrap_or_else(|| x.clone()),
                id => id.clone(),
            })
            .collect(),
    )
}

/// Substitutes concrete object ids for role names throughout the machine.
pub fn bind_roles(m: &StateMachine, binding: &RoleBinding) -> Result<StateMachine, BindError> {
    for role in binding.objects.keys() {
        if !m.roles.iter().any(|(r, _)| r == role) {
            return Err(BindError::UnknownRole(role.clone()));
        }
    }
    for (role, expected) in &m.roles {
        let id = binding.get(role).ok_or_else(|| BindError::UnboundRole(role.clone()))?;
        let found = binding.types.get(role).ok_or_else(|| BindError::UnboundRole(role.clone()))?;
        if found != expected {
            return Err(BindError::TypeMismatch { role: role.clone(), expected: expected.clone(), object: id, found: found.clone() });
        }
    }
    let set = |s: &SymbolicState| s.iter().map(|a| bind_atom(a, binding)).collect::<SymbolicState>();
    Ok(StateMachine {
        name: m.name.clone(),
        predicates: m.predicates.clone(),
        operators: m.operators.clone(),
        roles: m.roles.clone(),
        nodes: m.nodes.iter().map(|(k, v)| (k.clone(), set(v))).collect(),
        edges: m
            .edges
            .iter()
            .map(|e| Edge { src: e.src.clone(), dst: e.dst.clone(), op: bind_atom(&e.op, binding), add: set(&e.add), del: set(&e.del) })
            .collect(),
        initial: m.initial.clone(),
        goal: m.goal.clone(),
    })
}

/// The knowledge bases shipped with the crate, keyed by file stem.
pub const SHIPPED: &[(&str, &str)] = &[
    ("goto", include_str!("../kb/goto.kb")),
    ("pickup", include_str!("../kb/pickup.kb")),
    ("open", include_str!("../kb/open.kb")),
    ("put", include_str!("../kb/put.kb")),
    ("unlock", include_str!("../kb/unlock.kb")),
];

pub fn shipped(name: &str) -> Option<StateMachine> {
    SHIPPED.iter().find(|(n, _)| *n == name).map(|(n, text)| {
        parse_kb(&KbSource::new(*text, format!("kb/{n}.kb"))).expect("shipped knowledge bases are valid")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::plan_skeleton;
    use proptest::prelude::*;

    const MINIMAL: &str = "kb \"t\" { predicates {p/1;} operators {o/1;} objects {x: thing;} node v0 {} node goal {p(x)} edge v0 -> goal : o(x) add {p(x)} del {} }";

    #[test]
    fn minimal_machine() {
        let m = parse_kb(&KbSource::inline(MINIMAL)).unwrap();
        assert_eq!(m.nodes.len(), 2);
        assert_eq!(m.edges.len(), 1);
        assert_eq!(m.initial, "v0");
        let text = render_kb(&m).text;
        assert_eq!(
            text,
            "kb \"t\" {\n  predicates { p/1; }\n  operators { o/1; }\n  objects { x: thing; }\n  node goal { p(x) }\n  node v0 {}\n  edge v0 -> goal : o(x) add { p(x) } del {}\n}\n"
        );
    }

    #[test]
    fn unlock_shipped_shape() {
        let m = shipped("unlock").unwrap();
        assert_eq!(m.nodes.len(), 5);
        assert_eq!(m.edges.len(), 4);
        let ops: Vec<String> = plan_skeleton(&m).unwrap().steps.iter().map(|s| format!("{}:{}", s.node, s.op)).collect();
        assert_eq!(ops, ["v0:goto(key)", "v1:pick(key)", "v2:goto(door)", "v3:open(door)"]);
    }

    #[test]
    fn unknown_node_is_positioned() {
        let src = "kb \"t\" {\n predicates {p/1;}\n operators {o/1;}\n objects {x: thing;}\n node v0 {}\n node goal {p(x)}\n edge v0 -> v9 : o(x) add {p(x)} del {}\n}";
        match parse_kb(&KbSource::inline(src)) {
            Err(KbError::UnknownNode { pos, node, .. }) => {
                assert_eq!(node, "v9");
                assert_eq!(pos.line, 7);
                assert_eq!(pos.col, 13);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_kb(&KbSource::inline("kb \"t\" {\n  predicates { p 1; }")).unwrap_err();
        match err {
            KbError::Syntax { pos, .. } => assert_eq!((pos.line, pos.col), (2, 18)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_kb(&KbSource::inline("")), Err(KbError::Syntax { .. })));
        assert!(matches!(parse_kb(&KbSource::inline("kb \"t")), Err(KbError::Syntax { .. })));
    }

    #[test]
    fn comments_and_crlf() {
        let src = "# header\r\nkb \"t\" { # name\r\n predicates {p/1;} operators {o/1;} objects {x: thing;}\r\n node v0 {} # start\r\n node goal {p(x)} edge v0->goal : o(x) add {p(x)} del {} }";
        let m = parse_kb(&KbSource::inline(src)).unwrap();
        let canon = parse_kb(&KbSource::inline(MINIMAL)).unwrap();
        assert_eq!(m, canon);
        assert!(!render_kb(&m).text.contains('#'));
    }

    #[test]
    fn semantic_errors_delegate_to_validator() {
        let src = "kb \"t\" { predicates {p/1;} operators {o/1;} objects {x: thing;} node v0 {} node goal {p(x)} edge v0 -> goal : o(x) add {} del {} }";
        match parse_kb(&KbSource::inline(src)) {
            Err(KbError::Invalid { violations, .. }) => assert_eq!(violations, vec![Violation::EffectLaw { edge: 0 }]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bind_roles_substitutes_and_checks() {
        let m = shipped("unlock").unwrap();
        let b = RoleBinding::default().bind("key", 3, "key").bind("door", 7, "door");
        let g = bind_roles(&m, &b).unwrap();
        assert!(validate_machine(&g).is_empty());
        assert!(g.tracked_atoms().iter().all(|a| a.object_ids().is_some()));
        assert!(g.tracked_atoms().contains(&GroundAtom::ids("holding", &[3])));
        assert_eq!(g.edges.len(), m.edges.len());

        let missing = RoleBinding::default().bind("key", 3, "key");
        assert_eq!(bind_roles(&m, &missing), Err(BindError::UnboundRole("door".into())));

        let wrong = RoleBinding::default().bind("key", 7, "ball").bind("door", 8, "door");
        assert!(matches!(bind_roles(&m, &wrong), Err(BindError::TypeMismatch { .. })));
    }

    #[test]
    fn shipped_files_round_trip() {
        for (name, _) in SHIPPED {
            let m = shipped(name).unwrap();
            assert!(validate_machine(&m).is_empty(), "{name}");
            let again = parse_kb(&render_kb(&m)).unwrap();
            assert_eq!(again, m, "{name}");
        }
    }

    proptest! {
        #[test]
        fn parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let _ = parse_kb(&KbSource::inline(text));
        }

        #[test]
        fn parser_is_total_on_mutated_source(cut in 0usize..MINIMAL.len(), ch in proptest::char::range(' ', '~')) {
            let mut text: String = MINIMAL.chars().take(cut).collect();
            text.push(ch);
            text.extend(MINIMAL.chars().skip(cut + 1));
            let _ = parse_kb(&KbSource::inline(text));
        }
    }
}
