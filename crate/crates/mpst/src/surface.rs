//! Text grammar, parser, and pretty-printer for global types, local types,
//! typing contexts, and processes. This is the single serialization format
//! used by the CLI and all golden tests (`.mpst` files, UTF-8).
//!
//! Declarations are `global N = G`, `local N = T`, `context N = { ... }`,
//! and `process N = P`; later declarations may reference earlier ones by
//! name, which the parser resolves by substitution.

use std::fmt;

use thiserror::Error;

use crate::ident::{Label, ProcVar, RecVar, Role, Session, ValVar};
use crate::picalc::{
    Annotation, ChannelExpr, Literal, ProcBranch, Process, ValueExpr,
};
use crate::types::{
    BasicSort, ContextKey, GlobalBranch, GlobalType, LocalBranch, LocalType, Sort,
    TransitionLabel, TypingContext, WfIssue,
};

/// A 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("syntax error at {pos}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub expected: String,
    pub found: String,
}

/// A well-formedness diagnostic attached to a parsed declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDiagnostic {
    pub decl: String,
    pub pos: Pos,
    pub issue: WfIssue,
}

impl fmt::Display for FileDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: in `{}`: {}", self.pos, self.decl, self.issue)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeclBody {
    Global(GlobalType),
    Local(LocalType),
    Context(TypingContext),
    Process(Process),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decl {
    pub name: String,
    pub pos: Pos,
    pub body: DeclBody,
}

/// A parsed `.mpst` file with attached well-formedness diagnostics.
#[derive(Debug, Clone, Default)]
pub struct SourceFile {
    pub decls: Vec<Decl>,
    pub diagnostics: Vec<FileDiagnostic>,
}

impl SourceFile {
    pub fn find(&self, name: &str) -> Option<&Decl> {
        self.decls.iter().find(|d| d.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalType> {
        match self.find(name)? {
            Decl {
                body: DeclBody::Global(g),
                ..
            } => Some(g),
            _ => None,
        }
    }

    pub fn local(&self, name: &str) -> Option<&LocalType> {
        match self.find(name)? {
            Decl {
                body: DeclBody::Local(t),
                ..
            } => Some(t),
            _ => None,
        }
    }

    pub fn context(&self, name: &str) -> Option<&TypingContext> {
        match self.find(name)? {
            Decl {
                body: DeclBody::Context(c),
                ..
            } => Some(c),
            _ => None,
        }
    }

    pub fn process(&self, name: &str) -> Option<&Process> {
        match self.find(name)? {
            Decl {
                body: DeclBody::Process(p),
                ..
            } => Some(p),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Arrow,     // ->
    Dot,       // .
    Comma,     // ,
    Colon,     // :
    LBrace,    // {
    RBrace,    // }
    LParen,    // (
    RParen,    // )
    LBracket,  // [
    RBracket,  // ]
    Lt,        // <
    Gt,        // >
    Pipe,      // |
    Amp,       // &
    Eq,        // =
    Oplus,     // (+)
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Str(s) => write!(f, "{s:?}"),
            Tok::Arrow => write!(f, "`->`"),
            Tok::Dot => write!(f, "`.`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Colon => write!(f, "`:`"),
            Tok::LBrace => write!(f, "`{{`"),
            Tok::RBrace => write!(f, "`}}`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::LBracket => write!(f, "`[`"),
            Tok::RBracket => write!(f, "`]`"),
            Tok::Lt => write!(f, "`<`"),
            Tok::Gt => write!(f, "`>`"),
            Tok::Pipe => write!(f, "`|`"),
            Tok::Amp => write!(f, "`&`"),
            Tok::Eq => write!(f, "`=`"),
            Tok::Oplus => write!(f, "`(+)`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    at: usize,
    line: usize,
    col: usize,
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_'
}

fn is_ident_continue(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'\''
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            at: 0,
            line: 1,
            col: 1,
        }
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.src.get(self.at).copied()?;
        self.at += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.at).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.at + 1).copied()
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.peek2() == Some(b'/') => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn next_token(&mut self) -> Result<(Tok, Pos), SyntaxError> {
        self.skip_trivia();
        let pos = self.pos();
        let Some(c) = self.peek() else {
            return Ok((Tok::Eof, pos));
        };
        match c {
            b'-' => {
                self.bump();
                match self.peek() {
                    Some(b'>') => {
                        self.bump();
                        Ok((Tok::Arrow, pos))
                    }
                    Some(d) if d.is_ascii_digit() => {
                        let n = self.lex_number(pos)?;
                        Ok((Tok::Int(-n), pos))
                    }
                    other => Err(SyntaxError {
                        pos,
                        expected: "`->` or a number".into(),
                        found: other
                            .map(|c| format!("`{}`", c as char))
                            .unwrap_or_else(|| "end of input".into()),
                    }),
                }
            }
            b'.' => {
                self.bump();
                Ok((Tok::Dot, pos))
            }
            b',' => {
                self.bump();
                Ok((Tok::Comma, pos))
            }
            b':' => {
                self.bump();
                Ok((Tok::Colon, pos))
            }
            b'{' => {
                self.bump();
                Ok((Tok::LBrace, pos))
            }
            b'}' => {
                self.bump();
                Ok((Tok::RBrace, pos))
            }
            b'(' => {
                if self.peek2() == Some(b'+') && self.src.get(self.at + 2) == Some(&b')') {
                    self.bump();
                    self.bump();
                    self.bump();
                    Ok((Tok::Oplus, pos))
                } else {
                    self.bump();
                    Ok((Tok::LParen, pos))
                }
            }
            b')' => {
                self.bump();
                Ok((Tok::RParen, pos))
            }
            b'[' => {
                self.bump();
                Ok((Tok::LBracket, pos))
            }
            b']' => {
                self.bump();
                Ok((Tok::RBracket, pos))
            }
            b'<' => {
                self.bump();
                Ok((Tok::Lt, pos))
            }
            b'>' => {
                self.bump();
                Ok((Tok::Gt, pos))
            }
            b'|' => {
                self.bump();
                Ok((Tok::Pipe, pos))
            }
            b'&' => {
                self.bump();
                Ok((Tok::Amp, pos))
            }
            b'=' => {
                self.bump();
                Ok((Tok::Eq, pos))
            }
            b'"' => {
                self.bump();
                let mut out = String::new();
                loop {
                    match self.bump() {
                        Some(b'"') => break,
                        Some(b'\\') => match self.bump() {
                            Some(b'n') => out.push('\n'),
                            Some(b't') => out.push('\t'),
                            Some(b'\\') => out.push('\\'),
                            Some(b'"') => out.push('"'),
                            other => {
                                return Err(SyntaxError {
                                    pos: self.pos(),
                                    expected: "escape character".into(),
                                    found: other
                                        .map(|c| format!("`{}`", c as char))
                                        .unwrap_or_else(|| "end of input".into()),
                                })
                            }
                        },
                        Some(c) => out.push(c as char),
                        None => {
                            return Err(SyntaxError {
                                pos,
                                expected: "closing `\"`".into(),
                                found: "end of input".into(),
                            })
                        }
                    }
                }
                Ok((Tok::Str(out), pos))
            }
            c if c.is_ascii_digit() => {
                let n = self.lex_number(pos)?;
                Ok((Tok::Int(n), pos))
            }
            c if is_ident_start(c) => {
                let start = self.at;
                while let Some(c) = self.peek() {
                    if is_ident_continue(c) {
                        self.bump();
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.at])
                    .expect("identifier bytes are ASCII")
                    .to_string();
                Ok((Tok::Ident(text), pos))
            }
            other => Err(SyntaxError {
                pos,
                expected: "a token".into(),
                found: format!("`{}`", other as char),
            }),
        }
    }

    fn lex_number(&mut self, pos: Pos) -> Result<i64, SyntaxError> {
        let start = self.at;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                self.bump();
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.at]).unwrap();
        text.parse().map_err(|_| SyntaxError {
            pos,
            expected: "an integer".into(),
            found: format!("`{text}`"),
        })
    }
}

fn tokenize(src: &str) -> Result<Vec<(Tok, Pos)>, SyntaxError> {
    let mut lexer = Lexer::new(src);
    let mut out = Vec::new();
    loop {
        let (tok, pos) = lexer.next_token()?;
        let done = tok == Tok::Eof;
        out.push((tok, pos));
        if done {
            return Ok(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

const KEYWORDS: &[&str] = &[
    "global", "local", "context", "process", "rec", "end", "new", "in", "with", "def", "true",
    "false", "err", "int", "bool", "real", "str", "unit",
];

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    /// Declarations parsed so far; later declarations resolve names here.
    file: SourceFile,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error(&self, expected: impl Into<String>) -> SyntaxError {
        SyntaxError {
            pos: self.pos(),
            expected: expected.into(),
            found: self.peek().to_string(),
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), SyntaxError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(tok.to_string()))
        }
    }

    fn eat(&mut self, tok: Tok) -> bool {
        if *self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.error(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if let Tok::Ident(s) = self.peek() {
            if s == kw {
                self.bump();
                return true;
            }
        }
        false
    }

    // -- types ---------------------------------------------------------

    fn parse_sort(&mut self, recs: &[RecVar]) -> Result<Sort, SyntaxError> {
        if self.eat(Tok::Lt) {
            let t = self.parse_local(recs)?;
            self.expect(Tok::Gt)?;
            return Ok(Sort::session(t));
        }
        let pos = self.pos();
        let name = self.ident("a sort")?;
        BasicSort::from_name(&name)
            .map(Sort::Basic)
            .ok_or(SyntaxError {
                pos,
                expected: "one of int, bool, real, str, unit, or `<T>`".into(),
                found: format!("`{name}`"),
            })
    }

    fn parse_global(&mut self, recs: &[RecVar]) -> Result<GlobalType, SyntaxError> {
        if self.keyword("end") {
            return Ok(GlobalType::End);
        }
        if self.keyword("rec") {
            let v = RecVar::new(self.ident("a recursion variable")?);
            self.expect(Tok::Dot)?;
            let mut inner = recs.to_vec();
            inner.push(v.clone());
            let body = self.parse_global(&inner)?;
            return Ok(GlobalType::Rec(v, Box::new(body)));
        }
        let pos = self.pos();
        let name = self.ident("a global type")?;
        if *self.peek() != Tok::Arrow {
            // recursion variable or reference to an earlier global
            let var = RecVar::new(&name);
            if recs.contains(&var) {
                return Ok(GlobalType::Var(var));
            }
            if let Some(g) = self.file.global(&name) {
                return Ok(g.clone());
            }
            if KEYWORDS.contains(&name.as_str()) {
                return Err(SyntaxError {
                    pos,
                    expected: "a global type".into(),
                    found: format!("`{name}`"),
                });
            }
            return Ok(GlobalType::Var(var));
        }
        self.expect(Tok::Arrow)?;
        let to = Role::new(self.ident("a role")?);
        let from = Role::new(&name);
        let branches = if self.eat(Tok::Colon) {
            vec![self.parse_global_branch(recs)?]
        } else if self.eat(Tok::LBrace) {
            let mut bs = vec![self.parse_global_branch(recs)?];
            while self.eat(Tok::Comma) {
                bs.push(self.parse_global_branch(recs)?);
            }
            self.expect(Tok::RBrace)?;
            bs
        } else {
            return Err(self.error("`:` or `{` after transmission head"));
        };
        Ok(GlobalType::Comm { from, to, branches })
    }

    fn parse_global_branch(&mut self, recs: &[RecVar]) -> Result<GlobalBranch, SyntaxError> {
        let label = Label::new(self.ident("a branch label")?);
        let payload = if self.eat(Tok::LParen) {
            let s = self.parse_sort(recs)?;
            self.expect(Tok::RParen)?;
            s
        } else {
            Sort::UNIT
        };
        let cont = if self.eat(Tok::Dot) {
            self.parse_global(recs)?
        } else {
            GlobalType::End
        };
        Ok(GlobalBranch {
            label,
            payload,
            cont,
        })
    }

    fn parse_local(&mut self, recs: &[RecVar]) -> Result<LocalType, SyntaxError> {
        if self.keyword("end") {
            return Ok(LocalType::End);
        }
        if self.keyword("rec") {
            let v = RecVar::new(self.ident("a recursion variable")?);
            self.expect(Tok::Dot)?;
            let mut inner = recs.to_vec();
            inner.push(v.clone());
            let body = self.parse_local(&inner)?;
            return Ok(LocalType::Rec(v, Box::new(body)));
        }
        let pos = self.pos();
        let name = self.ident("a local type")?;
        let internal = match self.peek() {
            Tok::Oplus => true,
            Tok::Amp => false,
            _ => {
                let var = RecVar::new(&name);
                if recs.contains(&var) {
                    return Ok(LocalType::Var(var));
                }
                if let Some(t) = self.file.local(&name) {
                    return Ok(t.clone());
                }
                if KEYWORDS.contains(&name.as_str()) {
                    return Err(SyntaxError {
                        pos,
                        expected: "a local type".into(),
                        found: format!("`{name}`"),
                    });
                }
                return Ok(LocalType::Var(var));
            }
        };
        self.bump();
        let peer = Role::new(&name);
        let branches = if self.eat(Tok::LBrace) {
            let mut bs = vec![self.parse_local_branch(recs)?];
            while self.eat(Tok::Comma) {
                bs.push(self.parse_local_branch(recs)?);
            }
            self.expect(Tok::RBrace)?;
            bs
        } else {
            vec![self.parse_local_branch(recs)?]
        };
        Ok(if internal {
            LocalType::Internal { peer, branches }
        } else {
            LocalType::External { peer, branches }
        })
    }

    fn parse_local_branch(&mut self, recs: &[RecVar]) -> Result<LocalBranch, SyntaxError> {
        let label = Label::new(self.ident("a branch label")?);
        let payload = if self.eat(Tok::LParen) {
            let s = self.parse_sort(recs)?;
            self.expect(Tok::RParen)?;
            s
        } else {
            Sort::UNIT
        };
        let cont = if self.eat(Tok::Dot) {
            self.parse_local(recs)?
        } else {
            LocalType::End
        };
        Ok(LocalBranch {
            label,
            payload,
            cont,
        })
    }

    fn parse_context(&mut self) -> Result<TypingContext, SyntaxError> {
        self.expect(Tok::LBrace)?;
        let mut ctx = TypingContext::new();
        if self.eat(Tok::RBrace) {
            return Ok(ctx);
        }
        loop {
            let pos = self.pos();
            let name = self.ident("a context entry")?;
            let (key, sort) = if self.eat(Tok::LBracket) {
                let role = Role::new(self.ident("a role")?);
                self.expect(Tok::RBracket)?;
                self.expect(Tok::Colon)?;
                let t = self.parse_local(&[])?;
                (
                    ContextKey::Endpoint(Session::new(&name), role),
                    Sort::session(t),
                )
            } else {
                self.expect(Tok::Colon)?;
                let s = self.parse_sort(&[])?;
                (ContextKey::Var(ValVar::new(&name)), s)
            };
            if ctx.insert(key.clone(), sort).is_err() {
                return Err(SyntaxError {
                    pos,
                    expected: "a fresh context key".into(),
                    found: format!("duplicate `{key}`"),
                });
            }
            if self.eat(Tok::RBrace) {
                return Ok(ctx);
            }
            self.expect(Tok::Comma)?;
        }
    }

    // -- processes -----------------------------------------------------

    fn parse_process(&mut self) -> Result<Process, SyntaxError> {
        let mut items = vec![self.parse_item()?];
        while self.eat(Tok::Pipe) {
            items.push(self.parse_item()?);
        }
        let mut it = items.into_iter();
        let first = it.next().unwrap();
        Ok(it.fold(first, Process::par))
    }

    fn parse_item(&mut self) -> Result<Process, SyntaxError> {
        match self.peek().clone() {
            Tok::Int(0) => {
                self.bump();
                Ok(Process::Inaction)
            }
            Tok::LParen => {
                self.bump();
                let p = self.parse_process()?;
                self.expect(Tok::RParen)?;
                Ok(p)
            }
            Tok::Ident(name) => {
                if name == "err" {
                    self.bump();
                    return Ok(Process::Error);
                }
                if name == "new" {
                    return self.parse_restriction();
                }
                if name == "def" {
                    return self.parse_def();
                }
                self.parse_ident_item()
            }
            _ => Err(self.error("a process")),
        }
    }

    fn parse_restriction(&mut self) -> Result<Process, SyntaxError> {
        self.expect(Tok::Ident("new".into()))?;
        let session = Session::new(self.ident("a session name")?);
        self.expect(Tok::Colon)?;
        let annotation = if *self.peek() == Tok::LBrace {
            Annotation::Context(self.parse_context()?)
        } else {
            let g = self.parse_global(&[])?;
            if self.keyword("with") {
                let ctx = if *self.peek() == Tok::LBrace {
                    self.parse_context()?
                } else {
                    let pos = self.pos();
                    let name = self.ident("a context name")?;
                    self.file.context(&name).cloned().ok_or(SyntaxError {
                        pos,
                        expected: "a declared context name".into(),
                        found: format!("`{name}`"),
                    })?
                };
                Annotation::Paired(g, ctx)
            } else {
                Annotation::Global(g)
            }
        };
        if !self.keyword("in") {
            return Err(self.error("`in`"));
        }
        let body = self.parse_process()?;
        Ok(Process::Restriction {
            session,
            annotation,
            body: Box::new(body),
        })
    }

    fn parse_def(&mut self) -> Result<Process, SyntaxError> {
        self.expect(Tok::Ident("def".into()))?;
        let name = ProcVar::new(self.ident("a process variable")?);
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if !self.eat(Tok::RParen) {
            loop {
                let x = ValVar::new(self.ident("a parameter")?);
                self.expect(Tok::Colon)?;
                let s = self.parse_sort(&[])?;
                params.push((x, s));
                if self.eat(Tok::RParen) {
                    break;
                }
                self.expect(Tok::Comma)?;
            }
        }
        self.expect(Tok::Eq)?;
        let body = self.parse_process()?;
        if !self.keyword("in") {
            return Err(self.error("`in`"));
        }
        let scope = self.parse_process()?;
        Ok(Process::Def {
            name,
            params,
            body: Box::new(body),
            scope: Box::new(scope),
        })
    }

    /// Parses an item that starts with an identifier: a prefix on a channel,
    /// a call, or a reference to an earlier `process` declaration.
    fn parse_ident_item(&mut self) -> Result<Process, SyntaxError> {
        let pos = self.pos();
        let name = self.ident("a process")?;
        match self.peek().clone() {
            Tok::LBracket => {
                self.bump();
                let first = Role::new(self.ident("a role")?);
                self.expect(Tok::RBracket)?;
                let channel;
                let other;
                if self.eat(Tok::LBracket) {
                    // s[p][q] ... : endpoint channel
                    other = Role::new(self.ident("a role")?);
                    self.expect(Tok::RBracket)?;
                    channel = ChannelExpr::Endpoint(Session::new(&name), first);
                } else {
                    // x[q] ... : variable channel
                    other = first;
                    channel = ChannelExpr::Var(ValVar::new(&name));
                }
                match self.peek() {
                    Tok::Oplus => {
                        self.bump();
                        let label = Label::new(self.ident("a label")?);
                        let payload = if self.eat(Tok::Lt) {
                            let v = self.parse_value()?;
                            self.expect(Tok::Gt)?;
                            v
                        } else {
                            ValueExpr::Lit(Literal::Unit)
                        };
                        let cont = if self.eat(Tok::Dot) {
                            self.parse_item()?
                        } else {
                            Process::Inaction
                        };
                        Ok(Process::Select {
                            channel,
                            to: other,
                            label,
                            payload,
                            cont: Box::new(cont),
                        })
                    }
                    Tok::Amp => {
                        self.bump();
                        let branches = if self.eat(Tok::LBrace) {
                            let mut bs = vec![self.parse_proc_branch()?];
                            while self.eat(Tok::Comma) {
                                bs.push(self.parse_proc_branch()?);
                            }
                            self.expect(Tok::RBrace)?;
                            bs
                        } else {
                            vec![self.parse_proc_branch()?]
                        };
                        Ok(Process::Branch {
                            channel,
                            from: other,
                            branches,
                        })
                    }
                    _ => Err(self.error("`(+)` or `&` after channel")),
                }
            }
            Tok::LParen => {
                self.bump();
                let mut args = Vec::new();
                if !self.eat(Tok::RParen) {
                    loop {
                        args.push(self.parse_value()?);
                        if self.eat(Tok::RParen) {
                            break;
                        }
                        self.expect(Tok::Comma)?;
                    }
                }
                Ok(Process::Call {
                    name: ProcVar::new(&name),
                    args,
                })
            }
            _ => self.file.process(&name).cloned().ok_or(SyntaxError {
                pos,
                expected: "a declared process name".into(),
                found: format!("`{name}`"),
            }),
        }
    }

    fn parse_proc_branch(&mut self) -> Result<ProcBranch, SyntaxError> {
        let label = Label::new(self.ident("a branch label")?);
        let binder = if self.eat(Tok::LParen) {
            let x = ValVar::new(self.ident("a binder")?);
            self.expect(Tok::RParen)?;
            x
        } else {
            ValVar::new("_")
        };
        let cont = if self.eat(Tok::Dot) {
            self.parse_item()?
        } else {
            Process::Inaction
        };
        Ok(ProcBranch {
            label,
            binder,
            cont,
        })
    }

    fn parse_value(&mut self) -> Result<ValueExpr, SyntaxError> {
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(ValueExpr::Lit(Literal::Int(n)))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(ValueExpr::Lit(Literal::Str(s)))
            }
            Tok::LParen => {
                self.bump();
                self.expect(Tok::RParen)?;
                Ok(ValueExpr::Lit(Literal::Unit))
            }
            Tok::Ident(name) => {
                self.bump();
                match name.as_str() {
                    "true" => Ok(ValueExpr::Lit(Literal::Bool(true))),
                    "false" => Ok(ValueExpr::Lit(Literal::Bool(false))),
                    _ => {
                        if self.eat(Tok::LBracket) {
                            let role = Role::new(self.ident("a role")?);
                            self.expect(Tok::RBracket)?;
                            Ok(ValueExpr::Endpoint(Session::new(&name), role))
                        } else {
                            Ok(ValueExpr::Var(ValVar::new(&name)))
                        }
                    }
                }
            }
            _ => Err(self.error("a value")),
        }
    }
}

/// Parses a `.mpst` source file. Every parsed type is checked for
/// well-formedness; diagnostics carry the declaration's position.
pub fn parse(text: &str) -> Result<SourceFile, SyntaxError> {
    let toks = tokenize(text)?;
    let mut parser = Parser {
        toks,
        at: 0,
        file: SourceFile::default(),
    };
    loop {
        if parser.peek() == &Tok::Eof {
            break;
        }
        let pos = parser.pos();
        let kind = parser.ident("`global`, `local`, `context`, or `process`")?;
        let name = parser.ident("a declaration name")?;
        if KEYWORDS.contains(&name.as_str()) {
            return Err(SyntaxError {
                pos,
                expected: "a declaration name".into(),
                found: format!("reserved word `{name}`"),
            });
        }
        parser.expect(Tok::Eq)?;
        let body = match kind.as_str() {
            "global" => DeclBody::Global(parser.parse_global(&[])?),
            "local" => DeclBody::Local(parser.parse_local(&[])?),
            "context" => DeclBody::Context(parser.parse_context()?),
            "process" => DeclBody::Process(parser.parse_process()?),
            _ => {
                return Err(SyntaxError {
                    pos,
                    expected: "`global`, `local`, `context`, or `process`".into(),
                    found: format!("`{kind}`"),
                })
            }
        };
        if parser.file.find(&name).is_some() {
            return Err(SyntaxError {
                pos,
                expected: "a fresh declaration name".into(),
                found: format!("duplicate `{name}`"),
            });
        }
        let decl = Decl {
            name: name.clone(),
            pos,
            body,
        };
        attach_diagnostics(&decl, &mut parser.file.diagnostics);
        parser.file.decls.push(decl);
    }
    Ok(parser.file)
}

fn attach_diagnostics(decl: &Decl, out: &mut Vec<FileDiagnostic>) {
    let mut push = |issues: Vec<WfIssue>| {
        for issue in issues {
            out.push(FileDiagnostic {
                decl: decl.name.clone(),
                pos: decl.pos,
                issue,
            });
        }
    };
    match &decl.body {
        DeclBody::Global(g) => push(g.well_formed()),
        DeclBody::Local(t) => push(t.well_formed()),
        DeclBody::Context(c) => {
            for (_, sort) in c.iter() {
                if let Sort::Session(t) = sort {
                    push(t.well_formed());
                }
            }
        }
        DeclBody::Process(p) => {
            let mut issues = Vec::new();
            process_issues(p, &mut issues);
            push(issues);
        }
    }
}

fn process_issues(p: &Process, out: &mut Vec<WfIssue>) {
    match p {
        Process::Inaction | Process::Error | Process::Call { .. } => {}
        Process::Restriction {
            annotation, body, ..
        } => {
            match annotation {
                Annotation::Global(g) => out.extend(g.well_formed()),
                Annotation::Context(c) => {
                    for (_, sort) in c.iter() {
                        if let Sort::Session(t) = sort {
                            out.extend(t.well_formed());
                        }
                    }
                }
                Annotation::Paired(g, c) => {
                    out.extend(g.well_formed());
                    for (_, sort) in c.iter() {
                        if let Sort::Session(t) = sort {
                            out.extend(t.well_formed());
                        }
                    }
                }
            }
            process_issues(body, out);
        }
        Process::Select { cont, .. } => process_issues(cont, out),
        Process::Branch { branches, .. } => {
            let mut seen = std::collections::BTreeSet::new();
            for b in branches {
                if !seen.insert(b.label.clone()) {
                    out.push(WfIssue {
                        kind: crate::types::WfIssueKind::DuplicateLabel(b.label.clone()),
                        path: vec![b.label.clone()],
                    });
                }
                process_issues(&b.cont, out);
            }
        }
        Process::Def { body, scope, .. } => {
            process_issues(body, out);
            process_issues(scope, out);
        }
        Process::Par(l, r) => {
            process_issues(l, out);
            process_issues(r, out);
        }
    }
}

/// Parses a standalone local type in the scope of a file's declarations.
pub fn parse_local_in_scope(file: &SourceFile, text: &str) -> Result<LocalType, SyntaxError> {
    let toks = tokenize(text)?;
    let mut parser = Parser {
        toks,
        at: 0,
        file: file.clone(),
    };
    let t = parser.parse_local(&[])?;
    if parser.peek() != &Tok::Eof {
        return Err(parser.error("end of input"));
    }
    Ok(t)
}

/// Parses a standalone global type in the scope of a file's declarations.
pub fn parse_global_in_scope(file: &SourceFile, text: &str) -> Result<GlobalType, SyntaxError> {
    let toks = tokenize(text)?;
    let mut parser = Parser {
        toks,
        at: 0,
        file: file.clone(),
    };
    let t = parser.parse_global(&[])?;
    if parser.peek() != &Tok::Eof {
        return Err(parser.error("end of input"));
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

pub fn print_sort(s: &Sort) -> String {
    match s {
        Sort::Basic(b) => b.name().to_string(),
        Sort::Session(t) => format!("<{}>", print_local(t)),
    }
}

fn print_payload(s: &Sort) -> String {
    if *s == Sort::UNIT {
        String::new()
    } else {
        format!("({})", print_sort(s))
    }
}

pub fn print_global(g: &GlobalType) -> String {
    match g {
        GlobalType::Comm { from, to, branches } => {
            if branches.len() == 1 {
                let b = &branches[0];
                format!(
                    "{from}->{to}:{}{} . {}",
                    b.label,
                    print_payload(&b.payload),
                    print_global(&b.cont)
                )
            } else {
                let bs: Vec<String> = branches
                    .iter()
                    .map(|b| {
                        format!(
                            "{}{} . {}",
                            b.label,
                            print_payload(&b.payload),
                            print_global(&b.cont)
                        )
                    })
                    .collect();
                format!("{from}->{to} {{ {} }}", bs.join(", "))
            }
        }
        GlobalType::Rec(v, body) => format!("rec {v} . {}", print_global(body)),
        GlobalType::Var(v) => v.to_string(),
        GlobalType::End => "end".to_string(),
    }
}

pub fn print_local(t: &LocalType) -> String {
    match t {
        LocalType::Internal { peer, branches } | LocalType::External { peer, branches } => {
            let op = if matches!(t, LocalType::Internal { .. }) {
                "(+)"
            } else {
                "&"
            };
            if branches.len() == 1 {
                let b = &branches[0];
                format!(
                    "{peer}{op}{}{} . {}",
                    b.label,
                    print_payload(&b.payload),
                    print_local(&b.cont)
                )
            } else {
                let bs: Vec<String> = branches
                    .iter()
                    .map(|b| {
                        format!(
                            "{}{} . {}",
                            b.label,
                            print_payload(&b.payload),
                            print_local(&b.cont)
                        )
                    })
                    .collect();
                format!("{peer}{op}{{ {} }}", bs.join(", "))
            }
        }
        LocalType::Rec(v, body) => format!("rec {v} . {}", print_local(body)),
        LocalType::Var(v) => v.to_string(),
        LocalType::End => "end".to_string(),
    }
}

pub fn print_context(c: &TypingContext) -> String {
    if c.is_empty() {
        return "{}".to_string();
    }
    let entries: Vec<String> = c
        .iter()
        .map(|(k, sort)| match (k, sort) {
            (ContextKey::Endpoint(s, r), Sort::Session(t)) => {
                format!("{s}[{r}]: {}", print_local(t))
            }
            (ContextKey::Endpoint(s, r), basic) => {
                format!("{s}[{r}]: {}", print_sort(basic))
            }
            (ContextKey::Var(x), sort) => format!("{x}: {}", print_sort(sort)),
        })
        .collect();
    format!("{{ {} }}", entries.join(", "))
}

pub fn print_value(v: &ValueExpr) -> String {
    match v {
        ValueExpr::Lit(Literal::Int(n)) => n.to_string(),
        ValueExpr::Lit(Literal::Bool(b)) => b.to_string(),
        ValueExpr::Lit(Literal::Str(s)) => {
            format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
        }
        ValueExpr::Lit(Literal::Unit) => "()".to_string(),
        ValueExpr::Var(x) => x.to_string(),
        ValueExpr::Endpoint(s, r) => format!("{s}[{r}]"),
    }
}

pub fn print_channel(c: &ChannelExpr) -> String {
    match c {
        ChannelExpr::Var(x) => x.to_string(),
        ChannelExpr::Endpoint(s, r) => format!("{s}[{r}]"),
    }
}

fn print_annotation(a: &Annotation) -> String {
    match a {
        Annotation::Global(g) => print_global(g),
        Annotation::Context(c) => print_context(c),
        Annotation::Paired(g, c) => format!("{} with {}", print_global(g), print_context(c)),
    }
}

pub fn print_process(p: &Process) -> String {
    print_process_prec(p, false)
}

fn print_process_prec(p: &Process, atom: bool) -> String {
    match p {
        Process::Inaction => "0".to_string(),
        Process::Error => "err".to_string(),
        Process::Par(_, _) => {
            let mut parts = Vec::new();
            collect_par(p, &mut parts);
            let inner = parts
                .iter()
                .map(|q| print_process_prec(q, true))
                .collect::<Vec<_>>()
                .join(" | ");
            if atom {
                format!("({inner})")
            } else {
                inner
            }
        }
        Process::Restriction {
            session,
            annotation,
            body,
        } => {
            let inner = format!(
                "new {session} : {} in {}",
                print_annotation(annotation),
                print_process_prec(body, false)
            );
            if atom {
                format!("({inner})")
            } else {
                inner
            }
        }
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            let ps: Vec<String> = params
                .iter()
                .map(|(x, s)| format!("{x}: {}", print_sort(s)))
                .collect();
            let inner = format!(
                "def {name}({}) = {} in {}",
                ps.join(", "),
                print_process_prec(body, false),
                print_process_prec(scope, false)
            );
            if atom {
                format!("({inner})")
            } else {
                inner
            }
        }
        Process::Select {
            channel,
            to,
            label,
            payload,
            cont,
        } => {
            let payload_txt = match payload {
                ValueExpr::Lit(Literal::Unit) => String::new(),
                other => format!("<{}>", print_value(other)),
            };
            format!(
                "{}[{to}](+){label}{payload_txt} . {}",
                print_channel(channel),
                print_process_prec(cont, true)
            )
        }
        Process::Branch {
            channel,
            from,
            branches,
        } => {
            let body = |b: &ProcBranch| {
                let binder = if b.binder.as_str() == "_" {
                    String::new()
                } else {
                    format!("({})", b.binder)
                };
                format!("{}{binder} . {}", b.label, print_process_prec(&b.cont, true))
            };
            if branches.len() == 1 {
                format!(
                    "{}[{from}]&{}",
                    print_channel(channel),
                    body(&branches[0])
                )
            } else {
                let bs: Vec<String> = branches.iter().map(body).collect();
                format!("{}[{from}]&{{ {} }}", print_channel(channel), bs.join(", "))
            }
        }
        Process::Call { name, args } => {
            let rendered: Vec<String> = args.iter().map(print_value).collect();
            format!("{name}({})", rendered.join(", "))
        }
    }
}

fn collect_par<'p>(p: &'p Process, out: &mut Vec<&'p Process>) {
    if let Process::Par(l, r) = p {
        collect_par(l, out);
        collect_par(r, out);
    } else {
        out.push(p);
    }
}

impl fmt::Display for GlobalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_global(self))
    }
}

impl fmt::Display for LocalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_local(self))
    }
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_sort(self))
    }
}

impl fmt::Display for TypingContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_context(self))
    }
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_process(self))
    }
}

impl fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionLabel::Output {
                session,
                subject,
                peer,
                label,
                payload,
            } => write!(f, "{session}:{subject}!{peer}:{label}{}", print_payload(payload)),
            TransitionLabel::Input {
                session,
                subject,
                peer,
                label,
                payload,
            } => write!(f, "{session}:{subject}?{peer}:{label}{}", print_payload(payload)),
            TransitionLabel::Transmission {
                session,
                from,
                to,
                label,
            } => write!(f, "{session}:{from}->{to}:{label}"),
        }
    }
}
