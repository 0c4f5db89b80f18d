//! Parameter-sweep plan files.
//!
//! The grammar is line oriented:
//!
//! ```text
//! parameter NAME [label "TEXT"] integer|float default VALUE [;]
//! parameter NAME [label "TEXT"] integer|float range from A to B step C [;]
//! parameter NAME = VALUE [;]
//! NAME = VALUE [;]
//! task NAME
//!     [node:]copy SRC DST
//!     [node:]execute ARG...
//!     # comment
//! endtask
//! ```
//!
//! A `parameter` declaration not closed by `;` continues on following lines
//! that start with one of its keywords (`step`, `to`, ...). An `execute`
//! argument list continues on any following line that is not itself a
//! directive. Range bounds are literals or names of constants and
//! default-valued parameters.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlanErrorKind {
    #[error("duplicate parameter {0:?}")]
    DuplicateParameter(String),
    #[error("duplicate task {0:?}")]
    DuplicateTask(String),
    #[error("unknown directive {0:?}")]
    UnknownDirective(String),
    #[error("unterminated task block {0:?}")]
    UnterminatedTask(String),
    #[error("undefined variable ${0}")]
    UndefinedVariable(String),
    #[error("non-positive step")]
    NonPositiveStep,
    #[error("empty range: from {from} > to {to}")]
    EmptyRange { from: f64, to: f64 },
    #[error("syntax error: {0}")]
    Syntax(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {kind}")]
pub struct PlanError {
    pub line: usize,
    pub kind: PlanErrorKind,
}

impl PlanError {
    fn new(line: usize, kind: PlanErrorKind) -> Self {
        Self { line, kind }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubstituteError {
    #[error("unresolved variable ${0}")]
    Unresolved(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
}

impl Value {
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Int(i) => i as f64,
            Value::Float(f) => f,
        }
    }

    fn parse(tok: &str) -> Option<Self> {
        if let Ok(i) = tok.parse::<i64>() {
            return Some(Value::Int(i));
        }
        tok.parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::Float)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            // `{:?}` keeps a decimal point so the value re-parses as a float
            Value::Float(x) => write!(f, "{x:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamType {
    Integer,
    Float,
}

impl ParamType {
    fn keyword(self) -> &'static str {
        match self {
            ParamType::Integer => "integer",
            ParamType::Float => "float",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bound {
    Literal(Value),
    Name(String),
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Literal(v) => v.fmt(f),
            Bound::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Default(Value),
    Constant(Value),
    Range { from: Bound, to: Bound, step: Bound },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDecl {
    pub name: String,
    pub label: Option<String>,
    pub type_tag: ParamType,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandKind {
    Copy { src: String, dst: String },
    Execute { argv: Vec<String> },
    Comment(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    /// Commands marked `node:` run on the remote node.
    pub remote: bool,
    pub kind: CommandKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub commands: Vec<Command>,
}

impl Task {
    /// Copy and execute commands, excluding comments.
    pub fn active_commands(&self) -> impl Iterator<Item = &Command> {
        self.commands
            .iter()
            .filter(|c| !matches!(c.kind, CommandKind::Comment(_)))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub parameters: Vec<ParameterDecl>,
    pub tasks: Vec<Task>,
}

/// Variables every task may reference without declaring them.
pub const BUILTINS: [&str; 2] = ["HOME", "jobname"];

impl Plan {
    pub fn parameter(&self, name: &str) -> Option<&ParameterDecl> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn task(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Value of a constant or default-valued parameter.
    fn scalar(&self, name: &str) -> Option<Value> {
        match &self.parameter(name)?.kind {
            ParamKind::Default(v) | ParamKind::Constant(v) => Some(*v),
            ParamKind::Range { .. } => None,
        }
    }

    fn resolve(&self, bound: &Bound) -> Option<Value> {
        match bound {
            Bound::Literal(v) => Some(*v),
            Bound::Name(n) => self.scalar(n),
        }
    }

    /// Concrete `(from, to, step)` of a range parameter.
    pub fn range_bounds(&self, decl: &ParameterDecl) -> Option<(Value, Value, Value)> {
        match &decl.kind {
            ParamKind::Range { from, to, step } => Some((
                self.resolve(from)?,
                self.resolve(to)?,
                self.resolve(step)?,
            )),
            _ => None,
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits on whitespace, keeping double-quoted strings as single tokens.
fn tokenize(text: &str) -> Result<Vec<Token>, String> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => s.push(ch),
                    None => return Err("unterminated string".into()),
                }
            }
            tokens.push(Token::Quoted(s));
        } else {
            let mut s = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || ch == '"' {
                    break;
                }
                s.push(ch);
                chars.next();
            }
            tokens.push(Token::Word(s));
        }
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Quoted(String),
}

struct Cursor {
    tokens: Vec<Token>,
    pos: usize,
}

impl Cursor {
    fn next_word(&mut self, what: &str) -> Result<String, String> {
        match self.tokens.get(self.pos) {
            Some(Token::Word(w)) => {
                self.pos += 1;
                Ok(w.clone())
            }
            Some(Token::Quoted(q)) => Err(format!("expected {what}, found \"{q}\"")),
            None => Err(format!("expected {what}, found end of statement")),
        }
    }

    fn expect(&mut self, keyword: &str) -> Result<(), String> {
        let w = self.next_word(keyword)?;
        if w == keyword {
            Ok(())
        } else {
            Err(format!("expected {keyword:?}, found {w:?}"))
        }
    }

    fn peek_word(&self) -> Option<&str> {
        match self.tokens.get(self.pos) {
            Some(Token::Word(w)) => Some(w),
            _ => None,
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.tokens.len()
    }
}

fn parse_value(tok: &str) -> Result<Value, String> {
    Value::parse(tok).ok_or_else(|| format!("invalid number {tok:?}"))
}

fn parse_bound(tok: &str) -> Result<Bound, String> {
    if let Some(v) = Value::parse(tok) {
        Ok(Bound::Literal(v))
    } else if is_identifier(tok) {
        Ok(Bound::Name(tok.to_string()))
    } else {
        Err(format!("invalid range bound {tok:?}"))
    }
}

fn parse_constant(name: &str, rest: &str) -> Result<ParameterDecl, String> {
    if !is_identifier(name) {
        return Err(format!("invalid parameter name {name:?}"));
    }
    let value = parse_value(rest.trim())?;
    let type_tag = match value {
        Value::Int(_) => ParamType::Integer,
        Value::Float(_) => ParamType::Float,
    };
    Ok(ParameterDecl {
        name: name.to_string(),
        label: None,
        type_tag,
        kind: ParamKind::Constant(value),
    })
}

/// Parses the text after the `parameter` keyword.
fn parse_parameter(body: &str) -> Result<ParameterDecl, String> {
    if let Some((name, value)) = body.split_once('=') {
        if is_identifier(name.trim()) {
            return parse_constant(name.trim(), value);
        }
    }
    let mut cur = Cursor {
        tokens: tokenize(body)?,
        pos: 0,
    };
    let name = cur.next_word("parameter name")?;
    if !is_identifier(&name) {
        return Err(format!("invalid parameter name {name:?}"));
    }
    let mut label = None;
    if cur.peek_word() == Some("label") {
        cur.pos += 1;
        match cur.tokens.get(cur.pos) {
            Some(Token::Quoted(q)) => label = Some(q.clone()),
            Some(Token::Word(w)) => label = Some(w.clone()),
            None => return Err("label without text".into()),
        }
        cur.pos += 1;
    }
    let type_tag = match cur.next_word("type")?.as_str() {
        "integer" => ParamType::Integer,
        "float" => ParamType::Float,
        other => return Err(format!("unknown type {other:?}")),
    };
    let kind = match cur.next_word("default or range")?.as_str() {
        "default" => ParamKind::Default(parse_value(&cur.next_word("default value")?)?),
        "range" => {
            cur.expect("from")?;
            let from = parse_bound(&cur.next_word("range start")?)?;
            cur.expect("to")?;
            let to = parse_bound(&cur.next_word("range end")?)?;
            cur.expect("step")?;
            let step = parse_bound(&cur.next_word("range step")?)?;
            ParamKind::Range { from, to, step }
        }
        other => return Err(format!("expected default or range, found {other:?}")),
    };
    if !cur.done() {
        return Err("trailing tokens after parameter declaration".into());
    }
    Ok(ParameterDecl {
        name,
        label,
        type_tag,
        kind,
    })
}

fn parse_command(text: &str) -> Result<Command, String> {
    let (remote, rest) = match text.strip_prefix("node:") {
        Some(r) => (true, r),
        None => (false, text),
    };
    let mut parts = rest.split_whitespace();
    let kind = match parts.next() {
        Some("copy") => {
            let args: Vec<&str> = parts.collect();
            match args.as_slice() {
                [src, dst] => CommandKind::Copy {
                    src: src.to_string(),
                    dst: dst.to_string(),
                },
                _ => return Err(format!("copy takes 2 arguments, got {}", args.len())),
            }
        }
        Some("execute") => {
            let argv: Vec<String> = parts.map(str::to_string).collect();
            if argv.is_empty() {
                return Err("execute without a command".into());
            }
            CommandKind::Execute { argv }
        }
        _ => unreachable!("caller checks the directive"),
    };
    Ok(Command { remote, kind })
}

fn command_directive(line: &str) -> bool {
    let first = line.split_whitespace().next().unwrap_or("");
    let first = first.strip_prefix("node:").unwrap_or(first);
    first == "copy" || first == "execute"
}

/// Words that can open the continuation line of an unterminated parameter.
const PARAMETER_WORDS: [&str; 8] = [
    "label", "integer", "float", "default", "range", "from", "to", "step",
];

/// A statement accumulated across continuation lines.
struct Pending {
    line: usize,
    text: String,
    closed: bool,
}

impl Pending {
    fn start(line: usize, text: &str) -> Self {
        let (text, closed) = strip_terminator(text);
        Self {
            line,
            text: text.to_string(),
            closed,
        }
    }

    fn extend(&mut self, text: &str) {
        let (text, closed) = strip_terminator(text);
        self.text.push(' ');
        self.text.push_str(text);
        self.closed = closed;
    }
}

fn strip_terminator(text: &str) -> (&str, bool) {
    match text.trim_end().strip_suffix(';') {
        Some(t) => (t.trim_end(), true),
        None => (text.trim_end(), false),
    }
}

enum Open {
    Parameter(Pending),
    Constant(Pending),
    Execute(Pending),
}

struct Parser {
    plan: Plan,
    names: HashSet<String>,
    task: Option<(usize, Task)>,
    open: Option<Open>,
}

impl Parser {
    fn flush(&mut self) -> Result<(), PlanError> {
        match self.open.take() {
            None => Ok(()),
            Some(Open::Parameter(p)) => {
                let decl = parse_parameter(&p.text)
                    .map_err(|e| PlanError::new(p.line, PlanErrorKind::Syntax(e)))?;
                self.add_parameter(p.line, decl)
            }
            Some(Open::Constant(p)) => {
                let (name, value) = p.text.split_once('=').expect("constant has '='");
                let decl = parse_constant(name.trim(), value)
                    .map_err(|e| PlanError::new(p.line, PlanErrorKind::Syntax(e)))?;
                self.add_parameter(p.line, decl)
            }
            Some(Open::Execute(p)) => {
                let cmd = parse_command(&p.text)
                    .map_err(|e| PlanError::new(p.line, PlanErrorKind::Syntax(e)))?;
                self.push_command(cmd);
                Ok(())
            }
        }
    }

    fn add_parameter(&mut self, line: usize, decl: ParameterDecl) -> Result<(), PlanError> {
        if !self.names.insert(decl.name.clone()) {
            return Err(PlanError::new(
                line,
                PlanErrorKind::DuplicateParameter(decl.name),
            ));
        }
        if let ParamKind::Range { from, to, step } = &decl.kind {
            let resolve = |b: &Bound| -> Result<Value, PlanError> {
                self.plan.resolve(b).ok_or_else(|| {
                    let Bound::Name(n) = b else { unreachable!() };
                    PlanError::new(line, PlanErrorKind::UndefinedVariable(n.clone()))
                })
            };
            let (from, to, step) = (resolve(from)?, resolve(to)?, resolve(step)?);
            if decl.type_tag == ParamType::Integer
                && [from, to, step].iter().any(|v| matches!(v, Value::Float(_)))
            {
                return Err(PlanError::new(
                    line,
                    PlanErrorKind::Syntax(format!(
                        "integer parameter {:?} has a non-integer range bound",
                        decl.name
                    )),
                ));
            }
            if !(step.as_f64() > 0.0) {
                return Err(PlanError::new(line, PlanErrorKind::NonPositiveStep));
            }
            if from.as_f64() > to.as_f64() {
                return Err(PlanError::new(
                    line,
                    PlanErrorKind::EmptyRange {
                        from: from.as_f64(),
                        to: to.as_f64(),
                    },
                ));
            }
        }
        self.plan.parameters.push(decl);
        Ok(())
    }

    fn push_command(&mut self, cmd: Command) {
        if let Some((_, task)) = self.task.as_mut() {
            task.commands.push(cmd);
        }
    }

    fn line(&mut self, lineno: usize, raw: &str) -> Result<(), PlanError> {
        let line = raw.trim();
        if line.is_empty() {
            return Ok(());
        }
        let first = line.split_whitespace().next().unwrap_or("");

        if self.task.is_some() {
            if line.starts_with('#') {
                self.flush()?;
                let text = line.trim_start_matches('#').trim().to_string();
                self.push_command(Command {
                    remote: false,
                    kind: CommandKind::Comment(text),
                });
                return Ok(());
            }
            if first == "task" || first == "parameter" {
                let (line, task) = self.task.take().unwrap();
                return Err(PlanError::new(
                    line,
                    PlanErrorKind::UnterminatedTask(task.name),
                ));
            }
            if first == "endtask" {
                self.flush()?;
                let (_, task) = self.task.take().unwrap();
                self.plan.tasks.push(task);
                return Ok(());
            }
            if command_directive(line) {
                self.flush()?;
                if line.split_whitespace().next().unwrap().ends_with("execute") {
                    self.open = Some(Open::Execute(Pending::start(lineno, line)));
                } else {
                    let (text, _) = strip_terminator(line);
                    let cmd = parse_command(text)
                        .map_err(|e| PlanError::new(lineno, PlanErrorKind::Syntax(e)))?;
                    self.push_command(cmd);
                }
                return Ok(());
            }
            if let Some(Open::Execute(p)) = self.open.as_mut() {
                if !p.closed {
                    p.extend(line);
                    return Ok(());
                }
            }
            return Err(PlanError::new(
                lineno,
                PlanErrorKind::UnknownDirective(first.to_string()),
            ));
        }

        if line.starts_with('#') {
            return self.flush();
        }
        match first {
            "parameter" => {
                self.flush()?;
                let body = line["parameter".len()..].trim_start();
                self.open = Some(Open::Parameter(Pending::start(lineno, body)));
            }
            "task" => {
                self.flush()?;
                let rest: Vec<&str> = line.split_whitespace().skip(1).collect();
                let name = match rest.as_slice() {
                    [n] if is_identifier(n) => n.to_string(),
                    _ => {
                        return Err(PlanError::new(
                            lineno,
                            PlanErrorKind::Syntax("task needs a single name".into()),
                        ))
                    }
                };
                if self.plan.task(&name).is_some() {
                    return Err(PlanError::new(lineno, PlanErrorKind::DuplicateTask(name)));
                }
                self.task = Some((
                    lineno,
                    Task {
                        name,
                        commands: Vec::new(),
                    },
                ));
            }
            "endtask" => {
                return Err(PlanError::new(
                    lineno,
                    PlanErrorKind::Syntax("endtask outside a task".into()),
                ))
            }
            _ if line.contains('=') && is_identifier(line.split('=').next().unwrap().trim()) => {
                self.flush()?;
                self.open = Some(Open::Constant(Pending::start(lineno, line)));
            }
            _ => match self.open.as_mut() {
                Some(Open::Parameter(p)) if !p.closed && PARAMETER_WORDS.contains(&first) => {
                    p.extend(line)
                }
                _ => {
                    return Err(PlanError::new(
                        lineno,
                        PlanErrorKind::UnknownDirective(first.to_string()),
                    ))
                }
            },
        }
        Ok(())
    }
}

/// `$name` references in a string, in order.
pub fn variables(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'$' {
            let start = i + 1;
            let mut end = start;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            if end > start {
                out.push(&text[start..end]);
            }
            i = end.max(i + 1);
        } else {
            i += 1;
        }
    }
    out
}

fn command_strings(cmd: &Command) -> Vec<&str> {
    match &cmd.kind {
        CommandKind::Copy { src, dst } => vec![src, dst],
        CommandKind::Execute { argv } => argv.iter().map(String::as_str).collect(),
        CommandKind::Comment(_) => vec![],
    }
}

pub fn parse_plan(text: &str) -> Result<Plan, PlanError> {
    let mut parser = Parser {
        plan: Plan::default(),
        names: HashSet::new(),
        task: None,
        open: None,
    };
    for (i, raw) in text.lines().enumerate() {
        parser.line(i + 1, raw)?;
    }
    parser.flush()?;
    if let Some((line, task)) = parser.task {
        return Err(PlanError::new(
            line,
            PlanErrorKind::UnterminatedTask(task.name),
        ));
    }
    let plan = parser.plan;

    // every task reference must resolve
    let line_of_task = |name: &str| {
        text.lines()
            .position(|l| {
                let mut w = l.split_whitespace();
                w.next() == Some("task") && w.next() == Some(name)
            })
            .map_or(0, |i| i + 1)
    };
    for task in &plan.tasks {
        for cmd in &task.commands {
            for s in command_strings(cmd) {
                for var in variables(s) {
                    if plan.parameter(var).is_none() && !BUILTINS.contains(&var) {
                        return Err(PlanError::new(
                            line_of_task(&task.name),
                            PlanErrorKind::UndefinedVariable(var.to_string()),
                        ));
                    }
                }
            }
        }
    }
    Ok(plan)
}

fn quote_label(label: &str) -> String {
    format!("\"{label}\"")
}

impl fmt::Display for ParameterDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let ParamKind::Constant(v) = &self.kind {
            return write!(f, "parameter {} = {v};", self.name);
        }
        write!(f, "parameter {}", self.name)?;
        if let Some(label) = &self.label {
            write!(f, " label {}", quote_label(label))?;
        }
        write!(f, " {}", self.type_tag.keyword())?;
        match &self.kind {
            ParamKind::Default(v) => write!(f, " default {v};"),
            ParamKind::Range { from, to, step } => {
                write!(f, " range from {from} to {to} step {step};")
            }
            ParamKind::Constant(_) => unreachable!(),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.remote { "node:" } else { "" };
        match &self.kind {
            CommandKind::Copy { src, dst } => write!(f, "{prefix}copy {src} {dst}"),
            CommandKind::Execute { argv } => write!(f, "{prefix}execute {}", argv.join(" ")),
            CommandKind::Comment(c) => write!(f, "# {c}"),
        }
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.parameters {
            writeln!(f, "{p}")?;
        }
        for t in &self.tasks {
            writeln!(f, "task {}", t.name)?;
            for c in &t.commands {
                writeln!(f, "    {c}")?;
            }
            writeln!(f, "endtask")?;
        }
        Ok(())
    }
}

/// Concrete parameter values for one job of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct JobBinding {
    pub jobname: String,
    /// Every declared parameter, in declaration order.
    pub values: Vec<(String, Value)>,
}

impl JobBinding {
    pub fn get(&self, name: &str) -> Option<Value> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

impl fmt::Display for JobBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.jobname)?;
        for (n, v) in &self.values {
            write!(f, " {n}={v}")?;
        }
        Ok(())
    }
}

fn range_values(from: Value, to: Value, step: Value) -> Vec<Value> {
    match (from, to, step) {
        (Value::Int(a), Value::Int(b), Value::Int(s)) => {
            let count = (b - a) / s + 1;
            (0..count).map(|i| Value::Int(a + i * s)).collect()
        }
        _ => {
            let (a, b, s) = (from.as_f64(), to.as_f64(), step.as_f64());
            // tolerate accumulated rounding at the upper end
            let count = ((b - a) / s + 1e-9).floor() as i64 + 1;
            (0..count).map(|i| Value::Float(a + i as f64 * s)).collect()
        }
    }
}

/// Cartesian product over range parameters, first-declared varying slowest.
pub fn expand_parameters(plan: &Plan) -> Vec<JobBinding> {
    let axes: Vec<(usize, Vec<Value>)> = plan
        .parameters
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (a, b, s) = plan.range_bounds(p)?;
            Some((i, range_values(a, b, s)))
        })
        .collect();
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut out = Vec::with_capacity(total);
    for n in 0..total {
        let mut rem = n;
        let mut chosen = vec![None; plan.parameters.len()];
        for (i, vals) in axes.iter().rev() {
            chosen[*i] = Some(vals[rem % vals.len()]);
            rem /= vals.len();
        }
        let values = plan
            .parameters
            .iter()
            .zip(chosen)
            .map(|(p, c)| {
                let v = c.or_else(|| plan.scalar(&p.name)).expect("scalar parameter");
                (p.name.clone(), v)
            })
            .collect();
        out.push(JobBinding {
            jobname: format!("j{}", n + 1),
            values,
        });
    }
    out
}

/// Environment key holding the platform tag that replaces `.SOS` suffixes.
pub const PLATFORM_KEY: &str = "PLATFORM";
pub const PLATFORM_SUFFIX: &str = ".SOS";

fn substitute_str(
    text: &str,
    binding: &JobBinding,
    env: &BTreeMap<String, String>,
) -> Result<String, SubstituteError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        let len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if len == 0 {
            out.push('$');
            rest = after;
            continue;
        }
        let name = &after[..len];
        let value = if name == "jobname" {
            binding.jobname.clone()
        } else if let Some(v) = binding.get(name) {
            v.to_string()
        } else if let Some(v) = env.get(name) {
            v.clone()
        } else {
            return Err(SubstituteError::Unresolved(name.to_string()));
        };
        out.push_str(&value);
        rest = &after[len..];
    }
    out.push_str(rest);
    Ok(out)
}

fn retarget(src: String, env: &BTreeMap<String, String>) -> String {
    match (src.strip_suffix(PLATFORM_SUFFIX), env.get(PLATFORM_KEY)) {
        (Some(stem), Some(tag)) => format!("{stem}.{tag}"),
        _ => src,
    }
}

/// Replaces `$name` references with binding values (then `env`), and
/// retargets `.SOS` copy sources to `env["PLATFORM"]`. Comments are dropped.
pub fn substitute(
    task: &Task,
    binding: &JobBinding,
    env: &BTreeMap<String, String>,
) -> Result<Vec<Command>, SubstituteError> {
    task.active_commands()
        .map(|cmd| {
            let kind = match &cmd.kind {
                CommandKind::Copy { src, dst } => CommandKind::Copy {
                    src: retarget(substitute_str(src, binding, env)?, env),
                    dst: substitute_str(dst, binding, env)?,
                },
                CommandKind::Execute { argv } => CommandKind::Execute {
                    argv: argv
                        .iter()
                        .map(|a| substitute_str(a, binding, env))
                        .collect::<Result<_, _>>()?,
                },
                CommandKind::Comment(_) => unreachable!(),
            };
            Ok(Command {
                remote: cmd.remote,
                kind,
            })
        })
        .collect()
}
