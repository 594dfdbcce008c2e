//! Line-oriented `.mjp` model documents.
//!
//! ```text
//! # comments run to the end of the line
//! species S E I
//! param lambda = 0.5
//! reaction infect: S + I -> E + I @ mass_action(lambda)
//! reaction make_a: 0 -> A @ hill(rho, B)
//! reaction decay: 2 X -> 0 @ custom(0.5, exp(X, -0.1), reciprocal(Y, 2))
//! init point (99, 0, 1)
//! init table
//!   (0, 0) 0.5
//!   (1, 0) 0.5
//! end
//! terminal point (0, 40) at 10 first_passage
//! terminal pred "A >= 64 and B >= 64" at 20
//! terminal observe binary_test(sensitivity=0.99, fpr=0.05, observed=30, species=I) at 0.3
//! options bounds=(159, 159) delta=1e-4 m=4 time_points=101 rtol=1e-6 atol=1e-12 unlumped=D solver=bdf
//! ```
//!
//! A stoichiometric term is `[<int>] <species>` (coefficient defaults to 1) or `0`
//! for the empty side; terms are joined by `+`. Rates are a number or a
//! previously declared parameter. Custom factors are `binomial(S, k)`,
//! `power(S, k)`, `exp(S, r)` for `e^{r·x}` and `reciprocal(S, o)` for `1/(o + x)`.
//! Predicates are conjunctions (`and`) of `<species> <op> <int>` with
//! `op ∈ {<, <=, ==, >=, >}`. Exactly one `init` and one `terminal` statement
//! are required; `options` may be repeated and later keys win. `bounds` is
//! required: it fixes the initial truncation `∏ [0, bounds_ℓ]`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::bayes::BinaryTest;
use crate::model::{CustomFactor, PropensitySpec, Reaction, ReactionNetwork};
use crate::rates::Kernel;
use crate::solver::Method;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
    pub expected: Vec<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.col, self.message)?;
        if !self.expected.is_empty() {
            write!(f, " (expected {})", self.expected.join(" or "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialSpec {
    Point(Vec<i64>),
    Table(Vec<(Vec<i64>, f64)>),
}

impl InitialSpec {
    /// `(state, probability)` pairs of the initial law.
    pub fn support(&self) -> Vec<(Vec<i64>, f64)> {
        match self {
            InitialSpec::Point(x) => vec![(x.clone(), 1.0)],
            InitialSpec::Table(t) => t.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Clause {
    pub species: usize,
    pub op: CmpOp,
    pub value: i64,
}

/// Conjunction of per-species comparisons; its region is always a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Predicate {
    pub text: String,
    pub clauses: Vec<Clause>,
}

impl Predicate {
    pub fn holds(&self, x: &[i64]) -> bool {
        self.clauses.iter().all(|c| {
            let v = x[c.species];
            match c.op {
                CmpOp::Lt => v < c.value,
                CmpOp::Le => v <= c.value,
                CmpOp::Eq => v == c.value,
                CmpOp::Ge => v >= c.value,
                CmpOp::Gt => v > c.value,
            }
        })
    }

    /// Per-dimension inclusive range `[lo, hi]` of the satisfying states
    /// (`hi = i64::MAX` when unbounded above); `None` if unsatisfiable.
    pub fn region(&self, dims: usize) -> Option<(Vec<i64>, Vec<i64>)> {
        let mut lo = vec![0i64; dims];
        let mut hi = vec![i64::MAX; dims];
        for c in &self.clauses {
            let (l, h) = match c.op {
                CmpOp::Lt => (0, c.value - 1),
                CmpOp::Le => (0, c.value),
                CmpOp::Eq => (c.value, c.value),
                CmpOp::Ge => (c.value, i64::MAX),
                CmpOp::Gt => (c.value + 1, i64::MAX),
            };
            lo[c.species] = lo[c.species].max(l);
            hi[c.species] = hi[c.species].min(h);
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            None
        } else {
            Some((lo, hi))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TerminalSpec {
    /// Reach `state` at the horizon, or, with `first_passage`, visit it by then.
    Point { state: Vec<i64>, first_passage: bool },
    Predicate(Predicate),
    Observe(BinaryTest),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementOptions {
    pub bounds: Vec<i64>,
    pub delta: f64,
    pub grid_exponent: u32,
    pub time_points: usize,
    pub rtol: f64,
    pub atol: f64,
    pub unlumped: Vec<usize>,
    pub solver: Method,
}

impl RefinementOptions {
    pub fn with_bounds(bounds: Vec<i64>) -> Self {
        Self {
            bounds,
            delta: 1e-4,
            grid_exponent: 0,
            time_points: 101,
            rtol: 1e-6,
            atol: 1e-12,
            unlumped: Vec::new(),
            solver: Method::Bdf,
        }
    }

    pub fn unlumped_mask(&self, dims: usize) -> Vec<bool> {
        let mut mask = vec![false; dims];
        for &d in &self.unlumped {
            mask[d] = true;
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDocument {
    pub network: ReactionNetwork,
    pub initial: InitialSpec,
    pub terminal: TerminalSpec,
    pub horizon: f64,
    pub options: RefinementOptions,
}

// ---------------------------------------------------------------- lexing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Int(v) => format!("'{v}'"),
            Tok::Float(v) => format!("'{v}'"),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::Sym(s) => format!("'{s}'"),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    col: usize,
}

const SYMBOLS: [&str; 8] = ["->", "(", ")", ",", ":", "@", "=", "+"];

fn lex(line_no: usize, text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |col: usize, message: String| ParseError {
        line: line_no,
        col,
        message,
        expected: Vec::new(),
    };
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j] != '"' {
                j += 1;
            }
            if j == chars.len() {
                return Err(err(col, "unterminated string".into()));
            }
            out.push(Token {
                tok: Tok::Str(chars[start..j].iter().collect()),
                col,
            });
            i = j + 1;
            continue;
        }
        let signed_number =
            (c == '-' || c == '+') && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit() || *d == '.');
        if c.is_ascii_digit() || c == '.' || signed_number {
            let mut j = i + 1;
            let mut float = c == '.';
            while j < chars.len() {
                let d = chars[j];
                if d.is_ascii_digit() {
                    j += 1;
                } else if d == '.' {
                    float = true;
                    j += 1;
                } else if (d == 'e' || d == 'E')
                    && chars
                        .get(j + 1)
                        .is_some_and(|n| n.is_ascii_digit() || ((*n == '-' || *n == '+') && chars.get(j + 2).is_some_and(|m| m.is_ascii_digit())))
                {
                    float = true;
                    j += 2;
                } else {
                    break;
                }
            }
            let lexeme: String = chars[i..j].iter().collect();
            let tok = if float {
                Tok::Float(lexeme.parse().map_err(|_| err(col, format!("malformed number '{lexeme}'")))?)
            } else {
                Tok::Int(lexeme.parse().map_err(|_| err(col, format!("integer '{lexeme}' out of range")))?)
            };
            out.push(Token { tok, col });
            i = j;
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut j = i + 1;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_' || chars[j] == '.') {
                j += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[i..j].iter().collect()),
                col,
            });
            i = j;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(s) => {
                out.push(Token { tok: Tok::Sym(s), col });
                i += s.chars().count();
            }
            None => return Err(err(col, format!("unexpected character '{c}'"))),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- parsing

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    end_col: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |t| t.col)
    }

    fn error(&self, message: impl Into<String>, expected: &[&str]) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col(),
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        match self.peek() {
            Some(t) => self.error(format!("unexpected {}", t.describe()), expected),
            None => self.error("unexpected end of line", expected),
        }
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn at_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(x)) if x == w)
    }

    fn sym(&mut self, s: &'static str) -> Result<(), ParseError> {
        if self.at_sym(s) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("'{s}'")]))
        }
    }

    fn word(&mut self, w: &str) -> Result<(), ParseError> {
        if self.at_word(w) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("'{w}'")]))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let col = self.col();
                self.pos += 1;
                Ok((s.clone(), col))
            }
            _ => Err(self.unexpected(&[what])),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(*v)
            }
            _ => Err(self.unexpected(&["integer"])),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(*v as f64)
            }
            Some(Tok::Float(v)) => {
                self.pos += 1;
                Ok(*v)
            }
            _ => Err(self.unexpected(&["number"])),
        }
    }

    fn string(&mut self) -> Result<(String, usize), ParseError> {
        match self.peek() {
            Some(Tok::Str(s)) => {
                let col = self.col();
                self.pos += 1;
                Ok((s.clone(), col))
            }
            _ => Err(self.unexpected(&["quoted string"])),
        }
    }

    fn finish(&self) -> Result<(), ParseError> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            Err(self.unexpected(&["end of line"]))
        }
    }

    /// `( <int>, ... )`
    fn int_tuple(&mut self) -> Result<Vec<i64>, ParseError> {
        self.sym("(")?;
        let mut v = vec![self.int()?];
        while self.at_sym(",") {
            self.pos += 1;
            v.push(self.int()?);
        }
        self.sym(")")?;
        Ok(v)
    }
}

struct State {
    species: Option<Vec<String>>,
    params: BTreeMap<String, f64>,
    reactions: Vec<Reaction>,
    initial: Option<InitialSpec>,
    table: Option<(usize, Vec<(Vec<i64>, f64)>)>,
    terminal: Option<(TerminalSpec, f64)>,
    options: BTreeMap<&'static str, OptValue>,
}

#[derive(Clone, Debug)]
enum OptValue {
    Num(f64),
    Int(i64),
    Ints(Vec<i64>),
    Names(Vec<usize>),
    Solver(Method),
}

impl State {
    fn species(&self, cur: &Cursor) -> Result<&[String], ParseError> {
        self.species
            .as_deref()
            .ok_or_else(|| cur.error("species must be declared first", &["'species' statement"]))
    }

    fn species_index(&self, cur: &Cursor, name: &str, col: usize) -> Result<usize, ParseError> {
        let species = self.species(cur)?;
        species.iter().position(|s| s == name).ok_or_else(|| ParseError {
            line: cur.line,
            col,
            message: format!("unknown species '{name}'"),
            expected: species.iter().map(|s| format!("'{s}'")).collect(),
        })
    }

    fn expr(&self, cur: &mut Cursor) -> Result<f64, ParseError> {
        match cur.peek() {
            Some(Tok::Ident(name)) => {
                let v = self.params.get(name).copied().ok_or_else(|| cur.error(format!("unknown parameter '{name}'"), &[]))?;
                cur.pos += 1;
                Ok(v)
            }
            Some(Tok::Int(_)) | Some(Tok::Float(_)) => cur.number(),
            _ => Err(cur.unexpected(&["number", "parameter name"])),
        }
    }

    fn dims_check(&self, cur: &Cursor, got: usize, what: &str) -> Result<(), ParseError> {
        let n = self.species(cur)?.len();
        if got != n {
            return Err(cur.error(format!("{what} has {got} components but {n} species are declared"), &[]));
        }
        Ok(())
    }
}

pub fn parse_model(text: &str) -> Result<ModelDocument, ParseError> {
    let mut st = State {
        species: None,
        params: BTreeMap::new(),
        reactions: Vec::new(),
        initial: None,
        table: None,
        terminal: None,
        options: BTreeMap::new(),
    };
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let toks = lex(line, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor {
            toks: &toks,
            pos: 0,
            line,
            end_col: raw.chars().count() + 1,
        };
        if st.table.is_some() {
            table_row(&mut st, &mut cur)?;
            continue;
        }
        let (kw, _) = cur.ident("statement keyword")?;
        match kw.as_str() {
            "species" => species_stmt(&mut st, &mut cur)?,
            "param" => param_stmt(&mut st, &mut cur)?,
            "reaction" => reaction_stmt(&mut st, &mut cur)?,
            "init" => init_stmt(&mut st, &mut cur)?,
            "terminal" => terminal_stmt(&mut st, &mut cur)?,
            "options" => options_stmt(&mut st, &mut cur)?,
            other => {
                cur.pos -= 1;
                return Err(cur.error(
                    format!("unknown statement '{other}'"),
                    &["'species'", "'param'", "'reaction'", "'init'", "'terminal'", "'options'"],
                ));
            }
        }
    }
    let eof = |message: &str, expected: &[&str]| ParseError {
        line: last_line.max(1),
        col: 1,
        message: message.into(),
        expected: expected.iter().map(|s| s.to_string()).collect(),
    };
    if st.table.is_some() {
        return Err(eof("init table is not closed", &["'end'"]));
    }
    let species = st.species.ok_or_else(|| eof("no species declared", &["'species' statement"]))?;
    if st.reactions.is_empty() {
        return Err(eof("model needs at least one reaction", &["'reaction' statement"]));
    }
    let initial = st.initial.ok_or_else(|| eof("missing initial condition", &["'init' statement"]))?;
    let (terminal, horizon) = st.terminal.ok_or_else(|| eof("missing terminal constraint", &["'terminal' statement"]))?;
    let dims = species.len();
    let options = resolve_options(&st.options, dims).map_err(|m| eof(&m, &[]))?;
    for (x, _) in initial.support() {
        if x.iter().zip(&options.bounds).any(|(v, b)| *v > *b) {
            return Err(eof(&format!("initial state {x:?} lies outside the bounds"), &[]));
        }
    }
    let network = ReactionNetwork::new(species, st.reactions, st.params).map_err(|e| eof(&e.to_string(), &[]))?;
    Ok(ModelDocument {
        network,
        initial,
        terminal,
        horizon,
        options,
    })
}

fn species_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    if st.species.is_some() {
        return Err(cur.error("species declared twice", &[]));
    }
    let mut names: Vec<String> = Vec::new();
    while cur.peek().is_some() {
        let (name, col) = cur.ident("species name")?;
        if names.contains(&name) {
            return Err(ParseError {
                line: cur.line,
                col,
                message: format!("duplicate species '{name}'"),
                expected: Vec::new(),
            });
        }
        names.push(name);
    }
    if names.is_empty() {
        return Err(cur.unexpected(&["species name"]));
    }
    st.species = Some(names);
    Ok(())
}

fn param_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    let (name, _) = cur.ident("parameter name")?;
    cur.sym("=")?;
    let v = st.expr(cur)?;
    cur.finish()?;
    st.params.insert(name, v);
    Ok(())
}

/// One side of a reaction: `0` or `[<int>] <species> (+ ...)*`.
fn side(st: &State, cur: &mut Cursor) -> Result<Vec<u32>, ParseError> {
    let n = st.species(cur)?.len();
    let mut counts = vec![0u32; n];
    if matches!(cur.peek(), Some(Tok::Int(0))) {
        cur.pos += 1;
        return Ok(counts);
    }
    loop {
        let coeff = match cur.peek() {
            Some(Tok::Int(k)) if *k > 0 && *k <= u32::MAX as i64 => {
                cur.pos += 1;
                *k as u32
            }
            Some(Tok::Int(_)) => return Err(cur.error("stoichiometric coefficient must be positive", &[])),
            _ => 1,
        };
        let (name, col) = cur.ident("species name")?;
        let s = st.species_index(cur, &name, col)?;
        counts[s] += coeff;
        if cur.at_sym("+") {
            cur.pos += 1;
        } else {
            return Ok(counts);
        }
    }
}

fn reaction_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    let (name, col) = cur.ident("reaction name")?;
    if st.reactions.iter().any(|r| r.name() == name) {
        return Err(ParseError {
            line: cur.line,
            col,
            message: format!("duplicate reaction '{name}'"),
            expected: Vec::new(),
        });
    }
    cur.sym(":")?;
    let loss = side(st, cur)?;
    cur.sym("->")?;
    let gain = side(st, cur)?;
    cur.sym("@")?;
    let (kind, _) = cur.ident("propensity")?;
    cur.sym("(")?;
    let spec = match kind.as_str() {
        "mass_action" => PropensitySpec::MassAction { rate: st.expr(cur)? },
        "hill" => {
            let numerator = st.expr(cur)?;
            cur.sym(",")?;
            let (s, col) = cur.ident("species name")?;
            PropensitySpec::Hill {
                numerator,
                species: st.species_index(cur, &s, col)?,
            }
        }
        "custom" => {
            let scale = st.expr(cur)?;
            let mut factors = Vec::new();
            while cur.at_sym(",") {
                cur.pos += 1;
                factors.push(custom_factor(st, cur)?);
            }
            PropensitySpec::Custom { scale, factors }
        }
        _ => {
            cur.pos -= 2;
            return Err(cur.error(
                format!("unknown propensity '{kind}'"),
                &["'mass_action'", "'hill'", "'custom'"],
            ));
        }
    };
    cur.sym(")")?;
    cur.finish()?;
    let reaction = Reaction::new(name, loss, gain, spec).map_err(|e| ParseError {
        line: cur.line,
        col,
        message: e.to_string(),
        expected: Vec::new(),
    })?;
    st.reactions.push(reaction);
    Ok(())
}

fn custom_factor(st: &State, cur: &mut Cursor) -> Result<CustomFactor, ParseError> {
    let (kind, _) = cur.ident("factor kind")?;
    cur.sym("(")?;
    let (s, col) = cur.ident("species name")?;
    let species = st.species_index(cur, &s, col)?;
    cur.sym(",")?;
    let kernel = match kind.as_str() {
        "binomial" | "power" => {
            let k = cur.int()?;
            if !(0..=u32::MAX as i64).contains(&k) {
                return Err(cur.error("order must be a nonnegative integer", &[]));
            }
            if kind == "binomial" {
                Kernel::Binomial(k as u32)
            } else {
                Kernel::Power(k as u32)
            }
        }
        "exp" => Kernel::Exp(st.expr(cur)?),
        "reciprocal" => Kernel::Reciprocal(st.expr(cur)?),
        _ => {
            return Err(cur.error(
                format!("unknown factor '{kind}'"),
                &["'binomial'", "'power'", "'exp'", "'reciprocal'"],
            ))
        }
    };
    cur.sym(")")?;
    Ok(CustomFactor { species, kernel })
}

fn init_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    if st.initial.is_some() {
        return Err(cur.error("initial condition given twice", &[]));
    }
    let (kind, _) = cur.ident("'point' or 'table'")?;
    match kind.as_str() {
        "point" => {
            let x = cur.int_tuple()?;
            cur.finish()?;
            st.dims_check(cur, x.len(), "initial state")?;
            if x.iter().any(|&v| v < 0) {
                return Err(cur.error("initial state must be nonnegative", &[]));
            }
            st.initial = Some(InitialSpec::Point(x));
        }
        "table" => {
            cur.finish()?;
            st.species(cur)?;
            st.table = Some((cur.line, Vec::new()));
        }
        _ => {
            cur.pos -= 1;
            return Err(cur.unexpected(&["'point'", "'table'"]));
        }
    }
    Ok(())
}

fn table_row(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    if cur.at_word("end") {
        cur.pos += 1;
        cur.finish()?;
        let (_, rows) = st.table.take().unwrap_or_default();
        if rows.is_empty() {
            return Err(cur.error("init table has no entries", &[]));
        }
        let total: f64 = rows.iter().map(|r| r.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(cur.error(format!("initial probabilities sum to {total}, not 1"), &[]));
        }
        st.initial = Some(InitialSpec::Table(rows));
        return Ok(());
    }
    let x = cur.int_tuple()?;
    st.dims_check(cur, x.len(), "table state")?;
    if x.iter().any(|&v| v < 0) {
        return Err(cur.error("table state must be nonnegative", &[]));
    }
    let p = cur.number()?;
    cur.finish()?;
    if !(p.is_finite() && p > 0.0) {
        return Err(cur.error("table probability must be positive", &[]));
    }
    let rows = &mut st.table.as_mut().expect("inside table").1;
    if rows.iter().any(|r| r.0 == x) {
        return Err(cur.error(format!("state {x:?} listed twice"), &[]));
    }
    rows.push((x, p));
    Ok(())
}

fn terminal_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    if st.terminal.is_some() {
        return Err(cur.error("terminal constraint given twice", &[]));
    }
    let (kind, _) = cur.ident("'point', 'pred' or 'observe'")?;
    let mut first_passage = false;
    let spec = match kind.as_str() {
        "point" => {
            let x = cur.int_tuple()?;
            st.dims_check(cur, x.len(), "terminal state")?;
            if x.iter().any(|&v| v < 0) {
                return Err(cur.error("terminal state must be nonnegative", &[]));
            }
            TerminalSpec::Point {
                state: x,
                first_passage: false,
            }
        }
        "pred" => {
            let (text, col) = cur.string()?;
            TerminalSpec::Predicate(parse_predicate(st, cur, &text, col)?)
        }
        "observe" => TerminalSpec::Observe(observation(st, cur)?),
        _ => {
            cur.pos -= 1;
            return Err(cur.unexpected(&["'point'", "'pred'", "'observe'"]));
        }
    };
    cur.word("at")?;
    let horizon = cur.number()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(cur.error("horizon must be positive", &[]));
    }
    if cur.at_word("first_passage") {
        if !matches!(spec, TerminalSpec::Point { .. }) {
            return Err(cur.error("first_passage applies to point terminals only", &[]));
        }
        cur.pos += 1;
        first_passage = true;
    }
    cur.finish()?;
    let spec = match spec {
        TerminalSpec::Point { state, .. } => TerminalSpec::Point { state, first_passage },
        other => other,
    };
    st.terminal = Some((spec, horizon));
    Ok(())
}

fn parse_predicate(st: &State, cur: &Cursor, text: &str, col: usize) -> Result<Predicate, ParseError> {
    let fail = |message: String| ParseError {
        line: cur.line,
        col,
        message,
        expected: Vec::new(),
    };
    let mut clauses = Vec::new();
    for part in text.split(" and ") {
        let part = part.trim();
        let op_at = part
            .find(['<', '>', '='])
            .ok_or_else(|| fail(format!("clause '{part}' has no comparison")))?;
        let name = part[..op_at].trim();
        let rest = &part[op_at..];
        let (op, len) = [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("==", CmpOp::Eq), ("<", CmpOp::Lt), (">", CmpOp::Gt)]
            .iter()
            .find(|(s, _)| rest.starts_with(s))
            .map(|(s, op)| (*op, s.len()))
            .ok_or_else(|| fail(format!("bad comparison in '{part}'")))?;
        let value: i64 = rest[len..]
            .trim()
            .parse()
            .map_err(|_| fail(format!("clause '{part}' needs an integer right-hand side")))?;
        let species = st.species_index(cur, name, col)?;
        clauses.push(Clause { species, op, value });
    }
    Ok(Predicate {
        text: text.to_string(),
        clauses,
    })
}

fn observation(st: &State, cur: &mut Cursor) -> Result<BinaryTest, ParseError> {
    let (name, _) = cur.ident("likelihood name")?;
    if name != "binary_test" {
        cur.pos -= 1;
        return Err(cur.error(format!("unknown likelihood '{name}'"), &["'binary_test'"]));
    }
    cur.sym("(")?;
    let (mut sens, mut fpr, mut observed, mut species, mut population) = (None, None, None, None, None);
    loop {
        let (key, col) = cur.ident("argument name")?;
        cur.sym("=")?;
        match key.as_str() {
            "sensitivity" => sens = Some(st.expr(cur)?),
            "fpr" => fpr = Some(st.expr(cur)?),
            "observed" => observed = Some(count(cur)?),
            "population" => population = Some(count(cur)?),
            "species" => {
                let (s, c) = cur.ident("species name")?;
                species = Some(st.species_index(cur, &s, c)?);
            }
            _ => {
                return Err(ParseError {
                    line: cur.line,
                    col,
                    message: format!("unknown argument '{key}'"),
                    expected: ["sensitivity", "fpr", "observed", "species", "population"]
                        .iter()
                        .map(|s| format!("'{s}'"))
                        .collect(),
                })
            }
        }
        if cur.at_sym(",") {
            cur.pos += 1;
        } else {
            break;
        }
    }
    cur.sym(")")?;
    let missing = |what: &str| cur.error(format!("binary_test needs '{what}'"), &[]);
    let test = BinaryTest {
        sensitivity: sens.ok_or_else(|| missing("sensitivity"))?,
        fpr: fpr.ok_or_else(|| missing("fpr"))?,
        observed: observed.ok_or_else(|| missing("observed"))?,
        species: species.ok_or_else(|| missing("species"))?,
        population,
    };
    test.validate().map_err(|e| cur.error(e.to_string(), &[]))?;
    Ok(test)
}

fn count(cur: &mut Cursor) -> Result<u64, ParseError> {
    let v = cur.int()?;
    u64::try_from(v).map_err(|_| cur.error("count must be nonnegative", &[]))
}

const OPTION_KEYS: [&str; 8] = ["bounds", "delta", "m", "time_points", "rtol", "atol", "unlumped", "solver"];

fn options_stmt(st: &mut State, cur: &mut Cursor) -> Result<(), ParseError> {
    while cur.peek().is_some() {
        let (key, col) = cur.ident("option name")?;
        let key: &'static str = OPTION_KEYS.iter().find(|k| **k == key).copied().ok_or_else(|| ParseError {
            line: cur.line,
            col,
            message: format!("unknown option '{key}'"),
            expected: OPTION_KEYS.iter().map(|s| format!("'{s}'")).collect(),
        })?;
        cur.sym("=")?;
        let value = match key {
            "bounds" => {
                let b = cur.int_tuple()?;
                st.dims_check(cur, b.len(), "bounds")?;
                if b.iter().any(|&v| v < 0) {
                    return Err(cur.error("bounds must be nonnegative", &[]));
                }
                OptValue::Ints(b)
            }
            "m" | "time_points" => {
                let v = cur.int()?;
                if v < 0 {
                    return Err(cur.error(format!("{key} must be nonnegative"), &[]));
                }
                OptValue::Int(v)
            }
            "unlumped" => {
                let mut dims = Vec::new();
                loop {
                    let (s, c) = cur.ident("species name")?;
                    dims.push(st.species_index(cur, &s, c)?);
                    if cur.at_sym(",") {
                        cur.pos += 1;
                    } else {
                        break;
                    }
                }
                OptValue::Names(dims)
            }
            "solver" => {
                let (s, c) = cur.ident("solver name")?;
                OptValue::Solver(s.parse().map_err(|m: String| ParseError {
                    line: cur.line,
                    col: c,
                    message: m,
                    expected: vec!["'bdf'".into(), "'rk45'".into()],
                })?)
            }
            _ => OptValue::Num(st.expr(cur)?),
        };
        st.options.insert(key, value);
    }
    Ok(())
}

fn resolve_options(raw: &BTreeMap<&'static str, OptValue>, dims: usize) -> Result<RefinementOptions, String> {
    let bounds = match raw.get("bounds") {
        Some(OptValue::Ints(b)) => b.clone(),
        _ => return Err("options must declare bounds=(...)".into()),
    };
    let mut o = RefinementOptions::with_bounds(bounds);
    for (key, value) in raw {
        match (*key, value) {
            ("delta", OptValue::Num(v)) => o.delta = *v,
            ("rtol", OptValue::Num(v)) => o.rtol = *v,
            ("atol", OptValue::Num(v)) => o.atol = *v,
            ("m", OptValue::Int(v)) => o.grid_exponent = u32::try_from(*v).map_err(|_| "m too large")?,
            ("time_points", OptValue::Int(v)) => o.time_points = *v as usize,
            ("unlumped", OptValue::Names(d)) => {
                let mut d = d.clone();
                d.sort_unstable();
                d.dedup();
                o.unlumped = d;
            }
            ("solver", OptValue::Solver(m)) => o.solver = *m,
            _ => {}
        }
    }
    validate_options(&o, dims)?;
    Ok(o)
}

pub fn validate_options(o: &RefinementOptions, dims: usize) -> Result<(), String> {
    if o.bounds.len() != dims {
        return Err(format!("bounds have {} components but {dims} species are declared", o.bounds.len()));
    }
    if !(o.delta > 0.0 && o.delta < 1.0) {
        return Err(format!("delta must lie in (0, 1), got {}", o.delta));
    }
    if o.time_points < 2 {
        return Err(format!("time_points must be at least 2, got {}", o.time_points));
    }
    if !(o.rtol > 0.0 && o.rtol.is_finite() && o.atol > 0.0 && o.atol.is_finite()) {
        return Err("rtol and atol must be positive".into());
    }
    if o.grid_exponent > 40 {
        return Err(format!("grid exponent {} is too large", o.grid_exponent));
    }
    Ok(())
}

// ---------------------------------------------------------------- rendering

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn tuple(x: &[i64]) -> String {
    let parts: Vec<String> = x.iter().map(i64::to_string).collect();
    format!("({})", parts.join(", "))
}

fn render_side(counts: &[u32], names: &[String]) -> String {
    let terms: Vec<String> = counts
        .iter()
        .zip(names)
        .filter(|(c, _)| **c > 0)
        .map(|(c, n)| format!("{c} {n}"))
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

fn render_kernel(k: &Kernel, species: &str) -> String {
    match k {
        Kernel::Count => unreachable!("custom factors are never constant"),
        Kernel::Binomial(n) => format!("binomial({species}, {n})"),
        Kernel::Power(n) => format!("power({species}, {n})"),
        Kernel::Exp(r) => format!("exp({species}, {})", num(*r)),
        Kernel::Reciprocal(o) => format!("reciprocal({species}, {})", num(*o)),
    }
}

/// Canonical text for a document; `parse_model` reads it back unchanged.
pub fn render_model(doc: &ModelDocument) -> String {
    let names: Vec<String> = doc.network.species().iter().map(|s| s.name.clone()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "species {}", names.join(" "));
    for (k, v) in doc.network.parameters() {
        let _ = writeln!(out, "param {k} = {}", num(*v));
    }
    for r in doc.network.reactions() {
        let rate = match r.propensity_spec() {
            PropensitySpec::MassAction { rate } => format!("mass_action({})", num(*rate)),
            PropensitySpec::Hill { numerator, species } => format!("hill({}, {})", num(*numerator), names[*species]),
            PropensitySpec::Custom { scale, factors } => {
                let mut parts = vec![num(*scale)];
                parts.extend(factors.iter().map(|f| render_kernel(&f.kernel, &names[f.species])));
                format!("custom({})", parts.join(", "))
            }
        };
        let _ = writeln!(
            out,
            "reaction {}: {} -> {} @ {rate}",
            r.name(),
            render_side(r.loss(), &names),
            render_side(r.gain(), &names)
        );
    }
    match &doc.initial {
        InitialSpec::Point(x) => {
            let _ = writeln!(out, "init point {}", tuple(x));
        }
        InitialSpec::Table(rows) => {
            out.push_str("init table\n");
            for (x, p) in rows {
                let _ = writeln!(out, "  {} {}", tuple(x), num(*p));
            }
            out.push_str("end\n");
        }
    }
    let horizon = num(doc.horizon);
    match &doc.terminal {
        TerminalSpec::Point { state, first_passage } => {
            let fp = if *first_passage { " first_passage" } else { "" };
            let _ = writeln!(out, "terminal point {} at {horizon}{fp}", tuple(state));
        }
        TerminalSpec::Predicate(p) => {
            let _ = writeln!(out, "terminal pred \"{}\" at {horizon}", p.text);
        }
        TerminalSpec::Observe(t) => {
            let population = t.population.map(|n| format!(", population={n}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "terminal observe binary_test(sensitivity={}, fpr={}, observed={}, species={}{population}) at {horizon}",
                num(t.sensitivity),
                num(t.fpr),
                t.observed,
                names[t.species]
            );
        }
    }
    let o = &doc.options;
    let _ = write!(
        out,
        "options bounds={} delta={} m={} time_points={} rtol={} atol={} solver={}",
        tuple(&o.bounds),
        num(o.delta),
        o.grid_exponent,
        o.time_points,
        num(o.rtol),
        num(o.atol),
        o.solver.as_str()
    );
    if !o.unlumped.is_empty() {
        let u: Vec<&str> = o.unlumped.iter().map(|&d| names[d].as_str()).collect();
        let _ = write!(out, " unlumped={}", u.join(","));
    }
    out.push('\n');
    out
}
