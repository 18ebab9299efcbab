//! The network description language.
//!
//! ```text
//! network   := statement*
//! statement := "var" IDENT+
//!            | "p" "(" expr "|" expr ")" "=" NUM weight?
//!            | "p" "(" expr ")" "=" NUM weight?
//!            | "table" "(" IDENT ("," IDENT)* ")" "=" "[" NUM+ "]" weight?
//!            | "query" "(" expr ("|" expr)? ")"
//!            | "#" comment-to-end-of-line
//! weight    := "[" "n" "=" NUM "]"
//! expr      := conj ("or" conj)*
//! conj      := lit ("and" lit)*
//! lit       := "not" lit | IDENT | "true" | "false" | "(" expr ")"
//! ```
//!
//! Variables are numbered from 1 in declaration order. A rule without a
//! weight gets reliability [`DEFAULT_RELIABILITY`]. Table variables must be
//! listed in declaration order; cells are given with the last variable
//! varying fastest. Whitespace, including newlines, is insignificant, and
//! the words `var p table query and or not true false` are reserved.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{PropExpr, VarSet};

/// Reliability (fictitious sample size of the expert's statement) used when
/// a rule carries no `[n=...]` weight.
pub const DEFAULT_RELIABILITY: f64 = 100.0;

const TABLE_SUM_TOL: f64 = 1e-6;

const KEYWORDS: &[&str] = &[
    "var", "p", "table", "query", "and", "or", "not", "true", "false",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("line {line}, column {col}: undeclared variable `{name}`")]
    Undeclared {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("line {line}, column {col}: variable `{name}` declared twice")]
    Redeclared {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("line {line}: target probability {value} lies outside [0,1]")]
    TargetRange { line: usize, value: f64 },
    #[error("line {line}: reliability must be positive, got {value}")]
    Reliability { line: usize, value: f64 },
    #[error("line {line}: table over {vars} variables needs {expected} values, got {got}")]
    TableLength {
        line: usize,
        vars: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: table values sum to {sum}, expected 1")]
    TableSum { line: usize, sum: f64 },
    #[error("line {line}: table values must be nonnegative")]
    TableNegative { line: usize },
    #[error("line {line}: table variables must be distinct and listed in declaration order")]
    TableOrder { line: usize },
    #[error("no rules")]
    NoRules,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Conditional,
    Fact,
    Table,
}

/// A probabilistic statement `p(consequent | condition) = target` observed
/// with reliability `reliability`, or a complete table over a variable list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub kind: RuleKind,
    pub consequent: PropExpr,
    pub condition: PropExpr,
    pub target: f64,
    pub reliability: f64,
    pub table_values: Option<Vec<f64>>,
    pub influence_set: VarSet,
}

impl Rule {
    pub fn conditional(
        consequent: PropExpr,
        condition: PropExpr,
        target: f64,
        reliability: f64,
    ) -> Self {
        let kind = if condition.is_true() {
            RuleKind::Fact
        } else {
            RuleKind::Conditional
        };
        let influence_set = consequent.vars().union(&condition.vars());
        Rule {
            kind,
            consequent,
            condition,
            target,
            reliability,
            table_values: None,
            influence_set,
        }
    }

    pub fn fact(consequent: PropExpr, target: f64, reliability: f64) -> Self {
        Self::conditional(consequent, PropExpr::True, target, reliability)
    }

    pub fn table(vars: VarSet, values: Vec<f64>, reliability: f64) -> Self {
        Rule {
            kind: RuleKind::Table,
            consequent: PropExpr::True,
            condition: PropExpr::True,
            target: 1.0,
            reliability,
            table_values: Some(values),
            influence_set: vars,
        }
    }
}

/// Union of the variables of the rule's consequent and condition (or the
/// declared table variables).
pub fn influence_set(rule: &Rule) -> VarSet {
    match rule.kind {
        RuleKind::Table => rule.influence_set.clone(),
        _ => rule.consequent.vars().union(&rule.condition.vars()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub consequent: PropExpr,
    pub condition: PropExpr,
}

impl Query {
    pub fn vars(&self) -> VarSet {
        self.consequent.vars().union(&self.condition.vars())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variables: Vec<String>,
    pub rules: Vec<Rule>,
    pub queries: Vec<Query>,
    /// Extra margins carried through a solve without any rule attached.
    #[serde(default)]
    pub query_margins: Vec<VarSet>,
}

impl NetworkSpec {
    /// Number of binary variables.
    pub fn k(&self) -> usize {
        self.variables.len()
    }

    pub fn var_name(&self, index: usize) -> String {
        self.variables
            .get(index.wrapping_sub(1))
            .cloned()
            .unwrap_or_else(|| format!("A{index}"))
    }

    /// Distinct influence sets, in order of first appearance.
    pub fn influence_family(&self) -> Vec<VarSet> {
        let mut seen = BTreeSet::new();
        self.rules
            .iter()
            .map(|r| r.influence_set.clone())
            .filter(|s| seen.insert(s.clone()))
            .collect()
    }

    /// Every subset of some influence set.
    pub fn closure_family(&self) -> BTreeSet<VarSet> {
        self.influence_family()
            .iter()
            .flat_map(|s| s.subsets().collect::<Vec<_>>())
            .collect()
    }

    /// Whether `set` is contained in some influence set.
    pub fn in_closure(&self, set: &VarSet) -> bool {
        self.rules.iter().any(|r| set.is_subset(&r.influence_set))
    }

    pub fn render_expr(&self, e: &PropExpr) -> String {
        e.render(&|v| self.var_name(v))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.variables.is_empty() {
            writeln!(f, "var {}", self.variables.join(" "))?;
        }
        for r in &self.rules {
            match r.kind {
                RuleKind::Table => {
                    let names: Vec<String> =
                        r.influence_set.iter().map(|v| self.var_name(v)).collect();
                    let vals: Vec<String> = r
                        .table_values
                        .as_deref()
                        .unwrap_or_default()
                        .iter()
                        .map(|v| v.to_string())
                        .collect();
                    write!(f, "table({}) = [{}]", names.join(", "), vals.join(" "))?;
                }
                RuleKind::Fact => {
                    write!(f, "p({}) = {}", self.render_expr(&r.consequent), r.target)?;
                }
                RuleKind::Conditional => {
                    write!(
                        f,
                        "p({} | {}) = {}",
                        self.render_expr(&r.consequent),
                        self.render_expr(&r.condition),
                        r.target
                    )?;
                }
            }
            writeln!(f, " [n={}]", r.reliability)?;
        }
        for q in &self.queries {
            if q.condition.is_true() {
                writeln!(f, "query({})", self.render_expr(&q.consequent))?;
            } else {
                writeln!(
                    f,
                    "query({} | {})",
                    self.render_expr(&q.consequent),
                    self.render_expr(&q.condition)
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(char),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, NetworkError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - s;
            out.push(Token {
                tok: Tok::Ident(chars[s..i].iter().collect()),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' {
            let s = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            col += i - s;
            let lexeme: String = chars[s..i].iter().collect();
            let value = lexeme.parse::<f64>().map_err(|_| NetworkError::Syntax {
                line: start_line,
                col: start_col,
                msg: format!("malformed number `{lexeme}`"),
            })?;
            out.push(Token {
                tok: Tok::Num(value),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        if "()|=[],".contains(c) {
            i += 1;
            col += 1;
            out.push(Token {
                tok: Tok::Sym(c),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        return Err(NetworkError::Syntax {
            line,
            col,
            msg: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    names: HashMap<String, usize>,
    variables: Vec<String>,
    end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .map(|t| (t.line, t.col))
            .unwrap_or(self.end)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, NetworkError> {
        let (line, col) = self.here();
        Err(NetworkError::Syntax {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn describe(&self) -> String {
        match self.peek() {
            None => "end of input".to_string(),
            Some(Tok::Ident(s)) => format!("`{s}`"),
            Some(Tok::Num(v)) => format!("number {v}"),
            Some(Tok::Sym(c)) => format!("`{c}`"),
        }
    }

    fn is_sym(&self, c: char) -> bool {
        self.peek() == Some(&Tok::Sym(c))
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == w)
    }

    fn expect_sym(&mut self, c: char) -> Result<(), NetworkError> {
        if self.is_sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{c}`, found {}", self.describe()))
        }
    }

    fn expect_num(&mut self) -> Result<f64, NetworkError> {
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err(format!("expected a number, found {}", self.describe())),
        }
    }

    fn variable(&mut self) -> Result<usize, NetworkError> {
        let (line, col) = self.here();
        match self.peek() {
            Some(Tok::Ident(s)) if !KEYWORDS.contains(&s.as_str()) => {
                let name = s.clone();
                self.pos += 1;
                self.names
                    .get(&name)
                    .copied()
                    .ok_or(NetworkError::Undeclared { line, col, name })
            }
            _ => self.err(format!("expected a variable, found {}", self.describe())),
        }
    }

    fn expr(&mut self) -> Result<PropExpr, NetworkError> {
        let mut terms = vec![self.conj()?];
        while self.is_word("or") {
            self.pos += 1;
            terms.push(self.conj()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            PropExpr::Or(terms)
        })
    }

    fn conj(&mut self) -> Result<PropExpr, NetworkError> {
        let mut terms = vec![self.lit()?];
        while self.is_word("and") {
            self.pos += 1;
            terms.push(self.lit()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            PropExpr::And(terms)
        })
    }

    fn lit(&mut self) -> Result<PropExpr, NetworkError> {
        if self.is_word("not") {
            self.pos += 1;
            return Ok(PropExpr::not(self.lit()?));
        }
        if self.is_word("true") {
            self.pos += 1;
            return Ok(PropExpr::True);
        }
        if self.is_word("false") {
            self.pos += 1;
            return Ok(PropExpr::False);
        }
        if self.is_sym('(') {
            self.pos += 1;
            let e = self.expr()?;
            self.expect_sym(')')?;
            return Ok(e);
        }
        if matches!(self.peek(), Some(Tok::Ident(_))) {
            return self.variable().map(PropExpr::Atom);
        }
        self.err(format!("expected an expression, found {}", self.describe()))
    }

    fn weight(&mut self, line: usize) -> Result<f64, NetworkError> {
        if !self.is_sym('[') {
            return Ok(DEFAULT_RELIABILITY);
        }
        self.pos += 1;
        if !self.is_word("n") {
            return self.err(format!("expected `n` in weight, found {}", self.describe()));
        }
        self.pos += 1;
        self.expect_sym('=')?;
        let n = self.expect_num()?;
        self.expect_sym(']')?;
        if !(n > 0.0 && n.is_finite()) {
            return Err(NetworkError::Reliability { line, value: n });
        }
        Ok(n)
    }

    fn declaration(&mut self) -> Result<(), NetworkError> {
        let mut count = 0;
        while let Some(Tok::Ident(s)) = self.peek() {
            if KEYWORDS.contains(&s.as_str()) {
                break;
            }
            let (line, col) = self.here();
            let name = s.clone();
            if self.names.contains_key(&name) {
                return Err(NetworkError::Redeclared { line, col, name });
            }
            self.variables.push(name.clone());
            self.names.insert(name, self.variables.len());
            self.pos += 1;
            count += 1;
        }
        if count == 0 {
            return self.err(format!(
                "expected variable names after `var`, found {}",
                self.describe()
            ));
        }
        Ok(())
    }

    fn probability(&mut self, line: usize) -> Result<Rule, NetworkError> {
        self.expect_sym('(')?;
        let consequent = self.expr()?;
        let condition = if self.is_sym('|') {
            self.pos += 1;
            self.expr()?
        } else {
            PropExpr::True
        };
        self.expect_sym(')')?;
        self.expect_sym('=')?;
        let target = self.expect_num()?;
        if !(0.0..=1.0).contains(&target) {
            return Err(NetworkError::TargetRange {
                line,
                value: target,
            });
        }
        let reliability = self.weight(line)?;
        Ok(Rule::conditional(
            consequent,
            condition,
            target,
            reliability,
        ))
    }

    fn table(&mut self, line: usize) -> Result<Rule, NetworkError> {
        self.expect_sym('(')?;
        let mut vars = vec![self.variable()?];
        while self.is_sym(',') {
            self.pos += 1;
            vars.push(self.variable()?);
        }
        self.expect_sym(')')?;
        if vars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NetworkError::TableOrder { line });
        }
        self.expect_sym('=')?;
        self.expect_sym('[')?;
        let mut values = Vec::new();
        while !self.is_sym(']') {
            values.push(self.expect_num()?);
            if self.is_sym(',') {
                self.pos += 1;
            }
        }
        self.expect_sym(']')?;
        let reliability = self.weight(line)?;
        let expected = 1usize.checked_shl(vars.len() as u32).unwrap_or(usize::MAX);
        if values.len() != expected {
            return Err(NetworkError::TableLength {
                line,
                vars: vars.len(),
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| *v < 0.0) {
            return Err(NetworkError::TableNegative { line });
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > TABLE_SUM_TOL {
            return Err(NetworkError::TableSum { line, sum });
        }
        let values = values.into_iter().map(|v| v / sum).collect();
        Ok(Rule::table(VarSet::new(vars), values, reliability))
    }

    fn query(&mut self) -> Result<Query, NetworkError> {
        self.expect_sym('(')?;
        let consequent = self.expr()?;
        let condition = if self.is_sym('|') {
            self.pos += 1;
            self.expr()?
        } else {
            PropExpr::True
        };
        self.expect_sym(')')?;
        Ok(Query {
            consequent,
            condition,
        })
    }
}

/// Parses and validates a network description. A network must contain at
/// least one rule.
pub fn parse_network(text: &str) -> Result<NetworkSpec, NetworkError> {
    let spec = parse_statements(text)?;
    if spec.rules.is_empty() {
        return Err(NetworkError::NoRules);
    }
    Ok(spec)
}

/// Like [`parse_network`], but accepts a network without rules.
pub fn parse_statements(text: &str) -> Result<NetworkSpec, NetworkError> {
    let toks = lex(text)?;
    let line_count = text.lines().count().max(1);
    let mut p = Parser {
        toks,
        pos: 0,
        names: HashMap::new(),
        variables: Vec::new(),
        end: (
            line_count,
            text.lines().last().map_or(1, |l| l.chars().count() + 1),
        ),
    };
    let mut rules = Vec::new();
    let mut queries = Vec::new();
    while let Some(tok) = p.peek() {
        let (line, _) = p.here();
        match tok {
            Tok::Ident(w) if w == "var" => {
                p.pos += 1;
                p.declaration()?;
            }
            Tok::Ident(w) if w == "p" => {
                p.pos += 1;
                rules.push(p.probability(line)?);
            }
            Tok::Ident(w) if w == "table" => {
                p.pos += 1;
                rules.push(p.table(line)?);
            }
            Tok::Ident(w) if w == "query" => {
                p.pos += 1;
                queries.push(p.query()?);
            }
            _ => return p.err(format!("expected a statement, found {}", p.describe())),
        }
    }
    Ok(NetworkSpec {
        variables: p.variables,
        rules,
        queries,
        query_margins: Vec::new(),
    })
}
