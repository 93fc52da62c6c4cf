//! Arithmetic expressions for coefficients, drivers and fields written in
//! experiment configs.
//!
//! Grammar (standard precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-'? atom ('^' integer)?
//! atom   := number | identifier | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`. There is no
//! implicit multiplication and no conditional construct.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Abs,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Sin,
        Func::Cos,
        Func::Tanh,
        Func::Min,
        Func::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Accepted argument counts as (min, max).
    fn arity(self) -> (usize, usize) {
        match self {
            Func::Min | Func::Max => (2, usize::MAX),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Constant(f64),
    Variable(String),
    Neg(Box<Node>),
    Binary {
        op: BinOp,
        lhs: Box<Node>,
        rhs: Box<Node>,
    },
    Pow {
        base: Box<Node>,
        exponent: i32,
    },
    Call {
        func: Func,
        args: Vec<Node>,
    },
}

/// Fully parenthesised rendering; parsing it back yields the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Constant(c) => write!(f, "{c}"),
            Node::Variable(name) => f.write_str(name),
            Node::Neg(inner) => write!(f, "(-{inner})"),
            Node::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Node::Pow { base, exponent } => write!(f, "({base}^{exponent})"),
            Node::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    Syntax,
    UnknownFunction,
    Arity,
}

/// Parse failure; `column` is 1-based and counts characters.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at column {column}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error in `{node}`: argument {argument}")]
    Domain { node: String, argument: f64 },
    #[error("non-finite result in `{node}`")]
    NonFinite { node: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64, bool),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Number(v, _) => format!("number {v}"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Plus => "'+'".into(),
            Token::Minus => "'-'".into(),
            Token::Star => "'*'".into(),
            Token::Slash => "'/'".into(),
            Token::Caret => "'^'".into(),
            Token::LParen => "'('".into(),
            Token::RParen => "')'".into(),
            Token::Comma => "','".into(),
        }
    }
}

fn syntax(column: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::Syntax,
        column,
        message: message.into(),
    }
}

fn tokenize(source: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let simple = match c {
            '+' => Some(Token::Plus),
            '-' => Some(Token::Minus),
            '*' => Some(Token::Star),
            '/' => Some(Token::Slash),
            '^' => Some(Token::Caret),
            '(' => Some(Token::LParen),
            ')' => Some(Token::RParen),
            ',' => Some(Token::Comma),
            _ => None,
        };
        if let Some(tok) = simple {
            tokens.push((tok, column));
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            let mut integral = true;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                integral = false;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                integral = false;
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                } else {
                    return Err(syntax(j + 1, "malformed exponent in number"));
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text
                .parse()
                .map_err(|_| syntax(column, format!("malformed number `{text}`")))?;
            tokens.push((Token::Number(value, integral), column));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push((Token::Ident(chars[start..i].iter().collect()), column));
            continue;
        }
        return Err(syntax(column, format!("unexpected character `{c}`")));
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|&(_, c)| c)
            .unwrap_or(self.end_column)
    }

    fn advance(&mut self) -> Option<(Token, usize)> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        tok
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(tok) => syntax(
                self.column(),
                format!("expected {expected}, found {}", tok.describe()),
            ),
            None => syntax(
                self.column(),
                format!("expected {expected}, found end of input"),
            ),
        }
    }

    fn expect(&mut self, tok: Token, expected: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinOp::Add,
                Some(Token::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => BinOp::Mul,
                Some(Token::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Node::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        let negate = if self.peek() == Some(&Token::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        let mut node = self.atom()?;
        if self.peek() == Some(&Token::Caret) {
            self.pos += 1;
            node = Node::Pow {
                base: Box::new(node),
                exponent: self.integer()?,
            };
        }
        Ok(if negate {
            Node::Neg(Box::new(node))
        } else {
            node
        })
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        let negative = if self.peek() == Some(&Token::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        let column = self.column();
        match self.advance() {
            Some((Token::Number(v, true), _)) if v <= i32::MAX as f64 => {
                let k = v as i32;
                Ok(if negative { -k } else { k })
            }
            Some((tok, _)) => Err(syntax(
                column,
                format!("exponent must be an integer, found {}", tok.describe()),
            )),
            None => Err(syntax(
                column,
                "expected integer exponent, found end of input",
            )),
        }
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let column = self.column();
        match self.advance() {
            Some((Token::Number(v, _), _)) => Ok(Node::Constant(v)),
            Some((Token::LParen, _)) => {
                let inner = self.expr()?;
                self.expect(Token::RParen, "')'")?;
                Ok(inner)
            }
            Some((Token::Ident(name), _)) => {
                if self.peek() == Some(&Token::LParen) {
                    let func = Func::from_name(&name).ok_or_else(|| ParseError {
                        kind: ParseErrorKind::UnknownFunction,
                        column,
                        message: format!("unknown function `{name}`"),
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Token::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(Token::RParen, "',' or ')'")?;
                    let (lo, hi) = func.arity();
                    if args.len() < lo || args.len() > hi {
                        return Err(ParseError {
                            kind: ParseErrorKind::Arity,
                            column,
                            message: format!(
                                "function `{name}` takes {} argument(s), got {}",
                                if hi == usize::MAX {
                                    format!("at least {lo}")
                                } else {
                                    lo.to_string()
                                },
                                args.len()
                            ),
                        });
                    }
                    Ok(Node::Call { func, args })
                } else if Func::from_name(&name).is_some() {
                    Err(syntax(
                        column,
                        format!("function `{name}` must be called with parentheses"),
                    ))
                } else {
                    Ok(Node::Variable(name))
                }
            }
            Some((tok, _)) => Err(syntax(
                column,
                format!("expected a value, found {}", tok.describe()),
            )),
            None => Err(syntax(column, "expected a value, found end of input")),
        }
    }
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    ast: Node,
    free_variables: BTreeSet<String>,
}

pub fn parse(source: &str) -> Result<Expression, ParseError> {
    let tokens = tokenize(source)?;
    if tokens.is_empty() {
        return Err(ParseError {
            kind: ParseErrorKind::Empty,
            column: 1,
            message: "empty expression".into(),
        });
    }
    let mut parser = Parser {
        tokens,
        pos: 0,
        end_column: source.chars().count() + 1,
    };
    let ast = parser.expr()?;
    if parser.pos < parser.tokens.len() {
        return Err(parser.unexpected("an operator or end of input"));
    }
    let mut free_variables = BTreeSet::new();
    collect_variables(&ast, &mut free_variables);
    Ok(Expression {
        source: source.to_string(),
        ast,
        free_variables,
    })
}

fn collect_variables(node: &Node, out: &mut BTreeSet<String>) {
    match node {
        Node::Constant(_) => {}
        Node::Variable(name) => {
            out.insert(name.clone());
        }
        Node::Neg(inner) | Node::Pow { base: inner, .. } => collect_variables(inner, out),
        Node::Binary { lhs, rhs, .. } => {
            collect_variables(lhs, out);
            collect_variables(rhs, out);
        }
        Node::Call { args, .. } => args.iter().for_each(|a| collect_variables(a, out)),
    }
}

impl std::str::FromStr for Expression {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Expression {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Node {
        &self.ast
    }

    pub fn free_variables(&self) -> &BTreeSet<String> {
        &self.free_variables
    }

    pub fn evaluate(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        eval_node(&self.ast, &|name| bindings.get(name).copied())
    }

    /// Resolves variables into positional slots; every other free variable
    /// must be a named parameter.
    pub fn bind(
        &self,
        slots: &[&str],
        params: &HashMap<String, f64>,
    ) -> Result<BoundExpression, EvalError> {
        Ok(BoundExpression {
            source: self.source.clone(),
            root: compile(&self.ast, slots, params)?,
        })
    }
}

fn apply_func(func: Func, args: &[f64], node: &dyn Fn() -> String) -> Result<f64, EvalError> {
    let x = args[0];
    let value = match func {
        Func::Abs => x.abs(),
        Func::Exp => x.exp(),
        Func::Log => {
            if x <= 0.0 {
                return Err(EvalError::Domain {
                    node: node(),
                    argument: x,
                });
            }
            x.ln()
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err(EvalError::Domain {
                    node: node(),
                    argument: x,
                });
            }
            x.sqrt()
        }
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tanh => x.tanh(),
        Func::Min => args[1..].iter().fold(x, |a, &b| a.min(b)),
        Func::Max => args[1..].iter().fold(x, |a, &b| a.max(b)),
    };
    Ok(value)
}

fn apply_binary(op: BinOp, a: f64, b: f64, node: &dyn Fn() -> String) -> Result<f64, EvalError> {
    Ok(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(EvalError::Domain {
                    node: node(),
                    argument: b,
                });
            }
            a / b
        }
    })
}

fn finite(value: f64, node: &dyn Fn() -> String) -> Result<f64, EvalError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EvalError::NonFinite { node: node() })
    }
}

fn eval_node(node: &Node, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
    let render = || node.to_string();
    let value = match node {
        Node::Constant(c) => *c,
        Node::Variable(name) => lookup(name).ok_or_else(|| EvalError::Unbound(name.clone()))?,
        Node::Neg(inner) => -eval_node(inner, lookup)?,
        Node::Binary { op, lhs, rhs } => apply_binary(
            *op,
            eval_node(lhs, lookup)?,
            eval_node(rhs, lookup)?,
            &render,
        )?,
        Node::Pow { base, exponent } => eval_node(base, lookup)?.powi(*exponent),
        Node::Call { func, args } => {
            let values = args
                .iter()
                .map(|a| eval_node(a, lookup))
                .collect::<Result<Vec<_>, _>>()?;
            apply_func(*func, &values, &render)?
        }
    };
    finite(value, &render)
}

#[derive(Debug, Clone)]
enum Compiled {
    Constant(f64),
    Slot(usize),
    Neg(Box<Compiled>),
    Binary(BinOp, Box<Compiled>, Box<Compiled>),
    Pow(Box<Compiled>, i32),
    Call(Func, Vec<Compiled>),
}

fn compile(
    node: &Node,
    slots: &[&str],
    params: &HashMap<String, f64>,
) -> Result<Compiled, EvalError> {
    Ok(match node {
        Node::Constant(c) => Compiled::Constant(*c),
        Node::Variable(name) => {
            if let Some(i) = slots.iter().position(|s| s == name) {
                Compiled::Slot(i)
            } else if let Some(&v) = params.get(name) {
                Compiled::Constant(v)
            } else {
                return Err(EvalError::Unbound(name.clone()));
            }
        }
        Node::Neg(inner) => Compiled::Neg(Box::new(compile(inner, slots, params)?)),
        Node::Binary { op, lhs, rhs } => Compiled::Binary(
            *op,
            Box::new(compile(lhs, slots, params)?),
            Box::new(compile(rhs, slots, params)?),
        ),
        Node::Pow { base, exponent } => {
            Compiled::Pow(Box::new(compile(base, slots, params)?), *exponent)
        }
        Node::Call { func, args } => Compiled::Call(
            *func,
            args.iter()
                .map(|a| compile(a, slots, params))
                .collect::<Result<_, _>>()?,
        ),
    })
}

/// An expression with variables resolved to slot indices, evaluated against a
/// plain slice. Cheap to clone and safe to share between threads.
#[derive(Debug, Clone)]
pub struct BoundExpression {
    source: String,
    root: Compiled,
}

impl BoundExpression {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, values: &[f64]) -> Result<f64, EvalError> {
        self.eval_compiled(&self.root, values)
    }

    fn eval_compiled(&self, node: &Compiled, values: &[f64]) -> Result<f64, EvalError> {
        let render = || self.source.clone();
        let value = match node {
            Compiled::Constant(c) => *c,
            Compiled::Slot(i) => values[*i],
            Compiled::Neg(inner) => -self.eval_compiled(inner, values)?,
            Compiled::Binary(op, lhs, rhs) => apply_binary(
                *op,
                self.eval_compiled(lhs, values)?,
                self.eval_compiled(rhs, values)?,
                &render,
            )?,
            Compiled::Pow(base, k) => self.eval_compiled(base, values)?.powi(*k),
            Compiled::Call(func, args) => {
                let mut buf = [0.0; 4];
                if args.len() <= buf.len() {
                    for (slot, arg) in buf.iter_mut().zip(args) {
                        *slot = self.eval_compiled(arg, values)?;
                    }
                    apply_func(*func, &buf[..args.len()], &render)?
                } else {
                    let vals = args
                        .iter()
                        .map(|a| self.eval_compiled(a, values))
                        .collect::<Result<Vec<_>, _>>()?;
                    apply_func(*func, &vals, &render)?
                }
            }
        };
        finite(value, &render)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_with(src: &str, vars: &[(&str, f64)]) -> Result<f64, EvalError> {
        let bindings = vars.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        parse(src).unwrap().evaluate(&bindings)
    }

    #[test]
    fn single_call_node() {
        let e = parse("abs(z1)").unwrap();
        assert_eq!(
            e.ast(),
            &Node::Call {
                func: Func::Abs,
                args: vec![Node::Variable("z1".into())]
            }
        );
        assert!(e.free_variables().contains("z1"));
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval_with("1+2*3", &[]).unwrap(), 7.0);
        assert_eq!(eval_with("8-2-1", &[]).unwrap(), 5.0);
        assert_eq!(eval_with("8/2/2", &[]).unwrap(), 2.0);
        assert_eq!(eval_with("-2^2", &[]).unwrap(), -4.0);
        assert_eq!(eval_with("(-2)^2", &[]).unwrap(), 4.0);
        assert_eq!(eval_with("2^-1", &[]).unwrap(), 0.5);
        assert_eq!(eval_with("3*-x1", &[("x1", 2.0)]).unwrap(), -6.0);
    }

    #[test]
    fn arithmetic_with_min() {
        let v = eval_with("0.5*x1^2 - min(x1, 0)", &[("x1", -2.0)]).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn parameters_and_functions() {
        assert_eq!(
            eval_with("exp(-2*mu*x1)", &[("mu", 1.0), ("x1", 0.0)]).unwrap(),
            1.0
        );
        assert_eq!(
            eval_with("mu*abs(z1)", &[("mu", 0.5), ("z1", -3.0)]).unwrap(),
            1.5
        );
        assert_eq!(eval_with("max(1, 5, 3)", &[]).unwrap(), 5.0);
        assert_eq!(eval_with("1.5e2 + .5", &[]).unwrap(), 150.5);
    }

    #[test]
    fn domain_errors_are_reported() {
        assert!(matches!(
            eval_with("log(x1)", &[("x1", -1.0)]),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            eval_with("sqrt(x1)", &[("x1", -1.0)]),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            eval_with("1/x1", &[("x1", 0.0)]),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            eval_with("exp(x1)", &[("x1", 1000.0)]),
            Err(EvalError::NonFinite { .. })
        ));
        assert_eq!(
            eval_with("x1 + y", &[("x1", 1.0)]),
            Err(EvalError::Unbound("y".into()))
        );
    }

    #[test]
    fn syntax_errors_carry_columns() {
        let err = parse("abs(").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!(err.column, 5);
        let err = parse("1 + foo(2)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownFunction);
        assert_eq!(err.column, 5);
        let err = parse("min(1)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Arity);
        let err = parse("exp(1, 2)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Arity);
        assert_eq!(parse("   ").unwrap_err().kind, ParseErrorKind::Empty);
        assert_eq!(parse("x^2.5").unwrap_err().kind, ParseErrorKind::Syntax);
        assert_eq!(parse("2 x").unwrap_err().column, 3);
    }

    #[test]
    fn bound_expression_matches_map_evaluation() {
        let e = parse("mu*abs(z1) + 0.25*y - tanh(z2)").unwrap();
        let params = HashMap::from([("mu".to_string(), 0.5)]);
        let bound = e.bind(&["y", "z1", "z2"], &params).unwrap();
        let direct = eval_with(
            "mu*abs(z1) + 0.25*y - tanh(z2)",
            &[("mu", 0.5), ("y", 2.0), ("z1", -3.0), ("z2", 0.1)],
        )
        .unwrap();
        assert_eq!(bound.eval(&[2.0, -3.0, 0.1]).unwrap(), direct);
        assert!(matches!(
            e.bind(&["y"], &params),
            Err(EvalError::Unbound(_))
        ));
    }

    #[test]
    fn malformed_corpus_is_rejected() {
        let corpus = [
            "", "(", ")", "abs(", "abs)", "1 +", "* 2", "1 ** 2", "--x", "x^", "x^y", "x^2^3",
            "min(,1)", "max(1,)", "f(x)", "1e", "1e+", "3..2", "x1 x2", "exp", "@", "(1))", "((1)",
            "sin()", "1,2", "2^(1)", "abs(1 2)", "#", "x$", "log(-)",
        ];
        for src in corpus {
            assert!(parse(src).is_err(), "accepted malformed input {src:?}");
        }
    }

    fn arb_node() -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Node::Constant),
            prop::sample::select(vec!["x1", "x2", "y", "z1", "mu"])
                .prop_map(|s| Node::Variable(s.to_string())),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|n| Node::Neg(Box::new(n))),
                (
                    prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Node::Binary {
                        op,
                        lhs: Box::new(l),
                        rhs: Box::new(r)
                    }),
                (inner.clone(), -4i32..5).prop_map(|(b, k)| Node::Pow {
                    base: Box::new(b),
                    exponent: k
                }),
                (
                    prop::sample::select(Func::ALL.to_vec()),
                    inner.clone(),
                    inner
                )
                    .prop_map(|(func, a, b)| {
                        let args = if matches!(func, Func::Min | Func::Max) {
                            vec![a, b]
                        } else {
                            vec![a]
                        };
                        Node::Call { func, args }
                    }),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_round_trips(node in arb_node()) {
            let text = node.to_string();
            let reparsed = parse(&text).unwrap();
            prop_assert_eq!(reparsed.ast(), &node);
        }

        #[test]
        fn arbitrary_text_never_panics(src in "[-+*/^(),.0-9a-z e]{0,24}") {
            let _ = parse(&src);
        }
    }
}
