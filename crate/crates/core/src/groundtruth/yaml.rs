//! YAML subset: block and flow mappings and sequences, plain and quoted scalars,
//! comments and a leading `---`. Anchors, tags and multi-document streams are not
//! supported.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Yaml {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Seq(Vec<Yaml>),
    Map(Vec<(String, Yaml)>),
}

impl Yaml {
    pub fn get(&self, key: &str) -> Option<&Yaml> {
        match self {
            Yaml::Map(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    pub fn as_seq(&self) -> Option<&[Yaml]> {
        match self {
            Yaml::Seq(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Yaml::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Yaml::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Yaml::Str(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Line {
    no: usize,
    indent: usize,
    text: String,
}

fn err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Yaml {
        line,
        column,
        message: message.into(),
    }
}

/// Drops a trailing `# comment` that is outside quotes.
fn strip_comment(s: &str) -> &str {
    let mut quote = None;
    let mut prev_space = true;
    for (i, c) in s.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' => quote = Some(c),
            None if c == '#' && prev_space => return &s[..i],
            None => {}
        }
        prev_space = c == ' ' || c == '\t';
    }
    s
}

pub fn parse_yaml(src: &str) -> Result<Yaml> {
    let mut lines = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let no = i + 1;
        if raw.chars().take_while(|c| c.is_whitespace()).any(|c| c == '\t') {
            return Err(err(no, 1, "tabs are not allowed for indentation"));
        }
        let body = strip_comment(raw).trim_end();
        let trimmed = body.trim_start();
        if trimmed.is_empty() {
            continue;
        }
        if lines.is_empty() && (trimmed == "---" || trimmed.starts_with("%")) {
            continue;
        }
        if trimmed == "..." {
            break;
        }
        lines.push(Line {
            no,
            indent: body.len() - trimmed.len(),
            text: trimmed.to_string(),
        });
    }
    if lines.is_empty() {
        return Ok(Yaml::Null);
    }
    let mut p = Parser { lines, pos: 0 };
    let indent = p.lines[0].indent;
    let value = p.block(indent)?;
    if p.pos < p.lines.len() {
        let l = &p.lines[p.pos];
        return Err(err(l.no, l.indent + 1, "unexpected content after document"));
    }
    Ok(value)
}

struct Parser {
    lines: Vec<Line>,
    pos: usize,
}

fn is_seq_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

/// Byte offset of the `:` separating a mapping key, if the line is a mapping entry.
fn key_split(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut i = 0;
    if let Some(&q) = bytes.first().filter(|&&b| b == b'"' || b == b'\'') {
        i = 1;
        while i < bytes.len() && bytes[i] != q {
            i += 1;
        }
        i += 1;
    }
    if text.starts_with('[') || text.starts_with('{') {
        return None;
    }
    while i < bytes.len() {
        if bytes[i] == b':' && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            return Some(i);
        }
        i += 1;
    }
    None
}

impl Parser {
    fn peek(&self) -> Option<&Line> {
        self.lines.get(self.pos)
    }

    fn block(&mut self, indent: usize) -> Result<Yaml> {
        let line = self.peek().expect("caller checked").clone();
        if is_seq_item(&line.text) {
            self.sequence(indent)
        } else if key_split(&line.text).is_some() {
            self.mapping(indent)
        } else {
            self.pos += 1;
            self.inline(&line.text, line.no, line.indent + 1)
        }
    }

    /// Value following `key:` or `-` with nothing else on the line.
    fn nested(&mut self, parent_indent: usize, allow_same_indent_seq: bool) -> Result<Yaml> {
        match self.peek() {
            Some(l) if l.indent > parent_indent => {
                let ind = l.indent;
                self.block(ind)
            }
            Some(l) if allow_same_indent_seq && l.indent == parent_indent && is_seq_item(&l.text) => {
                self.sequence(parent_indent)
            }
            _ => Ok(Yaml::Null),
        }
    }

    fn sequence(&mut self, indent: usize) -> Result<Yaml> {
        let mut items = Vec::new();
        while let Some(line) = self.peek().cloned() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(line.no, line.indent + 1, "bad indentation in sequence"));
            }
            if !is_seq_item(&line.text) {
                break;
            }
            let rest = line.text[1..].trim_start();
            if rest.is_empty() {
                self.pos += 1;
                items.push(self.nested(indent, false)?);
                continue;
            }
            let offset = line.text.len() - rest.len();
            if is_seq_item(rest) || key_split(rest).is_some() {
                // Re-read the remainder as a block starting at its own column.
                let inner = indent + offset;
                self.lines[self.pos] = Line {
                    no: line.no,
                    indent: inner,
                    text: rest.to_string(),
                };
                items.push(self.block(inner)?);
            } else {
                self.pos += 1;
                items.push(self.inline(rest, line.no, indent + offset + 1)?);
            }
        }
        Ok(Yaml::Seq(items))
    }

    fn mapping(&mut self, indent: usize) -> Result<Yaml> {
        let mut entries: Vec<(String, Yaml)> = Vec::new();
        while let Some(line) = self.peek().cloned() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(line.no, line.indent + 1, "bad indentation in mapping"));
            }
            if is_seq_item(&line.text) {
                break;
            }
            let Some(colon) = key_split(&line.text) else {
                return Err(err(line.no, line.indent + 1, "expected 'key: value'"));
            };
            let key = unquote(line.text[..colon].trim(), line.no, line.indent + 1)?;
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(err(line.no, line.indent + 1, format!("duplicate key '{key}'")));
            }
            let rest = line.text[colon + 1..].trim_start();
            self.pos += 1;
            let value = if rest.is_empty() {
                self.nested(indent, true)?
            } else {
                let col = line.indent + line.text.len() - rest.len() + 1;
                self.inline(rest, line.no, col)?
            };
            entries.push((key, value));
        }
        Ok(Yaml::Map(entries))
    }

    /// A scalar or a flow collection; flow collections may continue on later lines.
    fn inline(&mut self, text: &str, no: usize, col: usize) -> Result<Yaml> {
        if !(text.starts_with('[') || text.starts_with('{')) {
            return scalar(text, no, col);
        }
        let mut buf = text.to_string();
        let mut positions = vec![(no, col, 0usize)];
        while !flow_balanced(&buf) {
            let Some(next) = self.peek().cloned() else {
                return Err(err(no, col, "unterminated flow collection"));
            };
            self.pos += 1;
            buf.push(' ');
            positions.push((next.no, next.indent + 1, buf.len()));
            buf.push_str(&next.text);
        }
        let mut f = Flow {
            chars: buf.char_indices().collect(),
            i: 0,
            positions,
        };
        let v = f.value()?;
        f.skip_ws();
        if f.i < f.chars.len() {
            let (l, c) = f.position();
            return Err(err(l, c, "unexpected characters after flow collection"));
        }
        Ok(v)
    }
}

fn flow_balanced(s: &str) -> bool {
    let mut depth = 0i32;
    let mut quote = None;
    for c in s.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' => quote = Some(c),
                '[' | '{' => depth += 1,
                ']' | '}' => depth -= 1,
                _ => {}
            },
        }
    }
    depth <= 0 && quote.is_none()
}

struct Flow {
    chars: Vec<(usize, char)>,
    i: usize,
    /// `(line, column, byte offset)` where each source line starts in the buffer.
    positions: Vec<(usize, usize, usize)>,
}

impl Flow {
    fn position(&self) -> (usize, usize) {
        let off = self.chars.get(self.i).map_or_else(
            || self.chars.last().map_or(0, |c| c.0 + 1),
            |c| c.0,
        );
        let &(line, col, start) = self
            .positions
            .iter()
            .rev()
            .find(|p| p.2 <= off)
            .expect("first line starts at zero");
        (line, col + off - start)
    }

    fn error(&self, msg: &str) -> Error {
        let (l, c) = self.position();
        err(l, c, msg)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).map(|c| c.1)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.i += 1;
        }
    }

    fn value(&mut self) -> Result<Yaml> {
        self.skip_ws();
        match self.peek() {
            Some('[') => {
                self.i += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() == Some(']') {
                        self.i += 1;
                        return Ok(Yaml::Seq(items));
                    }
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => self.i += 1,
                        Some(']') => {}
                        _ => return Err(self.error("expected ',' or ']'")),
                    }
                }
            }
            Some('{') => {
                self.i += 1;
                let mut entries: Vec<(String, Yaml)> = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() == Some('}') {
                        self.i += 1;
                        return Ok(Yaml::Map(entries));
                    }
                    let key = match self.atom(true)? {
                        Yaml::Str(s) => s,
                        Yaml::Null => return Err(self.error("expected a key")),
                        other => scalar_text(&other),
                    };
                    self.skip_ws();
                    if self.peek() != Some(':') {
                        return Err(self.error("expected ':' after key"));
                    }
                    self.i += 1;
                    self.skip_ws();
                    let v = if matches!(self.peek(), Some(',') | Some('}')) {
                        Yaml::Null
                    } else {
                        self.value()?
                    };
                    entries.push((key, v));
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => self.i += 1,
                        Some('}') => {}
                        _ => return Err(self.error("expected ',' or '}'")),
                    }
                }
            }
            None => Err(self.error("unexpected end of flow collection")),
            _ => self.atom(false),
        }
    }

    fn atom(&mut self, is_key: bool) -> Result<Yaml> {
        let (line, col) = self.position();
        let start = self.i;
        if let Some(q @ ('"' | '\'')) = self.peek() {
            self.i += 1;
            loop {
                match self.peek() {
                    Some(c) if c == q => {
                        // '' is an escaped quote inside a single-quoted scalar.
                        if q == '\'' && self.chars.get(self.i + 1).map(|c| c.1) == Some('\'') {
                            self.i += 2;
                            continue;
                        }
                        break;
                    }
                    Some(_) => self.i += 1,
                    None => break,
                }
            }
            if self.peek().is_none() {
                return Err(self.error("unterminated string"));
            }
            self.i += 1;
        } else {
            while let Some(c) = self.peek() {
                if c == ',' || c == ']' || c == '}' || (is_key && c == ':') {
                    break;
                }
                self.i += 1;
            }
        }
        let text: String = self.chars[start..self.i].iter().map(|c| c.1).collect();
        scalar(text.trim(), line, col)
    }
}

fn scalar_text(v: &Yaml) -> String {
    match v {
        Yaml::Bool(b) => b.to_string(),
        Yaml::Int(i) => i.to_string(),
        Yaml::Float(f) => f.to_string(),
        Yaml::Str(s) => s.clone(),
        _ => String::new(),
    }
}

fn unquote(s: &str, no: usize, col: usize) -> Result<String> {
    match scalar(s, no, col)? {
        Yaml::Null => Ok(String::new()),
        other => Ok(scalar_text(&other)),
    }
}

fn scalar(s: &str, no: usize, col: usize) -> Result<Yaml> {
    if let Some(q @ ('"' | '\'')) = s.chars().next() {
        if s.len() < 2 || !s.ends_with(q) {
            return Err(err(no, col, "unterminated string"));
        }
        let inner = &s[1..s.len() - 1];
        let text = if q == '\'' {
            inner.replace("''", "'")
        } else {
            inner.replace("\\\"", "\"").replace("\\\\", "\\")
        };
        return Ok(Yaml::Str(text));
    }
    if s.starts_with(['[', '{', ']', '}']) || s.starts_with(['&', '*', '!', '|', '>']) {
        return Err(err(no, col, format!("unsupported YAML construct '{s}'")));
    }
    Ok(match s {
        "" | "~" | "null" | "Null" | "NULL" => Yaml::Null,
        "true" | "True" | "TRUE" => Yaml::Bool(true),
        "false" | "False" | "FALSE" => Yaml::Bool(false),
        _ => {
            if let Ok(i) = s.parse::<i64>() {
                Yaml::Int(i)
            } else if let Some(f) = parse_float(s) {
                Yaml::Float(f)
            } else {
                Yaml::Str(s.to_string())
            }
        }
    })
}

fn parse_float(s: &str) -> Option<f64> {
    match s {
        ".inf" | ".Inf" | "+.inf" => Some(f64::INFINITY),
        "-.inf" | "-.Inf" => Some(f64::NEG_INFINITY),
        ".nan" | ".NaN" => Some(f64::NAN),
        // Rust also accepts words such as `inf`; YAML floats need a digit.
        _ if s.contains(|c: char| c.is_ascii_digit()) => s.parse().ok(),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_structures() {
        let src = "\
curves:
- sharp: true
  type: Line
  vert_indices:
  - 0
  - 1
- sharp: false   # smooth
  vert_indices: [3, 4]
surfaces: []
";
        let y = parse_yaml(src).unwrap();
        let curves = y.get("curves").unwrap().as_seq().unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].get("sharp"), Some(&Yaml::Bool(true)));
        assert_eq!(curves[0].get("type").unwrap().as_str(), Some("Line"));
        assert_eq!(
            curves[0].get("vert_indices"),
            Some(&Yaml::Seq(vec![Yaml::Int(0), Yaml::Int(1)]))
        );
        assert_eq!(
            curves[1].get("vert_indices"),
            Some(&Yaml::Seq(vec![Yaml::Int(3), Yaml::Int(4)]))
        );
        assert_eq!(y.get("surfaces"), Some(&Yaml::Seq(vec![])));
    }

    #[test]
    fn flow_and_scalars() {
        let y = parse_yaml("a: {x: 1.5, y: 'it''s', z: [1, [2, 3]]}\nb: \"q # not a comment\"\nc:\n").unwrap();
        let a = y.get("a").unwrap();
        assert_eq!(a.get("x"), Some(&Yaml::Float(1.5)));
        assert_eq!(a.get("y").unwrap().as_str(), Some("it's"));
        assert_eq!(
            a.get("z"),
            Some(&Yaml::Seq(vec![Yaml::Int(1), Yaml::Seq(vec![Yaml::Int(2), Yaml::Int(3)])]))
        );
        assert_eq!(y.get("b").unwrap().as_str(), Some("q # not a comment"));
        assert_eq!(y.get("c"), Some(&Yaml::Null));
    }

    #[test]
    fn multiline_flow() {
        let y = parse_yaml("v: [1,\n  2,\n  3]\nw: 4\n").unwrap();
        assert_eq!(y.get("v").unwrap().as_seq().unwrap().len(), 3);
        assert_eq!(y.get("w"), Some(&Yaml::Int(4)));
    }

    #[test]
    fn errors_carry_positions() {
        match parse_yaml("a: 1\n  b: 2\n") {
            Err(Error::Yaml { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("{other:?}"),
        }
        match parse_yaml("a: [1, 2\n") {
            Err(Error::Yaml { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_yaml("x: 1\ny: [1, 2}\n") {
            Err(Error::Yaml { line, column, .. }) => assert_eq!((line, column), (2, 9)),
            other => panic!("{other:?}"),
        }
        assert!(parse_yaml("a: 1\na: 2\n").is_err());
    }
}
