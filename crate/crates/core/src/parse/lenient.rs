//! Tolerant scanner for JSON-like objects embedded in free text.
//!
//! Accepted deviations from JSON: bare or half-quoted keys (`.getText":`),
//! unescaped quotes inside strings, raw newlines inside strings, missing
//! commas between members at line breaks, and trailing commas. Objects are
//! found anywhere in the text regardless of surrounding prose, separators,
//! or stray brackets.

const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum LooseValue {
    Str(String),
    /// Number, boolean, null, or an unquoted token.
    Scalar(String),
    Container,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooseObject {
    pub fields: Vec<(String, LooseValue)>,
    pub start: usize,
    pub end: usize,
}

impl LooseObject {
    /// Flat objects (no nested containers) are record candidates.
    pub fn is_flat(&self) -> bool {
        !self.fields.is_empty() && self.fields.iter().all(|(_, v)| !matches!(v, LooseValue::Container))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fail {
    Eof,
    Malformed,
}

struct Cursor<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, pos: usize) -> Self {
        Self { text, bytes: text.as_bytes(), pos }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) -> bool {
        let mut newline = false;
        while let Some(b) = self.peek() {
            match b {
                b'\n' => newline = true,
                b' ' | b'\t' | b'\r' => {}
                _ => break,
            }
            self.pos += 1;
        }
        newline
    }

    /// Whether the quote at `at` closes a string: the next non-blank byte is
    /// structural, end of input, or another quote on a following line.
    fn closes_string(&self, at: usize, in_key: bool) -> bool {
        let mut i = at + 1;
        let mut newline = false;
        while let Some(&b) = self.bytes.get(i) {
            match b {
                b' ' | b'\t' | b'\r' => {}
                b'\n' => newline = true,
                b',' | b'}' | b']' => return !in_key,
                b':' => return true,
                b'"' => return newline,
                _ => return false,
            }
            i += 1;
        }
        true
    }

    fn string(&mut self, in_key: bool) -> Result<String, Fail> {
        debug_assert_eq!(self.peek(), Some(b'"'));
        self.pos += 1;
        let start = self.pos;
        let mut escaped = false;
        while let Some(b) = self.peek() {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' && self.closes_string(self.pos, in_key) {
                let raw = &self.text[start..self.pos];
                self.pos += 1;
                return Ok(unescape(raw));
            }
            self.pos += 1;
        }
        Err(Fail::Eof)
    }

    fn key(&mut self) -> Result<String, Fail> {
        if self.peek() == Some(b'"') {
            let save = self.pos;
            if let Ok(k) = self.string(true) {
                return Ok(k);
            }
            self.pos = save;
        }
        let start = self.pos;
        while let Some(b) = self.peek() {
            match b {
                b':' => {
                    let key = self.text[start..self.pos].trim().trim_matches(|c| c == '"' || c == '\'').trim();
                    if key.is_empty() {
                        return Err(Fail::Malformed);
                    }
                    return Ok(key.to_string());
                }
                b'{' | b'}' | b'[' | b']' | b',' | b'\n' => return Err(Fail::Malformed),
                _ => self.pos += 1,
            }
        }
        Err(Fail::Eof)
    }

    fn value(&mut self, depth: usize) -> Result<LooseValue, Fail> {
        self.skip_ws();
        match self.peek() {
            None => Err(Fail::Eof),
            Some(b'"') => self.string(false).map(LooseValue::Str),
            Some(b'{') => self.object(depth + 1).map(|_| LooseValue::Container),
            Some(b'[') => self.array(depth + 1).map(|_| LooseValue::Container),
            Some(_) => {
                let start = self.pos;
                while let Some(b) = self.peek() {
                    if matches!(b, b',' | b'}' | b']' | b'\n') {
                        break;
                    }
                    self.pos += 1;
                }
                if self.peek().is_none() {
                    return Err(Fail::Eof);
                }
                let token = self.text[start..self.pos].trim();
                if token.is_empty() {
                    Err(Fail::Malformed)
                } else {
                    Ok(LooseValue::Scalar(token.to_string()))
                }
            }
        }
    }

    fn array(&mut self, depth: usize) -> Result<(), Fail> {
        if depth > MAX_DEPTH {
            return Err(Fail::Malformed);
        }
        self.pos += 1;
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(Fail::Eof),
                Some(b']') => {
                    self.pos += 1;
                    return Ok(());
                }
                Some(b',') => self.pos += 1,
                Some(_) => {
                    self.value(depth)?;
                }
            }
        }
    }

    fn object(&mut self, depth: usize) -> Result<Vec<(String, LooseValue)>, Fail> {
        if depth > MAX_DEPTH {
            return Err(Fail::Malformed);
        }
        debug_assert_eq!(self.peek(), Some(b'{'));
        self.pos += 1;
        let mut fields = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(Fail::Eof),
                Some(b'}') => {
                    self.pos += 1;
                    return Ok(fields);
                }
                Some(b',') => {
                    self.pos += 1;
                    continue;
                }
                Some(_) => {}
            }
            let key = self.key()?;
            // key() stops on ':' for bare keys; quoted keys leave it pending
            self.skip_ws();
            match self.peek() {
                Some(b':') => self.pos += 1,
                None => return Err(Fail::Eof),
                Some(_) => return Err(Fail::Malformed),
            }
            let value = self.value(depth)?;
            fields.push((key, value));
            self.skip_ws();
            match self.peek() {
                None => return Err(Fail::Eof),
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                Some(b'"') => {}
                Some(_) => return Err(Fail::Malformed),
            }
        }
    }
}

fn unescape(raw: &str) -> String {
    if !raw.contains('\\') {
        return raw.to_string();
    }
    if let Ok(s) = serde_json::from_str::<String>(&format!("\"{raw}\"")) {
        return s;
    }
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('"') => out.push('"'),
            Some('\\') => out.push('\\'),
            Some('/') => out.push('/'),
            Some('u') => {
                let hex: String = chars.clone().take(4).collect();
                match u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32) {
                    Some(ch) if hex.len() == 4 => {
                        out.push(ch);
                        for _ in 0..4 {
                            chars.next();
                        }
                    }
                    _ => out.push_str("\\u"),
                }
            }
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Result of scanning a text for object records.
#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub objects: Vec<LooseObject>,
    /// Byte offset of an unterminated object running to end of input that
    /// no later record follows.
    pub open_tail: Option<usize>,
}

/// Finds every flat object in `text`. Non-flat objects are descended into so
/// records wrapped in other structures are still found.
pub fn scan_objects(text: &str) -> Scan {
    let bytes = text.as_bytes();
    let mut scan = Scan::default();
    let mut pos = 0;
    while let Some(offset) = bytes[pos..].iter().position(|&b| b == b'{') {
        let start = pos + offset;
        let mut cursor = Cursor::new(text, start);
        match cursor.object(0) {
            Ok(fields) => {
                let obj = LooseObject { fields, start, end: cursor.pos };
                if obj.is_flat() {
                    pos = obj.end;
                    scan.open_tail = None;
                    scan.objects.push(obj);
                } else {
                    pos = start + 1;
                }
            }
            Err(Fail::Eof) => {
                if scan.open_tail.is_none() {
                    scan.open_tail = Some(start);
                }
                pos = start + 1;
            }
            Err(Fail::Malformed) => pos = start + 1,
        }
    }
    scan
}

/// Byte range of the first `[` and its balanced `]`, honoring JSON strings.
pub fn balanced_bracket_slice(text: &str) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == b'[')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, i + 1));
                }
            }
            _ => {}
        }
    }
    None
}
