//! Canonical byte encodings shared by the wire formats, transcript records
//! and registry files.
//!
//! Everything is big-endian and fixed width; variable-length fields carry a
//! `u64` length prefix. Hex is always lowercase and decoding rejects any
//! other spelling, so a byte string has exactly one textual form.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after a complete value")]
    Trailing(usize),
    #[error("non-canonical hex: {0}")]
    Hex(String),
    #[error("registry line {line}: {reason}")]
    Registry { line: usize, reason: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Append-only canonical encoder.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u64(bytes.len() as u64);
        self.raw(bytes)
    }

    pub fn u64_list(&mut self, items: &[u64]) -> &mut Self {
        self.u64(items.len() as u64);
        for &v in items {
            self.u64(v);
        }
        self
    }

    pub fn f64_list(&mut self, items: &[f64]) -> &mut Self {
        self.u64(items.len() as u64);
        for &v in items {
            self.f64(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a canonical encoding.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len_prefix(&mut self, elem_size: usize) -> Result<usize, CodecError> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size as u64) > remaining {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: (n.saturating_mul(elem_size as u64) - remaining) as usize,
            });
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }

    pub fn u64_list(&mut self) -> Result<Vec<u64>, CodecError> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn f64_list(&mut self) -> Result<Vec<f64>, CodecError> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

/// Decodes lowercase hex only.
pub fn from_hex(text: &str) -> Result<Vec<u8>, CodecError> {
    if text
        .bytes()
        .any(|c| !(c.is_ascii_digit() || (b'a'..=b'f').contains(&c)))
    {
        return Err(CodecError::Hex(format!("invalid character in {text:?}")));
    }
    hex::decode(text).map_err(|e| CodecError::Hex(e.to_string()))
}

/// Formats `client_id, hex(key)` lines, sorted by id, with a trailing newline.
pub fn format_registry<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = (u64, &'a [u8])>,
{
    let mut rows: Vec<(u64, &[u8])> = entries.into_iter().collect();
    rows.sort_by_key(|(id, _)| *id);
    rows.iter()
        .map(|(id, key)| format!("{id}, {}\n", to_hex(key)))
        .collect()
}

/// Parses `client_id, hex(key)` lines. Blank lines are ignored; ids must be
/// unique and nonzero.
pub fn parse_registry(text: &str) -> Result<Vec<(u64, Vec<u8>)>, CodecError> {
    let mut out: Vec<(u64, Vec<u8>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| CodecError::Registry {
            line: line_no,
            reason,
        };
        let (id, key) = line
            .split_once(',')
            .ok_or_else(|| err("expected `client_id, hex`".into()))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|e| err(format!("bad client id: {e}")))?;
        if id == 0 {
            return Err(err("client ids start at 1".into()));
        }
        if out.iter().any(|(seen, _)| *seen == id) {
            return Err(err(format!("duplicate client id {id}")));
        }
        let key = from_hex(key.trim()).map_err(|e| err(e.to_string()))?;
        out.push((id, key));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_rejects_trailing_and_truncated() {
        let mut w = Writer::new();
        w.u64(7).bytes(b"abc");
        let bytes = w.finish();

        let mut r = Reader::new(&bytes);
        assert_eq!(r.u64().unwrap(), 7);
        assert_eq!(r.bytes().unwrap(), b"abc");
        r.finish().unwrap();

        let mut r = Reader::new(&bytes[..bytes.len() - 1]);
        r.u64().unwrap();
        assert!(matches!(r.bytes(), Err(CodecError::Truncated { .. })));

        let mut longer = bytes.clone();
        longer.push(0);
        let mut r = Reader::new(&longer);
        r.u64().unwrap();
        r.bytes().unwrap();
        assert_eq!(r.finish(), Err(CodecError::Trailing(1)));
    }

    #[test]
    fn huge_length_prefix_is_truncation_not_allocation() {
        let mut w = Writer::new();
        w.u64(u64::MAX);
        let bytes = w.finish();
        assert!(Reader::new(&bytes).u64_list().is_err());
    }

    #[test]
    fn hex_is_lowercase_only() {
        assert_eq!(from_hex("00ff").unwrap(), vec![0, 255]);
        assert!(from_hex("00FF").is_err());
        assert!(from_hex("0 ff").is_err());
        assert!(from_hex("abc").is_err());
    }

    #[test]
    fn registry_lines() {
        let a = [1u8, 2];
        let b = [0xabu8];
        let text = format_registry([(2, &b[..]), (1, &a[..])]);
        assert_eq!(text, "1, 0102\n2, ab\n");
        let parsed = parse_registry(&text).unwrap();
        assert_eq!(parsed, vec![(1, a.to_vec()), (2, b.to_vec())]);

        assert!(parse_registry("1, 00\n1, 01\n").is_err());
        assert!(parse_registry("0, 00\n").is_err());
        assert!(parse_registry("x, 00\n").is_err());
        match parse_registry("1, 00\n2 00\n") {
            Err(CodecError::Registry { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
