//! Reading and writing the NPY v1.0 tensor format.
//!
//! Only the subset used by attention dumps is supported: little-endian
//! `<f4`/`<f8` element types, C order, and at most two dimensions. A 1-D
//! array of length `n` loads as a `1 x n` matrix, a 0-D array as `1 x 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const PREAMBLE: usize = MAGIC.len() + 2 + 2;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
        }
    }
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(&bytes)
}

/// Parses an in-memory NPY file. Never panics on arbitrary input.
pub fn parse_tensor(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < PREAMBLE || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Format(format!(
            "unsupported NPY version {major}.{minor}"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE + header_len;
    let header_bytes = bytes
        .get(PREAMBLE..payload_start)
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header_text = std::str::from_utf8(header_bytes)
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let header = parse_header(header_text)?;

    let (rows, cols) = match header.shape.as_slice() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        more => {
            return Err(Error::Format(format!(
                "expected at most 2 dimensions, found {}",
                more.len()
            )))
        }
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = &bytes[payload_start..];
    let expected = count
        .checked_mul(header.dtype.size())
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape requires {expected}",
            payload.len()
        )));
    }

    let data: Vec<f64> = match header.dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect(),
    };
    Matrix::new(rows, cols, data)
}

pub fn write_tensor(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_with(m, Dtype::F8, path.as_ref())
}

/// Writes `m` narrowed to 32-bit floats. Used for compact dumps.
pub fn write_tensor_f32(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_with(m, Dtype::F4, path.as_ref())
}

fn write_with(m: &Matrix, dtype: Dtype, path: &Path) -> Result<()> {
    let bytes = encode(m, dtype);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    encode(m, Dtype::F8)
}

fn encode(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        dtype.descr(),
        m.rows(),
        m.cols()
    );
    // Pad with spaces so the payload starts on an ALIGN boundary; the header ends in '\n'.
    let unpadded = PREAMBLE + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat(' ').take(padding));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE + dict.len() + m.data().len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for &v in m.data() {
        match dtype {
            Dtype::F8 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F4 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    out
}

#[derive(Debug, PartialEq)]
enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

fn parse_header(text: &str) -> Result<Header> {
    let mut p = Parser {
        s: text.as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;

    p.expect(b'{')?;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        let value = p.value()?;
        match (key.as_str(), value) {
            ("descr", Value::Str(s)) => descr = Some(s),
            ("fortran_order", Value::Bool(b)) => fortran = Some(b),
            ("shape", Value::Tuple(t)) => shape = Some(t),
            (k, v) => {
                return Err(Error::Format(format!(
                    "unexpected header entry {k:?} = {v:?}"
                )))
            }
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }
    if p.s[p.pos..].iter().any(|b| !b.is_ascii_whitespace()) {
        return Err(Error::Format("trailing bytes after header dict".into()));
    }

    let descr = descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?;
    let fortran = fortran.ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?;
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        _ => return Err(Error::UnsupportedDtype(descr)),
    };
    if fortran {
        return Err(Error::Format("Fortran-order arrays are not supported".into()));
    }
    Ok(Header { dtype, shape })
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected {:?} at header offset {}",
                b as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(Error::Format("expected quoted string in header".into())),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == quote {
                let s = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(Error::Format("unterminated string in header".into()))
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Value::Str),
            Some(b'(') => self.tuple().map(Value::Tuple),
            Some(b'T') => self.keyword("True").map(|_| Value::Bool(true)),
            Some(b'F') => self.keyword("False").map(|_| Value::Bool(false)),
            _ => Err(Error::Format(format!(
                "unexpected header value at offset {}",
                self.pos
            ))),
        }
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        if self.s[self.pos..].starts_with(word.as_bytes()) {
            self.pos += word.len();
            Ok(())
        } else {
            Err(Error::Format("malformed boolean in header".into()))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.peek().is_some_and(|b| b.is_ascii_digit()) {
                self.pos += 1;
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
            let dim = digits
                .parse::<usize>()
                .map_err(|_| Error::Format("malformed shape tuple".into()))?;
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}
