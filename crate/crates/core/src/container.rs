//! Tensor container shared by checkpoints and visual-feature files.
//!
//! ```text
//! AVDKF-CONTAINER 1
//! attr <key> <value to end of line>
//! tensor <name> <rows> <cols> <byte offset>
//! end
//! <raw little-endian f64 data>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line. Tensors
//! are stored row-major, contiguously and in header order, so a file
//! round-trips bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnet::Tensor;

const MAGIC: &str = "AVDKF-CONTAINER 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub attrs: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::InvalidArgument(format!(
            "{what} {s:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("missing attribute {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.attrs {
            check_token("attribute key", k)?;
            if v.contains('\n') {
                return Err(Error::InvalidArgument(format!("attribute {k} contains a newline")));
            }
            header.push_str(&format!("attr {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            header.push_str(&format!("tensor {name} {} {} {offset}\n", t.nrows(), t.ncols()));
            offset += t.len() * 8;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let len = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::format("truncated header"))?;
            let line = std::str::from_utf8(&rest[..len]).map_err(|_| Error::format("header is not UTF-8"))?;
            pos += len + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(Error::format("bad magic line"));
        }
        let mut attrs = BTreeMap::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "attr" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    attrs.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, rows, cols, off] = parts[..] else {
                        return Err(Error::format(format!("bad tensor line {line:?}")));
                    };
                    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad number in {line:?}")));
                    layout.push((name.to_string(), num(rows)?, num(cols)?, num(off)?));
                }
                _ => return Err(Error::format(format!("unknown header line {line:?}"))),
            }
        }
        let data = &bytes[pos..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0usize;
        for (name, rows, cols, off) in layout {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format("tensor too large"))?;
            let end = off
                .checked_add(n * 8)
                .filter(|e| *e <= data.len())
                .ok_or_else(|| Error::format(format!("tensor {name} runs past end of file")))?;
            if off != expected {
                return Err(Error::format(format!("tensor {name} is not contiguous")));
            }
            expected = end;
            let values: Vec<f64> = data[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_shape_vec((rows, cols), values).expect("sized above");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(format!("duplicate tensor {name}")));
            }
        }
        if expected != data.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected
            )));
        }
        Ok(Self { attrs, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                reason,
            },
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.attrs.insert("kind".into(), "av_dkf".into());
        c.attrs.insert("note".into(), "two words".into());
        c.tensors.insert("a.w".into(), Tensor::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.1 * j as f64));
        c.tensors.insert("b".into(), Tensor::from_elem((1, 1), f64::MIN_POSITIVE));
        c
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn names_with_spaces_are_rejected() {
        let mut c = Container::new();
        c.tensors.insert("a b".into(), Tensor::zeros((1, 1)));
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        sample().save(&path).unwrap();
        assert_eq!(Container::load(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn bitwise_round_trip(rows in 1usize..5, cols in 1usize..5, bits in proptest::collection::vec(any::<u64>(), 25)) {
            let mut c = Container::new();
            let vals: Vec<f64> = bits.iter().take(rows * cols).map(|b| f64::from_bits(*b)).collect();
            c.tensors.insert("t".into(), Tensor::from_shape_vec((rows, cols), vals.clone()).unwrap());
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let got: Vec<u64> = back.tensors["t"].iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
