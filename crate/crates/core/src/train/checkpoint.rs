//! Checkpoint archives.
//!
//! Layout: `u32` entry count, then per entry a `u16` name length, the UTF-8
//! name and one `AGT1` tensor record; the rest of the file is a `key = value`
//! metadata block. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::tensor::io::{encode, read_any, AnyTensor};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, AnyTensor)>,
    pub meta: KeyValues,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_archive<T: Scalar>(entries: &[(String, &Tensor<T>)], meta: &KeyValues) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len()).map_err(|_| Error::config("too many checkpoint entries"))?;
    let mut buf = count.to_le_bytes().to_vec();
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("entry name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode(*t, &mut buf)?;
    }
    buf.extend_from_slice(meta.to_string().as_bytes());
    Ok(buf)
}

pub fn write_archive<T: Scalar>(path: &Path, entries: &[(String, &Tensor<T>)], meta: &KeyValues) -> Result<()> {
    let buf = encode_archive(entries, meta)?;
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated {what}"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_archive(mut bytes: &[u8]) -> std::result::Result<Archive, String> {
    let count = u32::from_le_bytes(take(&mut bytes, 4, "entry count")?.try_into().unwrap());
    let mut entries = Vec::new();
    for i in 0..count {
        let len = u16::from_le_bytes(take(&mut bytes, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut bytes, len, "entry name")?).map_err(|_| format!("entry {i}: name is not UTF-8"))?;
        let t = read_any(&mut bytes).map_err(|e| format!("entry `{name}`: {e}"))?;
        entries.push((name.to_string(), t));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| "metadata is not UTF-8".to_string())?;
    let meta = KeyValues::parse(text).map_err(|e| format!("metadata: {e}"))?;
    Ok(Archive { entries, meta })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes).map_err(|msg| Error::data(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let a = Tensor::<f64>::from_f64([2], &[1.5, -2.0]).unwrap();
        let mut meta = KeyValues::default();
        meta.set("step", 7);
        let bytes = encode_archive(&[("w".to_string(), &a)], &meta).unwrap();
        assert_eq!(&bytes[..4], &[1, 0, 0, 0]);
        assert_eq!(&bytes[4..7], &[1, 0, b'w']);
        assert_eq!(&bytes[7..11], b"AGT1");
        assert!(bytes.ends_with(b"step = 7\n"));
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(back.get("w"), Some(&AnyTensor::F64(a)));
        assert_eq!(back.meta.get_str("step"), Some("7"));
    }

    #[test]
    fn truncation_is_reported() {
        let a = Tensor::<f32>::zeros([3]);
        let bytes = encode_archive(&[("abc".to_string(), &a)], &KeyValues::default()).unwrap();
        for cut in [2, 5, 8, bytes.len() - 1] {
            assert!(decode_archive(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
