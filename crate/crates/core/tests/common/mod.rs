#![allow(dead_code)]

use prunecoder::checkpoint::{ALIGN, MAGIC};
use serde_json::Value;

/// Splits a file into (header JSON, payload).
pub fn split(bytes: &[u8]) -> (Value, Vec<u8>) {
    let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[14..14 + len]).unwrap();
    (header, bytes[14 + len..].to_vec())
}

/// Reassembles a file around an edited header, keeping the payload aligned.
pub fn join(header: &Value, payload: &[u8]) -> Vec<u8> {
    let mut json = serde_json::to_string(header).unwrap();
    while (14 + json.len()) % ALIGN != 0 {
        json.push(' ');
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Rewrites the header of a checkpoint file, keeping its payload.
pub fn edit_header(bytes: &[u8], f: impl FnOnce(&mut Value)) -> Vec<u8> {
    let (mut h, p) = split(bytes);
    f(&mut h);
    join(&h, &p)
}
