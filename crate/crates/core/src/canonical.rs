//! Canonical JSON: object keys sorted bytewise, no insignificant whitespace,
//! and every `/` escaped as `\/` (the escaping style of the legacy wire
//! format). Two values are equal iff their canonical encodings are equal.

use serde::Serialize;
use serde_json::Value;

/// Escapes forward slashes. `/` can only occur inside JSON strings, so a
/// byte-level rewrite of a serialized document is safe.
pub fn escape_slashes(json: &[u8]) -> Vec<u8> {
    let extra = json.iter().filter(|&&b| b == b'/').count();
    let mut out = Vec::with_capacity(json.len() + extra);
    for &b in json {
        if b == b'/' {
            out.push(b'\\');
        }
        out.push(b);
    }
    out
}

pub fn to_canonical_value(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_value(value, &mut out);
    out
}

pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    Ok(to_canonical_value(&serde_json::to_value(value)?))
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    // serde_json's string escaping cannot fail for &str.
    let quoted = serde_json::to_vec(s).expect("string serialization");
    out.extend_from_slice(&escape_slashes(&quoted));
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        Value::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (key, item)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_value(item, out);
            }
            out.push(b'}');
        }
    }
}
