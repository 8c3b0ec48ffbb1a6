//! Canonical text rendering shared by every report writer.
//!
//! Objects are emitted with sorted keys and no insignificant whitespace, and
//! every float is rounded to 9 significant digits. Non-finite floats have no
//! JSON representation and are written as `null`.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Significant digits used for every serialized float.
pub const FLOAT_DIGITS: usize = 9;

/// Round `x` to [`FLOAT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", FLOAT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

/// Format a float with 9 significant digits using the shortest text that
/// parses back to the rounded value.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let r = round_sig(x);
    // -0.0 would otherwise print as "-0.0" and break byte-stability of
    // reports that differ only in the sign of a zero.
    if r == 0.0 {
        return "0.0".to_string();
    }
    format!("{r:?}")
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if x.is_finite() {
                    out.push_str(&format_float(x));
                } else {
                    out.push_str("null");
                }
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serialization"));
                out.push(':');
                write_value(out, &map[*k]);
            }
            out.push('}');
        }
    }
}

/// Render a JSON value canonically.
pub fn to_canonical_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v);
    out
}

/// Serialize any value to canonical JSON.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(to_canonical_string(&serde_json::to_value(value)?))
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_keep_nine_digits() {
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0), "1.0");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(123456789.123), "123456789.0");
        assert_eq!(format_float(-0.0), "0.0");
        assert_eq!(format_float(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn rounding_is_idempotent() {
        for x in [1.0 / 7.0, 2.0f64.sqrt(), 1e-12 / 3.0, 6.02e23 / 7.0] {
            let once = round_sig(x);
            assert_eq!(round_sig(once), once);
            let text = format_float(x);
            assert_eq!(format_float(text.parse().unwrap()), text);
        }
    }

    #[test]
    fn objects_have_sorted_keys() {
        let v = json!({"b": 1, "a": [0.5, null, "x"], "c": {"z": true, "y": 2.0}});
        assert_eq!(
            to_canonical_string(&v),
            r#"{"a":[0.5,null,"x"],"b":1,"c":{"y":2.0,"z":true}}"#
        );
    }
}
