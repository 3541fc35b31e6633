//! Byte-deterministic JSON: sorted object keys, compact separators, and
//! floats rounded to 9 significant digits.

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn write_value(v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                out.push_str(&n.to_string());
            } else {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if !x.is_finite() {
                    return Err(Error::Format("non-finite float in JSON".into()));
                }
                let r = round_sig9(x);
                // one spelling for zero
                let r = if r == 0.0 { 0.0 } else { r };
                out.push_str(&format!("{r:?}"));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(x, out)?;
            }
            out.push(']');
        }
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_value(&m[*k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

pub fn canonical_string(v: &Value) -> Result<String> {
    let mut s = String::new();
    write_value(v, &mut s)?;
    Ok(s)
}

pub fn to_canonical<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    canonical_string(&v)
}

/// Canonical, human-friendly variant: same bytes for the same value, one
/// nesting level per line.
pub fn to_canonical_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let compact = canonical_string(&v)?;
    let reparsed: Value = serde_json::from_str(&compact).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&reparsed).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorted_and_rounded() {
        let v = json!({"b": 1.0 / 3.0, "a": [1, -0.0, 2.5e-12], "c": {"z": true, "y": null}});
        let s = canonical_string(&v).unwrap();
        assert_eq!(s, r#"{"a":[1,0.0,2.5e-12],"b":0.333333333,"c":{"y":null,"z":true}}"#);
        let again: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(canonical_string(&again).unwrap(), s);
    }

    #[test]
    fn rounding_is_idempotent() {
        for x in [0.1, 123456.789012345, -9.87654321987e-5, 1e300, 7.0] {
            let r = round_sig9(x);
            assert_eq!(round_sig9(r), r);
            assert!(((r - x) / x).abs() < 1e-8);
        }
    }
}
