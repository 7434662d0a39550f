//! JSON canonicalization in the style of RFC 8785 (JCS).
//!
//! Object members are sorted by their UTF-16 code units, no insignificant
//! whitespace is emitted, and floating point numbers use the ECMAScript
//! shortest round-trip form. Integers that fit in `i64`/`u64` are written
//! verbatim. The resulting bytes are what fragment digests and
//! fragment-id collision checks are computed over.

use serde::Serialize;
use serde_json::{Number, Value};

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("non-finite number cannot be canonicalized")]
    NonFinite,
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Canonical bytes of any serializable value.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let v = serde_json::to_value(value)?;
    let mut out = Vec::with_capacity(256);
    write_value(&v, &mut out)?;
    Ok(out)
}

/// Canonical bytes of an already-parsed JSON value.
pub fn value_to_canonical_bytes(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = Vec::with_capacity(256);
    write_value(value, &mut out)?;
    Ok(out)
}

fn write_value(v: &Value, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    match v {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => write_number(n, out)?,
        Value::String(s) => write_string(s, out)?,
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out)?;
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut members: Vec<(&String, &Value)> = map.iter().collect();
            members.sort_by(|(a, _), (b, _)| a.encode_utf16().cmp(b.encode_utf16()));
            out.push(b'{');
            for (i, (k, v)) in members.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(k, out)?;
                out.push(b':');
                write_value(v, out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    // serde_json's escaping matches JCS: the two-character escapes for
    // \b \f \n \r \t \" \\ and lowercase \u00XX for other control chars.
    serde_json::to_writer(&mut *out, s)?;
    Ok(())
}

fn write_number(n: &Number, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    if let Some(u) = n.as_u64() {
        out.extend_from_slice(u.to_string().as_bytes());
    } else if let Some(i) = n.as_i64() {
        out.extend_from_slice(i.to_string().as_bytes());
    } else {
        let f = n.as_f64().ok_or(CanonicalError::NonFinite)?;
        out.extend_from_slice(format_es_number(f)?.as_bytes());
    }
    Ok(())
}

/// ECMAScript `Number::toString` for a finite double.
pub fn format_es_number(f: f64) -> Result<String, CanonicalError> {
    if !f.is_finite() {
        return Err(CanonicalError::NonFinite);
    }
    if f == 0.0 {
        return Ok("0".to_owned());
    }
    // `{:e}` yields the shortest round-trip digits, e.g. "-1.25e-7".
    let sci = format!("{:e}", f.abs());
    let (mantissa, exp) = sci.split_once('e').expect("LowerExp always has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let k = digits.len() as i32;
    let n = exp + 1;

    let mut s = String::with_capacity(32);
    if f < 0.0 {
        s.push('-');
    }
    if k <= n && n <= 21 {
        s.push_str(&digits);
        s.extend(std::iter::repeat_n('0', (n - k) as usize));
    } else if 0 < n && n <= 21 {
        s.push_str(&digits[..n as usize]);
        s.push('.');
        s.push_str(&digits[n as usize..]);
    } else if -6 < n && n <= 0 {
        s.push_str("0.");
        s.extend(std::iter::repeat_n('0', (-n) as usize));
        s.push_str(&digits);
    } else {
        s.push_str(&digits[..1]);
        if k > 1 {
            s.push('.');
            s.push_str(&digits[1..]);
        }
        s.push('e');
        s.push(if n >= 1 { '+' } else { '-' });
        s.push_str(&(n - 1).abs().to_string());
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn canon(v: Value) -> String {
        String::from_utf8(value_to_canonical_bytes(&v).unwrap()).unwrap()
    }

    #[test]
    fn sorts_members_recursively() {
        assert_eq!(
            canon(json!({"z": {"b": 1, "a": [true, null]}, "a": "x"})),
            r#"{"a":"x","z":{"a":[true,null],"b":1}}"#
        );
    }

    #[test]
    fn sorts_by_utf16_code_units() {
        // U+E000 sorts after U+1F600 in UTF-8 byte order but before it in UTF-16.
        assert_eq!(
            canon(json!({"\u{1F600}": 1, "\u{E000}": 2})),
            "{\"\u{1F600}\":1,\"\u{E000}\":2}"
        );
    }

    #[test]
    fn es_number_forms() {
        // Reference outputs of ECMAScript Number.prototype.toString.
        let cases = [
            (1.0, "1"),
            (-0.0, "0"),
            (0.5, "0.5"),
            (0.1, "0.1"),
            (123.456, "123.456"),
            (1e21, "1e+21"),
            (1e20, "100000000000000000000"),
            (1e-6, "0.000001"),
            (1e-7, "1e-7"),
            (-1.25e-7, "-1.25e-7"),
            (4.5e22, "4.5e+22"),
            (0.274653, "0.274653"),
            (5e-324, "5e-324"),
            (1.7976931348623157e308, "1.7976931348623157e+308"),
        ];
        for (f, want) in cases {
            assert_eq!(format_es_number(f).unwrap(), want, "formatting {f:e}");
        }
    }

    #[test]
    fn float_with_integral_value_matches_integer() {
        assert_eq!(canon(json!({"a": 2.0})), canon(json!({"a": 2})));
    }

    #[test]
    fn escapes_control_characters() {
        assert_eq!(canon(json!("a\u{1}\n\"\\")), r#""a\u0001\n\"\\""#);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(format_es_number(f64::NAN).is_err());
        assert!(format_es_number(f64::INFINITY).is_err());
    }
}
