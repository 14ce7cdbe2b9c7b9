//! Salvaging a JSON payload from model output.

use serde_json::Value;

use crate::error::{Error, Result};

/// Returns the first `{...}` or `[...]` value in `raw` that parses, scanning
/// left to right. Code-fence markers are ignored; text is only rewritten to
/// drop them when the untouched text yields nothing, so fences quoted inside
/// JSON strings survive.
pub fn extract_json(raw: &str) -> Result<Value> {
    first_value(raw)
        .or_else(|| first_value(&strip_fences(raw)))
        .ok_or_else(|| Error::JsonProtocol {
            raw: raw.to_string(),
        })
}

fn first_value(text: &str) -> Option<Value> {
    text.char_indices()
        .filter(|(_, ch)| *ch == '{' || *ch == '[')
        .find_map(|(start, _)| {
            serde_json::Deserializer::from_str(&text[start..])
                .into_iter::<Value>()
                .next()
                .and_then(|r| r.ok())
        })
}

fn strip_fences(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for line in raw.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            // "```json" opener or bare "```" closer; keep anything after a
            // closing fence on the same line
            let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
            out.push_str(rest);
        } else if let Some(idx) = line.find("```") {
            out.push_str(&line[..idx]);
            let rest = line[idx + 3..].trim_start_matches(|c: char| c.is_ascii_alphanumeric());
            out.push_str(rest);
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

/// Reads `key` as an integer, accepting integral floats and numeric strings
/// because models emit all three.
pub fn int_field(value: &Value, key: &str) -> Option<i64> {
    match value.get(key)? {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        Value::Bool(b) => Some(i64::from(*b)),
        _ => None,
    }
}

pub fn str_field<'a>(value: &'a Value, key: &str) -> Option<&'a str> {
    value.get(key)?.as_str()
}
