//! Deterministic JSON reports: sorted keys, floats rounded to 12 significant
//! digits, seeds and tolerances always included.

use serde_json::{Map, Number, Value};

/// Rounds to 12 significant digits so reports are byte-stable across runs.
pub fn sig12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let digits = 12 - 1 - x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits);
    (x * scale).round() / scale
}

/// Recursively rounds every number in a JSON value.
pub fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    return Value::Number(Number::from_f64(sig12(f)).unwrap());
                }
            }
            Value::Number(n)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(o) => {
            let mut out = Map::new();
            for (k, val) in o {
                out.insert(k, round_value(val));
            }
            Value::Object(out)
        }
        other => other,
    }
}

/// Serializes with sorted keys and rounded floats, newline-terminated.
pub fn render(value: Value) -> String {
    let mut s = serde_json::to_string_pretty(&round_value(value)).expect("serializable report");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rounding_is_idempotent_and_stable() {
        let v = json!({"a": 0.1234567890123456789, "b": [1.0, 2.5e-17], "c": "x"});
        let once = render(v.clone());
        let twice = render(v);
        assert_eq!(once, twice);
        assert!(once.contains("0.123456789012"));
    }

    #[test]
    fn report_round_trips_through_the_parser() {
        let v = json!({"gap": 1.0e-9, "lower_value": 0.7615941559557649});
        let s = render(v);
        let parsed: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(parsed["lower_value"].as_f64().unwrap(), 0.761594155956);
    }
}
