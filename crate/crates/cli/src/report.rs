//! Byte-stable report emission: sorted keys and floats rounded to nine
//! significant digits.

use std::path::Path;

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::CliResult;
use crate::persist::write_atomic;

pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds to nine significant digits; non-finite values have no rounding.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

/// Float text used in CSV output. Non-finite values print as `nan`, `inf`, `-inf`.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        let r = round_sig(x);
        if r == 0.0 {
            "0".to_string()
        } else if r.abs() < 1e-4 || r.abs() >= 1e15 {
            format!("{r:e}")
        } else {
            format!("{r}")
        }
    }
}

fn normalize(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            Number::from_f64(round_sig(x)).map_or(Value::Null, Value::Number)
        }
        Value::Array(xs) => Value::Array(xs.into_iter().map(normalize).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, normalize(v))).collect()),
        other => other,
    }
}

/// Canonical value: every float rounded, objects in sorted key order.
pub fn to_report_value<T: Serialize>(value: &T) -> Value {
    normalize(serde_json::to_value(value).expect("report values serialize"))
}

pub fn report_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(&to_report_value(value)).expect("values serialize");
    s.push('\n');
    s
}

pub fn write_report<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, report_text(value).as_bytes())
}

/// Comma-separated table with a header row.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            text: format!("{}\n", columns.join(",")),
            width: columns.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.width, "CSV row width");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, self.text.as_bytes())
    }
}
