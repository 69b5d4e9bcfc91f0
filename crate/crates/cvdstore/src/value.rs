use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute data types, ordered by generality: integer < decimal < text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "integer")]
    Integer,
    #[serde(rename = "decimal")]
    Decimal,
    #[serde(rename = "text")]
    Text,
}

impl DataType {
    pub fn parse(s: &str) -> Result<DataType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "int" | "integer" => Ok(DataType::Integer),
            "dec" | "decimal" | "float" | "real" => Ok(DataType::Decimal),
            "str" | "text" | "string" => Ok(DataType::Text),
            other => Err(Error::Schema(format!("unknown data type '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Integer => "integer",
            DataType::Decimal => "decimal",
            DataType::Text => "text",
        }
    }

    /// Most general of the two types. Types only generalize, never narrow.
    pub fn generalize(self, other: DataType) -> DataType {
        self.max(other)
    }

    /// True when a value of type `from` may be committed into an attribute of type `self`.
    pub fn accepts(self, from: DataType) -> bool {
        from <= self
    }
}

/// One attribute entry in the single-pool attribute table. Any property
/// change yields a new entry rather than mutating an existing one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub attr_id: u32,
    pub name: String,
    pub dtype: DataType,
}

/// A typed cell value. Absent attributes are `Null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Int(i64),
    Dec(f64),
    Text(String),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn dtype(&self) -> Option<DataType> {
        match self {
            Value::Null => None,
            Value::Int(_) => Some(DataType::Integer),
            Value::Dec(_) => Some(DataType::Decimal),
            Value::Text(_) => Some(DataType::Text),
        }
    }

    /// Parse a textual cell under the given type. Empty text is null.
    pub fn parse(s: &str, dtype: DataType, line: usize) -> Result<Value> {
        let t = s.trim();
        if t.is_empty() {
            return Ok(Value::Null);
        }
        match dtype {
            DataType::Integer => t.parse::<i64>().map(Value::Int).map_err(|_| Error::Parse {
                line,
                msg: format!("'{t}' is not an integer"),
            }),
            DataType::Decimal => t.parse::<f64>().map(Value::Dec).map_err(|_| Error::Parse {
                line,
                msg: format!("'{t}' is not a decimal"),
            }),
            DataType::Text => Ok(Value::Text(t.to_string())),
        }
    }

    /// Canonical string rendering used for value-tuple hashing and primary-key
    /// comparison. An integral decimal renders the same as the integer so a
    /// widened column still matches its unmodified rows.
    pub fn canonical(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Int(i) => i.to_string(),
            Value::Dec(d) => {
                if d.fract() == 0.0 && d.abs() < 9.0e15 {
                    format!("{}", *d as i64)
                } else {
                    format!("{d}")
                }
            }
            Value::Text(s) => s.clone(),
        }
    }

    /// Rendering for CSV export.
    pub fn display(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Int(i) => i.to_string(),
            Value::Dec(d) => format!("{d}"),
            Value::Text(s) => s.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalize_is_monotone() {
        assert_eq!(DataType::Integer.generalize(DataType::Decimal), DataType::Decimal);
        assert_eq!(DataType::Decimal.generalize(DataType::Text), DataType::Text);
        assert_eq!(DataType::Text.generalize(DataType::Integer), DataType::Text);
        assert!(DataType::Text.accepts(DataType::Integer));
        assert!(!DataType::Integer.accepts(DataType::Text));
    }

    #[test]
    fn canonical_matches_widened_int() {
        assert_eq!(Value::Int(5).canonical(), Value::Dec(5.0).canonical());
        assert_ne!(Value::Dec(5.25).canonical(), Value::Int(5).canonical());
        assert_eq!(Value::Null.canonical(), "");
    }
}
