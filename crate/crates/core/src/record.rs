//! Line-delimited `kind key=value ...` records.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a record back yields bit-identical values.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Spec(format!("record `{}` lacks field `{key}`", self.kind)))
    }

    pub fn parse_field<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Spec(format!("field `{key}` has unparsable value `{raw}`")))
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.kind)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for Record {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts
            .next()
            .ok_or_else(|| Error::Spec("empty record line".into()))?;
        if kind.contains('=') {
            return Err(Error::Spec(format!("record starts with a field: `{kind}`")));
        }
        let mut rec = Record::new(kind);
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("malformed field `{p}`")))?;
            rec.fields.push((k.to_string(), v.to_string()));
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Spec(format!("unknown split `{s}`"))),
        }
    }
}

/// One evaluation of a model on one split after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1_error_percent: f64,
    /// `None` when no probes were configured.
    pub empirical_ee: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub const KIND: &'static str = "metrics";

    pub fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .field("epoch", self.epoch)
            .field("split", self.split.as_str())
            .field("loss", self.loss)
            .field("top1_error", self.top1_error_percent)
            .field(
                "ee",
                self.empirical_ee.map_or_else(|| "na".to_string(), |v| v.to_string()),
            )
            .field("wall_seconds", self.wall_seconds)
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        if r.kind != Self::KIND {
            return Err(Error::Spec(format!("expected a metrics record, got `{}`", r.kind)));
        }
        let ee = match r.require("ee")? {
            "na" => None,
            _ => Some(r.parse_field("ee")?),
        };
        Ok(Self {
            epoch: r.parse_field("epoch")?,
            split: r.parse_field("split")?,
            loss: r.parse_field("loss")?,
            top1_error_percent: r.parse_field("top1_error")?,
            empirical_ee: ee,
            wall_seconds: r.parse_field("wall_seconds")?,
        })
    }

    /// Equality of everything but the wall clock, compared bitwise.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.split == other.split
            && self.loss.to_bits() == other.loss.to_bits()
            && self.top1_error_percent.to_bits() == other.top1_error_percent.to_bits()
            && self.empirical_ee.map(f64::to_bits) == other.empirical_ee.map(f64::to_bits)
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_record().fmt(f)
    }
}

impl FromStr for MetricsRecord {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_record(&s.parse()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let r = Record::new("probe").field("g", 2).field("error", 0.1f64 + 0.2);
        let back: Record = r.to_string().parse().unwrap();
        assert_eq!(back, r);
        assert_eq!(back.parse_field::<f64>("error").unwrap(), 0.1 + 0.2);
        assert!("a b".parse::<Record>().is_err());
        assert!("".parse::<Record>().is_err());
    }

    #[test]
    fn metrics_round_trip_is_bit_exact() {
        let m = MetricsRecord {
            epoch: 3,
            split: Split::Test,
            loss: std::f64::consts::LN_10,
            top1_error_percent: 12.5,
            empirical_ee: Some(1.0 / 3.0),
            wall_seconds: 0.25,
        };
        let back: MetricsRecord = m.to_string().parse().unwrap();
        assert_eq!(back, m);
        let none = MetricsRecord { empirical_ee: None, ..m };
        assert_eq!(none.to_string().parse::<MetricsRecord>().unwrap(), none);
        let later = MetricsRecord { wall_seconds: 9.0, ..m };
        assert!(later.same_outcome(&m));
    }
}
