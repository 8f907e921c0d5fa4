//! `--assert METRIC OP VALUE` checks evaluated against a run summary.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Op {
    Le,
    Lt,
    Ge,
    Gt,
    Eq,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Le => "<=",
            Op::Lt => "<",
            Op::Ge => ">=",
            Op::Gt => ">",
            Op::Eq => "==",
        }
    }

    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Op::Le => lhs <= rhs,
            Op::Lt => lhs < rhs,
            Op::Ge => lhs >= rhs,
            Op::Gt => lhs > rhs,
            Op::Eq => lhs == rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub metric: String,
    pub op: Op,
    pub value: f64,
}

impl Assertion {
    pub fn parse(text: &str) -> CliResult<Self> {
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        // Two-character operators first so `<=` is not read as `<`.
        for (sym, op) in [("<=", Op::Le), (">=", Op::Ge), ("==", Op::Eq), ("<", Op::Lt), (">", Op::Gt)] {
            if let Some((metric, value)) = compact.split_once(sym) {
                let value: f64 = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("assertion {text:?}: {value:?} is not a number")))?;
                if metric.is_empty() {
                    return Err(CliError::Usage(format!("assertion {text:?} has no metric")));
                }
                return Ok(Self {
                    metric: metric.to_string(),
                    op,
                    value,
                });
            }
        }
        Err(CliError::Usage(format!(
            "assertion {text:?} needs one of <=, <, >=, >, =="
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub assertion: String,
    /// Missing when the run produced no value for the metric.
    pub observed: Option<f64>,
    pub passed: bool,
}

/// Unknown metrics are usage errors; a metric the run could not compute
/// (e.g. a slope from a curve with every cell failed) fails the assertion.
pub fn evaluate(
    assertions: &[Assertion],
    metrics: &BTreeMap<String, Option<f64>>,
) -> CliResult<Vec<Outcome>> {
    assertions
        .iter()
        .map(|a| {
            let observed = *metrics.get(&a.metric).ok_or_else(|| {
                let known: Vec<&str> = metrics.keys().map(String::as_str).collect();
                CliError::Usage(format!("unknown metric {:?}; available: {}", a.metric, known.join(", ")))
            })?;
            Ok(Outcome {
                assertion: format!("{}{}{}", a.metric, a.op.symbol(), a.value),
                observed,
                passed: observed.is_some_and(|v| a.op.holds(v, a.value)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_operators() {
        let a = Assertion::parse("slope<=-0.25").unwrap();
        assert_eq!((a.metric.as_str(), a.op, a.value), ("slope", Op::Le, -0.25));
        assert_eq!(Assertion::parse("gap > 0").unwrap().op, Op::Gt);
        assert!(Assertion::parse("slope").is_err());
        assert!(Assertion::parse("slope<=x").is_err());
        assert!(Assertion::parse("<=1").is_err());
    }

    #[test]
    fn evaluates_against_metrics() {
        let metrics = BTreeMap::from([("slope".to_string(), Some(-0.3)), ("gap".to_string(), None)]);
        let out = evaluate(&[Assertion::parse("slope<=-0.25").unwrap()], &metrics).unwrap();
        assert!(out[0].passed);
        let out = evaluate(&[Assertion::parse("gap>0").unwrap()], &metrics).unwrap();
        assert!(!out[0].passed);
        assert!(evaluate(&[Assertion::parse("nope<1").unwrap()], &metrics).is_err());
    }
}
