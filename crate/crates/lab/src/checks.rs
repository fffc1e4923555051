//! Evaluation of named checks against run metrics.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::CheckSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// `None` when a metric is missing or the ratio is undefined.
    pub value: Option<f64>,
    pub rule: String,
    pub passed: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match self.value {
            Some(v) => write!(f, "{verdict} {}: {v:.6e} {}", self.name, self.rule),
            None => write!(f, "{verdict} {}: missing ({})", self.name, self.rule),
        }
    }
}

fn num(x: f64) -> String {
    if x != 0.0 && !(1e-3..1e4).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn rule_text(c: &CheckSpec) -> String {
    let lhs = match &c.denominator {
        Some(d) => format!("{}/{}", c.metric, d),
        None => c.metric.clone(),
    };
    match (c.lt, c.gt, c.target, c.tol) {
        (Some(b), ..) => format!("{lhs} < {}", num(b)),
        (_, Some(b), ..) => format!("{lhs} > {}", num(b)),
        (_, _, Some(t), Some(tol)) => format!("|{lhs} - {}| <= {}", num(t), num(tol)),
        _ => format!("{lhs}: no rule"),
    }
}

/// A missing metric, a zero denominator or a non-finite value fails.
pub fn evaluate(checks: &[CheckSpec], metrics: &BTreeMap<String, f64>) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let value = metrics.get(&c.metric).copied().and_then(|x| match &c.denominator {
                Some(d) => metrics.get(d).copied().filter(|&y| y != 0.0).map(|y| x / y),
                None => Some(x),
            });
            let value = value.filter(|v| v.is_finite());
            let passed = value.is_some_and(|v| match (c.lt, c.gt, c.target, c.tol) {
                (Some(b), ..) => v < b,
                (_, Some(b), ..) => v > b,
                (_, _, Some(t), Some(tol)) => (v - t).abs() <= tol,
                _ => false,
            });
            CheckOutcome { name: c.name.clone(), value, rule: rule_text(c), passed }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics() -> BTreeMap<String, f64> {
        [("a", 0.5), ("b", 2.0), ("zero", 0.0), ("nan", f64::NAN)].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn rules() {
        let m = metrics();
        let out = evaluate(
            &[
                CheckSpec::lt("lt", "a", 1.0),
                CheckSpec::gt("gt", "a", 1.0),
                CheckSpec::near("near", "b", 2.1, 0.2),
                CheckSpec::gt("ratio", "b", 3.9).over("a"),
            ],
            &m,
        );
        let passed: Vec<bool> = out.iter().map(|o| o.passed).collect();
        assert_eq!(passed, [true, false, true, true]);
        assert_eq!(out[3].value, Some(4.0));
    }

    #[test]
    fn missing_or_undefined_fails() {
        let m = metrics();
        let out = evaluate(
            &[CheckSpec::lt("m", "absent", 1.0), CheckSpec::lt("z", "a", 1.0).over("zero"), CheckSpec::lt("n", "nan", 1.0)],
            &m,
        );
        assert!(out.iter().all(|o| !o.passed && o.value.is_none()));
        assert!(out[0].to_string().starts_with("FAIL m: missing"));
    }
}
