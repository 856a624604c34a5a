//! Plain-text run records: one log line per training step, and `key = value`
//! summary files.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::losses::{BranchTerms, Metrics};
use crate::optimizer::StepRecord;
use crate::render::Branch;

/// Ordered `key = value` lines. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_metrics(&mut self, prefix: &str, m: &Metrics) {
        for (k, v) in m.entries() {
            self.push(format!("{prefix}.{k}"), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Summary::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", i + 1)))?;
            out.push(k.trim(), v.trim());
        }
        Ok(out)
    }
}

fn terms(s: &mut String, name: &str, t: Option<&BranchTerms>) {
    if let Some(t) = t {
        write!(
            s,
            " {name}.l1={} {name}.ssim={} {name}.point={} {name}.pseudo_depth={} {name}.total={}",
            t.l1, t.ssim, t.point, t.pseudo_depth, t.total
        )
        .unwrap();
    }
}

/// One training-log record: step, stage, learning rate, branch terms, total.
pub fn log_line(r: &StepRecord) -> String {
    let mut s = format!("step={} stage={} lr={}", r.step, r.stage.number(), r.lr);
    for b in Branch::ALL {
        terms(&mut s, b.name(), r.report.get(b));
    }
    write!(s, " total={}", r.report.total).unwrap();
    s
}

/// Parses a log line back into its fields.
pub fn parse_log_line(line: &str) -> Result<Summary> {
    let mut out = Summary::default();
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad log field {field:?}")))?;
        out.push(k, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossReport, LossWeights};
    use crate::optimizer::Stage;

    #[test]
    fn summary_round_trips() {
        let mut s = Summary::default();
        s.push("config_hash", "abc");
        s.push("view0.joint.psnr", 31.25_f64);
        s.push("tiny", 1e-300_f64);
        let back = Summary::parse(&s.render()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get_f64("tiny"), Some(1e-300));
        assert!(Summary::parse("no separator").is_err());
    }

    #[test]
    fn log_line_carries_every_term() {
        let mut report = LossReport::default();
        let t = BranchTerms {
            l1: 0.1,
            ssim: 0.2,
            point: 0.3,
            pseudo_depth: 0.4,
            total: 1.0,
        };
        report.set(Branch::Fine, t);
        report.set(Branch::Joint, t);
        report.total = 1.4;
        let line = log_line(&StepRecord {
            step: 7,
            stage: Stage::Fine,
            lr: 1e-3,
            report,
        });
        assert!(!line.contains('\n'));
        let f = parse_log_line(&line).unwrap();
        assert_eq!(f.get("step"), Some("7"));
        assert_eq!(f.get("stage"), Some("2"));
        assert_eq!(f.get_f64("fine.pseudo_depth"), Some(0.4));
        assert_eq!(f.get("coarse.l1"), None);
        assert_eq!(f.get_f64("total"), Some(1.4));
        let _ = LossWeights::default();
    }
}
