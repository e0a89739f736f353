use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub tick: Option<u64>,
    pub epoch: Option<u64>,
    pub witness: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Status {
    Pass { evaluated: u64 },
    Fail(Failure),
    Skipped { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub status: Status,
}

impl InvariantResult {
    pub fn passed(&self) -> bool {
        matches!(self.status, Status::Pass { .. })
    }

    pub fn failed(&self) -> bool {
        matches!(self.status, Status::Fail(_))
    }
}

impl fmt::Display for InvariantResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Pass { evaluated } => write!(f, "PASS {} ({evaluated} checks)", self.name),
            Status::Skipped { reason } => write!(f, "SKIP {}: {reason}", self.name),
            Status::Fail(fl) => {
                write!(f, "FAIL {}", self.name)?;
                if let Some(t) = fl.tick {
                    write!(f, " tick={t}")?;
                }
                if let Some(e) = fl.epoch {
                    write!(f, " epoch={e}")?;
                }
                write!(f, ": {}", fl.witness)
            }
        }
    }
}

/// Ordered list of invariant outcomes plus free-form statistics that are
/// reported but never asserted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub results: Vec<InvariantResult>,
    pub notes: Vec<String>,
}

impl InvariantReport {
    /// True iff nothing failed. Skipped checks do not fail a report.
    pub fn all_passed(&self) -> bool {
        !self.results.iter().any(InvariantResult::failed)
    }

    pub fn first_failure(&self) -> Option<&InvariantResult> {
        self.results.iter().find(|r| r.failed())
    }

    pub fn get(&self, name: &str) -> Option<&InvariantResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn extend(&mut self, other: InvariantReport) {
        self.results.extend(other.results);
        self.notes.extend(other.notes);
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        for n in &self.notes {
            writeln!(f, "NOTE {n}")?;
        }
        Ok(())
    }
}

/// Accumulates one invariant: counts evaluations, keeps the first failure.
#[derive(Debug)]
pub(crate) struct Check {
    name: &'static str,
    evaluated: u64,
    failure: Option<Failure>,
    skipped: Option<String>,
}

impl Check {
    pub fn new(name: &'static str) -> Self {
        Check {
            name,
            evaluated: 0,
            failure: None,
            skipped: None,
        }
    }

    /// Evaluates one instance; `witness` is only built on failure.
    pub fn assert(
        &mut self,
        ok: bool,
        tick: Option<u64>,
        epoch: Option<u64>,
        witness: impl FnOnce() -> String,
    ) -> bool {
        self.evaluated += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(Failure {
                tick,
                epoch,
                witness: witness(),
            });
        }
        ok
    }

    pub fn skip(&mut self, reason: impl Into<String>) {
        self.skipped = Some(reason.into());
    }

    pub fn finish(self, empty_reason: &str) -> InvariantResult {
        let status = if let Some(f) = self.failure {
            Status::Fail(f)
        } else if let Some(reason) = self.skipped {
            Status::Skipped { reason }
        } else if self.evaluated == 0 {
            Status::Skipped {
                reason: empty_reason.into(),
            }
        } else {
            Status::Pass {
                evaluated: self.evaluated,
            }
        };
        InvariantResult {
            name: self.name.into(),
            status,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unevaluated_checks_are_skipped_not_passed() {
        let c = Check::new("x");
        assert!(matches!(
            c.finish("nothing to check").status,
            Status::Skipped { .. }
        ));
    }

    #[test]
    fn first_failure_is_kept() {
        let mut c = Check::new("x");
        c.assert(true, Some(1), None, || unreachable!());
        c.assert(false, Some(2), None, || "a".into());
        c.assert(false, Some(3), None, || "b".into());
        let r = c.finish("");
        assert_eq!(r.to_string(), "FAIL x tick=2: a");
    }
}
