//! Domain records produced by ingestion and consumed by the fitters: raw
//! attempt rows, derived step rows, and session spans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instant with millisecond precision, stored as epoch milliseconds.
///
/// Millisecond resolution is the contract for every derived quantity:
/// response times are integer-millisecond differences divided by 1000, so a
/// write/parse round trip reproduces them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimestampMs(pub i64);

impl TimestampMs {
    /// Parses an ISO-8601 timestamp, with or without fractional seconds,
    /// with `T` or space separator, naive or with an explicit offset.
    /// Naive timestamps are taken as UTC.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
            return Ok(TimestampMs(dt.timestamp_millis()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(TimestampMs(naive.and_utc().timestamp_millis()));
            }
        }
        Err(Error::data(format!("bad timestamp: {s:?}")))
    }

    /// Formats as `YYYY-MM-DDTHH:MM:SS.mmm` (UTC, no offset suffix).
    pub fn to_iso(self) -> String {
        let dt = chrono::DateTime::from_timestamp_millis(self.0)
            .expect("timestamp within chrono range");
        dt.format("%Y-%m-%dT%H:%M:%S%.3f").to_string()
    }

    /// Difference `self - earlier` in seconds.
    pub fn seconds_since(self, earlier: TimestampMs) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }
}

impl std::fmt::Display for TimestampMs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_iso())
    }
}

/// Outcome code of a single attempt. A hint request is not a correct attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Correct,
    Incorrect,
    Hint,
}

impl Outcome {
    /// Maps an outcome cell, case-insensitively. Unknown codes are data errors
    /// so the row can be rejected with a reason rather than silently dropped.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CORRECT" => Ok(Outcome::Correct),
            "INCORRECT" => Ok(Outcome::Incorrect),
            "HINT" => Ok(Outcome::Hint),
            other => Err(Error::data(format!("unknown outcome: {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "CORRECT",
            Outcome::Incorrect => "INCORRECT",
            Outcome::Hint => "HINT",
        }
    }
}

/// One transaction row from the tutor log, already validated field-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub student_id: String,
    pub session_id: Option<String>,
    pub timestamp: TimestampMs,
    pub problem_id: String,
    pub step_id: String,
    /// 1-based attempt counter within the step.
    pub attempt_index: u32,
    pub outcome: Outcome,
    /// Knowledge components tagged on the row; at least one.
    pub kc_ids: Vec<String>,
    /// 1-based input line, for reject reporting.
    pub line_no: u64,
}

/// Contiguous span of one student's practice, either taken from session ids
/// in the data or inferred from gaps between consecutive attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpan {
    pub student_id: String,
    pub session_id: String,
    pub start: TimestampMs,
    pub end: TimestampMs,
    /// Single-attempt span; `end` was set to `start + 1s`.
    pub degenerate: bool,
}

impl SessionSpan {
    pub fn duration_ms(&self) -> i64 {
        self.end.0 - self.start.0
    }
}

/// Within-session time slice, 1-based (`Q1..Qk`; k = 4 throughout the
/// analyses).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Slice(pub u8);

impl Slice {
    pub const Q1: Slice = Slice(1);
    pub const Q2: Slice = Slice(2);
    pub const Q3: Slice = Slice(3);
    pub const Q4: Slice = Slice(4);

    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix('Q')
            .ok_or_else(|| Error::data(format!("bad slice label: {s:?}")))?;
        let n: u8 = rest
            .parse()
            .map_err(|_| Error::data(format!("bad slice label: {s:?}")))?;
        if n == 0 {
            return Err(Error::data(format!("bad slice label: {s:?}")));
        }
        Ok(Slice(n))
    }
}

impl std::fmt::Display for Slice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

/// One problem-solving step for one student, replicated per tagged knowledge
/// component. The unit of analysis for both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub student_id: String,
    pub session_id: String,
    pub kc_id: String,
    pub problem_id: String,
    pub step_id: String,
    pub first_attempt_correct: bool,
    pub first_attempt_time: TimestampMs,
    /// Seconds since the previous step's first attempt in the same session.
    /// Absent on each session's first step and on non-positive gaps.
    pub rt_seconds: Option<f64>,
    /// `ln(rt_seconds)`; absent exactly when `rt_seconds` is.
    pub rt_log: Option<f64>,
    /// 1-based practice opportunity for (student, kc), across sessions.
    pub opportunity: u32,
    pub slice: Slice,
}

/// Canonical row order for step tables: all writers and comparisons use it so
/// equal tables are byte-equal when serialized.
pub fn sort_steps_canonical(steps: &mut [StepRecord]) {
    steps.sort_by(|a, b| {
        (
            &a.student_id,
            a.first_attempt_time,
            &a.problem_id,
            &a.step_id,
            &a.kc_id,
        )
            .cmp(&(
                &b.student_id,
                b.first_attempt_time,
                &b.problem_id,
                &b.step_id,
                &b.kc_id,
            ))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_parse_formats() {
        let a = TimestampMs::parse("2023-01-05T09:00:00.000").unwrap();
        let b = TimestampMs::parse("2023-01-05 09:00:00").unwrap();
        let c = TimestampMs::parse("2023-01-05T09:00:00+00:00").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.to_iso(), "2023-01-05T09:00:00.000");
    }

    #[test]
    fn timestamp_roundtrip_millis() {
        let t = TimestampMs::parse("2023-01-05T09:00:00.123").unwrap();
        assert_eq!(TimestampMs::parse(&t.to_iso()).unwrap(), t);
        assert_eq!(t.0 % 1000, 123);
    }

    #[test]
    fn timestamp_rejects_garbage() {
        assert!(TimestampMs::parse("yesterday").is_err());
    }

    #[test]
    fn outcome_mapping() {
        assert_eq!(Outcome::parse("correct").unwrap(), Outcome::Correct);
        assert_eq!(Outcome::parse(" HINT ").unwrap(), Outcome::Hint);
        assert!(Outcome::parse("OK").is_err());
    }

    #[test]
    fn slice_labels() {
        assert_eq!(Slice::Q2.to_string(), "Q2");
        assert_eq!(Slice::parse("Q4").unwrap(), Slice::Q4);
        assert!(Slice::parse("4").is_err());
        assert!(Slice::parse("Q0").is_err());
    }
}
