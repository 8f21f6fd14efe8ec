//! Transaction-log ingestion: parses delimited tutor logs into attempt
//! records, derives sessions and per-step observations, and fills in the
//! quantities the models consume (first-attempt correctness, log response
//! times, opportunity counts, session time slices).
//!
//! The pipeline never drops a row silently: every input row is either
//! consumed by a derived step, rejected with a reason, or part of a rejected
//! step group, and the quality report checks that those counts conserve.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    sort_steps_canonical, AttemptRecord, Outcome, SessionSpan, Slice, StepRecord, TimestampMs,
};

/// Maps logical columns to header names in the source file. Matching is
/// case-insensitive on trimmed header cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub student: String,
    /// Optional in the data; rows without it fall back to gap inference.
    pub session: String,
    pub time: String,
    pub problem: String,
    pub step: String,
    pub attempt: String,
    pub outcome: String,
    pub kc: String,
    /// Separator between knowledge components within the kc cell.
    pub kc_delimiter: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            student: "student_id".into(),
            session: "session_id".into(),
            time: "time".into(),
            problem: "problem_id".into(),
            step: "step_id".into(),
            attempt: "attempt".into(),
            outcome: "outcome".into(),
            kc: "kc".into(),
            kc_delimiter: "~~".into(),
        }
    }
}

/// How a step tagged with several knowledge components enters the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiKcMode {
    /// One observation per tagged component, sharing correctness and timing.
    Replicate,
    /// Keep only the first-listed component.
    First,
}

/// Ingestion options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub schema: ColumnSchema,
    /// Inactivity gap that starts a new session when the data carries no
    /// session ids.
    pub session_gap_minutes: f64,
    pub multi_kc: MultiKcMode,
    /// Upper-tail winsorization quantile for response times; off by default.
    pub winsorize_quantile: Option<f64>,
    /// Number of within-session time slices.
    pub slice_count: u8,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            schema: ColumnSchema::default(),
            session_gap_minutes: 30.0,
            multi_kc: MultiKcMode::Replicate,
            winsorize_quantile: None,
            slice_count: 4,
        }
    }
}

/// One rejected input row or step group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectEntry {
    /// 1-based line of the offending row (first row of a rejected group).
    pub line_no: u64,
    pub reason: String,
}

/// Counters the pipeline accumulates; `conserved` ties them back to the
/// input row count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QualityReport {
    /// Data rows seen (header and comment lines excluded).
    pub input_rows: u64,
    pub parsed_rows: u64,
    /// Reject counts keyed by reason.
    pub parse_rejects: BTreeMap<String, u64>,
    pub parse_reject_rows: Vec<RejectEntry>,
    pub sessions: u64,
    /// Single-attempt sessions whose end was set to start + 1 s.
    pub degenerate_sessions: u64,
    /// Students mixing tagged and untagged session ids (fell back to gaps).
    pub mixed_session_ids: u64,
    /// Students whose tagged session spans overlapped (fell back to gaps).
    pub overlapping_sessions: u64,
    pub step_groups: u64,
    pub groups_missing_first_attempt: u64,
    pub attempts_in_rejected_groups: u64,
    pub group_reject_rows: Vec<RejectEntry>,
    /// Steps where several rows claimed attempt 1 (earliest kept).
    pub duplicate_first_attempts: u64,
    /// Step records emitted after knowledge-component replication.
    pub steps_emitted: u64,
    pub rt_present: u64,
    pub rt_absent_session_start: u64,
    pub rt_absent_nonpositive: u64,
    pub rt_winsorized: u64,
    /// Sessions with equal start and end at slicing time (all steps Q1).
    pub zero_length_spans: u64,
    /// `input_rows == parsed_rows + parse rejects`.
    pub conserved: bool,
}

impl QualityReport {
    fn finish(&mut self) {
        let rejected: u64 = self.parse_rejects.values().sum();
        self.conserved = self.input_rows == self.parsed_rows + rejected;
    }
}

/// Parsed attempts plus the rows that did not survive parsing.
#[derive(Debug)]
pub struct ParseOutput {
    pub attempts: Vec<AttemptRecord>,
    pub rejects: Vec<RejectEntry>,
    pub input_rows: u64,
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Parses a delimited transaction log. The header row is required; the
/// delimiter (tab or comma) is sniffed from it. Lines starting with `#` are
/// comments. Rows that fail field validation are collected as rejects with
/// reasons, never silently dropped; a missing required column is fatal.
pub fn parse_transactions<R: Read>(source: R, schema: &ColumnSchema) -> Result<ParseOutput> {
    let mut reader = BufReader::new(source);
    let mut buf = String::new();
    reader.read_to_string(&mut buf)?;

    let header_line = buf
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::data("input has no header row"))?;
    let delim = sniff_delimiter(header_line);

    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(buf.as_bytes());

    let headers = csv_reader
        .headers()
        .map_err(|e| Error::data(format!("bad header row: {e}")))?
        .clone();
    let find = |name: &str| -> Option<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let require = |name: &str| -> Result<usize> {
        find(name).ok_or_else(|| Error::config(format!("missing required column: {name:?}")))
    };
    let col_student = require(&schema.student)?;
    let col_time = require(&schema.time)?;
    let col_problem = require(&schema.problem)?;
    let col_step = require(&schema.step)?;
    let col_attempt = require(&schema.attempt)?;
    let col_outcome = require(&schema.outcome)?;
    let col_kc = require(&schema.kc)?;
    let col_session = find(&schema.session);

    let mut attempts = Vec::new();
    let mut rejects = Vec::new();
    let mut input_rows = 0u64;
    for row in csv_reader.records() {
        let row = row.map_err(|e| Error::data(format!("unreadable row: {e}")))?;
        input_rows += 1;
        let line_no = row.position().map_or(0, |p| p.line());
        let mut reject = |reason: String| {
            rejects.push(RejectEntry { line_no, reason });
        };
        let cell = |idx: usize| row.get(idx).unwrap_or("").trim();

        let student = cell(col_student);
        let problem = cell(col_problem);
        let step = cell(col_step);
        if student.is_empty() || problem.is_empty() || step.is_empty() {
            reject("missing required field".into());
            continue;
        }
        let timestamp = match TimestampMs::parse(cell(col_time)) {
            Ok(t) => t,
            Err(_) => {
                reject(format!("bad timestamp: {:?}", cell(col_time)));
                continue;
            }
        };
        let attempt_index: u32 = match cell(col_attempt).parse() {
            Ok(a) if a >= 1 => a,
            _ => {
                reject(format!("bad attempt index: {:?}", cell(col_attempt)));
                continue;
            }
        };
        let outcome = match Outcome::parse(cell(col_outcome)) {
            Ok(o) => o,
            Err(_) => {
                reject(format!("unknown outcome: {:?}", cell(col_outcome)));
                continue;
            }
        };
        // Order-preserving dedup keeps replication counts meaningful when a
        // cell repeats a component.
        let mut kc_ids: Vec<String> = Vec::new();
        for part in cell(col_kc).split(schema.kc_delimiter.as_str()) {
            let part = part.trim();
            if !part.is_empty() && !kc_ids.iter().any(|k| k == part) {
                kc_ids.push(part.to_string());
            }
        }
        if kc_ids.is_empty() {
            reject("missing knowledge component".into());
            continue;
        }
        let session_id = col_session
            .map(|c| cell(c))
            .filter(|s| !s.is_empty())
            .map(String::from);

        attempts.push(AttemptRecord {
            student_id: student.to_string(),
            session_id,
            timestamp,
            problem_id: problem.to_string(),
            step_id: step.to_string(),
            attempt_index,
            outcome,
            kc_ids,
            line_no,
        });
    }

    Ok(ParseOutput {
        attempts,
        rejects,
        input_rows,
    })
}

/// Session spans plus each attempt's span assignment (index into `spans`,
/// parallel to the attempt list passed to [`derive_sessions`]).
#[derive(Debug)]
pub struct SessionAssignment {
    pub spans: Vec<SessionSpan>,
    pub span_of: Vec<u32>,
    pub degenerate_sessions: u64,
    pub mixed_session_ids: u64,
    pub overlapping_sessions: u64,
}

/// Derives session spans per student. Students whose rows all carry session
/// ids keep them (unless the id spans overlap in time); anyone else gets
/// sessions inferred from inactivity gaps longer than `gap_ms`.
pub fn derive_sessions(attempts: &[AttemptRecord], gap_ms: i64) -> Result<SessionAssignment> {
    if gap_ms <= 0 {
        return Err(Error::config("session gap must be positive"));
    }
    // Stable ordering independent of input row order.
    let mut by_student: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in attempts.iter().enumerate() {
        by_student.entry(&a.student_id).or_default().push(i);
    }

    let mut spans: Vec<SessionSpan> = Vec::new();
    let mut span_of = vec![0u32; attempts.len()];
    let mut degenerate_sessions = 0u64;
    let mut mixed_session_ids = 0u64;
    let mut overlapping_sessions = 0u64;

    for (student, mut idx) in by_student {
        idx.sort_by_key(|&i| {
            (
                attempts[i].timestamp,
                &attempts[i].problem_id,
                &attempts[i].step_id,
                attempts[i].attempt_index,
            )
        });
        let tagged = idx.iter().filter(|&&i| attempts[i].session_id.is_some()).count();
        let mut use_ids = tagged == idx.len();
        if tagged > 0 && !use_ids {
            mixed_session_ids += 1;
        }

        if use_ids {
            // Span per distinct id, in order of first appearance.
            let mut order: Vec<&str> = Vec::new();
            let mut bounds: HashMap<&str, (TimestampMs, TimestampMs, usize)> = HashMap::new();
            for &i in &idx {
                let sid = attempts[i].session_id.as_deref().unwrap();
                match bounds.get_mut(sid) {
                    Some((lo, hi, n)) => {
                        *lo = (*lo).min(attempts[i].timestamp);
                        *hi = (*hi).max(attempts[i].timestamp);
                        *n += 1;
                    }
                    None => {
                        order.push(sid);
                        bounds.insert(sid, (attempts[i].timestamp, attempts[i].timestamp, 1));
                    }
                }
            }
            let mut sorted: Vec<_> = order.iter().map(|sid| bounds[sid]).collect();
            sorted.sort_by_key(|&(lo, _, _)| lo);
            let overlaps = sorted
                .windows(2)
                .any(|w| w[1].0 .0 < w[0].1 .0);
            if overlaps {
                overlapping_sessions += 1;
                use_ids = false;
            } else {
                for sid in order {
                    let (lo, hi, n) = bounds[sid];
                    let span_idx = spans.len() as u32;
                    let degenerate = n == 1;
                    if degenerate {
                        degenerate_sessions += 1;
                    }
                    spans.push(SessionSpan {
                        student_id: student.to_string(),
                        session_id: sid.to_string(),
                        start: lo,
                        end: if degenerate { TimestampMs(lo.0 + 1000) } else { hi },
                        degenerate,
                    });
                    for &i in &idx {
                        if attempts[i].session_id.as_deref() == Some(sid) {
                            span_of[i] = span_idx;
                        }
                    }
                }
            }
        }

        if !use_ids {
            let mut seq = 0u32;
            let mut run: Vec<usize> = Vec::new();
            let flush =
                |run: &mut Vec<usize>, seq: &mut u32, spans: &mut Vec<SessionSpan>, span_of: &mut [u32], degenerate_sessions: &mut u64| {
                    if run.is_empty() {
                        return;
                    }
                    *seq += 1;
                    let start = attempts[run[0]].timestamp;
                    let last = attempts[*run.last().unwrap()].timestamp;
                    let degenerate = run.len() == 1;
                    if degenerate {
                        *degenerate_sessions += 1;
                    }
                    let span_idx = spans.len() as u32;
                    spans.push(SessionSpan {
                        student_id: student.to_string(),
                        session_id: format!("auto{seq}"),
                        start,
                        end: if degenerate { TimestampMs(start.0 + 1000) } else { last },
                        degenerate,
                    });
                    for &i in run.iter() {
                        span_of[i] = span_idx;
                    }
                    run.clear();
                };
            for &i in &idx {
                if let Some(&prev) = run.last() {
                    if attempts[i].timestamp.0 - attempts[prev].timestamp.0 > gap_ms {
                        flush(&mut run, &mut seq, &mut spans, &mut span_of, &mut degenerate_sessions);
                    }
                }
                run.push(i);
            }
            flush(&mut run, &mut seq, &mut spans, &mut span_of, &mut degenerate_sessions);
        }
    }

    Ok(SessionAssignment {
        spans,
        span_of,
        degenerate_sessions,
        mixed_session_ids,
        overlapping_sessions,
    })
}

/// Step derivation output: records still lack response times, opportunities,
/// and slices.
#[derive(Debug)]
pub struct StepOutput {
    pub steps: Vec<StepRecord>,
    pub rejects: Vec<RejectEntry>,
    pub step_groups: u64,
    pub attempts_in_rejected_groups: u64,
    pub duplicate_first_attempts: u64,
}

/// Groups attempts into steps and takes correctness from the unassisted
/// first attempt (a hint counts as not correct). Steps with no attempt 1 are
/// rejected; several attempt-1 rows keep the earliest.
pub fn derive_steps(
    attempts: &[AttemptRecord],
    assign: &SessionAssignment,
    multi_kc: MultiKcMode,
) -> StepOutput {
    let mut groups: BTreeMap<(&str, u32, &str, &str), Vec<usize>> = BTreeMap::new();
    for (i, a) in attempts.iter().enumerate() {
        groups
            .entry((
                a.student_id.as_str(),
                assign.span_of[i],
                a.problem_id.as_str(),
                a.step_id.as_str(),
            ))
            .or_default()
            .push(i);
    }

    let mut steps = Vec::new();
    let mut rejects = Vec::new();
    let mut attempts_in_rejected_groups = 0u64;
    let mut duplicate_first_attempts = 0u64;
    let step_groups = groups.len() as u64;

    for ((student, span_idx, problem, step), rows) in groups {
        let mut firsts: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| attempts[i].attempt_index == 1)
            .collect();
        if firsts.is_empty() {
            attempts_in_rejected_groups += rows.len() as u64;
            let line_no = rows.iter().map(|&i| attempts[i].line_no).min().unwrap_or(0);
            rejects.push(RejectEntry {
                line_no,
                reason: format!("missing first attempt: {student}/{problem}/{step}"),
            });
            continue;
        }
        if firsts.len() > 1 {
            duplicate_first_attempts += 1;
            firsts.sort_by_key(|&i| (attempts[i].timestamp, attempts[i].line_no));
        }
        let fa = &attempts[firsts[0]];
        let kcs: &[String] = match multi_kc {
            MultiKcMode::Replicate => &fa.kc_ids,
            MultiKcMode::First => &fa.kc_ids[..1],
        };
        for kc in kcs {
            steps.push(StepRecord {
                student_id: student.to_string(),
                session_id: assign.spans[span_idx as usize].session_id.clone(),
                kc_id: kc.clone(),
                problem_id: problem.to_string(),
                step_id: step.to_string(),
                first_attempt_correct: fa.outcome == Outcome::Correct,
                first_attempt_time: fa.timestamp,
                rt_seconds: None,
                rt_log: None,
                opportunity: 0,
                slice: Slice::Q1,
            });
        }
    }

    StepOutput {
        steps,
        rejects,
        step_groups,
        attempts_in_rejected_groups,
        duplicate_first_attempts,
    }
}

/// Response-time counters.
#[derive(Debug, Default)]
pub struct RtFlags {
    pub present: u64,
    pub absent_session_start: u64,
    pub absent_nonpositive: u64,
}

/// Fills response times: the gap in seconds between consecutive distinct
/// step events within a session, in (time, problem, step) order. Records
/// replicated across knowledge components share their event's value. The
/// first event of each session, and events tied or out of order with their
/// predecessor, have no response time.
pub fn compute_response_times(steps: &mut [StepRecord]) -> RtFlags {
    let mut by_session: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in steps.iter().enumerate() {
        by_session
            .entry((s.student_id.as_str(), s.session_id.as_str()))
            .or_default()
            .push(i);
    }

    let mut flags = RtFlags::default();
    let mut rt_of: Vec<Option<f64>> = vec![None; steps.len()];
    for (_, mut idx) in by_session {
        idx.sort_by_key(|&i| {
            (
                steps[i].first_attempt_time,
                &steps[i].problem_id,
                &steps[i].step_id,
            )
        });
        let mut prev_event: Option<(&TimestampMs, &str, &str)> = None;
        let mut prev_time: Option<TimestampMs> = None;
        let mut current_rt: Option<f64> = None;
        for &i in &idx {
            let key = (
                &steps[i].first_attempt_time,
                steps[i].problem_id.as_str(),
                steps[i].step_id.as_str(),
            );
            if prev_event != Some(key) {
                // New distinct event: compute its gap from the previous one.
                current_rt = match prev_time {
                    None => {
                        flags.absent_session_start += 1;
                        None
                    }
                    Some(pt) => {
                        let dt_ms = steps[i].first_attempt_time.0 - pt.0;
                        if dt_ms <= 0 {
                            flags.absent_nonpositive += 1;
                            None
                        } else {
                            Some(dt_ms as f64 / 1000.0)
                        }
                    }
                };
                prev_time = Some(steps[i].first_attempt_time);
                prev_event = Some(key);
            }
            rt_of[i] = current_rt;
            if current_rt.is_some() {
                flags.present += 1;
            }
        }
    }
    for (i, rt) in rt_of.into_iter().enumerate() {
        steps[i].rt_seconds = rt;
        steps[i].rt_log = rt.map(f64::ln);
    }
    flags
}

/// Clamps response times above the given upper quantile to that quantile and
/// recomputes their logs. Returns the number of clamped records.
pub fn winsorize_rt(steps: &mut [StepRecord], quantile: f64) -> Result<u64> {
    if !(0.5..1.0).contains(&quantile) {
        return Err(Error::config(format!(
            "winsorize quantile must be in [0.5, 1), got {quantile}"
        )));
    }
    let mut values: Vec<f64> = steps.iter().filter_map(|s| s.rt_seconds).collect();
    if values.is_empty() {
        return Ok(0);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cap = crate::num::special::quantile_sorted(&values, quantile);
    let mut clamped = 0u64;
    for s in steps.iter_mut() {
        if let Some(rt) = s.rt_seconds {
            if rt > cap {
                s.rt_seconds = Some(cap);
                s.rt_log = Some(cap.ln());
                clamped += 1;
            }
        }
    }
    Ok(clamped)
}

/// Numbers each (student, knowledge component) sequence 1, 2, 3, ... in
/// (time, problem, step) order, across sessions.
pub fn assign_opportunities(steps: &mut [StepRecord]) {
    let mut by_pair: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in steps.iter().enumerate() {
        by_pair
            .entry((s.student_id.as_str(), s.kc_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut opp_of = vec![0u32; steps.len()];
    for (_, mut idx) in by_pair {
        idx.sort_by_key(|&i| {
            (
                steps[i].first_attempt_time,
                &steps[i].problem_id,
                &steps[i].step_id,
            )
        });
        for (k, &i) in idx.iter().enumerate() {
            opp_of[i] = k as u32 + 1;
        }
    }
    for (i, o) in opp_of.into_iter().enumerate() {
        steps[i].opportunity = o;
    }
}

/// Labels each step with its session time slice: normalized position
/// `u = (t - start) / (end - start)` in `[0, 1]`, slice `j` for
/// `u in [(j-1)/k, j/k)`, and `u = 1` assigned to slice `k`. Zero-length
/// spans put every step in slice 1; their count is returned.
pub fn slice_sessions(steps: &mut [StepRecord], spans: &[SessionSpan], k: u8) -> Result<u64> {
    if k == 0 {
        return Err(Error::config("slice count must be positive"));
    }
    let span_by_key: HashMap<(&str, &str), usize> = spans
        .iter()
        .enumerate()
        .map(|(j, sp)| ((sp.student_id.as_str(), sp.session_id.as_str()), j))
        .collect();
    let mut zero_length: std::collections::HashSet<usize> = Default::default();
    let mut slices = vec![Slice::Q1; steps.len()];
    for (i, s) in steps.iter().enumerate() {
        let key = (s.student_id.as_str(), s.session_id.as_str());
        let &j = span_by_key
            .get(&key)
            .ok_or_else(|| Error::data(format!("step references unknown session {key:?}")))?;
        let span = &spans[j];
        let dur = span.duration_ms();
        if dur <= 0 {
            zero_length.insert(j);
            continue;
        }
        let u = (s.first_attempt_time.0 - span.start.0) as f64 / dur as f64;
        let j = if u >= 1.0 {
            k
        } else {
            (u * k as f64).floor() as u8 + 1
        };
        slices[i] = Slice(j.min(k));
    }
    for (i, sl) in slices.into_iter().enumerate() {
        steps[i].slice = sl;
    }
    Ok(zero_length.len() as u64)
}

/// Full ingestion result.
#[derive(Debug)]
pub struct IngestOutput {
    pub steps: Vec<StepRecord>,
    pub spans: Vec<SessionSpan>,
    pub report: QualityReport,
}

/// Runs the whole pipeline on a transaction stream: parse, sessions, steps,
/// response times, optional winsorization, opportunities, slices. Output
/// steps are in canonical order, so identical inputs produce identical
/// tables regardless of source row order.
pub fn ingest<R: Read>(source: R, config: &IngestConfig) -> Result<IngestOutput> {
    let parsed = parse_transactions(source, &config.schema)?;
    let gap_ms = (config.session_gap_minutes * 60_000.0).round() as i64;
    let assign = derive_sessions(&parsed.attempts, gap_ms)?;
    let mut derived = derive_steps(&parsed.attempts, &assign, config.multi_kc);
    let rt_flags = compute_response_times(&mut derived.steps);
    let winsorized = match config.winsorize_quantile {
        Some(q) => winsorize_rt(&mut derived.steps, q)?,
        None => 0,
    };
    assign_opportunities(&mut derived.steps);
    let zero_length_spans = slice_sessions(&mut derived.steps, &assign.spans, config.slice_count)?;
    sort_steps_canonical(&mut derived.steps);

    let mut report = QualityReport {
        input_rows: parsed.input_rows,
        parsed_rows: parsed.attempts.len() as u64,
        sessions: assign.spans.len() as u64,
        degenerate_sessions: assign.degenerate_sessions,
        mixed_session_ids: assign.mixed_session_ids,
        overlapping_sessions: assign.overlapping_sessions,
        step_groups: derived.step_groups,
        groups_missing_first_attempt: derived.rejects.len() as u64,
        attempts_in_rejected_groups: derived.attempts_in_rejected_groups,
        duplicate_first_attempts: derived.duplicate_first_attempts,
        steps_emitted: derived.steps.len() as u64,
        rt_present: rt_flags.present,
        rt_absent_session_start: rt_flags.absent_session_start,
        rt_absent_nonpositive: rt_flags.absent_nonpositive,
        rt_winsorized: winsorized,
        zero_length_spans,
        group_reject_rows: derived.rejects,
        ..QualityReport::default()
    };
    for r in &parsed.rejects {
        *report.parse_rejects.entry(r.reason.clone()).or_insert(0) += 1;
    }
    report.parse_reject_rows = parsed.rejects;
    report.finish();

    Ok(IngestOutput {
        steps: derived.steps,
        spans: assign.spans,
        report,
    })
}

const STEP_HEADER: [&str; 11] = [
    "student_id",
    "session_id",
    "kc_id",
    "problem_id",
    "step_id",
    "first_attempt_correct",
    "first_attempt_time",
    "rt_seconds",
    "rt_log",
    "opportunity",
    "slice",
];

/// Writes the canonical step table as CSV. Leading `comments` become `#`
/// lines before the header. Floats use the shortest round-trip
/// representation, so reading the table back reproduces values exactly.
pub fn write_step_table<W: Write>(
    mut out: W,
    steps: &[StepRecord],
    comments: &[String],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STEP_HEADER)?;
    for s in steps {
        w.write_record([
            s.student_id.as_str(),
            s.session_id.as_str(),
            s.kc_id.as_str(),
            s.problem_id.as_str(),
            s.step_id.as_str(),
            if s.first_attempt_correct { "true" } else { "false" },
            &s.first_attempt_time.to_iso(),
            &s.rt_seconds.map(|v| v.to_string()).unwrap_or_default(),
            &s.rt_log.map(|v| v.to_string()).unwrap_or_default(),
            &s.opportunity.to_string(),
            &s.slice.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a step table written by [`write_step_table`].
pub fn read_step_table<R: Read>(source: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(BufReader::new(source));
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("step table missing column {name:?}")))
    };
    let cols: Vec<usize> = STEP_HEADER.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut steps = Vec::new();
    for row in r.records() {
        let row = row?;
        let cell = |k: usize| row.get(cols[k]).unwrap_or("").trim();
        let opt_f64 = |k: usize| -> Result<Option<f64>> {
            let c = cell(k);
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse()
                    .map(Some)
                    .map_err(|_| Error::data(format!("bad float in step table: {c:?}")))
            }
        };
        steps.push(StepRecord {
            student_id: cell(0).to_string(),
            session_id: cell(1).to_string(),
            kc_id: cell(2).to_string(),
            problem_id: cell(3).to_string(),
            step_id: cell(4).to_string(),
            first_attempt_correct: match cell(5) {
                "true" => true,
                "false" => false,
                other => return Err(Error::data(format!("bad boolean: {other:?}"))),
            },
            first_attempt_time: TimestampMs::parse(cell(6))?,
            rt_seconds: opt_f64(7)?,
            rt_log: opt_f64(8)?,
            opportunity: cell(9)
                .parse()
                .map_err(|_| Error::data(format!("bad opportunity: {:?}", cell(9))))?,
            slice: Slice::parse(cell(10))?,
        });
    }
    Ok(steps)
}
