//! Part-based musical form: parsing the LLM's JSON output and checking it
//! against the duration and reference constraints.
//!
//! The wire format is a JSON object mapping part numbers to
//! `["PROMPT", LENGTH_IN_SECONDS, REFERENCED_PART]` triples, where the
//! referenced part is `-1` or the number of an earlier part. LLM responses
//! usually wrap that object in prose or a fenced code block, and sometimes
//! leave the part numbers unquoted; [`parse_form`] copes with both.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Sentinel for "no referenced part".
pub const NO_REFERENCE: i64 = -1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormError {
    #[error("malformed form document: {0}")]
    MalformedDocument(String),
    #[error("part {0} appears more than once")]
    DuplicatePart(u32),
    #[error("part {part}: length must be an integer number of seconds, got {value}")]
    NonIntegerLength { part: u32, value: String },
}

/// One part of a piece.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSpec {
    /// 1-based part number.
    pub index: u32,
    pub prompt: String,
    pub length_s: i64,
    /// `-1` or the index of an earlier part this one varies.
    pub referenced_part: i64,
}

impl PartSpec {
    pub fn reference(&self) -> Option<u32> {
        if self.referenced_part == NO_REFERENCE {
            None
        } else {
            u32::try_from(self.referenced_part).ok()
        }
    }
}

/// A parsed form: parts sorted by index plus the LLM's free-text form label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormSpec {
    pub parts: Vec<PartSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl FormSpec {
    /// Sum of the declared part lengths in seconds.
    pub fn total_s(&self) -> i64 {
        self.parts.iter().map(|p| p.length_s).sum()
    }

    pub fn part(&self, index: u32) -> Option<&PartSpec> {
        self.parts.iter().find(|p| p.index == index)
    }

    /// Canonical form-file JSON: keys are integer strings in ascending order.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        for (i, part) in self.parts.iter().enumerate() {
            let value = serde_json::json!([part.prompt, part.length_s, part.referenced_part]);
            out.push_str(&format!("  \"{}\": {}", part.index, value));
            out.push_str(if i + 1 < self.parts.len() { ",\n" } else { "\n" });
        }
        out.push('}');
        out
    }
}

/// Global constraints the form must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormConstraints {
    pub total_s: i64,
    pub min_part_s: i64,
    pub max_part_s: i64,
}

impl Default for FormConstraints {
    fn default() -> Self {
        Self {
            total_s: 150,
            min_part_s: 20,
            max_part_s: 30,
        }
    }
}

/// Closed set of validation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    /// Part lengths must add up to the configured total.
    TotalDuration,
    /// Part shorter than the minimum length.
    PartTooShort,
    /// Part longer than the maximum length.
    PartTooLong,
    /// Referenced part is not `-1` and not an earlier part.
    InvalidReference,
    /// Part indices are not exactly `1..=N`.
    IndexContiguity,
}

impl RuleId {
    pub const ALL: [RuleId; 5] = [
        RuleId::TotalDuration,
        RuleId::PartTooShort,
        RuleId::PartTooLong,
        RuleId::InvalidReference,
        RuleId::IndexContiguity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::TotalDuration => "total_duration",
            RuleId::PartTooShort => "part_too_short",
            RuleId::PartTooLong => "part_too_long",
            RuleId::InvalidReference => "invalid_reference",
            RuleId::IndexContiguity => "index_contiguity",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    /// Offending part, or `-1` for a global rule.
    pub part: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            valid: violations.is_empty(),
            violations,
        }
    }

    pub fn has(&self, rule: RuleId) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return writeln!(f, "valid");
        }
        for v in &self.violations {
            if v.part < 0 {
                writeln!(f, "[{}] {}", v.rule, v.message)?;
            } else {
                writeln!(f, "[{}] part {}: {}", v.rule, v.part, v.message)?;
            }
        }
        Ok(())
    }
}

/// Parse a form document, tolerating prose and code fences around the JSON.
pub fn parse_form(document: &str) -> Result<FormSpec, FormError> {
    let json = extract_json_object(document)
        .ok_or_else(|| FormError::MalformedDocument("no JSON object found".into()))?;
    let json = quote_bare_integer_keys(json);
    let entries: RawEntries = serde_json::from_str(&json)
        .map_err(|e| FormError::MalformedDocument(e.to_string()))?;
    if entries.0.is_empty() {
        return Err(FormError::MalformedDocument("form has no parts".into()));
    }

    let mut parts: BTreeMap<u32, PartSpec> = BTreeMap::new();
    for (key, value) in entries.0 {
        let index = parse_part_key(&key)?;
        let part = parse_part_value(index, value)?;
        if parts.insert(index, part).is_some() {
            return Err(FormError::DuplicatePart(index));
        }
    }
    Ok(FormSpec {
        parts: parts.into_values().collect(),
        description: extract_form_label(document),
    })
}

/// Parse every form object found in a response, in order of appearance.
/// Objects that fail to parse are returned as errors in place.
pub fn parse_all_forms(document: &str) -> Vec<Result<FormSpec, FormError>> {
    let mut out = Vec::new();
    let mut rest = document;
    while let Some(start) = rest.find('{') {
        let Some(len) = balanced_len(&rest[start..], b'{', b'}') else {
            break;
        };
        let obj = &rest[start..start + len];
        // Skip nested non-form objects such as {"prompt": ...} by requiring
        // at least one array-valued entry.
        if obj.contains('[') {
            out.push(parse_form(obj));
        }
        rest = &rest[start + len..];
    }
    out
}

/// Check a form against the constraints. Violations are data, never errors.
pub fn validate_form(spec: &FormSpec, constraints: &FormConstraints) -> ValidationReport {
    let mut violations = Vec::new();

    for (pos, part) in spec.parts.iter().enumerate() {
        let expected = pos as u32 + 1;
        if part.index != expected {
            violations.push(Violation {
                rule: RuleId::IndexContiguity,
                part: i64::from(part.index),
                message: format!("expected part {expected} at position {pos}, found {}", part.index),
            });
            break;
        }
    }

    for part in &spec.parts {
        let idx = i64::from(part.index);
        if part.length_s < constraints.min_part_s {
            violations.push(Violation {
                rule: RuleId::PartTooShort,
                part: idx,
                message: format!("{} s is shorter than {} s", part.length_s, constraints.min_part_s),
            });
        }
        if part.length_s > constraints.max_part_s {
            violations.push(Violation {
                rule: RuleId::PartTooLong,
                part: idx,
                message: format!("{} s is longer than {} s", part.length_s, constraints.max_part_s),
            });
        }
        let r = part.referenced_part;
        if r != NO_REFERENCE && !(1 <= r && r < idx) {
            violations.push(Violation {
                rule: RuleId::InvalidReference,
                part: idx,
                message: format!("referenced part {r} is neither -1 nor an earlier part"),
            });
        }
    }

    let total = spec.total_s();
    if total != constraints.total_s {
        violations.push(Violation {
            rule: RuleId::TotalDuration,
            part: -1,
            message: format!("parts sum to {total} s, expected exactly {} s", constraints.total_s),
        });
    }

    ValidationReport::from_violations(violations)
}

/// Locate the form JSON inside an LLM response: a fenced ```json block if
/// one exists, otherwise the first balanced `{...}`.
pub fn extract_json_object(document: &str) -> Option<&str> {
    for block in fenced_blocks(document) {
        if let Some(start) = block.find('{') {
            if let Some(len) = balanced_len(&block[start..], b'{', b'}') {
                return Some(&block[start..start + len]);
            }
        }
    }
    let start = document.find('{')?;
    let len = balanced_len(&document[start..], b'{', b'}')?;
    Some(&document[start..start + len])
}

/// Contents of each ``` fenced block, in order.
pub(crate) fn fenced_blocks(document: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = document;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip the info string (e.g. "json") up to the end of the line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    out
}

/// Byte length of the balanced region starting at `s[0] == open`, skipping
/// over JSON string literals.
pub(crate) fn balanced_len(s: &str, open: u8, close: u8) -> Option<usize> {
    let bytes = s.as_bytes();
    if bytes.first() != Some(&open) {
        return None;
    }
    let mut depth = 0usize;
    let mut in_string: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if let Some(quote) = in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == quote {
                in_string = None;
            }
            continue;
        }
        match b {
            b'"' => in_string = Some(b'"'),
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Quote bare integer object keys (`{1: [...]}` → `{"1": [...]}`).
fn quote_bare_integer_keys(json: &str) -> String {
    let bytes = json.as_bytes();
    let mut out = String::with_capacity(json.len() + 16);
    let mut in_string = false;
    let mut escaped = false;
    let mut expect_key = false;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            let ch_len = utf8_len(b);
            out.push_str(&json[i..i + ch_len]);
            i += ch_len;
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                expect_key = false;
            }
            b'{' | b',' => expect_key = true,
            b'-' | b'0'..=b'9' if expect_key => {
                let start = i;
                let mut end = i + 1;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
                let mut look = end;
                while look < bytes.len() && bytes[look].is_ascii_whitespace() {
                    look += 1;
                }
                if look < bytes.len() && bytes[look] == b':' {
                    out.push('"');
                    out.push_str(&json[start..end]);
                    out.push('"');
                    i = end;
                    expect_key = false;
                    continue;
                }
                expect_key = false;
            }
            b if b.is_ascii_whitespace() => {}
            _ => expect_key = false,
        }
        // Push the whole UTF-8 char starting here.
        let ch_len = utf8_len(b);
        out.push_str(&json[i..i + ch_len]);
        i += ch_len;
    }
    out
}

fn utf8_len(first: u8) -> usize {
    match first {
        0x00..=0x7F => 1,
        0xC0..=0xDF => 2,
        0xE0..=0xEF => 3,
        _ => 4,
    }
}

/// Object entries in document order, duplicates preserved.
struct RawEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of parts")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawEntries, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawEntries(entries))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn parse_part_key(key: &str) -> Result<u32, FormError> {
    match key.trim().parse::<u32>() {
        Ok(0) | Err(_) => Err(FormError::MalformedDocument(format!(
            "part key {key:?} is not a positive integer"
        ))),
        Ok(n) => Ok(n),
    }
}

fn parse_part_value(index: u32, value: Value) -> Result<PartSpec, FormError> {
    let Value::Array(items) = value else {
        return Err(FormError::MalformedDocument(format!("part {index} is not an array")));
    };
    if items.len() != 3 {
        return Err(FormError::MalformedDocument(format!(
            "part {index} has {} elements, expected 3",
            items.len()
        )));
    }
    let prompt = match &items[0] {
        Value::String(s) => s.clone(),
        other => {
            return Err(FormError::MalformedDocument(format!(
                "part {index} prompt is not a string: {other}"
            )))
        }
    };
    let length_s = match &items[1] {
        Value::Number(n) => n.as_i64().ok_or_else(|| FormError::NonIntegerLength {
            part: index,
            value: n.to_string(),
        })?,
        other => {
            return Err(FormError::NonIntegerLength {
                part: index,
                value: other.to_string(),
            })
        }
    };
    let referenced_part = items[2].as_i64().ok_or_else(|| {
        FormError::MalformedDocument(format!(
            "part {index} referenced part is not an integer: {}",
            items[2]
        ))
    })?;
    Ok(PartSpec {
        index,
        prompt,
        length_s,
        referenced_part,
    })
}

/// Pull a `Form: A-B-A'` style label from surrounding prose.
fn extract_form_label(document: &str) -> Option<String> {
    document.lines().find_map(|line| {
        let line = line.trim();
        let rest = line.strip_prefix("Form:").or_else(|| line.strip_prefix("form:"))?;
        let label = rest.trim();
        (!label.is_empty()).then(|| label.to_string())
    })
}
