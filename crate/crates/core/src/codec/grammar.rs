//! The log line grammar, one event per line:
//!
//! ```text
//! 114 - New call: call_1 from 4 to 1 guests 4
//! 114 - Assign call: call_1 on car_01_01
//! 120 - Load call: call_1 on car_01_01
//! 131 - Unload call: call_1 on car_01_01 overtravel 0
//! ```
//!
//! Formatting is bit-exact: single spaces, a `" - "` separator, decimal
//! integers without leading zeros, and 2-digit zero-padded shaft/car fields.
//! Parsing accepts a line iff it matches the grammar exactly; a failure is a
//! value carrying the byte offset of the first field that went wrong.

use crate::sim::CarId;
use std::fmt;

/// One call-lifecycle event, ready to be formatted as a log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEvent {
    pub time: u64,
    pub call_id: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    New {
        origin: u32,
        destination: u32,
        guests: u32,
    },
    Assign {
        car: CarId,
    },
    Load {
        car: CarId,
    },
    Unload {
        car: CarId,
        overtravel: u32,
    },
}

impl EventKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            EventKind::New { .. } => "New",
            EventKind::Assign { .. } => "Assign",
            EventKind::Load { .. } => "Load",
            EventKind::Unload { .. } => "Unload",
        }
    }
}

/// Renders an event as one log line (no trailing newline).
pub fn format_event(event: &LogEvent) -> String {
    let LogEvent { time, call_id, .. } = event;
    match &event.kind {
        EventKind::New {
            origin,
            destination,
            guests,
        } => {
            format!(
                "{time} - New call: call_{call_id} from {origin} to {destination} guests {guests}"
            )
        }
        EventKind::Assign { car } => format!("{time} - Assign call: call_{call_id} on {car}"),
        EventKind::Load { car } => format!("{time} - Load call: call_{call_id} on {car}"),
        EventKind::Unload { car, overtravel } => {
            format!("{time} - Unload call: call_{call_id} on {car} overtravel {overtravel}")
        }
    }
}

/// Renders a whole event list as log text, one LF-terminated line per event.
pub fn render_log(events: &[LogEvent]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&format_event(event));
        out.push('\n');
    }
    out
}

/// Grammar mismatch: `position` is the byte offset of the first offending
/// field (line length when the line ended too early).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse failure at byte {position}: expected {expected}")]
pub struct ParseError {
    pub position: usize,
    pub expected: String,
}

impl ParseError {
    fn new(position: usize, expected: impl fmt::Display) -> Self {
        ParseError {
            position,
            expected: expected.to_string(),
        }
    }
}

/// Walks single-space-separated fields, tracking byte offsets.
struct Fields<'a> {
    line: &'a str,
    pos: usize,
    exhausted: bool,
}

impl<'a> Fields<'a> {
    fn new(line: &'a str) -> Self {
        Fields {
            line,
            pos: 0,
            exhausted: line.is_empty(),
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        if self.exhausted {
            return None;
        }
        let start = self.pos;
        let rest = &self.line[start..];
        match rest.find(' ') {
            Some(idx) => {
                self.pos = start + idx + 1;
                Some((start, &rest[..idx]))
            }
            None => {
                self.exhausted = true;
                Some((start, rest))
            }
        }
    }

    fn expect(&mut self, expected: &str) -> Result<(usize, &'a str), ParseError> {
        self.next()
            .ok_or_else(|| ParseError::new(self.line.len(), expected))
    }

    fn literal(&mut self, lit: &str) -> Result<(), ParseError> {
        let expected = format!("{lit:?}");
        let (pos, field) = self.expect(&expected)?;
        if field == lit {
            Ok(())
        } else {
            Err(ParseError::new(pos, expected))
        }
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        match self.next() {
            None => Ok(()),
            Some((pos, _)) => Err(ParseError::new(pos, "end of line")),
        }
    }
}

/// Decimal with no leading zeros; '+'/'-' signs are not part of the grammar.
fn parse_decimal(field: &str) -> Option<u64> {
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if field.len() > 1 && field.starts_with('0') {
        return None;
    }
    field.parse().ok()
}

fn decimal_field(fields: &mut Fields<'_>, what: &str, min: u64) -> Result<u64, ParseError> {
    let (pos, field) = fields.expect(what)?;
    match parse_decimal(field) {
        Some(value) if value >= min => Ok(value),
        _ => Err(ParseError::new(pos, what)),
    }
}

fn floor_field(fields: &mut Fields<'_>, what: &str) -> Result<u32, ParseError> {
    let (pos, field) = fields.expect(what)?;
    match parse_decimal(field) {
        Some(value @ 1..) if value <= u64::from(u32::MAX) => Ok(value as u32),
        _ => Err(ParseError::new(pos, what)),
    }
}

/// `call_N`, N ≥ 1 without leading zeros.
fn call_id_field(fields: &mut Fields<'_>) -> Result<u64, ParseError> {
    const WHAT: &str = "call id like \"call_7\"";
    let (pos, field) = fields.expect(WHAT)?;
    let id = field
        .strip_prefix("call_")
        .and_then(parse_decimal)
        .filter(|&id| id >= 1);
    id.ok_or_else(|| ParseError::new(pos, WHAT))
}

/// `car_SS_CC`: both fields exactly two digits, zero-padded, value ≥ 1.
fn car_field(fields: &mut Fields<'_>) -> Result<CarId, ParseError> {
    const WHAT: &str = "car id like \"car_01_02\"";
    let (pos, field) = fields.expect(WHAT)?;
    let parsed = (|| {
        let rest = field.strip_prefix("car_")?;
        let bytes = rest.as_bytes();
        if bytes.len() != 5 || bytes[2] != b'_' {
            return None;
        }
        if !bytes[..2].iter().all(u8::is_ascii_digit) || !bytes[3..].iter().all(u8::is_ascii_digit)
        {
            return None;
        }
        let shaft: u32 = rest[..2].parse().ok()?;
        let car: u32 = rest[3..].parse().ok()?;
        if shaft == 0 || car == 0 {
            return None;
        }
        Some(CarId { shaft, car })
    })();
    parsed.ok_or_else(|| ParseError::new(pos, WHAT))
}

/// Parses one line; rejection is a value, not a fault.
pub fn parse_line(line: &str) -> Result<LogEvent, ParseError> {
    let mut fields = Fields::new(line);
    let time = decimal_field(&mut fields, "timestamp", 0)?;
    fields.literal("-")?;

    let (kw_pos, keyword) = fields.expect("operation keyword")?;
    fields.literal("call:")?;
    let call_id = call_id_field(&mut fields)?;

    let kind = match keyword {
        "New" => {
            fields.literal("from")?;
            let origin = floor_field(&mut fields, "origin floor")?;
            fields.literal("to")?;
            let destination = floor_field(&mut fields, "destination floor")?;
            fields.literal("guests")?;
            let guests = floor_field(&mut fields, "guest count")?;
            EventKind::New {
                origin,
                destination,
                guests,
            }
        }
        "Assign" | "Load" => {
            fields.literal("on")?;
            let car = car_field(&mut fields)?;
            if keyword == "Assign" {
                EventKind::Assign { car }
            } else {
                EventKind::Load { car }
            }
        }
        "Unload" => {
            fields.literal("on")?;
            let car = car_field(&mut fields)?;
            fields.literal("overtravel")?;
            let overtravel = decimal_field(&mut fields, "overtravel distance", 0)?;
            let overtravel = u32::try_from(overtravel)
                .map_err(|_| ParseError::new(line.len(), "overtravel distance"))?;
            EventKind::Unload { car, overtravel }
        }
        _ => return Err(ParseError::new(kw_pos, "operation keyword")),
    };

    fields.finish()?;
    Ok(LogEvent {
        time,
        call_id,
        kind,
    })
}
