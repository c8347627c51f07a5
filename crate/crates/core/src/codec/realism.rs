//! Measures how much a piece of text behaves like a real elevator log:
//! how many lines parse, whether timestamps ascend, and whether each call id
//! walks the New → Assign → Load → Unload lifecycle in order.

use crate::codec::{parse_line, EventKind, LogEvent};
use crate::config::KvWriter;
use std::collections::BTreeMap;

/// Realism metrics for one log text. All rates live in `[0, 1]`.
///
/// A call whose events are a proper prefix of the lifecycle (a log cut off
/// mid-service) counts as consistent but not complete, so horizon truncation
/// is not mistaken for malformed generation. Texts with no lines, no parsed
/// lines, or no call ids score zero on the affected rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RealismReport {
    pub total_lines: usize,
    pub parsed_lines: usize,
    /// Parsed lines over all lines.
    pub line_parse_rate: f64,
    /// Fraction of consecutive parsed-line pairs with nondecreasing time.
    pub timestamp_monotonic_fraction: f64,
    /// Fraction of call ids with the full ordered lifecycle quadruple.
    pub lifecycle_complete_rate: f64,
    /// Fraction of call ids whose events form a prefix of the lifecycle.
    pub lifecycle_consistent_rate: f64,
    /// Fraction of call ids announced by more than one New line.
    pub duplicate_new_rate: f64,
    pub total_calls: usize,
    pub new_lines: usize,
    pub assign_lines: usize,
    pub load_lines: usize,
    pub unload_lines: usize,
}

const LIFECYCLE: [u8; 4] = [0, 1, 2, 3];

fn kind_rank(kind: &EventKind) -> u8 {
    match kind {
        EventKind::New { .. } => 0,
        EventKind::Assign { .. } => 1,
        EventKind::Load { .. } => 2,
        EventKind::Unload { .. } => 3,
    }
}

/// Scans `text` line by line and aggregates the realism metrics.
pub fn realism_features(text: &str) -> RealismReport {
    let mut total_lines = 0usize;
    let mut parsed: Vec<LogEvent> = Vec::new();
    for line in text.lines() {
        total_lines += 1;
        if let Ok(event) = parse_line(line) {
            parsed.push(event);
        }
    }

    let mut kind_counts = [0usize; 4];
    let mut per_call: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for event in &parsed {
        let rank = kind_rank(&event.kind);
        kind_counts[rank as usize] += 1;
        per_call.entry(event.call_id).or_default().push(rank);
    }

    let pairs = parsed.len().saturating_sub(1);
    let monotonic_pairs = parsed
        .windows(2)
        .filter(|pair| pair[0].time <= pair[1].time)
        .count();
    let timestamp_monotonic_fraction = if parsed.is_empty() {
        0.0
    } else if pairs == 0 {
        1.0
    } else {
        monotonic_pairs as f64 / pairs as f64
    };

    let total_calls = per_call.len();
    let mut complete = 0usize;
    let mut consistent = 0usize;
    let mut duplicated = 0usize;
    for ranks in per_call.values() {
        if ranks.len() <= 4 && ranks[..] == LIFECYCLE[..ranks.len()] {
            consistent += 1;
            if ranks.len() == 4 {
                complete += 1;
            }
        }
        if ranks.iter().filter(|&&r| r == 0).count() > 1 {
            duplicated += 1;
        }
    }
    let rate = |n: usize| {
        if total_calls == 0 {
            0.0
        } else {
            n as f64 / total_calls as f64
        }
    };

    RealismReport {
        total_lines,
        parsed_lines: parsed.len(),
        line_parse_rate: if total_lines == 0 {
            0.0
        } else {
            parsed.len() as f64 / total_lines as f64
        },
        timestamp_monotonic_fraction,
        lifecycle_complete_rate: rate(complete),
        lifecycle_consistent_rate: rate(consistent),
        duplicate_new_rate: rate(duplicated),
        total_calls,
        new_lines: kind_counts[0],
        assign_lines: kind_counts[1],
        load_lines: kind_counts[2],
        unload_lines: kind_counts[3],
    }
}

impl RealismReport {
    /// Flat `key=value` rendering, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut out = KvWriter::new();
        out.push("total_lines", self.total_lines);
        out.push("parsed_lines", self.parsed_lines);
        out.push("line_parse_rate", self.line_parse_rate);
        out.push(
            "timestamp_monotonic_fraction",
            self.timestamp_monotonic_fraction,
        );
        out.push("lifecycle_complete_rate", self.lifecycle_complete_rate);
        out.push("lifecycle_consistent_rate", self.lifecycle_consistent_rate);
        out.push("duplicate_new_rate", self.duplicate_new_rate);
        out.push("total_calls", self.total_calls);
        out.push("new_lines", self.new_lines);
        out.push("assign_lines", self.assign_lines);
        out.push("load_lines", self.load_lines);
        out.push("unload_lines", self.unload_lines);
        out.to_string()
    }

    pub const CSV_HEADER: &'static str = "total_lines,parsed_lines,line_parse_rate,\
timestamp_monotonic_fraction,lifecycle_complete_rate,lifecycle_consistent_rate,\
duplicate_new_rate,total_calls,new_lines,assign_lines,load_lines,unload_lines";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.total_lines,
            self.parsed_lines,
            self.line_parse_rate,
            self.timestamp_monotonic_fraction,
            self.lifecycle_complete_rate,
            self.lifecycle_consistent_rate,
            self.duplicate_new_rate,
            self.total_calls,
            self.new_lines,
            self.assign_lines,
            self.load_lines,
            self.unload_lines,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::render_log;
    use crate::config::KvConfig;
    use crate::sim::{new_simulation, run, BuildingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scripted_log() -> String {
        let config = BuildingConfig {
            num_shafts: 1,
            cars_per_shaft: 1,
            num_floors: 10,
            arrival_rate: 0.0,
            ..BuildingConfig::default()
        };
        let mut sim = new_simulation(&config).unwrap();
        let mut events = Vec::new();
        for (origin, destination) in [(1, 5), (5, 2), (2, 9), (9, 1), (1, 3), (3, 8)] {
            sim.inject_call(origin, destination, 3).unwrap();
            while !sim.is_quiescent() {
                events.extend(sim.step());
            }
        }
        render_log(&events)
    }

    #[test]
    fn clean_log_scores_perfectly() {
        let report = realism_features(&scripted_log());
        assert_eq!(report.total_lines, 24);
        assert_eq!(report.parsed_lines, 24);
        assert_eq!(report.line_parse_rate, 1.0);
        assert_eq!(report.timestamp_monotonic_fraction, 1.0);
        assert_eq!(report.lifecycle_complete_rate, 1.0);
        assert_eq!(report.lifecycle_consistent_rate, 1.0);
        assert_eq!(report.duplicate_new_rate, 0.0);
        assert_eq!(report.total_calls, 6);
        assert_eq!(
            (
                report.new_lines,
                report.assign_lines,
                report.load_lines,
                report.unload_lines
            ),
            (6, 6, 6, 6)
        );
    }

    #[test]
    fn truncated_horizon_is_consistent_but_incomplete() {
        let log = render_log(&run(&BuildingConfig::default(), 200_000).unwrap());
        let report = realism_features(&log);
        assert_eq!(report.line_parse_rate, 1.0);
        assert_eq!(report.timestamp_monotonic_fraction, 1.0);
        assert_eq!(
            report.lifecycle_consistent_rate, 1.0,
            "a hard stop must leave only lifecycle prefixes"
        );
        assert!(report.lifecycle_complete_rate > 0.8);
        assert!(report.total_calls > 500);
    }

    #[test]
    fn shuffling_halves_the_monotonic_fraction() {
        let log = render_log(&run(&BuildingConfig::default(), 200_000).unwrap());
        let mut lines: Vec<&str> = log.lines().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in (1..lines.len()).rev() {
            let j = rng.random_range(0..=i);
            lines.swap(i, j);
        }
        let shuffled = lines.join("\n");
        let report = realism_features(&shuffled);
        assert_eq!(report.line_parse_rate, 1.0, "shuffling keeps lines intact");
        assert!(
            (0.4..=0.6).contains(&report.timestamp_monotonic_fraction),
            "shuffled monotonic fraction {} should sit near one half",
            report.timestamp_monotonic_fraction
        );
        assert!(report.lifecycle_complete_rate < 0.5);
    }

    #[test]
    fn disordered_generated_text_scores_low() {
        // The texture a weak generator produces: plausible tokens, timestamps
        // jumping backwards, lifecycles started mid-way, one malformed line.
        let text = "\
979225 - Assign call: call_197549 on car_04_02 overtravel 0
994362 - Load call: call_179225 on car_04_03
994362 - Assign call: call_197549 on car_02_03
979225 - New call: call_189225 from 27 to 2 guests 6
994352 - Assign call: call_1879902 on car_04_03
914362 - Load call: call_1892252 on car_02_01
994352 - Unload call: call_189225 on car_03_01 overtravel 4
979125 - New call: call_189225 from 7 to 25 guests 8
";
        let report = realism_features(text);
        assert_eq!(report.total_lines, 8);
        assert_eq!(report.parsed_lines, 7);
        assert!(report.line_parse_rate < 1.0);
        assert_eq!(report.timestamp_monotonic_fraction, 0.5);
        assert_eq!(report.lifecycle_complete_rate, 0.0);
        assert_eq!(report.lifecycle_consistent_rate, 0.0);
        assert_eq!(report.duplicate_new_rate, 0.2);
        assert_eq!(report.total_calls, 5);
    }

    #[test]
    fn duplicate_new_lines_are_flagged() {
        let text = "5 - New call: call_3 from 1 to 2 guests 1\n9 - New call: call_3 from 2 to 1 guests 4\n";
        let report = realism_features(text);
        assert_eq!(report.duplicate_new_rate, 1.0);
        assert_eq!(report.lifecycle_consistent_rate, 0.0);
    }

    #[test]
    fn empty_and_single_line_edges() {
        let empty = realism_features("");
        assert_eq!(empty.total_lines, 0);
        assert_eq!(empty.line_parse_rate, 0.0);
        assert_eq!(empty.timestamp_monotonic_fraction, 0.0);
        assert_eq!(empty.lifecycle_complete_rate, 0.0);

        let single = realism_features("5 - New call: call_1 from 1 to 2 guests 1\n");
        assert_eq!(single.line_parse_rate, 1.0);
        assert_eq!(single.timestamp_monotonic_fraction, 1.0);
        assert_eq!(single.lifecycle_consistent_rate, 1.0);
        assert_eq!(single.lifecycle_complete_rate, 0.0);
    }

    #[test]
    fn report_serializes_to_kv_and_csv() {
        let report = realism_features(&scripted_log());
        let kv = KvConfig::parse(&report.to_kv()).unwrap();
        assert_eq!(kv.get("line_parse_rate"), Some("1"));
        assert_eq!(kv.get("total_calls"), Some("6"));

        let header_fields = RealismReport::CSV_HEADER.split(',').count();
        let row_fields = report.to_csv_row().split(',').count();
        assert_eq!(header_fields, 12);
        assert_eq!(row_fields, 12);
    }
}
