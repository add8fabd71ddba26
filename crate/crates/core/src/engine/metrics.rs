//! Per-round metrics rows and their CSV form.

use serde::{Deserialize, Serialize};

use crate::consensus::Mode;
use crate::ids::Round;

/// Column order is fixed by field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: Round,
    pub mode: Mode,
    pub honest_weight: u64,
    pub dishonest_weight: u64,
    pub lumpy: u8,
    pub thin: u8,
    pub margin_to_flip: f64,
    /// Highest tip among active nodes.
    pub tip_height: u64,
    /// Highest finalized height among active nodes.
    pub finalized_height: u64,
    pub blocks_this_round: u64,
    pub honest_cost_cum: u64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "round",
    "mode",
    "honest_weight",
    "dishonest_weight",
    "lumpy",
    "thin",
    "margin_to_flip",
    "tip_height",
    "finalized_height",
    "blocks_this_round",
    "honest_cost_cum",
];

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn from_csv(text: &str) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let row = MetricsRow {
            round: 3,
            mode: Mode::Honest,
            honest_weight: 3,
            dishonest_weight: 2,
            lumpy: 1,
            thin: 1,
            margin_to_flip: 1.0,
            tip_height: 3,
            finalized_height: 0,
            blocks_this_round: 1,
            honest_cost_cum: 12,
        };
        let text = to_csv(std::slice::from_ref(&row));
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(text.lines().nth(1).unwrap().starts_with("3,honest,3,2,1,1,"));
        assert_eq!(from_csv(&text).unwrap(), vec![row]);
        assert_eq!(to_csv(&[]).trim(), CSV_COLUMNS.join(","));
    }
}
