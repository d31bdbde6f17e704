//! Export conformance checks shared by the core export tests and the
//! acceptance harness.
#![allow(dead_code)]

use duplexkit_core::export::{export_csv, export_json, import_json, CsvTable, EVENTS_HEADER, SURVEY_HEADER};
use duplexkit_core::survey::Answer;
use duplexkit_core::SessionRecord;

pub const ADVERSARIAL: &[&str] = &[
    "plain",
    "comma, separated, words",
    "she said \"no\"",
    "\"",
    "\"\"",
    "line one\r\nline two",
    "bare\nnewline",
    "carriage\rreturn",
    " leading and trailing ",
    "tab\tinside",
    "caf\u{e9} na\u{ef}ve \u{4e2d}\u{6587} \u{1F600}",
    "",
    "=SUM(A1:A2)",
    "semi;colon",
    "[EXIT]-lookalike [exit ]",
];

/// Puts `texts` into every free-text field of the record, cycling.
pub fn poison(record: &mut SessionRecord, texts: &[String]) {
    let mut it = texts.iter().cycle();
    record.session_id = it.next().unwrap().clone();
    for e in &mut record.events {
        e.text = it.next().unwrap().clone();
        if let Some(i) = &mut e.interruption {
            i.cutoff_text = it.next().unwrap().clone();
            i.remaining_text = it.next().unwrap().clone();
        }
    }
    let survey = record.survey.as_mut().unwrap();
    survey.participant_id = it.next().unwrap().clone();
    survey.answers.insert("justification".into(), Answer::Text(it.next().unwrap().clone()));
}

pub fn parse_csv(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().unwrap().iter().map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

pub fn check_csv_fields(record: &SessionRecord) -> Result<(), String> {
    let bytes = export_csv(std::slice::from_ref(record), CsvTable::Events).map_err(|e| e.to_string())?;
    let (header, rows) = parse_csv(&bytes);
    if header != EVENTS_HEADER {
        return Err(format!("events header {header:?}"));
    }
    if rows.len() != record.events.len() {
        return Err(format!("{} rows for {} events", rows.len(), record.events.len()));
    }
    for (row, e) in rows.iter().zip(&record.events) {
        let col = |name: &str| &row[EVENTS_HEADER.iter().position(|h| *h == name).unwrap()];
        if col("session_id") != &record.session_id || col("text") != &e.text {
            return Err(format!("event {} text did not survive: {row:?}", e.turn_index));
        }
        if let Some(i) = &e.interruption {
            if col("cutoff_text") != &i.cutoff_text || col("remaining_text") != &i.remaining_text {
                return Err(format!("event {} cutoff did not survive: {row:?}", e.turn_index));
            }
        }
    }

    let bytes = export_csv(std::slice::from_ref(record), CsvTable::Survey).map_err(|e| e.to_string())?;
    let (header, rows) = parse_csv(&bytes);
    if header != SURVEY_HEADER {
        return Err(format!("survey header {header:?}"));
    }
    let survey = record.survey.as_ref().unwrap();
    let Some(Answer::Text(expected)) = survey.answers.get("justification") else { unreachable!() };
    let row = rows.iter().find(|r| r[3] == "justification").ok_or("justification row missing")?;
    if row[0] != record.session_id || row[1] != survey.participant_id || &row[5] != expected {
        return Err(format!("survey row did not survive: {row:?}"));
    }
    Ok(())
}

pub fn check_json_round_trip(record: &SessionRecord) -> Result<(), String> {
    let bytes = export_json(record).map_err(|e| e.to_string())?;
    let back = import_json(&bytes).map_err(|e| e.to_string())?;
    if &back != record {
        return Err("record changed in a JSON round trip".into());
    }
    if export_json(&back).map_err(|e| e.to_string())? != bytes {
        return Err("re-export is not byte-identical".into());
    }
    Ok(())
}

/// Every adversarial string, rotated through every field, survives both
/// formats.
pub fn check_adversarial(record: &SessionRecord) -> Result<(), String> {
    let mut record = record.clone();
    let texts: Vec<String> = ADVERSARIAL.iter().map(|s| s.to_string()).collect();
    for shift in 0..texts.len() {
        let mut rotated = texts.clone();
        rotated.rotate_left(shift);
        poison(&mut record, &rotated);
        check_csv_fields(&record)?;
        check_json_round_trip(&record)?;
    }
    Ok(())
}
