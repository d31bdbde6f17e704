//! Independent reference for survey aggregation. Shared by the core survey
//! tests and the acceptance harness.
//!
//! The fold below walks every (quadrant, style, metric) combination and
//! rescans all responses for each, and rounding is done by decimal long
//! division, so neither shares code with the implementation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use duplexkit_core::export::{aggregate_csv, PREFERENCE_METRIC};
use duplexkit_core::survey::{aggregate, Answer, LikertValue, SurveyResponse};
use duplexkit_core::{PersonaCatalog, PersonaConfig, Quadrant, Style};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// (quadrant, style, metric) -> (value as printed, n).
pub type Rows = BTreeMap<(String, String, String), (String, u64)>;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn shipped_catalog() -> PersonaCatalog {
    let text = std::fs::read_to_string(configs_dir().join("persona.json")).expect("persona.json");
    PersonaCatalog::from_json(&text).expect("shipped personas parse")
}

/// `num / den` to `digits` decimals, half away from zero, by long division.
pub fn decimal_round(num: i64, den: u64, digits: usize) -> String {
    assert!(den > 0);
    let negative = num < 0;
    let mut rem = num.unsigned_abs();
    let whole = rem / den;
    rem %= den;
    let mut frac = Vec::with_capacity(digits + 1);
    for _ in 0..=digits {
        rem *= 10;
        frac.push((rem / den) as u8);
        rem %= den;
    }
    let guard = frac.pop().unwrap();
    // Digits as one decimal string so the carry can ripple into the integer part.
    let mut all: Vec<u8> = whole.to_string().bytes().map(|b| b - b'0').collect();
    let point = all.len();
    all.extend(frac);
    if guard >= 5 {
        let mut i = all.len();
        loop {
            if i == 0 {
                all.insert(0, 1);
                break;
            }
            i -= 1;
            if all[i] == 9 {
                all[i] = 0;
            } else {
                all[i] += 1;
                break;
            }
        }
    }
    let point = point + (all.len() - point - digits);
    let int: String = all[..point].iter().map(|d| char::from(b'0' + d)).collect();
    let fraction: String = all[point..].iter().map(|d| char::from(b'0' + d)).collect();
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let zero = all.iter().all(|d| *d == 0);
    let sign = if negative && !zero { "-" } else { "" };
    if digits == 0 {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{fraction}")
    }
}

fn quadrant_of(catalog: &PersonaCatalog, persona_id: &str) -> Option<Quadrant> {
    let mut found = None;
    for p in &catalog.personas {
        if p.persona_id == persona_id {
            found = p.quadrant;
        }
    }
    found
}

fn vote_style(choice: &str) -> Option<&'static str> {
    match choice.trim() {
        "A" | "a" => Some("A"),
        "B" | "b" => Some("B"),
        "C" | "c" => Some("C"),
        _ => None,
    }
}

/// Reference aggregation.
pub fn brute_force(responses: &[SurveyResponse], catalog: &PersonaCatalog) -> Rows {
    let mut metrics = BTreeSet::new();
    for r in responses {
        for (q, a) in &r.answers {
            if matches!(a, Answer::Likert(_)) {
                metrics.insert(q.clone());
            }
        }
    }
    let mut rows = Rows::new();
    for quadrant in Quadrant::ALL {
        let in_quadrant: Vec<&SurveyResponse> = responses
            .iter()
            .filter(|r| quadrant_of(catalog, &r.persona_id) == Some(quadrant))
            .collect();
        let total_votes = in_quadrant
            .iter()
            .flat_map(|r| r.answers.values())
            .filter(|a| matches!(a, Answer::Choice(c) if vote_style(c).is_some()))
            .count() as u64;
        for style in Style::ALL {
            for metric in &metrics {
                let mut ratings = Vec::new();
                for r in &in_quadrant {
                    if let Some(Answer::Likert(m)) = r.answers.get(metric) {
                        if let Some(v) = m.get(&style) {
                            ratings.push(i64::from(v.get()));
                        }
                    }
                }
                if !ratings.is_empty() {
                    let sum: i64 = ratings.iter().sum();
                    rows.insert(
                        (quadrant.as_str().into(), style.as_str().into(), metric.clone()),
                        (decimal_round(sum, ratings.len() as u64, 2), ratings.len() as u64),
                    );
                }
            }
            let votes = in_quadrant
                .iter()
                .flat_map(|r| r.answers.values())
                .filter(|a| matches!(a, Answer::Choice(c) if vote_style(c) == Some(style.as_str())))
                .count() as i64;
            if votes > 0 {
                rows.insert(
                    (quadrant.as_str().into(), style.as_str().into(), PREFERENCE_METRIC.into()),
                    (decimal_round(votes * 100, total_votes, 1), total_votes),
                );
            }
        }
    }
    rows
}

/// Runs the implementation and reads its aggregate CSV back into rows.
pub fn implementation(responses: &[SurveyResponse], catalog: &PersonaCatalog) -> Result<Rows, String> {
    let bytes = aggregate_csv(&aggregate(responses, catalog)).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut rows = Rows::new();
    for record in reader.records() {
        let r = record.map_err(|e| e.to_string())?;
        let n: u64 = r[4].parse().map_err(|_| format!("bad n in {r:?}"))?;
        let key = (r[0].to_string(), r[1].to_string(), r[2].to_string());
        if rows.insert(key, (r[3].to_string(), n)).is_some() {
            return Err(format!("duplicate row {r:?}"));
        }
    }
    Ok(rows)
}

fn unplaced_persona() -> PersonaConfig {
    PersonaConfig {
        persona_id: "unplaced".into(),
        display_name: "Unplaced".into(),
        role_description: "No quadrant.".into(),
        scenario: "Nowhere.".into(),
        opening_prompt: "Hello.".into(),
        system_prompt: "Be.".into(),
        quadrant: None,
        voice_id: "v".into(),
    }
}

/// One randomized response set over the shipped personas, a persona
/// without a quadrant and an unknown persona id.
pub fn random_set(seed: u64) -> (Vec<SurveyResponse>, PersonaCatalog) {
    let mut catalog = shipped_catalog();
    catalog.personas.push(unplaced_persona());
    let mut ids: Vec<String> = catalog.personas.iter().map(|p| p.persona_id.clone()).collect();
    ids.push("nobody".into());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = ["naturalness", "consistency", "fluidity", "warmth"];
    let choices = ["A", "B", "C", "c", " b ", "D", "none", ""];
    let count = rng.random_range(0..60);
    let mut responses = Vec::with_capacity(count);
    for i in 0..count {
        let mut answers = BTreeMap::new();
        for metric in metrics {
            if rng.random_bool(0.7) {
                let mut ratings = BTreeMap::new();
                for style in Style::ALL {
                    if rng.random_bool(0.6) {
                        ratings.insert(style, LikertValue::new(rng.random_range(-1..=1)).unwrap());
                    }
                }
                answers.insert(metric.to_string(), Answer::Likert(ratings));
            }
        }
        if rng.random_bool(0.8) {
            answers.insert("preference".into(), Answer::Choice(choices.choose(&mut rng).unwrap().to_string()));
        }
        if rng.random_bool(0.3) {
            answers.insert("second_choice".into(), Answer::Choice(choices.choose(&mut rng).unwrap().to_string()));
        }
        if rng.random_bool(0.5) {
            // A free-text answer that looks like a style must not count as a vote.
            answers.insert("justification".into(), Answer::Text("A".into()));
        }
        responses.push(SurveyResponse {
            participant_id: format!("p{}", i % 7),
            persona_id: ids.choose(&mut rng).unwrap().clone(),
            session_ids_compared: Vec::new(),
            answers,
            submitted_at: i as u64,
        });
    }
    (responses, catalog)
}

/// Compares implementation and oracle on `sets` randomized response sets.
pub fn check_random_sets(sets: u64) -> Result<(), String> {
    for seed in 0..sets {
        let (responses, catalog) = random_set(seed);
        let expected = brute_force(&responses, &catalog);
        let got = implementation(&responses, &catalog)?;
        if got != expected {
            let diff: Vec<_> = expected
                .iter()
                .filter(|(k, v)| got.get(*k) != Some(*v))
                .map(|(k, v)| format!("{k:?}: expected {v:?}, got {:?}", got.get(k)))
                .chain(got.keys().filter(|k| !expected.contains_key(*k)).map(|k| format!("{k:?}: unexpected")))
                .collect();
            return Err(format!("set {seed}: {}", diff.join("; ")));
        }
    }
    Ok(())
}

/// Printed cells per quadrant and style: naturalness, consistency,
/// fluidity means and the preference percentage.
pub const TABLE: [(&str, &str, [&str; 4]); 12] = [
    ("Q1", "A", ["0.20", "0.70", "0.50", "20.0"]),
    ("Q1", "B", ["0.60", "0.60", "0.70", "20.0"]),
    ("Q1", "C", ["0.30", "0.70", "0.60", "60.0"]),
    ("Q2", "A", ["0.50", "1.00", "0.70", "40.0"]),
    ("Q2", "B", ["0.60", "1.00", "0.70", "50.0"]),
    ("Q2", "C", ["0.30", "0.70", "0.60", "10.0"]),
    ("Q3", "A", ["0.50", "1.00", "0.90", "70.0"]),
    ("Q3", "B", ["0.30", "1.00", "0.70", "10.0"]),
    ("Q3", "C", ["0.30", "0.90", "0.70", "20.0"]),
    ("Q4", "A", ["0.50", "0.80", "0.60", "50.0"]),
    ("Q4", "B", ["0.67", "0.90", "0.70", "30.0"]),
    ("Q4", "C", ["0.30", "0.80", "0.60", "20.0"]),
];

pub const TABLE_METRICS: [&str; 3] = ["naturalness", "consistency", "fluidity"];

/// Ten responses per quadrant (two personas, five participants each).
pub const RESPONSES_PER_QUADRANT: usize = 10;

/// Smallest deviation from ten ratings that prints `value`: ten ratings
/// can only give multiples of 0.10, so e.g. 0.67 needs nine.
fn ratings_for(value: &str) -> (usize, usize) {
    for n in (1..=RESPONSES_PER_QUADRANT).rev() {
        for positives in 0..=n {
            if decimal_round(positives as i64, n as u64, 2) == value {
                return (n, positives);
            }
        }
    }
    panic!("no non-negative rating set prints {value}");
}

/// Responses that reproduce every cell of [`TABLE`].
pub fn table_responses(catalog: &PersonaCatalog) -> Vec<SurveyResponse> {
    let mut responses = Vec::new();
    for quadrant in Quadrant::ALL {
        let personas: Vec<&str> = catalog
            .personas
            .iter()
            .filter(|p| p.quadrant == Some(quadrant))
            .map(|p| p.persona_id.as_str())
            .collect();
        assert_eq!(personas.len(), 2, "{quadrant:?}");
        let mut block: Vec<BTreeMap<String, Answer>> = vec![BTreeMap::new(); RESPONSES_PER_QUADRANT];
        let mut next_voter = 0;
        for (_, style, cells) in TABLE.iter().filter(|(q, ..)| *q == quadrant.as_str()) {
            let style = Style::parse(style).unwrap();
            for (metric, value) in TABLE_METRICS.iter().zip(cells) {
                let (n, positives) = ratings_for(value);
                for (i, answers) in block.iter_mut().enumerate().take(n) {
                    let v = if i < positives { LikertValue::POSITIVE } else { LikertValue::NEUTRAL };
                    let entry = answers
                        .entry(metric.to_string())
                        .or_insert_with(|| Answer::Likert(BTreeMap::new()));
                    if let Answer::Likert(m) = entry {
                        m.insert(style, v);
                    }
                }
            }
            let votes: usize = cells[3].trim_end_matches(".0").parse::<usize>().unwrap() * RESPONSES_PER_QUADRANT / 100;
            for answers in &mut block[next_voter..next_voter + votes] {
                answers.insert("preference".into(), Answer::Choice(style.as_str().into()));
            }
            next_voter += votes;
        }
        assert_eq!(next_voter, RESPONSES_PER_QUADRANT, "{quadrant:?} votes");
        for (i, answers) in block.into_iter().enumerate() {
            responses.push(SurveyResponse {
                participant_id: format!("{}-p{}", quadrant.as_str(), i / 2),
                persona_id: personas[i % 2].to_string(),
                session_ids_compared: Vec::new(),
                answers,
                submitted_at: 0,
            });
        }
    }
    responses
}

/// Expected rows for [`table_responses`].
pub fn table_rows() -> Rows {
    let mut rows = Rows::new();
    for (q, style, cells) in TABLE {
        for (metric, value) in TABLE_METRICS.iter().zip(cells) {
            let (n, _) = ratings_for(value);
            rows.insert((q.into(), style.into(), metric.to_string()), (value.to_string(), n as u64));
        }
        rows.insert(
            (q.into(), style.into(), PREFERENCE_METRIC.into()),
            (cells[3].to_string(), RESPONSES_PER_QUADRANT as u64),
        );
    }
    rows
}

/// Aggregates the constructed responses and checks every printed cell,
/// naming the 0.60 mean and 60% preference cells explicitly.
pub fn check_table() -> Result<(), String> {
    let catalog = shipped_catalog();
    let responses = table_responses(&catalog);
    let got = implementation(&responses, &catalog)?;
    let expected = table_rows();
    if got != expected {
        return Err(format!("aggregate differs from the constructed table:\n{got:#?}"));
    }
    let cell = |q: &str, s: &str, m: &str| got.get(&(q.into(), s.into(), m.into())).cloned();
    if cell("Q1", "B", "naturalness") != Some(("0.60".into(), 10)) {
        return Err("Q1 B naturalness is not 0.60 over 10 ratings".into());
    }
    if cell("Q1", "C", PREFERENCE_METRIC) != Some(("60.0".into(), 10)) {
        return Err("Q1 C preference is not 60.0% of 10 votes".into());
    }
    Ok(())
}
