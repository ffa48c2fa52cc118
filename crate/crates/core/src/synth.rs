//! Seeded synthetic review/response corpus for exercising the pipeline
//! without real data.
//!
//! The grammar is built so the copy paths carry real signal: each (app,
//! issue) cell owns a solution token that appears in that cell's responses
//! and, for covered cells, in the app description, but never in reviews.
//! With the recommended vocabulary cap those tokens rank below every frame
//! word and stay out of the generation vocabulary, so emitting them
//! requires copying from the description or from retrieved responses.
//!
//! Expected effect per source ablation, by solution-token availability:
//! full (description or retrieval) > retrieval only (identified reviews,
//! ~70%) > description only (covered cells, 60%) > review only (never).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::corpus::{tokenize, RawRecord};

/// Below this the grid is too sparse for retrieval or splits to mean much.
pub const MIN_RECORDS: usize = 10;

const APPS: [&str; 8] = [
    "taskly", "notably", "fitgo", "chatload", "snapvault", "tunebird", "mapmate", "shopdrop",
];

/// Issue keyword plus review phrasings; every phrasing contains the keyword
/// so retrieval and attention can anchor on it without lemmatization.
const ISSUES: [(&str, [&str; 3]); 5] = [
    (
        "crash",
        [
            "crash on startup every time",
            "constant crash after the update",
            "another crash when i open it",
        ],
    ),
    (
        "battery",
        [
            "battery drain is terrible",
            "battery usage way too high",
            "battery gone before lunch",
        ],
    ),
    (
        "ads",
        [
            "ads cover the whole screen",
            "too many ads between tasks",
            "popup ads keep interrupting",
        ],
    ),
    (
        "login",
        [
            "login fails with my account",
            "cannot login after reset",
            "login loop never ends",
        ],
    ),
    (
        "sync",
        [
            "sync never finishes",
            "data sync drops my changes",
            "sync conflicts erase my notes",
        ],
    ),
];

/// Each issue's covered-cell count: 3 of 5 per app (60% coverage).
const COVERED_PER_APP: usize = 3;
const ANONYMOUS_RATE: f64 = 0.3;
/// Every 20th record carries a unique ticket code in response and
/// description, guaranteeing target tokens with corpus frequency <= 2.
const TICKET_EVERY: usize = 20;

/// Padding words for reviews; pool membership also supplies the few frame
/// words that only descriptions would otherwise use ("with", "fix",
/// "ticket"), keeping every non-solution token frequent.
const FILLERS: [&str; 60] = [
    "with", "fix", "ticket", "really", "honestly", "quite", "annoying", "frustrating",
    "lately", "today", "again", "still", "always", "happens", "daily", "version",
    "latest", "phone", "tablet", "slow", "broken", "useless", "unhappy", "angry",
    "disappointed", "terrible", "awful", "bad", "worse", "worst", "problem", "issue",
    "bug", "glitch", "forever", "minutes", "hours", "restarting", "reinstalled",
    "twice", "often", "sometimes", "everywhere", "nothing", "works", "anymore",
    "support", "replied", "waiting", "weeks", "months", "paid", "premium", "free",
    "upgrade", "downgrade", "old", "new", "missing", "gone",
];

fn review_text(
    app: usize,
    issue: usize,
    variant: usize,
    anonymous: bool,
    fillers: [&str; 3],
) -> String {
    let prefix = if anonymous { "this app" } else { APPS[app] };
    format!(
        "{prefix} {} {} {} {}",
        ISSUES[issue].1[variant],
        fillers[0],
        fillers[1],
        fillers[2]
    )
}

fn response_text(app: usize, issue: usize) -> String {
    let kw = ISSUES[issue].0;
    format!(
        "sorry about the {kw} trouble please try {} for help then update and tell us more",
        solution_token(app, issue)
    )
}

fn description_text(app: usize, covered: &[usize]) -> String {
    let mut text = format!("{} help with the fix for", APPS[app]);
    for (pos, &issue) in covered.iter().enumerate() {
        if pos > 0 {
            text.push_str(" and");
        }
        text.push(' ');
        text.push_str(ISSUES[issue].0);
        text.push(' ');
        text.push_str(&solution_token(app, issue));
    }
    text
}

/// Cell-unique remedy word; opaque to the model (single alphanumeric
/// token), readable when debugging.
fn solution_token(app: usize, issue: usize) -> String {
    format!("fix{}{}", APPS[app], ISSUES[issue].0)
}

fn ticket_code(record: usize) -> String {
    format!("tkt{record:06}")
}

/// Errors raised by the synthetic generator.
#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("need at least {min} records, got {n}")]
    TooSmall { n: usize, min: usize },
}

/// Generates `n` review/response/description records, deterministic in
/// `seed`.
pub fn generate(n: usize, seed: u64) -> Result<Vec<RawRecord>, SynthError> {
    if n < MIN_RECORDS {
        return Err(SynthError::TooSmall { n, min: MIN_RECORDS });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coverage: Vec<Vec<usize>> = (0..APPS.len())
        .map(|_| {
            let mut issues: Vec<usize> = (0..ISSUES.len()).collect();
            issues.shuffle(&mut rng);
            issues.truncate(COVERED_PER_APP);
            issues.sort_unstable();
            issues
        })
        .collect();
    let descriptions: Vec<String> = (0..APPS.len())
        .map(|app| description_text(app, &coverage[app]))
        .collect();

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let app = rng.gen_range(0..APPS.len());
        let issue = rng.gen_range(0..ISSUES.len());
        let variant = rng.gen_range(0..3);
        let anonymous = rng.gen::<f64>() < ANONYMOUS_RATE;
        let filler_at = |j: usize| FILLERS[(i * 3 + j + seed as usize) % FILLERS.len()];
        let fillers = [filler_at(0), filler_at(1), filler_at(2)];

        let review = review_text(app, issue, variant, anonymous, fillers);
        let mut response = response_text(app, issue);
        let mut description = descriptions[app].clone();
        if i % TICKET_EVERY == 0 {
            let suffix = format!(" and the ticket {}", ticket_code(i));
            response.push_str(&suffix);
            description.push_str(&suffix);
        }
        records.push(RawRecord {
            app_id: APPS[app].to_owned(),
            review,
            response,
            description,
        });
    }
    Ok(records)
}

/// Every token the grammar can emit except solution tokens and ticket
/// codes. A vocabulary capped at this size admits exactly the frame words
/// at scale, leaving solution tokens reachable only through copying.
fn frame_tokens() -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    let mut add = |text: &str| set.extend(tokenize(text));
    for app in APPS {
        add(app);
    }
    add("this app");
    for (kw, variants) in ISSUES {
        add(kw);
        for v in variants {
            add(v);
        }
    }
    add("sorry about the trouble please try for help then update and tell us more");
    add("help with the fix for and");
    add("and the ticket");
    for f in FILLERS {
        add(f);
    }
    set
}

/// Vocabulary cap that excludes solution and ticket tokens at scale: one
/// slot per frame word, none to spare.
pub fn recommended_vocab_cap() -> usize {
    frame_tokens().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use std::collections::HashMap;

    #[test]
    fn small_and_minimum_counts() {
        assert!(matches!(
            generate(9, 1),
            Err(SynthError::TooSmall { n: 9, min: 10 })
        ));
        assert_eq!(generate(10, 1).unwrap().len(), 10);
        assert_eq!(generate(137, 1).unwrap().len(), 137);
    }

    #[test]
    fn deterministic_per_seed_and_distinct_across_seeds() {
        assert_eq!(generate(50, 7).unwrap(), generate(50, 7).unwrap());
        assert_ne!(generate(50, 7).unwrap(), generate(50, 8).unwrap());
    }

    fn corpus_counts(records: &[RawRecord]) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for r in records {
            for field in [&r.review, &r.response, &r.description] {
                for t in tokenize(field) {
                    *counts.entry(t).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn rare_target_tokens_exist() {
        let records = generate(100, 3).unwrap();
        let counts = corpus_counts(&records);
        let rare_targets: Vec<&RawRecord> = records
            .iter()
            .filter(|r| tokenize(&r.response).iter().any(|t| counts[t] <= 2))
            .collect();
        assert!(!rare_targets.is_empty());
        // Ticket codes sit in exactly one response and one description.
        assert_eq!(counts["tkt000000"], 2);
        let r0 = &records[0];
        assert!(r0.response.contains("tkt000000"));
        assert!(r0.description.contains("tkt000000"));
    }

    #[test]
    fn responses_carry_the_cell_solution_and_issue_keyword() {
        let records = generate(200, 5).unwrap();
        for r in &records {
            let tokens = tokenize(&r.response);
            let kw = ISSUES
                .iter()
                .map(|(kw, _)| *kw)
                .find(|kw| tokens.iter().any(|t| t == kw))
                .expect("response names its issue");
            let issue = ISSUES.iter().position(|(k, _)| *k == kw).unwrap();
            let app = APPS.iter().position(|a| *a == r.app_id).unwrap();
            assert!(tokens.contains(&solution_token(app, issue)));
            assert!(tokenize(&r.review).iter().any(|t| t == kw));
        }
    }

    #[test]
    fn reviews_never_leak_solution_tokens() {
        let records = generate(300, 11).unwrap();
        for r in &records {
            for t in tokenize(&r.review) {
                assert!(!t.starts_with("fix") || t == "fix", "review leaks {t}");
            }
        }
    }

    #[test]
    fn descriptions_cover_three_issues_per_app() {
        let records = generate(400, 2).unwrap();
        for r in &records {
            let app = APPS.iter().position(|a| *a == r.app_id).unwrap();
            let covered: Vec<usize> = (0..ISSUES.len())
                .filter(|&i| r.description.contains(&solution_token(app, i)))
                .collect();
            assert_eq!(covered.len(), COVERED_PER_APP, "app {}", r.app_id);
            // Description starts with the app token so it is copyable.
            assert!(r.description.starts_with(APPS[app]));
        }
    }

    #[test]
    fn anonymous_reviews_hide_the_app_token() {
        let records = generate(500, 9).unwrap();
        let (mut anon, mut named) = (0usize, 0usize);
        for r in &records {
            if r.review.starts_with("this app") {
                anon += 1;
                assert!(!tokenize(&r.review).contains(&r.app_id));
            } else {
                named += 1;
                assert!(r.review.starts_with(&r.app_id));
            }
        }
        // Both populations exist; anonymity is the minority case.
        assert!(anon > 50 && named > 250, "anon {anon} named {named}");
    }

    #[test]
    fn capped_vocab_excludes_solution_tokens_but_keeps_frame_words() {
        let records = generate(1000, 4).unwrap();
        let vocab = Vocabulary::build(&records, recommended_vocab_cap()).unwrap();
        for app in 0..APPS.len() {
            for issue in 0..ISSUES.len() {
                assert!(
                    vocab.id(&solution_token(app, issue)).is_none(),
                    "{} entered the vocab",
                    solution_token(app, issue)
                );
            }
        }
        assert!(vocab.id("tkt000000").is_none());
        for word in ["crash", "battery", "ads", "login", "sync", "please", "taskly", "this"] {
            assert!(vocab.id(word).is_some(), "{word} missing from vocab");
        }
    }
}
