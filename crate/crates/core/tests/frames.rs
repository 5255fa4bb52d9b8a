//! Bracketed frames: round-trips over generated corpora and metric fixtures.

mod common;

use proptest::prelude::*;
use scenparse_core::frame::{exact_match, exact_match_scenario, parse_frame, scenario_of, serialize_frame, Utterance};

#[test]
fn generated_corpora_round_trip() {
    let samples = common::shipped_samples();
    assert!(samples.len() > 5000);
    assert_eq!(common::round_trip(&samples).unwrap(), samples.len());
}

#[test]
fn metric_fixtures() {
    common::metric_pairs().unwrap();
}

const LABELS: [&str; 4] = ["SL:LOCATION", "SL:DATE_TIME", "SL:CONTACT", "SL:TODO"];

/// Frame text over `words` where each leaf slot covers a contiguous run of
/// words in utterance order, optionally nested under an inner intent.
fn frame_strategy() -> impl Strategy<Value = (String, String)> {
    (
        prop::collection::vec("[a-z]{1,6}", 1..10),
        prop::collection::vec((0usize..4, 1usize..3, any::<bool>()), 0..4),
    )
        .prop_map(|(words, slots)| {
            let mut out = String::from("[IN:ROOT ");
            let mut pos = 0;
            for (label, len, nested) in slots {
                if pos >= words.len() {
                    break;
                }
                let end = (pos + len).min(words.len());
                let text = words[pos..end].join(" ");
                if nested {
                    out.push_str(&format!("[SL:TODO [IN:INNER [{} {text} ] ] ] ", LABELS[label]));
                } else {
                    out.push_str(&format!("[{} {text} ] ", LABELS[label]));
                }
                pos = end;
            }
            out.push(']');
            (words.join(" "), out)
        })
}

proptest! {
    #[test]
    fn serialize_is_a_fixed_point((utt, text) in frame_strategy()) {
        let u = Utterance::new(&utt).unwrap();
        let f = parse_frame(&text, &u).unwrap();
        let s = serialize_frame(&f, &u);
        let again = parse_frame(&s, &u).unwrap();
        prop_assert_eq!(&again, &f);
        prop_assert_eq!(serialize_frame(&again, &u), s);
        prop_assert!(exact_match(&f, &again, &u));
        prop_assert!(exact_match_scenario(&f, &again));
    }

    #[test]
    fn exact_match_implies_scenario_match(
        (utt, a) in frame_strategy(),
        (_, b) in frame_strategy(),
    ) {
        let u = Utterance::new(&utt).unwrap();
        let fa = parse_frame(&a, &u).unwrap();
        if let Ok(fb) = parse_frame(&b, &u) {
            prop_assert!(!exact_match(&fa, &fb, &u) || exact_match_scenario(&fa, &fb));
            prop_assert_eq!(exact_match_scenario(&fa, &fb), scenario_of(&fa) == scenario_of(&fb));
        }
    }
}
