//! Template grammar that generates labeled utterances for training and tests.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::frame::{parse_frame, parse_scenario, serialize_frame, Frame, Scenario, Span, Utterance};
use crate::repr::{automatic_span, OntologyRegistry};

pub const WEATHER_GRAMMAR: &str = include_str!("../grammars/weather.toml");
pub const CONFUSABLE_GRAMMAR: &str = include_str!("../grammars/confusable.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub scenario: String,
    /// Phrases with `{x1}`, `{x2}`, ... standing for the scenario's variables.
    pub carriers: Vec<String>,
    /// May be withheld from training when building a known/unknown split.
    #[serde(default)]
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGrammar {
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub noise_words: Vec<String>,
    pub lexicons: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub descriptions: BTreeMap<String, String>,
    pub scenarios: Vec<TemplateSpec>,
}

#[derive(Debug, Clone)]
enum Piece {
    Word(String),
    Var(usize),
}

#[derive(Debug, Clone)]
struct Template {
    scenario: Scenario,
    slot_labels: Vec<String>,
    carriers: Vec<Vec<Piece>>,
}

impl SyntheticGrammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text)?;
        g.compile()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    /// `weather`, `confusable`, or a path to a TOML grammar.
    pub fn named_or_path(name: &str) -> Result<Self> {
        match name {
            "weather" => Self::from_toml(WEATHER_GRAMMAR),
            "confusable" => Self::from_toml(CONFUSABLE_GRAMMAR),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        self.scenarios
            .iter()
            .map(|t| Ok(parse_scenario(&t.scenario)?))
            .collect()
    }

    fn compile(&self) -> Result<Vec<Template>> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Grammar("noise_rate must lie in [0, 1]".into()));
        }
        if self.noise_rate > 0.0 && self.noise_words.is_empty() {
            return Err(Error::Grammar("noise_rate > 0 without noise_words".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Grammar("grammar has no scenarios".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.scenarios.len());
        for spec in &self.scenarios {
            let scenario = parse_scenario(&spec.scenario)?;
            if !seen.insert(scenario.canonical().to_string()) {
                return Err(Error::Grammar(format!("duplicate scenario {}", spec.scenario)));
            }
            let slot_labels: Vec<String> =
                scenario.leaf_slot_labels().into_iter().map(String::from).collect();
            for label in &slot_labels {
                let lex = self.lexicons.get(label).map_or(&[][..], Vec::as_slice);
                if lex.is_empty() || lex.iter().any(|v| v.split_whitespace().next().is_none()) {
                    return Err(Error::Grammar(format!("empty lexicon for {label}")));
                }
            }
            if spec.carriers.is_empty() {
                return Err(Error::Grammar(format!("no carriers for {}", spec.scenario)));
            }
            let carriers = spec
                .carriers
                .iter()
                .map(|c| parse_carrier(c, slot_labels.len()))
                .collect::<Result<_>>()?;
            out.push(Template {
                scenario,
                slot_labels,
                carriers,
            });
        }
        Ok(out)
    }

    /// Curated descriptions from the grammar, automatic ones for the rest.
    pub fn registry(&self) -> Result<OntologyRegistry> {
        let mut reg = OntologyRegistry::new();
        for s in self.scenarios()? {
            for label in s.labels() {
                let desc = match self.descriptions.get(label) {
                    Some(d) => d.clone(),
                    None => automatic_span(label)?,
                };
                reg.insert_description(label, &desc)?;
            }
        }
        Ok(reg)
    }
}

fn parse_carrier(text: &str, n_vars: usize) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut used = vec![false; n_vars];
    for tok in text.split_whitespace() {
        let var = tok
            .strip_prefix("{x")
            .and_then(|t| t.strip_suffix('}'))
            .map(|d| d.parse::<usize>());
        match var {
            Some(Ok(i)) if (1..=n_vars).contains(&i) && !used[i - 1] => {
                used[i - 1] = true;
                pieces.push(Piece::Var(i - 1));
            }
            Some(_) => {
                return Err(Error::Grammar(format!("bad placeholder `{tok}` in `{text}`")));
            }
            None => pieces.push(Piece::Word(tok.to_lowercase())),
        }
    }
    if used.iter().any(|u| !u) {
        return Err(Error::Grammar(format!(
            "carrier `{text}` does not use all {n_vars} variables"
        )));
    }
    Ok(pieces)
}

/// One sample from `template`, or `None` when the rendered frame would not
/// survive a parse round trip (a value repeated earlier in the utterance).
fn realize(
    grammar: &SyntheticGrammar,
    template: &Template,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Sample>> {
    let carrier = &template.carriers[rng.random_range(0..template.carriers.len())];
    let values: Vec<&String> = template
        .slot_labels
        .iter()
        .map(|l| {
            let lex = &grammar.lexicons[l];
            &lex[rng.random_range(0..lex.len())]
        })
        .collect();
    let noise = if grammar.noise_rate > 0.0 && rng.random_bool(grammar.noise_rate) {
        let w = &grammar.noise_words[rng.random_range(0..grammar.noise_words.len())];
        Some((rng.random_range(0..=carrier.len()), w.clone()))
    } else {
        None
    };
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = vec![Span::new(0, 0); values.len()];
    for (p, piece) in carrier.iter().enumerate() {
        if let Some((at, w)) = &noise {
            if *at == p {
                tokens.push(w.clone());
            }
        }
        match piece {
            Piece::Word(w) => tokens.push(w.clone()),
            Piece::Var(i) => {
                let start = tokens.len();
                tokens.extend(values[*i].split_whitespace().map(str::to_lowercase));
                spans[*i] = Span::new(start, tokens.len());
            }
        }
    }
    if let Some((at, w)) = &noise {
        if *at == carrier.len() {
            tokens.push(w.clone());
        }
    }
    let utterance = Utterance::new(&tokens.join(" "))?;
    let frame = Frame {
        root: template.scenario.root().map_leaves(&mut |v| spans[v.0 - 1]),
    };
    frame.validate(&utterance)?;
    let reparsed = parse_frame(&serialize_frame(&frame, &utterance), &utterance)?;
    if reparsed != frame {
        return Ok(None);
    }
    Ok(Some(Sample::new(utterance, frame)))
}

const ATTEMPTS_PER_TEMPLATE: usize = 200;

/// `n` samples with utterances absent from `seen` (which is extended).
/// Templates are drawn uniformly; one that cannot produce a new utterance
/// within a bounded number of attempts is retired.
fn generate_from(
    grammar: &SyntheticGrammar,
    templates: &[&Template],
    n: usize,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
) -> Result<Vec<Sample>> {
    let mut live: Vec<&Template> = templates.to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if live.is_empty() {
            return Err(Error::Grammar(format!(
                "grammar exhausted after {} unique utterances",
                out.len()
            )));
        }
        let t = rng.random_range(0..live.len());
        let mut produced = false;
        for _ in 0..ATTEMPTS_PER_TEMPLATE {
            if let Some(s) = realize(grammar, live[t], rng)? {
                if seen.insert(s.utterance.text()) {
                    out.push(s);
                    produced = true;
                    break;
                }
            }
        }
        if !produced {
            live.remove(t);
        }
    }
    Ok(out)
}

/// Samples with globally unique utterances.
pub fn generate_synthetic(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let templates = grammar.compile()?;
    let refs: Vec<&Template> = templates.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_from(grammar, &refs, n, &mut rng, &mut HashSet::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub test: Vec<Sample>,
    pub registry: OntologyRegistry,
    /// Canonical strings of scenarios withheld from train and eval.
    pub held_out: Vec<String>,
}

/// Train/eval/test splits with no utterance shared between splits.
///
/// With `holdout_fraction > 0`, that share of all scenarios (at least one,
/// chosen among templates marked `holdout`) appears only in the test split.
pub fn generate_splits(
    grammar: &SyntheticGrammar,
    sizes: &SplitSizes,
    seed: u64,
    holdout_fraction: f64,
) -> Result<SyntheticData> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Grammar("holdout fraction must lie in [0, 1)".into()));
    }
    let templates = grammar.compile()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; templates.len()];
    if holdout_fraction > 0.0 {
        let want = ((holdout_fraction * templates.len() as f64).round() as usize).max(1);
        let mut eligible: Vec<usize> = (0..templates.len())
            .filter(|&i| grammar.scenarios[i].holdout)
            .collect();
        if eligible.len() < want {
            return Err(Error::Grammar(format!(
                "{want} scenarios to hold out but only {} are marked holdout",
                eligible.len()
            )));
        }
        eligible.shuffle(&mut rng);
        for &i in &eligible[..want] {
            held[i] = true;
        }
    }
    let all: Vec<&Template> = templates.iter().collect();
    let seen_in_train: Vec<&Template> = templates
        .iter()
        .zip(&held)
        .filter(|(_, h)| !**h)
        .map(|(t, _)| t)
        .collect();
    let mut seen = HashSet::new();
    let test = generate_from(grammar, &all, sizes.test, &mut rng, &mut seen)?;
    let mut rest = generate_from(
        grammar,
        &seen_in_train,
        sizes.train + sizes.eval,
        &mut rng,
        &mut seen,
    )?;
    let eval = rest.split_off(sizes.train);
    Ok(SyntheticData {
        train: rest,
        eval,
        test,
        registry: grammar.registry()?,
        held_out: templates
            .iter()
            .zip(&held)
            .filter(|(_, h)| **h)
            .map(|(t, _)| t.scenario.canonical().to_string())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::scenario_of;

    #[test]
    fn builtin_grammars_compile() {
        let g = SyntheticGrammar::from_toml(CONFUSABLE_GRAMMAR).unwrap();
        assert!(g.scenarios.len() >= 30);
        SyntheticGrammar::from_toml(WEATHER_GRAMMAR).unwrap();
    }

    #[test]
    fn weather_grammar_resembles_the_classic_rows() {
        let g = SyntheticGrammar::from_toml(WEATHER_GRAMMAR).unwrap();
        let samples = generate_synthetic(&g, 4, 1).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.frame.root.label, "IN:GET_WEATHER");
            let t = s.utterance.text();
            assert!(t.starts_with("what's the weather in") || t.starts_with("how's the forecast in"));
        }
    }

    #[test]
    fn samples_parse_and_land_in_the_grammar() {
        let g = SyntheticGrammar::from_toml(CONFUSABLE_GRAMMAR).unwrap();
        let canon: HashSet<String> = g
            .scenarios()
            .unwrap()
            .iter()
            .map(|s| s.canonical().to_string())
            .collect();
        for s in generate_synthetic(&g, 400, 9).unwrap() {
            let line = s.to_line();
            let back = crate::dataset::parse_line(&line, 1).unwrap();
            assert_eq!(back.frame, s.frame);
            assert!(canon.contains(scenario_of(&s.frame).canonical()));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let g = SyntheticGrammar::from_toml(CONFUSABLE_GRAMMAR).unwrap();
        let a = generate_synthetic(&g, 50, 3).unwrap();
        let b = generate_synthetic(&g, 50, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint_and_holdout_is_test_only() {
        let g = SyntheticGrammar::from_toml(CONFUSABLE_GRAMMAR).unwrap();
        let sizes = SplitSizes {
            train: 300,
            eval: 30,
            test: 100,
        };
        let d = generate_splits(&g, &sizes, 5, 0.1).unwrap();
        assert_eq!(d.held_out.len(), 4);
        let train_utts: HashSet<String> = d.train.iter().map(|s| s.utterance.text()).collect();
        assert!(d.test.iter().all(|s| !train_utts.contains(&s.utterance.text())));
        let held: HashSet<&String> = d.held_out.iter().collect();
        for s in d.train.iter().chain(&d.eval) {
            assert!(!held.contains(&scenario_of(&s.frame).canonical().to_string()));
        }
        assert!(d
            .test
            .iter()
            .any(|s| held.contains(&scenario_of(&s.frame).canonical().to_string())));
    }

    #[test]
    fn empty_lexicon_is_rejected() {
        let text = WEATHER_GRAMMAR.replace(
            "\"SL:DATE_TIME\" = [\"tomorrow\", \"tonight\", \"at 8pm\", \"this weekend\"]",
            "\"SL:DATE_TIME\" = []",
        );
        assert!(matches!(SyntheticGrammar::from_toml(&text), Err(Error::Grammar(_))));
    }
}
