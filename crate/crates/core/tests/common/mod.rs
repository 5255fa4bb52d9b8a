#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenparse_autodiff::{Graph, ParamStore, Var};

use scenparse_core::bank::{Origin, ScenarioBank, ScenarioId};
use scenparse_core::dataset::Sample;
use scenparse_core::encoder::encode;
use scenparse_core::filler::{decode_logits, fuse_scenario_embeddings, loss_filling};
use scenparse_core::model::Model;
use scenparse_core::repr::ReprKind;
use scenparse_core::retrieval::{build_identity_mask, loss_retrieval, ContrastiveLayout};
use scenparse_core::synth::{generate_splits, SplitSizes, SyntheticData, SyntheticGrammar};
use scenparse_core::train::{initial_model, joint_loss, TrainConfig};
use scenparse_core::Result;
use scenparse_core::frame::{exact_match, exact_match_scenario, parse_frame, parse_scenario, serialize_frame, Utterance};
use scenparse_core::negatives::{heuristic_negatives, levenshtein};
use scenparse_core::repr::{render, OntologyRegistry};
use scenparse_core::synth::{generate_synthetic, CONFUSABLE_GRAMMAR, WEATHER_GRAMMAR};

/// A model small enough for finite differences and quick training runs.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        out_dim: 8,
        heads: 2,
        ffn: 12,
        max_positions: 48,
        batch_size: 8,
        epochs: 2,
        warmup_steps: 5,
        ..TrainConfig::default()
    }
}

pub fn confusable(train: usize, test: usize, seed: u64, holdout: f64) -> SyntheticData {
    let grammar = SyntheticGrammar::named_or_path("confusable").unwrap();
    let sizes = SplitSizes {
        train,
        eval: 0,
        test,
    };
    generate_splits(&grammar, &sizes, seed, holdout).unwrap()
}

pub fn bank_of(data: &SyntheticData) -> ScenarioBank {
    ScenarioBank::build(&[(Origin::Train, &data.train), (Origin::Test, &data.test)])
}

pub fn fresh_model(config: &TrainConfig, data: &SyntheticData, bank: &ScenarioBank) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    initial_model(config, &data.train, bank, data.registry.clone(), &mut rng).unwrap()
}

/// Graph inputs for one training batch under a fixed representation kind.
pub struct Batch {
    pub utterances: Vec<Vec<usize>>,
    pub layout: ContrastiveLayout,
    pub pool_tokens: Vec<Vec<usize>>,
    pub pool_vars: Vec<Vec<usize>>,
    pub spans: Vec<Vec<scenparse_core::frame::Span>>,
}

pub fn batch(
    model: &Model,
    samples: &[Sample],
    bank: &ScenarioBank,
    hard: &[Vec<ScenarioId>],
    identity_masking: bool,
    kind: ReprKind,
) -> Batch {
    let golds: Vec<ScenarioId> = samples.iter().map(|s| bank.id_of_frame(&s.frame).unwrap()).collect();
    let layout = build_identity_mask(&golds, hard, identity_masking);
    let rendered: Vec<_> = layout
        .pool
        .iter()
        .map(|&id| model.scenario_tokens(bank.scenario(id), kind))
        .collect();
    Batch {
        utterances: samples.iter().map(|s| model.utterance_ids(&s.utterance)).collect(),
        pool_tokens: rendered.iter().map(|r| r.ids.clone()).collect(),
        pool_vars: rendered.iter().map(|r| r.var_positions.clone()).collect(),
        spans: samples.iter().map(|s| s.frame.spans()).collect(),
        layout,
    }
}

pub struct Losses {
    pub retrieval: Var,
    pub filling: Var,
    pub joint: Var,
}

/// The training objective evaluated against an arbitrary parameter store.
pub fn losses(g: &mut Graph, store: &ParamStore, model: &Model, b: &Batch, beta: f64, alpha: f64) -> Result<Losses> {
    let u = encode(g, store, &model.utterance_encoder, &b.utterances)?;
    let s = encode(g, store, &model.scenario_encoder, &b.pool_tokens)?;
    let scores = g.matmul_nt(u.pooled, s.pooled)?;
    let retrieval = loss_retrieval(g, scores, &b.layout)?;
    let rows: Vec<Vec<usize>> = b.layout.positive.iter().map(|&c| b.pool_tokens[c].clone()).collect();
    let states: Vec<_> = b.layout.positive.iter().map(|&c| s.segments[c].clone()).collect();
    let vars: Vec<Vec<usize>> = b.layout.positive.iter().map(|&c| b.pool_vars[c].clone()).collect();
    let input = fuse_scenario_embeddings(
        g,
        store,
        &model.filler,
        model.config.scenario_fusion,
        &rows,
        Some((s.states, &states)),
    )?;
    let logits = decode_logits(g, store, &model.filler, &input, u.states, &u.segments, &vars)?;
    let filling = loss_filling(g, logits.as_ref(), &b.spans, alpha)?;
    let joint = joint_loss(g, retrieval, filling, beta)?;
    Ok(Losses {
        retrieval,
        filling,
        joint,
    })
}

pub type Check = std::result::Result<String, String>;

/// Every sample's frame survives parse, serialize, parse unchanged.
pub fn round_trip(samples: &[Sample]) -> std::result::Result<usize, String> {
    for s in samples {
        let text = serialize_frame(&s.frame, &s.utterance);
        let again = parse_frame(&text, &s.utterance).map_err(|e| format!("{text}: {e}"))?;
        if again != s.frame || serialize_frame(&again, &s.utterance) != text {
            return Err(format!("not a fixed point: {text}"));
        }
        let line = s.to_line();
        let reparsed = scenparse_core::dataset::parse_line(&line, 1).map_err(|e| e.to_string())?;
        if reparsed.utterance != s.utterance || reparsed.frame != s.frame {
            return Err(format!("dataset line changed: {line}"));
        }
    }
    Ok(samples.len())
}

/// Samples from both built-in grammars at the sizes the tools generate by default.
pub fn shipped_samples() -> Vec<Sample> {
    let mut all = Vec::new();
    for (name, text) in [("weather", WEATHER_GRAMMAR), ("confusable", CONFUSABLE_GRAMMAR)] {
        let g = SyntheticGrammar::from_toml(text).unwrap();
        if name == "confusable" {
            let d = generate_splits(&g, &SplitSizes { train: 5000, eval: 0, test: 500 }, 0, 0.0).unwrap();
            all.extend(d.train);
            all.extend(d.test);
        } else {
            all.extend(generate_synthetic(&g, 20, 0).unwrap());
        }
    }
    all.extend(scenparse_core::dataset::parse_dataset(TABLE_ONE).unwrap());
    all
}

pub const TABLE_ONE: &str = "\
what's the weather in seattle\t[IN:GET_WEATHER [SL:LOCATION seattle ] ]
how's the forecast in sf\t[IN:GET_WEATHER [SL:LOCATION sf ] ]
what's the weather in seattle tomorrow\t[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]
how's the forecast in sf at 8pm\t[IN:GET_WEATHER [SL:LOCATION sf ] [SL:DATE_TIME 8pm ] ]
";

/// (utterance, prediction, gold, EM, EM-S)
pub const METRIC_PAIRS: [(&str, &str, &str, bool, bool); 20] = [
    ("weather in seattle", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", true, true),
    ("weather in seattle", "[IN:GET_WEATHER [SL:LOCATION in seattle ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", false, true),
    ("weather in seattle", "[IN:GET_WEATHER [SL:DATE_TIME seattle ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", false, false),
    ("weather in seattle", "[IN:GET_WEATHER ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", false, false),
    ("weather in seattle tomorrow", "[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]", true, true),
    ("weather in seattle tomorrow", "[IN:GET_WEATHER [SL:LOCATION in seattle ] [SL:DATE_TIME tomorrow ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]", false, true),
    ("weather in seattle tomorrow", "[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", false, false),
    ("set alarm for 8am", "[IN:CREATE_ALARM [SL:DATE_TIME 8am ] ]", "[IN:CREATE_ALARM [SL:DATE_TIME for 8am ] ]", false, true),
    ("set alarm for 8am", "[IN:CREATE_TIMER [SL:DATE_TIME for 8am ] ]", "[IN:CREATE_ALARM [SL:DATE_TIME for 8am ] ]", false, false),
    ("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO [IN:CALL [SL:CONTACT mom ] ] ] ]", "[IN:CREATE_REMINDER [SL:TODO [IN:CALL [SL:CONTACT mom ] ] ] ]", true, true),
    ("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO call mom ] ]", "[IN:CREATE_REMINDER [SL:TODO [IN:CALL [SL:CONTACT mom ] ] ] ]", false, false),
    ("remind me to call mom", "[IN:CREATE_REMINDER [SL:TODO [IN:CALL [SL:CONTACT call mom ] ] ] ]", "[IN:CREATE_REMINDER [SL:TODO [IN:CALL [SL:CONTACT mom ] ] ] ]", false, true),
    ("play jazz", "[IN:PLAY_MUSIC [SL:MUSIC_GENRE jazz ] ]", "[IN:PLAY_MUSIC [SL:MUSIC_TYPE jazz ] ]", false, false),
    ("play jazz music", "[IN:PLAY_MUSIC [SL:MUSIC_GENRE jazz music ] ]", "[IN:PLAY_MUSIC [SL:MUSIC_GENRE jazz ] ]", false, true),
    ("stop", "[IN:STOP ]", "[IN:STOP ]", true, true),
    ("stop", "[IN:STOP ]", "[IN:PAUSE ]", false, false),
    ("is it hot", "[IN:UNSUPPORTED_WEATHER ]", "[IN:UNSUPPORTED_WEATHER ]", true, true),
    ("is it hot", "[IN:UNSUPPORTED_WEATHER ]", "[IN:GET_WEATHER ]", false, false),
    ("paris to paris", "[IN:GET_DIRECTIONS [SL:SOURCE paris ] [SL:DESTINATION to paris ] ]", "[IN:GET_DIRECTIONS [SL:SOURCE paris ] [SL:DESTINATION paris ] ]", false, true),
    ("weather in seattle", "[IN:GET_WEATHER   [SL:LOCATION  seattle ]  ]", "[IN:GET_WEATHER [SL:LOCATION seattle ] ]", true, true),
];

pub fn metric_pairs() -> Check {
    for (i, (utt, pred, gold, em, em_s)) in METRIC_PAIRS.iter().enumerate() {
        let u = Utterance::new(utt).map_err(|e| e.to_string())?;
        let p = parse_frame(pred, &u).map_err(|e| format!("pair {i} prediction: {e}"))?;
        let g = parse_frame(gold, &u).map_err(|e| format!("pair {i} gold: {e}"))?;
        let got = (exact_match(&p, &g, &u), exact_match_scenario(&p, &g));
        if got != (*em, *em_s) {
            return Err(format!("pair {i}: got {got:?}, expected {:?}", (em, em_s)));
        }
    }
    Ok(format!("{} pairs", METRIC_PAIRS.len()))
}

/// Full-matrix edit distance, written independently of the library version.
pub fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

pub fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    use rand::Rng;
    const ALPHABET: [char; 8] = ['a', 'b', 'c', ' ', '[', ']', 'é', 'x'];
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

pub fn levenshtein_pairs(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let a = random_string(&mut rng, 24);
        let b = random_string(&mut rng, 24);
        let (got, want) = (levenshtein(&a, &b), levenshtein_oracle(&a, &b));
        if got != want {
            return Err(format!("pair {i} ({a:?}, {b:?}): {got} vs {want}"));
        }
    }
    Ok(format!("{n} pairs"))
}

/// A bank of `n` distinct scenarios over three intents with up to three slots.
pub fn random_bank(n: usize, seed: u64) -> ScenarioBank {
    use rand::Rng;
    const INTENTS: [&str; 3] = ["IN:GET_WEATHER", "IN:PLAY_MUSIC", "IN:CREATE_ALARM"];
    const SLOTS: [&str; 5] = ["SL:LOCATION", "SL:DATE_TIME", "SL:MUSIC_GENRE", "SL:ARTIST_NAME", "SL:DURATION"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = ScenarioBank::default();
    while bank.len() < n {
        let intent = INTENTS[rng.random_range(0..INTENTS.len())];
        let k = rng.random_range(0..=3);
        let mut text = format!("[{intent} ");
        for v in 0..k {
            let slot = SLOTS[rng.random_range(0..SLOTS.len())];
            text.push_str(&format!("[{slot} x{} ] ", v + 1));
        }
        text.push(']');
        let s = parse_scenario(&text).unwrap();
        bank = bank.with_scenario(s, Origin::Train).0;
    }
    bank
}

pub fn heuristic_matches_exhaustive(bank: &ScenarioBank) -> Check {
    let mut compared = 0;
    for gold in bank.entries() {
        let g = &gold.scenario;
        let mut all: Vec<(usize, ScenarioId)> = bank
            .entries()
            .iter()
            .filter(|e| e.id != gold.id && e.scenario.top_intent() == g.top_intent())
            .map(|e| (levenshtein_oracle(g.canonical(), e.scenario.canonical()), e.id))
            .collect();
        all.sort();
        for n in [0, 1, 3, 5, bank.len()] {
            let want: Vec<ScenarioId> = all.iter().take(n).map(|&(_, id)| id).collect();
            let got = heuristic_negatives(g, bank, n);
            if got != want {
                return Err(format!("gold {} n={n}: {got:?} vs {want:?}", gold.id));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} queries over {} scenarios", bank.len()))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// The three hand-evaluated retrieval-loss cases.
pub fn retrieval_loss_examples() -> Check {
    let eval = |scores: Vec<f64>, rows: usize, golds: &[usize], hard: &[Vec<usize>]| {
        let layout = build_identity_mask(golds, hard, true);
        let cols = layout.pool.len();
        let mut g = Graph::new();
        let m = g.constant(scenparse_autodiff::Tensor::new(vec![rows, cols], scores).unwrap());
        let l = loss_retrieval(&mut g, m, &layout).unwrap();
        g.value(l).item()
    };
    let cases = [
        ("single row, no negatives", eval(vec![3.7], 1, &[0], &[vec![]]), 0.0),
        ("positive 1, negative 0", eval(vec![1.0, 0.0], 1, &[0], &[vec![1]]), (1.0 + (-1.0f64).exp()).ln()),
        ("two equal rows", eval(vec![0.5; 4], 2, &[0, 1], &[vec![], vec![]]), 2f64.ln()),
    ];
    for (name, got, want) in cases {
        if !close(got, want, 1e-12) {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok("3 cases within 1e-12".into())
}

/// Add-time-timer scenario with the curated descriptions and example values.
pub fn timer_fixture() -> (scenparse_core::frame::Scenario, OntologyRegistry) {
    let mut reg = OntologyRegistry::from_tsv(
        "IN:ADD_TIME_TIMER\tadd time to timer\nSL:MEASUREMENT_UNIT\tunit of measurement\n",
    )
    .unwrap();
    reg.examples.insert(
        "SL:MEASUREMENT_UNIT".into(),
        vec!["sec".into(), "min".into(), "hr".into()],
    );
    let s = parse_scenario("[IN:ADD_TIME_TIMER [SL:MEASUREMENT_UNIT x1 ] ]").unwrap();
    (s, reg)
}

pub const TIMER_RENDERS: [(ReprKind, &str); 7] = [
    (ReprKind::TypeOnly, "[ intent [ slot ] ]"),
    (ReprKind::AutomaticSpan, "[ add time timer [ measurement unit ] ]"),
    (ReprKind::AutomaticTypeSpan, "[ intent | add time timer [ slot | measurement unit ] ]"),
    (ReprKind::AutomaticTypeSpanExs, "[ intent | add time timer [ slot | measurement unit | sec / min / hr ] ]"),
    (ReprKind::CuratedSpan, "[ add time to timer [ unit of measurement ] ]"),
    (ReprKind::CuratedTypeSpan, "[ intent | add time to timer [ slot | unit of measurement ] ]"),
    (ReprKind::CuratedTypeSpanExs, "[ intent | add time to timer [ slot | unit of measurement | sec / min / hr ] ]"),
];

pub fn golden_renders() -> Check {
    let (s, reg) = timer_fixture();
    for (kind, want) in TIMER_RENDERS {
        let got = render(&s, kind, &reg);
        if got != want {
            return Err(format!("{kind}: {got:?} vs {want:?}"));
        }
    }
    Ok("7 kinds".into())
}
