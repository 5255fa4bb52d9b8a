//! The set of supported scenarios that retrieval ranks over.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, Sample};
use crate::error::{Error, Result};
use crate::frame::{parse_scenario, scenario_of, Frame, Scenario};

pub const DEFAULT_UNSUPPORTED_PREFIX: &str = "IN:UNSUPPORTED";

/// Split a scenario was first seen in; ordered `Train < Eval < Test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Train,
    Eval,
    Test,
}

pub type ScenarioId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub id: ScenarioId,
    pub scenario: Scenario,
    pub origin: Origin,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioBank {
    entries: Vec<BankEntry>,
    by_canonical: HashMap<String, ScenarioId>,
    intent_index: BTreeMap<String, Vec<ScenarioId>>,
}

#[derive(Serialize, Deserialize)]
struct BankFileEntry {
    id: ScenarioId,
    canonical: String,
    origin: Origin,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    scenarios: Vec<BankFileEntry>,
}

impl ScenarioBank {
    /// Deduplicates scenarios across datasets. Ids follow first appearance;
    /// each scenario keeps the earliest origin.
    pub fn build(datasets: &[(Origin, &[Sample])]) -> Self {
        let mut bank = ScenarioBank::default();
        for (origin, samples) in datasets {
            for s in samples.iter() {
                bank.insert(scenario_of(&s.frame), *origin);
            }
        }
        bank
    }

    pub fn build_from_files(files: &[(Origin, &Path)]) -> Result<Self> {
        let loaded: Vec<(Origin, Vec<Sample>)> = files
            .iter()
            .map(|(o, p)| Ok((*o, load_dataset(p)?)))
            .collect::<Result<_>>()?;
        let views: Vec<(Origin, &[Sample])> =
            loaded.iter().map(|(o, s)| (*o, s.as_slice())).collect();
        Ok(Self::build(&views))
    }

    fn insert(&mut self, scenario: Scenario, origin: Origin) -> ScenarioId {
        if let Some(&id) = self.by_canonical.get(scenario.canonical()) {
            let e = &mut self.entries[id];
            e.origin = e.origin.min(origin);
            return id;
        }
        let id = self.entries.len();
        self.by_canonical.insert(scenario.canonical().to_string(), id);
        self.intent_index
            .entry(scenario.top_intent().to_string())
            .or_default()
            .push(id);
        self.entries.push(BankEntry {
            id,
            scenario,
            origin,
        });
        id
    }

    /// New bank with `scenario` appended (or unchanged if already present).
    pub fn with_scenario(&self, scenario: Scenario, origin: Origin) -> (Self, ScenarioId) {
        let mut bank = self.clone();
        let id = bank.insert(scenario, origin);
        (bank, id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, id: ScenarioId) -> &BankEntry {
        &self.entries[id]
    }

    pub fn scenario(&self, id: ScenarioId) -> &Scenario {
        &self.entries[id].scenario
    }

    pub fn id_of(&self, scenario: &Scenario) -> Option<ScenarioId> {
        self.by_canonical.get(scenario.canonical()).copied()
    }

    pub fn id_of_frame(&self, frame: &Frame) -> Result<ScenarioId> {
        let s = scenario_of(frame);
        self.id_of(&s)
            .ok_or_else(|| Error::UnknownScenario(s.canonical().to_string()))
    }

    pub fn same_intent(&self, intent: &str) -> &[ScenarioId] {
        self.intent_index.get(intent).map_or(&[], Vec::as_slice)
    }

    pub fn intent_index(&self) -> &BTreeMap<String, Vec<ScenarioId>> {
        &self.intent_index
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BankFile {
            scenarios: self
                .entries
                .iter()
                .map(|e| BankFileEntry {
                    id: e.id,
                    canonical: e.scenario.canonical().to_string(),
                    origin: e.origin,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)?;
        let mut bank = ScenarioBank::default();
        for (i, e) in file.scenarios.into_iter().enumerate() {
            if e.id != i {
                return Err(Error::Config(format!(
                    "bank ids must be dense and ordered; entry {i} has id {}",
                    e.id
                )));
            }
            let scenario = parse_scenario(&e.canonical)?;
            if bank.by_canonical.contains_key(scenario.canonical()) {
                return Err(Error::Config(format!("duplicate scenario {}", e.canonical)));
            }
            bank.insert(scenario, e.origin);
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    Known,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    OutOfDomain,
}

/// Known iff the gold scenario was seen in training; out-of-domain iff the
/// top intent starts with `unsupported_prefix`.
pub fn partition_known_unknown(
    bank: &ScenarioBank,
    gold: &Frame,
    unsupported_prefix: &str,
) -> Result<(Knowledge, Domain)> {
    let id = bank.id_of_frame(gold)?;
    let knowledge = if bank.get(id).origin == Origin::Train {
        Knowledge::Known
    } else {
        Knowledge::Unknown
    };
    let domain = if gold.root.label.starts_with(unsupported_prefix) {
        Domain::OutOfDomain
    } else {
        Domain::InDomain
    };
    Ok((knowledge, domain))
}
