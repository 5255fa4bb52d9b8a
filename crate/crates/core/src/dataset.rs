//! `utterance<TAB>frame` sample files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::{parse_frame, scenario_of, serialize_frame, Frame, Scenario, Utterance};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub utterance: Utterance,
    pub frame: Frame,
    /// 1-based line number in the source file (0 for generated samples).
    pub line: usize,
}

impl Sample {
    pub fn new(utterance: Utterance, frame: Frame) -> Self {
        Self {
            utterance,
            frame,
            line: 0,
        }
    }

    pub fn scenario(&self) -> Scenario {
        scenario_of(&self.frame)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}",
            self.utterance.text(),
            serialize_frame(&self.frame, &self.utterance)
        )
    }
}

pub fn parse_line(line: &str, line_no: usize) -> Result<Sample> {
    let (utt, frame) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
        line: line_no,
        reason: "expected `utterance<TAB>frame`".into(),
    })?;
    let utterance = Utterance::new(utt).map_err(|e| Error::MalformedLine {
        line: line_no,
        reason: e.to_string(),
    })?;
    let frame = parse_frame(frame, &utterance)?;
    Ok(Sample {
        utterance,
        frame,
        line: line_no,
    })
}

pub fn parse_dataset(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_line(l, i + 1).map_err(|e| Error::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
