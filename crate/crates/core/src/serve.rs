//! JSON-lines inference service over standard streams or TCP.
//!
//! Requests are one JSON object per line:
//! `{"utterance": "...", "n": 3}` returns a `ParseResult`;
//! `{"reload_bank": "bank.json", "index": "index.json"}` swaps the bank and
//! index (the index is rebuilt when omitted). Failures come back as
//! `{"error": {"kind": ..., "message": ...}}` on the same line.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::thread;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::bank::ScenarioBank;
use crate::error::{Error, Result};
use crate::eval::{ParseResult, Parser};
use crate::model::Model;
use crate::retrieval::{build_index, ScenarioIndex};

pub const DEFAULT_TOP_N: usize = 3;

/// Bank and index that are always swapped together.
pub struct Snapshot {
    pub bank: ScenarioBank,
    pub index: ScenarioIndex,
}

pub struct Service {
    model: Arc<Model>,
    model_hash: String,
    snapshot: RwLock<Arc<Snapshot>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParseRequest {
    utterance: String,
    #[serde(default)]
    n: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReloadRequest {
    reload_bank: String,
    #[serde(default)]
    index: Option<String>,
}

pub fn error_json(e: &Error) -> Value {
    json!({"error": {"kind": e.kind(), "message": e.to_string()}})
}

impl Service {
    pub fn new(model: Arc<Model>, bank: ScenarioBank, index: ScenarioIndex, allow_stale: bool) -> Result<Self> {
        let model_hash = model.hash()?;
        Parser::new(&model, &index, &bank, allow_stale)?;
        Ok(Self {
            model,
            model_hash,
            snapshot: RwLock::new(Arc::new(Snapshot { bank, index })),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn parse(&self, utterance: &str, n: usize) -> Result<ParseResult> {
        let snap = self.snapshot();
        let parser = Parser {
            model: &self.model,
            index: &snap.index,
            bank: &snap.bank,
        };
        parser.parse_one(utterance, n)
    }

    /// Replaces bank and index. A supplied index must match the model and
    /// the new bank; nothing changes on error.
    pub fn swap(&self, bank: ScenarioBank, index: Option<ScenarioIndex>) -> Result<usize> {
        let index = match index {
            Some(ix) => ix,
            None => build_index(&self.model, &bank, self.snapshot().index.repr_kind)?,
        };
        index.check_fresh(&self.model_hash, false)?;
        index.check_bank(&bank)?;
        let size = bank.len();
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(Snapshot { bank, index });
        log::info!("bank swapped: {size} scenarios");
        Ok(size)
    }

    pub fn reload_bank(&self, bank_path: &Path, index_path: Option<&Path>) -> Result<usize> {
        let bank = ScenarioBank::load(bank_path)?;
        let index = index_path.map(ScenarioIndex::load).transpose()?;
        self.swap(bank, index)
    }

    fn dispatch(&self, line: &str) -> Result<Value> {
        let value: Value = serde_json::from_str(line)?;
        if value.get("reload_bank").is_some() {
            let req: ReloadRequest = serde_json::from_value(value)?;
            let size = self.reload_bank(Path::new(&req.reload_bank), req.index.as_deref().map(Path::new))?;
            return Ok(json!({"reloaded": true, "scenarios": size}));
        }
        let req: ParseRequest = serde_json::from_value(value)?;
        let result = self.parse(&req.utterance, req.n.unwrap_or(DEFAULT_TOP_N))?;
        Ok(serde_json::to_value(result)?)
    }

    /// One request line in, one response line out (without newline).
    pub fn handle_line(&self, line: &str) -> String {
        let v = self.dispatch(line).unwrap_or_else(|e| error_json(&e));
        v.to_string()
    }

    /// Serves until `input` reaches end of stream. Blank lines are skipped.
    pub fn serve_lines<R: BufRead, W: Write>(&self, input: R, mut output: W) -> Result<()> {
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("reading request", e))?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle_line(&line)).map_err(|e| Error::io("writing response", e))?;
            output.flush().map_err(|e| Error::io("writing response", e))?;
        }
        Ok(())
    }

    fn serve_connection(&self, stream: TcpStream) -> Result<()> {
        let reader = BufReader::new(stream.try_clone().map_err(|e| Error::io("tcp", e))?);
        self.serve_lines(reader, stream)
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        for stream in listener.incoming() {
            let stream = stream.map_err(|e| Error::io("accept", e))?;
            let service = Arc::clone(&self);
            thread::spawn(move || {
                if let Err(e) = service.serve_connection(stream) {
                    log::warn!("connection closed: {e}");
                }
            });
        }
        Ok(())
    }
}
