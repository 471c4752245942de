use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rayon::prelude::*;

use crate::corpus::LangId;
use crate::error::{Error, Result};

/// A machine translation system used to build synthetic triplets and
/// external translations. Must be deterministic within a run.
pub trait ExternalTranslator: Send + Sync {
    fn supports(&self, from: &LangId, to: &LangId) -> bool;

    fn translate(&self, sentence: &[String], from: &LangId, to: &LangId) -> Result<Vec<String>>;

    /// Translates many sentences. Results are in input order.
    fn translate_batch(&self, sentences: &[Vec<String>], from: &LangId, to: &LangId) -> Vec<Result<Vec<String>>> {
        sentences
            .par_iter()
            .map(|s| self.translate(s, from, to))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Table {
    Identity,
    Map(HashMap<String, String>),
}

/// Token-substitution translator between toy languages. A token without a
/// table entry makes the whole sentence fail.
#[derive(Debug, Clone, Default)]
pub struct CipherTranslator {
    tables: BTreeMap<(LangId, LangId), Table>,
}

impl CipherTranslator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_table(mut self, from: LangId, to: LangId, table: HashMap<String, String>) -> Self {
        self.tables.insert((from, to), Table::Map(table));
        self
    }

    pub fn with_identity(mut self, from: LangId, to: LangId) -> Self {
        self.tables.insert((from, to), Table::Identity);
        self
    }

    pub fn directions(&self) -> Vec<(LangId, LangId)> {
        self.tables.keys().cloned().collect()
    }
}

impl ExternalTranslator for CipherTranslator {
    fn supports(&self, from: &LangId, to: &LangId) -> bool {
        self.tables.contains_key(&(from.clone(), to.clone()))
    }

    fn translate(&self, sentence: &[String], from: &LangId, to: &LangId) -> Result<Vec<String>> {
        let table = self
            .tables
            .get(&(from.clone(), to.clone()))
            .ok_or_else(|| Error::Translator(format!("no table for {from} -> {to}")))?;
        match table {
            Table::Identity => Ok(sentence.to_vec()),
            Table::Map(map) => sentence
                .iter()
                .map(|w| {
                    map.get(w)
                        .cloned()
                        .ok_or_else(|| Error::Translator(format!("no entry for {w:?} ({from} -> {to})")))
                })
                .collect(),
        }
    }
}

/// Runs an external program once per batch: `program args.. FROM TO`, one
/// sentence per stdin line, one translation per stdout line. An empty output
/// line marks a failed sentence.
#[derive(Debug, Clone)]
pub struct CommandTranslator {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Directions the program handles; empty means any.
    pub directions: Vec<(LangId, LangId)>,
}

impl CommandTranslator {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        CommandTranslator {
            program: program.into(),
            args: Vec::new(),
            directions: Vec::new(),
        }
    }

    fn run(&self, sentences: &[Vec<String>], from: &LangId, to: &LangId) -> Result<Vec<String>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(from.code())
            .arg(to.code())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        let input: String = sentences.iter().map(|s| s.join(" ") + "\n").collect();
        let mut stdin = child.stdin.take().expect("piped stdin");
        // Write from a separate thread so a chatty child cannot deadlock us.
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let output = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        writer
            .join()
            .expect("stdin writer")
            .map_err(|e| Error::io(&self.program, e))?;
        if !output.status.success() {
            return Err(Error::Translator(format!(
                "{} exited with {}",
                self.program.display(),
                output.status
            )));
        }
        let text = String::from_utf8(output.stdout)
            .map_err(|_| Error::Translator("translator output is not UTF-8".into()))?;
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        if lines.len() != sentences.len() {
            return Err(Error::Translator(format!(
                "{} returned {} lines for {} sentences",
                self.program.display(),
                lines.len(),
                sentences.len()
            )));
        }
        Ok(lines)
    }
}

impl ExternalTranslator for CommandTranslator {
    fn supports(&self, from: &LangId, to: &LangId) -> bool {
        self.directions.is_empty() || self.directions.iter().any(|(f, t)| f == from && t == to)
    }

    fn translate(&self, sentence: &[String], from: &LangId, to: &LangId) -> Result<Vec<String>> {
        self.translate_batch(&[sentence.to_vec()], from, to)
            .pop()
            .expect("one result per sentence")
    }

    fn translate_batch(&self, sentences: &[Vec<String>], from: &LangId, to: &LangId) -> Vec<Result<Vec<String>>> {
        match self.run(sentences, from, to) {
            Ok(lines) => lines
                .into_iter()
                .map(|l| {
                    let toks = crate::corpus::tokenize(&l);
                    if toks.is_empty() {
                        Err(Error::Translator("empty translation".into()))
                    } else {
                        Ok(toks)
                    }
                })
                .collect(),
            Err(e) => {
                let msg = e.to_string();
                sentences
                    .iter()
                    .map(|_| Err(Error::Translator(msg.clone())))
                    .collect()
            }
        }
    }
}
