use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueCase, MemoryRepository, Tokenizer, Tokens};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    id: String,
    user: String,
    context: Vec<String>,
    knowledge: Vec<String>,
    response: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryRecord {
    user: String,
    memory: Vec<String>,
}

/// Planted latent assignment of one synthetic case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub id: String,
    pub zp: usize,
    pub zk: usize,
}

fn join(tokens: &Tokens) -> String {
    tokens.join(" ")
}

fn lines<R: Read>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    BufReader::new(reader)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn read_corpus<R: Read>(reader: R, tokenizer: &Tokenizer) -> Result<Vec<DialogueCase>> {
    let mut cases = Vec::new();
    for (line_no, line) in lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = parse_line(line_no, &line)?;
        let case = DialogueCase {
            id: rec.id,
            user_key: rec.user,
            context: rec.context.iter().map(|u| tokenizer.tokenize(u)).collect(),
            knowledge: rec.knowledge.iter().map(|k| tokenizer.tokenize(k)).collect(),
            response: tokenizer.tokenize(&rec.response),
        };
        case.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        cases.push(case);
    }
    if cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(cases)
}

/// Load a corpus JSONL file, one case per line, in file order.
pub fn load_corpus(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<DialogueCase>> {
    read_corpus(File::open(path)?, tokenizer)
}

/// Write cases in canonical form: tokens re-joined by single spaces, fixed key order.
pub fn write_corpus<W: Write>(cases: &[DialogueCase], mut out: W) -> Result<()> {
    for c in cases {
        let rec = CaseRecord {
            id: c.id.clone(),
            user: c.user_key.clone(),
            context: c.context.iter().map(join).collect(),
            knowledge: c.knowledge.iter().map(join).collect(),
            response: join(&c.response),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a memory JSONL file. Repeated users accumulate fragments in file order.
pub fn read_memory<R: Read>(reader: R, tokenizer: &Tokenizer) -> Result<MemoryRepository> {
    let mut repo = MemoryRepository::default();
    for (line_no, line) in lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MemoryRecord = parse_line(line_no, &line)?;
        let entry = repo.entries.entry(rec.user).or_default();
        entry.extend(rec.memory.iter().map(|m| tokenizer.tokenize(m)));
    }
    Ok(repo)
}

pub fn load_memory(path: &Path, tokenizer: &Tokenizer) -> Result<MemoryRepository> {
    read_memory(File::open(path)?, tokenizer)
}

pub fn write_memory<W: Write>(repo: &MemoryRepository, mut out: W) -> Result<()> {
    for (user, fragments) in &repo.entries {
        let rec = MemoryRecord {
            user: user.clone(),
            memory: fragments.iter().map(join).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (line_no, line) in lines(File::open(path)?) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line_no, &line)?);
    }
    Ok(out)
}

pub fn write_truth<W: Write>(truth: &[GroundTruth], mut out: W) -> Result<()> {
    for t in truth {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
