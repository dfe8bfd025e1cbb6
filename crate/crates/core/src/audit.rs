//! Append-only, hash-chained log of every memory mutation.
//!
//! Each record carries the SHA-256 digest of its payload, the previous
//! record's hash, and its own hash over a length-prefixed encoding of
//! `(seq, op, payload_digest, prev_hash)`. The first record links to an
//! all-zero sentinel. Payloads hold ids and digests only, never memory text.
//!
//! On disk the log is one JSON record per line. Verification re-parses every
//! line and requires it to re-serialize byte-for-byte, so any mutation of a
//! line is attributed to that line's index.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::{length_prefixed, sha256};

pub const AUDIT_FORMAT_VERSION: u32 = 1;

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(sha256(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest(out))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOp {
    Write,
    Block,
    Prune,
    Delete,
    Rebuild,
    Compact,
    Archive,
    Train,
}

impl AuditOp {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditOp::Write => "write",
            AuditOp::Block => "block",
            AuditOp::Prune => "prune",
            AuditOp::Delete => "delete",
            AuditOp::Rebuild => "rebuild",
            AuditOp::Compact => "compact",
            AuditOp::Archive => "archive",
            AuditOp::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub v: u32,
    pub seq: u64,
    pub op: AuditOp,
    pub payload: Value,
    pub payload_digest: Digest,
    pub prev_hash: Digest,
    pub record_hash: Digest,
}

impl AuditRecord {
    fn new(seq: u64, op: AuditOp, payload: Value, prev_hash: Digest) -> Self {
        let payload_digest = payload_digest(&payload);
        let record_hash = chain_hash(seq, op, &payload_digest, &prev_hash);
        AuditRecord { v: AUDIT_FORMAT_VERSION, seq, op, payload, payload_digest, prev_hash, record_hash }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit records always serialize")
    }
}

/// serde_json's default map is ordered, so this encoding is canonical.
pub fn payload_digest(payload: &Value) -> Digest {
    Digest::of(&serde_json::to_vec(payload).expect("json values always serialize"))
}

pub fn chain_hash(seq: u64, op: AuditOp, payload_digest: &Digest, prev_hash: &Digest) -> Digest {
    let seq = seq.to_be_bytes();
    Digest::of(&length_prefixed([
        seq.as_slice(),
        op.as_str().as_bytes(),
        payload_digest.0.as_slice(),
        prev_hash.0.as_slice(),
    ]))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verification {
    Ok { records: usize },
    Tampered { first_bad_index: usize },
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok { .. })
    }
}

#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<File>,
}

impl Clone for AuditLog {
    /// Clones are detached from the backing file.
    fn clone(&self) -> Self {
        AuditLog { records: self.records.clone(), sink: None }
    }
}

impl PartialEq for AuditLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file, loading and verifying existing records.
    /// New records are appended to the file as they are created.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let records = parse_verified(&bytes)?;
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { records, sink: Some(sink) })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn head(&self) -> Digest {
        self.records.last().map_or(Digest::ZERO, |r| r.record_hash)
    }

    /// Sequence number the next record will carry.
    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    /// Appends a record. When file-backed, the line is written before the
    /// in-memory chain is extended, so a failed write leaves the log as it was.
    pub fn append(&mut self, op: AuditOp, payload: Value) -> Result<&AuditRecord> {
        let record = AuditRecord::new(self.next_seq(), op, payload, self.head());
        if let Some(sink) = self.sink.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn verify(&self) -> Verification {
        verify_bytes(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend_from_slice(r.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(AuditLog { records: parse_verified(bytes)?, sink: None })
    }
}

fn parse_verified(bytes: &[u8]) -> Result<Vec<AuditRecord>> {
    let mut records = Vec::new();
    let mut prev = Digest::ZERO;
    for (i, line) in lines(bytes).enumerate() {
        let record = check_line(i, line, &prev).ok_or_else(|| Error::Malformed {
            what: "audit log",
            line: i + 1,
            reason: "record fails hash-chain verification".into(),
        })?;
        prev = record.record_hash;
        records.push(record);
    }
    Ok(records)
}

/// Splits on `\n`. A non-empty tail without a terminating newline is yielded
/// as a final line so that it fails verification rather than vanishing.
fn lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let missing_newline = !bytes.is_empty() && !bytes.ends_with(b"\n");
    let mut parts: Vec<&[u8]> = if body.is_empty() && !missing_newline {
        Vec::new()
    } else {
        body.split(|&b| b == b'\n').collect()
    };
    if missing_newline {
        // mark the unterminated tail as invalid by leaving it unparseable
        if let Some(last) = parts.last_mut() {
            *last = &last[..0];
        }
    }
    parts.into_iter()
}

fn check_line(index: usize, line: &[u8], prev: &Digest) -> Option<AuditRecord> {
    let record: AuditRecord = serde_json::from_slice(line).ok()?;
    let canonical = record.to_line();
    let valid = canonical.as_bytes() == line
        && record.v == AUDIT_FORMAT_VERSION
        && record.seq == index as u64
        && record.payload_digest == payload_digest(&record.payload)
        && record.prev_hash == *prev
        && record.record_hash == chain_hash(record.seq, record.op, &record.payload_digest, &record.prev_hash);
    valid.then_some(record)
}

/// Verifies a serialized log, reporting the index of the first record that
/// does not hold.
pub fn verify_bytes(bytes: &[u8]) -> Verification {
    let mut prev = Digest::ZERO;
    let mut count = 0;
    for (i, line) in lines(bytes).enumerate() {
        match check_line(i, line, &prev) {
            Some(r) => prev = r.record_hash,
            None => return Verification::Tampered { first_bad_index: i },
        }
        count += 1;
    }
    Verification::Ok { records: count }
}

pub fn verify_file(path: &Path) -> Result<Verification> {
    Ok(verify_bytes(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn log_of(n: usize) -> AuditLog {
        let mut log = AuditLog::new();
        for i in 0..n {
            log.append(AuditOp::Block, json!({ "ids": [i] })).unwrap();
        }
        log
    }

    #[test]
    fn genesis_and_links() {
        let log = log_of(2);
        assert_eq!(log.records()[0].prev_hash, Digest::ZERO);
        assert_eq!(log.records()[1].prev_hash, log.records()[0].record_hash);
        assert_eq!(log.head(), log.records()[1].record_hash);
    }

    #[test]
    fn empty_and_clean_logs_verify() {
        assert_eq!(AuditLog::new().verify(), Verification::Ok { records: 0 });
        assert_eq!(log_of(100).verify(), Verification::Ok { records: 100 });
    }

    #[test]
    fn tampered_payload_is_located() {
        let log = log_of(100);
        let text = String::from_utf8(log.to_bytes()).unwrap();
        let tampered = text.replacen("\"ids\":[42]", "\"ids\":[43]", 1);
        assert_eq!(verify_bytes(tampered.as_bytes()), Verification::Tampered { first_bad_index: 42 });
    }

    #[test]
    fn byte_flip_in_record_k() {
        let log = log_of(10);
        let bytes = log.to_bytes();
        let starts: Vec<usize> = std::iter::once(0)
            .chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1))
            .collect();
        let mut b = bytes.clone();
        b[starts[6] + 3] ^= 0x20;
        assert_eq!(verify_bytes(&b), Verification::Tampered { first_bad_index: 6 });
    }

    #[test]
    fn hex_case_change_is_detected() {
        let log = log_of(3);
        let text = String::from_utf8(log.to_bytes()).unwrap();
        let line1 = text.lines().nth(1).unwrap();
        let pos = line1.find("\"record_hash\":\"").unwrap() + 15;
        let idx = line1[pos..].find(|c: char| c.is_ascii_lowercase()).unwrap() + pos;
        let mut bad = line1.to_string();
        bad.replace_range(idx..idx + 1, &line1[idx..idx + 1].to_uppercase());
        let tampered = text.replacen(line1, &bad, 1);
        assert_eq!(verify_bytes(tampered.as_bytes()), Verification::Tampered { first_bad_index: 1 });
    }

    #[test]
    fn truncated_tail_is_flagged() {
        let bytes = log_of(3).to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert_eq!(verify_bytes(cut), Verification::Tampered { first_bad_index: 2 });
        assert_eq!(verify_bytes(&bytes[..0]), Verification::Ok { records: 0 });
    }

    #[test]
    fn file_backed_log_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let mut log = AuditLog::open(&path).unwrap();
            log.append(AuditOp::Write, json!({ "id": 0 })).unwrap();
            log.append(AuditOp::Block, json!({ "ids": [0] })).unwrap();
        }
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert!(verify_file(&path).unwrap().is_ok());
        assert_eq!(std::fs::read(&path).unwrap(), log.to_bytes());
    }
}
