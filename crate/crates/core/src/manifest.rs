//! Round manifests as JSON lines: a header, one line per sample, a summary,
//! and a trailer carrying the record count and the SHA-256 of every byte
//! before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::guidance::GuidanceConfig;
use crate::metrics::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub round: usize,
    pub stage: String,
    pub corpus_digest: String,
    pub config_digest: String,
    pub checkpoint_id: String,
    pub embedder_tag: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub guidance: GuidanceConfig,
    pub raw: BTreeMap<String, f64>,
    pub passed: bool,
    /// Present for candidates that reached ranking.
    pub normalized: Option<BTreeMap<String, f64>>,
    pub total: Option<f64>,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub stage: Stage,
    pub provenance: String,
    pub instruction: String,
    pub seed: u64,
    pub candidates: Vec<CandidateRecord>,
    /// Index into `candidates`; `None` when nothing survived or the sample
    /// failed.
    pub selected: Option<usize>,
    /// Artifact name → path relative to the round directory.
    pub artifacts: BTreeMap<String, String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub samples: usize,
    pub candidates: usize,
    pub survivors: usize,
    pub selected: usize,
    pub errors: usize,
    pub mean_selected_total: Option<f64>,
    pub median_candidate_total: Option<f64>,
}

impl Summary {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let mut s = Summary {
            samples: records.len(),
            ..Default::default()
        };
        let mut sel_totals = Vec::new();
        let mut totals = Vec::new();
        for r in records {
            s.candidates += r.candidates.len();
            s.survivors += r.candidates.iter().filter(|c| c.passed).count();
            s.errors += r.error.is_some() as usize;
            totals.extend(r.candidates.iter().filter_map(|c| c.total));
            if let Some(i) = r.selected {
                s.selected += 1;
                sel_totals.extend(r.candidates[i].total);
            }
        }
        if !sel_totals.is_empty() {
            s.mean_selected_total = Some(sel_totals.iter().sum::<f64>() / sel_totals.len() as f64);
        }
        s.median_candidate_total = median(&mut totals);
        s
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub summary: Summary,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header(ManifestHeader),
    Record(SampleRecord),
    Summary(Summary),
    Trailer { records: usize, sha256: String },
}

impl RoundManifest {
    pub fn new(header: ManifestHeader, records: Vec<SampleRecord>) -> Self {
        let summary = Summary::from_records(&records);
        Self {
            header,
            records,
            summary,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ManifestWriter::new(self.header.clone())?;
        for r in &self.records {
            w.append(r.clone())?;
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::corrupt("manifest", d);
        let text = std::str::from_utf8(buf).map_err(|_| bad("invalid utf-8".into()))?;
        if !text.ends_with('\n') {
            return Err(bad("truncated: missing final newline".into()));
        }
        let body = &text[..text.len() - 1];
        let split = body.rfind('\n').map(|i| i + 1).unwrap_or(0);
        let (before, last) = body.split_at(split);
        let Ok(Line::Trailer { records, sha256 }) = serde_json::from_str::<Line>(last) else {
            return Err(bad("missing trailer".into()));
        };
        let found = sha256_hex(before.as_bytes());
        if found != sha256 {
            return Err(bad(format!("digest mismatch: trailer {sha256}, content {found}")));
        }
        let mut lines = before.lines();
        let header = match lines.next().map(serde_json::from_str::<Line>) {
            Some(Ok(Line::Header(h))) => h,
            _ => return Err(bad("missing header".into())),
        };
        let mut recs = Vec::new();
        let mut summary = None;
        for (k, l) in lines.enumerate() {
            match serde_json::from_str::<Line>(l).map_err(|e| bad(format!("line {}: {e}", k + 2)))? {
                Line::Record(r) if summary.is_none() => recs.push(r),
                Line::Summary(s) if summary.is_none() => summary = Some(s),
                _ => return Err(bad(format!("unexpected line {}", k + 2))),
            }
        }
        let summary = summary.ok_or_else(|| bad("missing summary".into()))?;
        if recs.len() != records {
            return Err(bad(format!("trailer counts {records} records, found {}", recs.len())));
        }
        Ok(Self {
            header,
            records: recs,
            summary,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn selected(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.selected.is_some())
    }
}

/// Single appender: records are written in arrival order and the summary is
/// derived from exactly what was appended.
pub struct ManifestWriter {
    buf: Vec<u8>,
    records: Vec<SampleRecord>,
}

impl ManifestWriter {
    pub fn new(header: ManifestHeader) -> Result<Self> {
        let mut w = Self {
            buf: Vec::new(),
            records: Vec::new(),
        };
        w.line(&Line::Header(header))?;
        Ok(w)
    }

    fn line(&mut self, l: &Line) -> Result<()> {
        serde_json::to_writer(&mut self.buf, l)?;
        self.buf.push(b'\n');
        Ok(())
    }

    pub fn append(&mut self, r: SampleRecord) -> Result<()> {
        self.line(&Line::Record(r.clone()))?;
        self.records.push(r);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<u8>> {
        let summary = Summary::from_records(&self.records);
        self.line(&Line::Summary(summary))?;
        let sha256 = sha256_hex(&self.buf);
        let n = self.records.len();
        self.line(&Line::Trailer { records: n, sha256 })?;
        Ok(self.buf)
    }
}
